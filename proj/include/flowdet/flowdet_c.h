#ifndef FLOWDET_C_H
#define FLOWDET_C_H

/* C interface to the flowdet engine. All entry points return fd_status;
 * FD_OK is 0 and the nonzero codes double as process exit codes. On failure
 * fd_last_error() returns a thread-local description of what went wrong. */

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#ifndef FD_API
#define FD_API __attribute__((visibility("default")))
#endif

typedef enum fd_status {
  FD_OK = 0,
  FD_ERR = 1,         /* invalid argument / internal contract violation */
  FD_ERR_CONFIG = 2,  /* schema violation, bad override, unknown key */
  FD_ERR_NUMERIC = 3, /* divergence during training or sampling */
  FD_ERR_IO = 4       /* missing/corrupt files, write failures */
} fd_status;

FD_API const char* fd_version(void);

/* Message for the most recent failure on this thread ("" after success). */
FD_API const char* fd_last_error(void);

/* Opaque run configuration (flat key=value store with a fixed schema). */
typedef struct fd_config fd_config;

FD_API fd_status fd_config_create(fd_config** out); /* schema defaults */
FD_API fd_status fd_config_load(const char* path, fd_config** out);
FD_API fd_status fd_config_set(fd_config* cfg, const char* key,
                               const char* value);
FD_API fd_status fd_config_get(const fd_config* cfg, const char* key,
                               char* buf, size_t buf_len);
FD_API fd_status fd_config_apply_env(fd_config* cfg); /* FLOWDET_SEED */
FD_API fd_status fd_config_validate(const fd_config* cfg);
FD_API fd_status fd_config_hash(const fd_config* cfg, char* buf,
                                size_t buf_len);
FD_API void fd_config_free(fd_config* cfg);

typedef struct fd_gen_result {
  int32_t n_train;
  int32_t n_val;
  char config_hash[32];
} fd_gen_result;

/* Writes out_dir/train.jsonl and out_dir/val.jsonl. */
FD_API fd_status fd_gen_data(const fd_config* cfg, const char* out_dir,
                             fd_gen_result* out);

typedef struct fd_train_result {
  int64_t steps_run;
  double loss;     /* total loss at the final step */
  double val_ap50; /* last periodic eval; NaN when has_eval is 0 */
  int32_t has_eval;
} fd_train_result;

/* Trains from data_dir/{train,val}.jsonl into out_dir/checkpoint.json.
 * resume_path may be NULL; verbose != 0 logs progress to stdout. */
FD_API fd_status fd_train(const fd_config* cfg, const char* data_dir,
                          const char* out_dir, const char* resume_path,
                          int verbose, fd_train_result* out);

typedef struct fd_eval_result {
  double ap;
  double ap50;
  double ap75;
  double recall;
  double nfe;
  double ms_per_scene;
  int32_t n_scenes;
  int32_t valid;
} fd_eval_result;

/* Evaluates a checkpoint on a dataset file; out_json may be NULL. */
FD_API fd_status fd_eval(const fd_config* cfg, const char* ckpt_path,
                         const char* data_path, const char* out_json,
                         int verbose, fd_eval_result* out);

/* Grid evaluation; writes out_dir/sweep.{csv,json}. threads >= 1. */
FD_API fd_status fd_sweep(const fd_config* cfg, const char* ckpt_path,
                          const char* data_path, const char* out_dir,
                          int threads, int verbose, int32_t* out_rows);

/* Prior/matcher/solver ablation tables under out_dir. */
FD_API fd_status fd_ablate(const fd_config* cfg, const char* out_dir,
                           int verbose, int32_t* out_rows);

#ifdef __cplusplus
}
#endif

#endif /* FLOWDET_C_H */
