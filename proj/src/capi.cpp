#include "flowdet/flowdet_c.h"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <iostream>
#include <limits>
#include <new>
#include <string>

#include "flowdet/config.hpp"
#include "flowdet/error.hpp"
#include "flowdet/pipeline.hpp"

struct fd_config {
  flowdet::RunConfig impl;
};

namespace {

thread_local std::string g_last_error;

fd_status map_code(flowdet::ErrorCode code) {
  using flowdet::ErrorCode;
  switch (code) {
    case ErrorCode::ConfigError:
      return FD_ERR_CONFIG;
    case ErrorCode::NumericalDivergence:
    case ErrorCode::StepSizeUnderflow:
      return FD_ERR_NUMERIC;
    case ErrorCode::IoError:
    case ErrorCode::FormatError:
    case ErrorCode::VersionError:
      return FD_ERR_IO;
    default:
      return FD_ERR;
  }
}

template <typename Fn>
fd_status guard(Fn&& fn) {
  try {
    fn();
    g_last_error.clear();
    return FD_OK;
  } catch (const flowdet::Error& e) {
    g_last_error = e.what();
    return map_code(e.code());
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return FD_ERR;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return FD_ERR;
  }
}

fd_status fail_invalid(const char* message) {
  g_last_error = message;
  return FD_ERR;
}

fd_status copy_string(const std::string& value, char* buf, size_t buf_len) {
  if (!buf || buf_len == 0) return fail_invalid("null/empty output buffer");
  if (value.size() + 1 > buf_len) return fail_invalid("output buffer too small");
  std::memcpy(buf, value.c_str(), value.size() + 1);
  g_last_error.clear();
  return FD_OK;
}

std::ostream* log_stream(int verbose) { return verbose ? &std::cout : nullptr; }

}  // namespace

extern "C" {

const char* fd_version(void) { return "flowdet 0.1.0"; }

const char* fd_last_error(void) { return g_last_error.c_str(); }

fd_status fd_config_create(fd_config** out) {
  if (!out) return fail_invalid("null output pointer");
  return guard([&]() { *out = new fd_config{flowdet::default_config()}; });
}

fd_status fd_config_load(const char* path, fd_config** out) {
  if (!out) return fail_invalid("null output pointer");
  if (!path) return fail_invalid("null path");
  return guard([&]() { *out = new fd_config{flowdet::load_config_file(path)}; });
}

fd_status fd_config_set(fd_config* cfg, const char* key, const char* value) {
  if (!cfg) return fail_invalid("null config");
  if (!key || !value) return fail_invalid("null key/value");
  return guard([&]() {
    flowdet::apply_overrides(cfg->impl,
                             {std::string(key) + "=" + std::string(value)});
  });
}

fd_status fd_config_get(const fd_config* cfg, const char* key, char* buf,
                        size_t buf_len) {
  if (!cfg) return fail_invalid("null config");
  if (!key) return fail_invalid("null key");
  auto it = cfg->impl.values.find(key);
  if (it == cfg->impl.values.end()) {
    g_last_error = std::string("unknown key '") + key + "'";
    return FD_ERR_CONFIG;
  }
  return copy_string(it->second, buf, buf_len);
}

fd_status fd_config_apply_env(fd_config* cfg) {
  if (!cfg) return fail_invalid("null config");
  return guard([&]() { flowdet::apply_env_seed(cfg->impl); });
}

fd_status fd_config_validate(const fd_config* cfg) {
  if (!cfg) return fail_invalid("null config");
  return guard([&]() { flowdet::validate_config(cfg->impl); });
}

fd_status fd_config_hash(const fd_config* cfg, char* buf, size_t buf_len) {
  if (!cfg) return fail_invalid("null config");
  return copy_string(flowdet::config_hash(cfg->impl), buf, buf_len);
}

void fd_config_free(fd_config* cfg) { delete cfg; }

fd_status fd_gen_data(const fd_config* cfg, const char* out_dir,
                      fd_gen_result* out) {
  if (!cfg) return fail_invalid("null config");
  if (!out_dir) return fail_invalid("null out_dir");
  return guard([&]() {
    flowdet::validate_config(cfg->impl);
    flowdet::GenDataResult r = flowdet::run_gen_data(cfg->impl, out_dir);
    if (out) {
      out->n_train = r.n_train;
      out->n_val = r.n_val;
      std::snprintf(out->config_hash, sizeof(out->config_hash), "%s",
                    r.config_hash.c_str());
    }
  });
}

fd_status fd_train(const fd_config* cfg, const char* data_dir,
                   const char* out_dir, const char* resume_path, int verbose,
                   fd_train_result* out) {
  if (!cfg) return fail_invalid("null config");
  if (!data_dir || !out_dir) return fail_invalid("null data_dir/out_dir");
  return guard([&]() {
    flowdet::validate_config(cfg->impl);
    flowdet::TrainRunResult r =
        flowdet::run_train(cfg->impl, data_dir, out_dir,
                           resume_path ? resume_path : "", log_stream(verbose));
    if (out) {
      out->steps_run = r.steps_run;
      out->loss = r.last.total;
      out->val_ap50 = r.has_eval ? r.last_eval.eval.ap50
                                 : std::numeric_limits<double>::quiet_NaN();
      out->has_eval = r.has_eval ? 1 : 0;
    }
  });
}

fd_status fd_eval(const fd_config* cfg, const char* ckpt_path,
                  const char* data_path, const char* out_json, int verbose,
                  fd_eval_result* out) {
  if (!cfg) return fail_invalid("null config");
  if (!ckpt_path || !data_path) return fail_invalid("null ckpt/data path");
  return guard([&]() {
    flowdet::validate_config(cfg->impl);
    flowdet::EvalRunResult r =
        flowdet::run_eval(cfg->impl, ckpt_path, data_path,
                          out_json ? out_json : "", log_stream(verbose));
    if (out) {
      out->ap = r.eval.ap;
      out->ap50 = r.eval.ap50;
      out->ap75 = r.eval.ap75;
      out->recall = r.eval.recall;
      out->nfe = r.mean_nfe;
      out->ms_per_scene = r.ms_per_scene;
      out->n_scenes = r.n_scenes;
      out->valid = r.eval.valid ? 1 : 0;
    }
  });
}

fd_status fd_sweep(const fd_config* cfg, const char* ckpt_path,
                   const char* data_path, const char* out_dir, int threads,
                   int verbose, int32_t* out_rows) {
  if (!cfg) return fail_invalid("null config");
  if (!ckpt_path || !data_path || !out_dir)
    return fail_invalid("null ckpt/data/out path");
  return guard([&]() {
    flowdet::validate_config(cfg->impl);
    flowdet::SweepResult r = flowdet::run_sweep(
        cfg->impl, ckpt_path, data_path, out_dir, threads, log_stream(verbose));
    if (out_rows) *out_rows = static_cast<int32_t>(r.rows.size());
  });
}

fd_status fd_ablate(const fd_config* cfg, const char* out_dir, int verbose,
                    int32_t* out_rows) {
  if (!cfg) return fail_invalid("null config");
  if (!out_dir) return fail_invalid("null out_dir");
  return guard([&]() {
    flowdet::validate_config(cfg->impl);
    flowdet::AblateResult r =
        flowdet::run_ablate(cfg->impl, out_dir, log_stream(verbose));
    if (out_rows) *out_rows = static_cast<int32_t>(r.rows.size());
  });
}

}  // extern "C"
