#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "flowdet/config.hpp"
#include "flowdet/evaluation.hpp"
#include "flowdet/training.hpp"

namespace flowdet {

// Stream salts for the run-level rng tree (train_step has its own).
inline constexpr std::uint64_t kDataTrainSalt = 0x64a1;
inline constexpr std::uint64_t kDataValSalt = 0x64a2;
inline constexpr std::uint64_t kInitSalt = 0xd00d;
inline constexpr std::uint64_t kBatchSalt = 0xba7c;
inline constexpr std::uint64_t kEvalSalt = 0xe7a1;

// Deterministic per-scene seed for dataset streams.
std::uint64_t scene_stream_seed(std::uint64_t seed, std::uint64_t salt,
                                std::int64_t index);

// Generates `count` scenes from one split stream; scene_id = index.
std::vector<Scene> make_scenes(const SceneConfig& scfg, std::uint64_t seed,
                               std::uint64_t salt, int count);

struct GenDataResult {
  std::string train_path;
  std::string val_path;
  int n_train = 0;
  int n_val = 0;
  std::string config_hash;
};

// Writes train.jsonl / val.jsonl under out_dir.
GenDataResult run_gen_data(const RunConfig& cfg, const std::string& out_dir);

// Decoder weights plus the prior they were trained against.
struct TrainedModel {
  nn::ParamStore params;
  PriorSpec prior;
};

// Fresh model: prior statistics fitted from the training scenes (Derived
// variants), decoder and optional statistics head initialized from
// child(seed, kInitSalt).
TrainedModel init_model(const TrainConfig& tc,
                        const std::vector<Scene>& train_scenes);

// Runs optimizer steps [params.step_count(), tc.total_steps). Batches are
// drawn with replacement from child(seed, kBatchSalt, step).
struct FitHooks {
  std::int64_t log_every = 0;  // 0 silences
  std::ostream* log = nullptr;
  std::int64_t eval_every = 0;  // 0 disables the callback
  std::function<void(std::int64_t step)> on_eval;
};
StepMetrics fit_model(const std::vector<Scene>& scenes, const TrainConfig& tc,
                      nn::ParamStore& params, const PriorSpec& prior,
                      const FitHooks& hooks);

struct EvalRunResult {
  EvalResult eval;
  double mean_nfe = 0.0;
  double ms_per_scene = 0.0;
  int n_scenes = 0;
  int n_truncated = 0;
};

// Samples + scores up to max_scenes (0 = all) of a dataset. Per-scene
// randomness comes from child(seed, kEvalSalt, scene_id).
EvalRunResult evaluate_model(const std::vector<Scene>& scenes,
                             nn::ParamStore& params, const DecoderConfig& dcfg,
                             const PriorSpec& prior, const SamplerConfig& scfg,
                             std::uint64_t seed, int max_scenes = 0);

struct TrainRunResult {
  std::string checkpoint_path;
  std::int64_t steps_run = 0;
  StepMetrics last;
  EvalRunResult last_eval;
  bool has_eval = false;
};

// Full training command: reads data_dir/{train,val}.jsonl, trains (resuming
// from resume_path when given), periodically evaluates on the val split, and
// writes out_dir/checkpoint.json.
TrainRunResult run_train(const RunConfig& cfg, const std::string& data_dir,
                         const std::string& out_dir,
                         const std::string& resume_path = "",
                         std::ostream* log = nullptr);

// Evaluates a checkpoint on a dataset file; model/scene shape comes from the
// checkpoint's config echo, sampler settings from the live config. Writes a
// JSON report when out_json is non-empty.
EvalRunResult run_eval(const RunConfig& cfg, const std::string& ckpt_path,
                       const std::string& data_path,
                       const std::string& out_json = "",
                       std::ostream* log = nullptr);

struct SweepRow {
  int n_eval = 0;
  int steps = 0;
  std::string solver;
  EvalRunResult run;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  std::string csv_path;
  std::string json_path;
};

// Grid over sweep.n_eval x sweep.steps x sweep.solvers; cells are pure and
// run on `threads` workers. Writes sweep.csv / sweep.json under out_dir.
SweepResult run_sweep(const RunConfig& cfg, const std::string& ckpt_path,
                      const std::string& data_path, const std::string& out_dir,
                      int threads = 1, std::ostream* log = nullptr);

struct AblateRow {
  std::string axis;     // "prior" | "match" | "solver"
  std::string variant;  // e.g. "derived", "hung_g", "rk4"
  int steps = 0;
  std::string solver;
  EvalRunResult run;
};

struct AblateResult {
  std::vector<AblateRow> rows;
  std::vector<std::string> csv_paths;
  std::string json_path;
};

// Desk-scale ablation: trains one model per prior (4), per matcher (4), plus
// a diffusion baseline, then tabulates AP/NFE/runtime per axis. Models with
// identical (prior, matcher, objective) are trained once and shared.
AblateResult run_ablate(const RunConfig& cfg, const std::string& out_dir,
                        std::ostream* log = nullptr);

}  // namespace flowdet
