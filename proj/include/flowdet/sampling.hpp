#pragma once

#include <functional>
#include <string>
#include <vector>

#include "flowdet/box_geometry.hpp"
#include "flowdet/decoder.hpp"
#include "flowdet/priors.hpp"
#include "flowdet/rng.hpp"
#include "flowdet/training.hpp"

namespace flowdet {

enum class SolverKind { Euler, Heun, Rk4, Dopri5, DdimBaseline };

const char* solver_kind_name(SolverKind kind);
SolverKind solver_kind_from_name(const std::string& name);

struct SamplerConfig {
  int n_eval = 32;
  int steps = 1;  // S on the linear schedule
  SolverKind solver = SolverKind::Euler;
  double renewal_threshold = 0.5;
  double nms_iou = 0.6;
  bool ensemble = true;  // takes effect for S >= 2
  double dopri_atol = 1e-3;
  int dopri_max_steps = 32;
  // Diffusion-baseline schedule (DdimBaseline solver only).
  int ddpm_timesteps = 1000;
  double ddpm_scale = 2.0;

  void validate() const;
};

struct DiffusionSchedule {
  int timesteps = 0;
  std::vector<double> alpha_bar;  // index t in [0, T); decreasing
};

// Cosine alpha-bar schedule (offset 0.008), alpha_bar[0] ~ 1, last ~ 0.
DiffusionSchedule make_cosine_schedule(int timesteps);

// --- generic steppers over flat state vectors ---

std::vector<double> euler_step(const std::vector<double>& x,
                               const std::vector<double>& u, double dt);

using FieldEval =
    std::function<std::vector<double>(const std::vector<double>&, double)>;

std::vector<double> heun_step(const FieldEval& field,
                              const std::vector<double>& x, double t, double dt);
std::vector<double> rk4_step(const FieldEval& field,
                             const std::vector<double>& x, double t, double dt);

struct Dopri5Result {
  std::vector<double> state;
  int steps_accepted = 0;
  int steps_rejected = 0;
  int nfe = 0;
  bool truncated = false;  // hit max_steps before reaching t1
};

// Dormand-Prince 5(4) with PI step-size control. Stages are evaluated fresh
// each step (no FSAL reuse), 7 field evaluations per attempted step.
Dopri5Result dopri5_integrate(const FieldEval& field, std::vector<double> x0,
                              double t0, double t1, double atol, int max_steps);

// Replaces boxes whose max sigmoid class probability is below threshold with
// fresh prior samples; order and count preserved.
std::vector<BoundingBox> box_renewal(const std::vector<BoundingBox>& boxes,
                                     const nn::Tensor& logits,
                                     const PriorSpec& prior, double threshold,
                                     Rng& rng,
                                     const FeatureGrid* context = nullptr,
                                     const nn::ParamStore* head = nullptr);

struct SampleResult {
  std::vector<Detection> detections;
  int nfe = 0;
  std::vector<int> per_step_counts;
  bool truncated = false;
};

// Full inference for one scene: prior sample at t=0, S solver steps on the
// linear schedule (per-step detections from each step's first head
// evaluation, renewal between steps), then cross-step ensemble NMS (or
// final-step NMS when ensembling is off). DdimBaseline runs the DDIM
// sub-schedule instead; Dopri5 integrates adaptively and reads detections
// from one final head evaluation.
SampleResult sample_detections(const FeatureGrid& grid, nn::ParamStore& params,
                               const DecoderConfig& dcfg, const PriorSpec& prior,
                               const SamplerConfig& cfg, Rng& rng);

// The diffusion-baseline sampler on its own (DdimBaseline path of
// sample_detections): x_{t-1} = a_{t-1} x̂ + (s_{t-1}/s_t)(x_t - a_t x̂).
SampleResult ddim_sample(const FeatureGrid& grid, nn::ParamStore& params,
                         const DecoderConfig& dcfg, const PriorSpec& prior,
                         const SamplerConfig& cfg, Rng& rng);

}  // namespace flowdet
