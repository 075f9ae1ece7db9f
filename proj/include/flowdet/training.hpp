#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "flowdet/coupling.hpp"
#include "flowdet/decoder.hpp"
#include "flowdet/nnet.hpp"
#include "flowdet/priors.hpp"
#include "flowdet/scene.hpp"

namespace flowdet {

struct LossWeights {
  double lambda_cls = 2.0;
  double lambda_l1 = 5.0;
  double lambda_giou = 2.0;
  int top_k = 4;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;

  void validate() const;
};

// Per ground truth: the top-k prediction rows (lowest cost first); plus the
// predictions selected by no ground truth.
struct AssignmentResult {
  std::vector<std::vector<int>> per_gt;
  std::vector<int> unselected;
};

// Sigmoid focal loss of one logit row against a single class (or
// kBackgroundClass for all-negative), summed over the K classes.
double focal_loss(const std::vector<double>& logits, int target_class,
                  double alpha, double gamma);

// --- tape-side loss primitives (exact backwards, used by set_loss) ---

// Sum of focal terms over every (row, class) entry of logits against a 0/1
// target matrix y [N][K]. Rows with row_mask 0 are skipped entirely (used by
// the ignore-unselected toggle); null means all rows count.
nn::NodeId focal_loss_node(nn::Tape& tape, nn::NodeId logits,
                           const std::vector<std::vector<char>>& y,
                           double alpha, double gamma,
                           const std::vector<char>* row_mask = nullptr);

// Sum over pairs of the l1 distance between boxes row `first` (cx,cy,w,h)
// and the constant target box.
nn::NodeId l1_pairs_node(nn::Tape& tape, nn::NodeId boxes,
                         const std::vector<std::pair<int, BoundingBox>>& pairs);

// Sum over pairs of (1 - giou(pred row, target)). Pred rows must carry
// non-negative w,h (true after clip_unit_boxes).
nn::NodeId giou_pairs_node(nn::Tape& tape, nn::NodeId boxes,
                           const std::vector<std::pair<int, BoundingBox>>& pairs);

// Matching cost C = lambda_cls*C_cls + lambda_l1*C_l1 + lambda_giou*(1-giou)
// per (prediction row, gt column); C_cls is the focal positive-minus-negative
// cost at the gt class.
std::vector<std::vector<double>> match_cost_matrix(
    const StageOutput& preds, const std::vector<BoundingBox>& gt_boxes,
    const std::vector<int>& gt_classes, const LossWeights& weights);

// Per gt column, the k lowest-cost prediction rows; ties break to the lower
// row index. k > N_pred assigns every prediction.
AssignmentResult topk_assign(const std::vector<std::vector<double>>& cost, int k);

struct LossComponents {
  double cls = 0.0;
  double l1 = 0.0;
  double giou = 0.0;
  int n_pos = 0;
};

// One stage's loss under a fixed assignment (kept separate so gradients can
// be checked without assignment flips). All terms are normalized by
// max(1, n_pos) and scaled by their lambda.
nn::NodeId stage_loss_given(nn::Tape& tape, const StageOutput& stage,
                            const std::vector<BoundingBox>& gt_boxes,
                            const std::vector<int>& gt_classes,
                            const AssignmentResult& assignment,
                            const LossWeights& weights, bool ignore_unselected,
                            LossComponents* components);

struct SetLossResult {
  nn::NodeId total = -1;
  double value = 0.0;
  LossComponents components;  // summed over stages, lambda-weighted
};

// Full set loss: per stage, rebuild the cost matrix and top-k assignment,
// apply stage_loss_given, sum stages. Zero ground truths degenerate to
// classification negatives only.
SetLossResult set_loss(nn::Tape& tape, const std::vector<StageOutput>& stages,
                       const std::vector<BoundingBox>& gt_boxes,
                       const std::vector<int>& gt_classes,
                       const LossWeights& weights,
                       bool ignore_unselected = false);

struct TrainConfig {
  DecoderConfig decoder;
  LossWeights weights;
  MatchStrategy strategy = MatchStrategy::HungG;
  PriorKind prior_kind = PriorKind::GaussN;
  int prior_buckets = 3;
  int n_train = 64;
  int batch_size = 4;
  std::int64_t total_steps = 5000;
  std::int64_t warmup_steps = 200;
  double base_lr = 2.5e-4;
  double weight_decay = 1e-4;
  double grad_clip = 1.0;  // <= 0 disables
  double lambda_prior = 1.0;
  bool ignore_unselected = false;
  std::uint64_t seed = 0;
  std::string objective = "cfm";  // or "ddpm"
  // Diffusion-baseline corruption parameters.
  int ddpm_timesteps = 1000;
  double ddpm_scale = 2.0;

  void validate() const;
};

// Linear warmup then one x0.1 decay at 2/3 of the schedule.
double lr_at_step(const TrainConfig& cfg, std::int64_t step);

// Cosine signal/noise pair for the diffusion baseline at integer time index.
struct DdpmCoeffs {
  double a = 1.0;  // sqrt(alpha_bar)
  double s = 0.0;  // sqrt(1 - alpha_bar)
};
DdpmCoeffs ddpm_coeffs_at(int t_index, int timesteps);

// Corrupts clean boxes per the scaled linear-Gaussian path: z0 = (2x-1)*scale,
// z_t = a z0 + s eps, clamped to [-scale, scale], mapped back to box space.
std::vector<BoundingBox> ddpm_corrupt(const std::vector<BoundingBox>& clean,
                                      double a, double s, double scale,
                                      Rng& rng);

struct StepMetrics {
  double total = 0.0;
  double cls = 0.0;
  double l1 = 0.0;
  double giou = 0.0;
  double prior = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
};

// One optimizer step over a batch of scenes. All randomness is derived from
// (cfg.seed, step, image index), so a resumed run replays the exact stream.
StepMetrics train_step(const std::vector<const Scene*>& batch,
                       nn::ParamStore& params, const PriorSpec& prior,
                       const TrainConfig& cfg, std::int64_t step);

// --- checkpointing ---

struct Checkpoint {
  int version = 1;
  std::map<std::string, std::string> config;  // flat key=value echo
  std::string config_hash;
  PriorSpec prior;
  nn::ParamStore params;  // values + moments + step count
  std::string objective = "cfm";
};

// Versioned JSON with sorted keys; save -> load -> save is byte-identical.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace flowdet
