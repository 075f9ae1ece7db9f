#pragma once

#include <array>
#include <optional>
#include <vector>

#include "flowdet/box_geometry.hpp"
#include "flowdet/nnet.hpp"
#include "flowdet/rng.hpp"
#include "flowdet/scene.hpp"

namespace flowdet {

// eps floor in velocity recovery; keeps the (1 - t) quotient finite at t = 1.
inline constexpr double kVelocityEps = 1e-3;

struct DecoderConfig {
  int n_stages = 2;
  int pooled = 4;       // RoI lattice P
  int hidden = 64;      // object feature width D
  int num_classes = 3;  // K
  int time_dim = 32;    // sinusoidal embedding size (even)
  int ffn_dim = 128;
  int channels = 3;  // feature grid channels

  void validate() const;
  int roi_dim() const { return channels * pooled * pooled; }
};

// Plain-value outputs of one stage plus the tape handles needed for the loss.
struct StageOutput {
  std::vector<BoundingBox> boxes;  // clipped boxes after the offset
  nn::Tensor class_logits;         // [N,K]
  nn::NodeId boxes_node = -1;      // [N,4]
  nn::NodeId logits_node = -1;     // [N,K]
  nn::NodeId features_node = -1;   // [N,D]
};

struct HeadResult {
  std::vector<StageOutput> stages;
  const StageOutput& final_stage() const { return stages.back(); }
  // Endpoint prediction x̂1 = final-stage boxes.
  const std::vector<BoundingBox>& x1_hat() const { return stages.back().boxes; }
};

// Creates every decoder parameter (stage{i}.*). The box head's final layer is
// zero-initialized so stage offsets start at zero; the class bias starts at
// the focal prior log(0.01/0.99).
void init_decoder(nn::ParamStore& store, const DecoderConfig& cfg, Rng& rng);

// One head stage: RoI crop + box-coordinate embedding -> projected features
// (+ previous-stage context) -> self-attention + FFN -> FiLM by the time
// embedding -> R-CNN box deltas and class logits. h_prev < 0 means
// "no context".
StageOutput run_stage(nn::Tape& tape, nn::ParamStore& store,
                      const DecoderConfig& cfg, const FeatureGrid& grid,
                      const std::vector<BoundingBox>& boxes_in,
                      nn::NodeId h_prev, double t, int stage_index);

// Chains n_stages stages. Boxes are detached between stages (gradients reach
// each stage's offset through its own supervision only); features flow
// through. The head is a pure function of (grid, boxes_t, t).
HeadResult run_head(nn::Tape& tape, nn::ParamStore& store,
                    const DecoderConfig& cfg, const FeatureGrid& grid,
                    const std::vector<BoundingBox>& boxes_t, double t);

// û = (x̂1 - x_t) / max(1 - t, eps), per box and coordinate.
std::vector<std::array<double, 4>> recover_velocity(
    const std::vector<BoundingBox>& x1_hat, const std::vector<BoundingBox>& xt,
    double t, double eps = kVelocityEps);

}  // namespace flowdet
