#pragma once

#include <string>
#include <vector>

#include "flowdet/box_geometry.hpp"
#include "flowdet/priors.hpp"
#include "flowdet/rng.hpp"

namespace flowdet {

// Class target carried by padded (non-gt) entries.
inline constexpr int kBackgroundClass = -1;

enum class MatchStrategy { Rand, HungC, HungG, HungI };

const char* match_strategy_name(MatchStrategy s);
MatchStrategy match_strategy_from_name(const std::string& name);

struct PaddedTargets {
  std::vector<BoundingBox> boxes;  // [n_train]
  std::vector<int> classes;        // gt class or kBackgroundClass
  std::vector<bool> is_padding;
};

// Paired (x0, x1) sets sharing one timestep, with the linear interpolant and
// its constant velocity target.
struct CoupledBatch {
  std::vector<BoundingBox> x0;
  std::vector<BoundingBox> x1;
  double t = 0.0;
  std::vector<BoundingBox> xt;
  std::vector<std::array<double, 4>> u_target;
  std::vector<int> class_targets;
  std::vector<bool> is_padding;
};

// First N_gt entries keep the ground truth; the rest are prior samples with
// the background sentinel. N_gt > n_train is the caller's error.
PaddedTargets pad_ground_truth(const std::vector<BoundingBox>& gt_boxes,
                               const std::vector<int>& gt_classes, int n_train,
                               const PriorSpec& prior, Rng& rng,
                               const FeatureGrid* context = nullptr,
                               const nn::ParamStore* head = nullptr);

// Minimum-cost assignment of rows to columns of a square cost matrix.
// perm[i] = j assigns row i to column j. Among optimal assignments the
// lexicographically smallest permutation is returned.
std::vector<int> hungarian_solve(const std::vector<std::vector<double>>& cost);

// Pairing cost between one source box and one target box under a Hungarian
// strategy. Rand has no cost and raises InvalidStrategy.
double match_cost(const BoundingBox& a, const BoundingBox& b,
                  MatchStrategy strategy);

// Reorders x0 so that row i of the result pairs with x1[i]: a uniform random
// permutation for Rand, the Hungarian assignment over match_cost otherwise.
std::vector<BoundingBox> pair_sources(const std::vector<BoundingBox>& x0,
                                      const std::vector<BoundingBox>& x1,
                                      MatchStrategy strategy, Rng& rng);

// xt = (1-t) x0 + t x1 and u = x1 - x0 at an explicit t.
CoupledBatch build_interpolants_at(const std::vector<BoundingBox>& x0,
                                   const std::vector<BoundingBox>& x1,
                                   double t);

// Same, with one shared t drawn uniform on [0,1) for the batch item.
CoupledBatch build_interpolants(const std::vector<BoundingBox>& x0,
                                const std::vector<BoundingBox>& x1, Rng& rng);

}  // namespace flowdet
