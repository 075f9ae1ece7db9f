#pragma once

#include <array>
#include <optional>
#include <vector>

#include "flowdet/box_geometry.hpp"
#include "flowdet/nnet.hpp"
#include "flowdet/rng.hpp"
#include "flowdet/scene.hpp"

namespace flowdet {

// Coordinate order everywhere: (cx, cy, w, h).
using BoxStats = std::array<double, 4>;

// Floor applied to every standard deviation; keeps degenerate datasets from
// producing zero-width priors.
inline constexpr double kSigmaMin = 1e-3;

struct TruncatedNormal {
  double mu = 0.0;
  double sigma = 1.0;
  double lo = 0.0;
  double hi = 1.0;
};

// Inverse CDF of the truncated normal. Monotone in q; q=0 and q=1 return the
// bounds exactly.
double truncated_normal_icdf(const TruncatedNormal& d, double q);

enum class PriorKind { GaussN, Derived, DerivedSizeBucketed, Dependent };

const char* prior_kind_name(PriorKind kind);
PriorKind prior_kind_from_name(const std::string& name);

struct PriorBucket {
  double weight = 1.0;
  BoxStats mu{};
  BoxStats sigma{};
};

struct PriorStats {
  BoxStats mu_hat{};
  BoxStats sigma_hat{};
};

struct PriorSpec {
  PriorKind kind = PriorKind::GaussN;
  // GaussN fixes these to the centered-unit convention; Derived fits them.
  BoxStats mu{0.5, 0.5, 0.5, 0.5};
  BoxStats sigma{0.25, 0.25, 0.25, 0.25};
  std::vector<PriorBucket> buckets;  // DerivedSizeBucketed only
  int dependent_hidden = 32;         // statistics head width (Dependent only)
};

// Componentwise population mean and std over all ground-truth boxes.
// Throws InsufficientData with fewer than 2 boxes.
std::pair<BoxStats, BoxStats> fit_derived_stats(
    const std::vector<BoundingBox>& boxes);

// Area-quantile partition into n_buckets groups; empty groups are dropped
// (merged into their neighbour), weights are count shares.
std::vector<PriorBucket> fit_size_buckets(const std::vector<BoundingBox>& boxes,
                                          int n_buckets);

std::vector<BoundingBox> collect_gt_boxes(const std::vector<Scene>& scenes);

// Creates the two-layer statistics head parameters (prior_head.*) used by the
// Dependent prior.
void init_prior_head(nn::ParamStore& store, int channels, int hidden, Rng& rng);

// Plain (tape-free) forward of the statistics head on a pooled feature
// vector: sigmoid(MLP(pooled)), sigma floored at kSigmaMin.
PriorStats predict_dependent_stats(const nn::ParamStore& head,
                                   const std::vector<double>& pooled);

// Tape version used during training; returns the [1,8] sigmoid output node
// (columns 0..3 mu_hat, 4..7 sigma_hat before flooring).
nn::NodeId prior_head_forward(nn::Tape& tape, nn::ParamStore& head,
                              const std::vector<double>& pooled);

// ||mu_hat - mu||^2 + ||sigma_hat - sigma||^2 against the population stats of
// one batch item's boxes. Returns 0 for an empty box list (flagged skip).
double prior_loss(const PriorStats& stats, const std::vector<BoundingBox>& gt);

// Draw n boxes from the prior. Every coordinate is a truncated-normal
// inverse-CDF draw; (w, h) first on [0,1], then centers bounded so corners
// stay inside the unit square. Dependent priors need the feature grid plus
// the statistics head.
std::vector<BoundingBox> sample_prior(const PriorSpec& spec, int n, Rng& rng,
                                      const FeatureGrid* context = nullptr,
                                      const nn::ParamStore* head = nullptr);

}  // namespace flowdet
