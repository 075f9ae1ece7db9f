#include "flowdet/priors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "flowdet/error.hpp"
#include "flowdet/mathutil.hpp"

namespace flowdet {
namespace {

double box_component(const BoundingBox& b, int j) {
  switch (j) {
    case 0: return b.cx;
    case 1: return b.cy;
    case 2: return b.w;
    default: return b.h;
  }
}

// Population mean/std per component over a non-empty box list.
std::pair<BoxStats, BoxStats> population_stats(
    const std::vector<BoundingBox>& boxes) {
  const double n = static_cast<double>(boxes.size());
  BoxStats mu{}, sigma{};
  for (int j = 0; j < 4; ++j) {
    double sum = 0.0;
    for (const auto& b : boxes) sum += box_component(b, j);
    mu[j] = sum / n;
    double sq = 0.0;
    for (const auto& b : boxes) {
      const double d = box_component(b, j) - mu[j];
      sq += d * d;
    }
    sigma[j] = std::max(std::sqrt(sq / n), kSigmaMin);
  }
  return {mu, sigma};
}

BoundingBox draw_box(const BoxStats& mu, const BoxStats& sigma, Rng& rng) {
  // Guard order: sizes first on [0,1], then centers bounded so the box stays
  // inside the unit square.
  BoundingBox b;
  b.w = truncated_normal_icdf({mu[2], sigma[2], 0.0, 1.0}, rng.u01());
  b.h = truncated_normal_icdf({mu[3], sigma[3], 0.0, 1.0}, rng.u01());
  // w == 1 exactly would collapse the center interval; nudge inside.
  b.w = std::min(b.w, 1.0 - 1e-12);
  b.h = std::min(b.h, 1.0 - 1e-12);
  b.cx = truncated_normal_icdf({mu[0], sigma[0], b.w / 2.0, 1.0 - b.w / 2.0},
                               rng.u01());
  b.cy = truncated_normal_icdf({mu[1], sigma[1], b.h / 2.0, 1.0 - b.h / 2.0},
                               rng.u01());
  return b;
}

}  // namespace

double truncated_normal_icdf(const TruncatedNormal& d, double q) {
  if (!(d.sigma > 0.0) || !std::isfinite(d.sigma))
    raise(ErrorCode::InvalidParameter, "truncated_normal_icdf: sigma must be > 0");
  if (!(d.lo < d.hi) || !std::isfinite(d.lo) || !std::isfinite(d.hi))
    raise(ErrorCode::InvalidParameter, "truncated_normal_icdf: requires lo < hi");
  if (!(q >= 0.0 && q <= 1.0))
    raise(ErrorCode::InvalidParameter, "truncated_normal_icdf: q outside [0,1]");
  if (q == 0.0) return d.lo;
  if (q == 1.0) return d.hi;
  const double a = (d.lo - d.mu) / d.sigma;
  const double b = (d.hi - d.mu) / d.sigma;
  const double fa = normal_cdf(a);
  const double fb = normal_cdf(b);
  double x;
  if (fb - fa < 1e-300) {
    // Both bounds so deep in one tail that the CDF gap underflows; the
    // distribution is effectively uniform-degenerate there.
    x = d.lo + q * (d.hi - d.lo);
  } else {
    x = d.mu + d.sigma * normal_icdf(fa + q * (fb - fa));
  }
  return std::clamp(x, d.lo, d.hi);
}

const char* prior_kind_name(PriorKind kind) {
  switch (kind) {
    case PriorKind::GaussN: return "gauss";
    case PriorKind::Derived: return "derived";
    case PriorKind::DerivedSizeBucketed: return "derived_bucketed";
    case PriorKind::Dependent: return "dependent";
  }
  return "gauss";
}

PriorKind prior_kind_from_name(const std::string& name) {
  if (name == "gauss") return PriorKind::GaussN;
  if (name == "derived") return PriorKind::Derived;
  if (name == "derived_bucketed") return PriorKind::DerivedSizeBucketed;
  if (name == "dependent") return PriorKind::Dependent;
  raise(ErrorCode::InvalidParameter, "unknown prior kind: " + name);
}

std::pair<BoxStats, BoxStats> fit_derived_stats(
    const std::vector<BoundingBox>& boxes) {
  if (boxes.size() < 2)
    raise(ErrorCode::InsufficientData,
          "fit_derived_stats: need at least 2 boxes, got " +
              std::to_string(boxes.size()));
  return population_stats(boxes);
}

std::vector<PriorBucket> fit_size_buckets(const std::vector<BoundingBox>& boxes,
                                          int n_buckets) {
  if (n_buckets < 1)
    raise(ErrorCode::InvalidParameter, "fit_size_buckets: n_buckets must be >= 1");
  if (boxes.size() < 2)
    raise(ErrorCode::InsufficientData,
          "fit_size_buckets: need at least 2 boxes");
  // Sort by area, stable on the original index so ties are deterministic.
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return boxes[a].w * boxes[a].h < boxes[b].w * boxes[b].h;
  });
  const int n = static_cast<int>(boxes.size());
  std::vector<PriorBucket> out;
  for (int g = 0; g < n_buckets; ++g) {
    const int begin = g * n / n_buckets;
    const int end = (g + 1) * n / n_buckets;
    if (end <= begin) continue;  // empty quantile group: merge into neighbour
    std::vector<BoundingBox> group;
    group.reserve(end - begin);
    for (int i = begin; i < end; ++i) group.push_back(boxes[order[i]]);
    auto [mu, sigma] = population_stats(group);
    PriorBucket bucket;
    bucket.weight = static_cast<double>(end - begin) / n;
    bucket.mu = mu;
    bucket.sigma = sigma;
    out.push_back(bucket);
  }
  return out;
}

std::vector<BoundingBox> collect_gt_boxes(const std::vector<Scene>& scenes) {
  std::vector<BoundingBox> out;
  for (const auto& s : scenes)
    out.insert(out.end(), s.gt_boxes.begin(), s.gt_boxes.end());
  return out;
}

void init_prior_head(nn::ParamStore& store, int channels, int hidden, Rng& rng) {
  if (channels < 1 || hidden < 1)
    raise(ErrorCode::InvalidParameter, "init_prior_head: bad dimensions");
  nn::init_xavier(store.create("prior_head.w1", {channels, hidden}), rng);
  store.create("prior_head.b1", {hidden});
  nn::init_xavier(store.create("prior_head.w2", {hidden, 8}), rng);
  store.create("prior_head.b2", {8});
}

nn::NodeId prior_head_forward(nn::Tape& tape, nn::ParamStore& head,
                              const std::vector<double>& pooled) {
  const auto& w1 = head.at("prior_head.w1").value;
  if (w1.rows() != static_cast<int>(pooled.size()))
    raise(ErrorCode::SizeMismatch, "prior_head_forward: pooled size mismatch");
  const nn::NodeId xin =
      tape.leaf(nn::Tensor({1, static_cast<int>(pooled.size())}, pooled));
  const nn::NodeId h1 = nn::relu(
      tape, nn::affine(tape, xin, tape.param(head, "prior_head.w1"),
                       tape.param(head, "prior_head.b1")));
  const nn::NodeId h2 = nn::affine(tape, h1, tape.param(head, "prior_head.w2"),
                                   tape.param(head, "prior_head.b2"));
  return nn::sigmoid_op(tape, h2);
}

PriorStats predict_dependent_stats(const nn::ParamStore& head,
                                   const std::vector<double>& pooled) {
  const auto& w1 = head.at("prior_head.w1").value;
  const auto& b1 = head.at("prior_head.b1").value;
  const auto& w2 = head.at("prior_head.w2").value;
  const auto& b2 = head.at("prior_head.b2").value;
  if (w1.rows() != static_cast<int>(pooled.size()))
    raise(ErrorCode::SizeMismatch, "predict_dependent_stats: pooled size mismatch");
  const int hidden = w1.cols();
  std::vector<double> h1(hidden, 0.0);
  for (int j = 0; j < hidden; ++j) {
    double acc = b1.values[j];
    for (int i = 0; i < w1.rows(); ++i) acc += pooled[i] * w1.values[i * hidden + j];
    h1[j] = std::max(acc, 0.0);
  }
  PriorStats stats;
  for (int j = 0; j < 8; ++j) {
    double acc = b2.values[j];
    for (int i = 0; i < hidden; ++i) acc += h1[i] * w2.values[i * 8 + j];
    const double s = sigmoid(acc);
    if (j < 4)
      stats.mu_hat[j] = s;
    else
      stats.sigma_hat[j - 4] = std::max(s, kSigmaMin);
  }
  return stats;
}

double prior_loss(const PriorStats& stats, const std::vector<BoundingBox>& gt) {
  if (gt.empty()) return 0.0;
  BoxStats mu{}, sigma{};
  if (gt.size() == 1) {
    // A single box pins the mean; std target falls to the floor value.
    for (int j = 0; j < 4; ++j) {
      mu[j] = box_component(gt[0], j);
      sigma[j] = kSigmaMin;
    }
  } else {
    std::tie(mu, sigma) = population_stats(gt);
  }
  double loss = 0.0;
  for (int j = 0; j < 4; ++j) {
    const double dm = stats.mu_hat[j] - mu[j];
    const double ds = stats.sigma_hat[j] - sigma[j];
    loss += dm * dm + ds * ds;
  }
  return loss;
}

std::vector<BoundingBox> sample_prior(const PriorSpec& spec, int n, Rng& rng,
                                      const FeatureGrid* context,
                                      const nn::ParamStore* head) {
  if (n < 0) raise(ErrorCode::InvalidParameter, "sample_prior: n must be >= 0");
  std::vector<BoundingBox> out;
  out.reserve(n);
  switch (spec.kind) {
    case PriorKind::GaussN:
    case PriorKind::Derived: {
      for (int i = 0; i < n; ++i) out.push_back(draw_box(spec.mu, spec.sigma, rng));
      break;
    }
    case PriorKind::DerivedSizeBucketed: {
      if (spec.buckets.empty())
        raise(ErrorCode::InvalidParameter,
              "sample_prior: bucketed prior has no buckets");
      double total = 0.0;
      for (const auto& b : spec.buckets) total += b.weight;
      if (!(total > 0.0))
        raise(ErrorCode::InvalidParameter,
              "sample_prior: bucket weights must sum to > 0");
      for (int i = 0; i < n; ++i) {
        const double u = rng.u01() * total;
        double acc = 0.0;
        const PriorBucket* pick = &spec.buckets.back();
        for (const auto& b : spec.buckets) {
          acc += b.weight;
          if (u < acc) {
            pick = &b;
            break;
          }
        }
        out.push_back(draw_box(pick->mu, pick->sigma, rng));
      }
      break;
    }
    case PriorKind::Dependent: {
      if (context == nullptr || head == nullptr)
        raise(ErrorCode::MissingContext,
              "sample_prior: dependent prior needs the feature grid and head");
      const PriorStats stats =
          predict_dependent_stats(*head, global_average_pool(*context));
      for (int i = 0; i < n; ++i)
        out.push_back(draw_box(stats.mu_hat, stats.sigma_hat, rng));
      break;
    }
  }
  return out;
}

}  // namespace flowdet
