#include "flowdet/coupling.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "flowdet/error.hpp"

namespace flowdet {
namespace {

// Matching-cost weights for HungG; same values as the training loss weights.
constexpr double kMatchLambdaL1 = 5.0;
constexpr double kMatchLambdaGiou = 2.0;

// Classical O(n^3) shortest-augmenting-path Hungarian with dual potentials.
// Returns (perm, u, v) where perm[i] is the column of row i and the duals
// satisfy u[i] + v[j] <= cost[i][j] with equality on matched edges.
struct HungarianResult {
  std::vector<int> perm;
  std::vector<double> u, v;
};

HungarianResult jv_solve(const std::vector<std::vector<double>>& cost) {
  const int n = static_cast<int>(cost.size());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);  // p[j]: row matched to col j
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      int j1 = -1;
      double delta = inf;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  HungarianResult res;
  res.perm.assign(n, -1);
  for (int j = 1; j <= n; ++j) res.perm[p[j] - 1] = j - 1;
  res.u.assign(u.begin() + 1, u.end());
  res.v.assign(v.begin() + 1, v.end());
  return res;
}

// Kuhn's augmenting path over the tight-edge graph, restricted to free rows
// >= first_row and unused columns.
bool try_augment(int row, const std::vector<std::vector<int>>& tight,
                 std::vector<char>& visited, std::vector<int>& col_row,
                 const std::vector<char>& col_blocked) {
  for (int j : tight[row]) {
    if (col_blocked[j] || visited[j]) continue;
    visited[j] = 1;
    if (col_row[j] < 0 ||
        try_augment(col_row[j], tight, visited, col_row, col_blocked)) {
      col_row[j] = row;
      return true;
    }
  }
  return false;
}

bool rows_matchable(int first_row, int n,
                    const std::vector<std::vector<int>>& tight,
                    const std::vector<char>& col_blocked) {
  std::vector<int> col_row(n, -1);
  for (int i = first_row; i < n; ++i) {
    std::vector<char> visited(n, 0);
    if (!try_augment(i, tight, visited, col_row, col_blocked)) return false;
  }
  return true;
}

}  // namespace

std::vector<int> hungarian_solve(const std::vector<std::vector<double>>& cost) {
  const int n = static_cast<int>(cost.size());
  if (n == 0) return {};
  double max_abs = 0.0;
  for (const auto& row : cost) {
    if (static_cast<int>(row.size()) != n)
      raise(ErrorCode::InvalidCostMatrix, "hungarian_solve: matrix not square");
    for (double c : row) {
      if (!std::isfinite(c))
        raise(ErrorCode::InvalidCostMatrix, "hungarian_solve: non-finite cost");
      max_abs = std::max(max_abs, std::abs(c));
    }
  }
  const HungarianResult opt = jv_solve(cost);
  // Complementary slackness: every optimal assignment lives on the tight
  // edges of the optimal duals. Walk rows in order, each time committing the
  // smallest column that still leaves the remaining rows perfectly matchable,
  // which yields the lexicographically smallest optimal permutation.
  const double tol = 1e-9 * (1.0 + max_abs);
  std::vector<std::vector<int>> tight(n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (cost[i][j] - opt.u[i] - opt.v[j] <= tol) tight[i].push_back(j);
  std::vector<int> perm(n, -1);
  std::vector<char> col_blocked(n, 0);
  for (int i = 0; i < n; ++i) {
    bool placed = false;
    for (int j : tight[i]) {
      if (col_blocked[j]) continue;
      col_blocked[j] = 1;
      if (rows_matchable(i + 1, n, tight, col_blocked)) {
        perm[i] = j;
        placed = true;
        break;
      }
      col_blocked[j] = 0;
    }
    if (!placed) {
      // Tolerance pruned a needed edge; fall back to the raw JV assignment.
      return opt.perm;
    }
  }
  return perm;
}

const char* match_strategy_name(MatchStrategy s) {
  switch (s) {
    case MatchStrategy::Rand: return "rand";
    case MatchStrategy::HungC: return "hung_c";
    case MatchStrategy::HungG: return "hung_g";
    case MatchStrategy::HungI: return "hung_i";
  }
  return "rand";
}

MatchStrategy match_strategy_from_name(const std::string& name) {
  if (name == "rand") return MatchStrategy::Rand;
  if (name == "hung_c") return MatchStrategy::HungC;
  if (name == "hung_g") return MatchStrategy::HungG;
  if (name == "hung_i") return MatchStrategy::HungI;
  raise(ErrorCode::InvalidParameter, "unknown match strategy: " + name);
}

PaddedTargets pad_ground_truth(const std::vector<BoundingBox>& gt_boxes,
                               const std::vector<int>& gt_classes, int n_train,
                               const PriorSpec& prior, Rng& rng,
                               const FeatureGrid* context,
                               const nn::ParamStore* head) {
  if (gt_boxes.size() != gt_classes.size())
    raise(ErrorCode::SizeMismatch, "pad_ground_truth: boxes/classes mismatch");
  const int n_gt = static_cast<int>(gt_boxes.size());
  if (n_gt > n_train)
    raise(ErrorCode::TooManyObjects,
          "pad_ground_truth: " + std::to_string(n_gt) + " gt boxes exceed n_train " +
              std::to_string(n_train) + "; raise n_train");
  PaddedTargets out;
  out.boxes = gt_boxes;
  out.classes = gt_classes;
  out.is_padding.assign(n_gt, false);
  const std::vector<BoundingBox> pads =
      sample_prior(prior, n_train - n_gt, rng, context, head);
  for (const auto& b : pads) {
    out.boxes.push_back(b);
    out.classes.push_back(kBackgroundClass);
    out.is_padding.push_back(true);
  }
  return out;
}

double match_cost(const BoundingBox& a, const BoundingBox& b,
                  MatchStrategy strategy) {
  switch (strategy) {
    case MatchStrategy::HungC: {
      const double dx = a.cx - b.cx;
      const double dy = a.cy - b.cy;
      return std::sqrt(dx * dx + dy * dy);
    }
    case MatchStrategy::HungG: {
      const double l1 = std::abs(a.cx - b.cx) + std::abs(a.cy - b.cy) +
                        std::abs(a.w - b.w) + std::abs(a.h - b.h);
      return kMatchLambdaL1 * l1 +
             kMatchLambdaGiou * (1.0 - giou(to_corners(a), to_corners(b)));
    }
    case MatchStrategy::HungI:
      return 1.0 - interp_iou(to_corners(a), to_corners(b), kDefaultInterpIouPoints);
    case MatchStrategy::Rand:
      raise(ErrorCode::InvalidStrategy, "match_cost: Rand has no pairwise cost");
  }
  raise(ErrorCode::InvalidStrategy, "match_cost: unknown strategy");
}

std::vector<BoundingBox> pair_sources(const std::vector<BoundingBox>& x0,
                                      const std::vector<BoundingBox>& x1,
                                      MatchStrategy strategy, Rng& rng) {
  if (x0.size() != x1.size())
    raise(ErrorCode::SizeMismatch, "pair_sources: x0/x1 length mismatch");
  const int n = static_cast<int>(x0.size());
  if (n == 0) return {};
  if (strategy == MatchStrategy::Rand) {
    // Fisher-Yates on a copy; the multiset of boxes is preserved.
    std::vector<BoundingBox> out = x0;
    for (int i = n - 1; i > 0; --i) {
      const int j = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(i) + 1));
      std::swap(out[i], out[j]);
    }
    return out;
  }
  std::vector<std::vector<double>> cost(n, std::vector<double>(n, 0.0));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) cost[i][j] = match_cost(x0[i], x1[j], strategy);
  const std::vector<int> perm = hungarian_solve(cost);
  std::vector<BoundingBox> out(n);
  for (int i = 0; i < n; ++i) out[perm[i]] = x0[i];
  return out;
}

CoupledBatch build_interpolants_at(const std::vector<BoundingBox>& x0,
                                   const std::vector<BoundingBox>& x1,
                                   double t) {
  if (x0.size() != x1.size())
    raise(ErrorCode::SizeMismatch, "build_interpolants: x0/x1 length mismatch");
  if (!(t >= 0.0 && t <= 1.0))
    raise(ErrorCode::InvalidParameter, "build_interpolants: t outside [0,1]");
  CoupledBatch batch;
  batch.x0 = x0;
  batch.x1 = x1;
  batch.t = t;
  batch.xt.resize(x0.size());
  batch.u_target.resize(x0.size());
  const double s = 1.0 - t;
  for (size_t i = 0; i < x0.size(); ++i) {
    batch.xt[i].cx = s * x0[i].cx + t * x1[i].cx;
    batch.xt[i].cy = s * x0[i].cy + t * x1[i].cy;
    batch.xt[i].w = s * x0[i].w + t * x1[i].w;
    batch.xt[i].h = s * x0[i].h + t * x1[i].h;
    batch.u_target[i] = {x1[i].cx - x0[i].cx, x1[i].cy - x0[i].cy,
                         x1[i].w - x0[i].w, x1[i].h - x0[i].h};
  }
  batch.class_targets.assign(x0.size(), kBackgroundClass);
  batch.is_padding.assign(x0.size(), true);
  return batch;
}

CoupledBatch build_interpolants(const std::vector<BoundingBox>& x0,
                                const std::vector<BoundingBox>& x1, Rng& rng) {
  return build_interpolants_at(x0, x1, rng.u01());
}

}  // namespace flowdet
