#include "flowdet/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "flowdet/error.hpp"
#include "flowdet/mathutil.hpp"

namespace flowdet {
namespace {

using nlohmann::json;

constexpr std::uint64_t kTrainStreamSalt = 0x7e41;

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

// Focal terms for one logit. Returns (value, d/dz) for the positive (y=1)
// or negative (y=0) case. Stable log-sigmoid forms throughout.
std::pair<double, double> focal_term(double z, bool positive, double alpha,
                                     double gamma) {
  const double p = sigmoid(z);
  const double log_p = -softplus(-z);
  const double log_1mp = -softplus(z);
  if (positive) {
    const double value = -alpha * std::pow(1.0 - p, gamma) * log_p;
    const double grad =
        alpha * std::pow(1.0 - p, gamma) * (gamma * p * log_p - (1.0 - p));
    return {value, grad};
  }
  const double value = -(1.0 - alpha) * std::pow(p, gamma) * log_1mp;
  const double grad =
      (1.0 - alpha) * std::pow(p, gamma) * (p - gamma * (1.0 - p) * log_1mp);
  return {value, grad};
}

// giou(pred, target) plus its gradient w.r.t. the pred's (cx,cy,w,h).
// Assumes pred.w, pred.h >= 0 (boxes arrive clipped).
double giou_with_grad(const BoundingBox& pred, const Corners& tgt,
                      std::array<double, 4>& dparam) {
  const double x0 = pred.cx - pred.w / 2.0, x1 = pred.cx + pred.w / 2.0;
  const double y0 = pred.cy - pred.h / 2.0, y1 = pred.cy + pred.h / 2.0;
  const double area_a = (x1 - x0) * (y1 - y0);
  const double area_b = tgt.area();
  const double ix0 = std::max(x0, tgt.x0), ix1 = std::min(x1, tgt.x1);
  const double iy0 = std::max(y0, tgt.y0), iy1 = std::min(y1, tgt.y1);
  const double iw = std::max(0.0, ix1 - ix0), ih = std::max(0.0, iy1 - iy0);
  const double inter = iw * ih;
  const double uni = area_a + area_b - inter;
  const double cx0 = std::min(x0, tgt.x0), cx1 = std::max(x1, tgt.x1);
  const double cy0 = std::min(y0, tgt.y0), cy1 = std::max(y1, tgt.y1);
  const double cw = cx1 - cx0, ch = cy1 - cy0;
  const double cov = cw * ch;
  if (!(uni > 0.0) || !(cov > 0.0)) {
    dparam = {0.0, 0.0, 0.0, 0.0};
    return 0.0;
  }
  const double g = inter / uni - (cov - uni) / cov;
  // g as a function of (A, I, C) with U = A + B - I.
  const double dg_dA = -inter / (uni * uni) + 1.0 / cov;
  const double dg_dI = 1.0 / uni + inter / (uni * uni) - 1.0 / cov;
  const double dg_dC = -uni / (cov * cov);
  // Corner partials.
  const double h_a = y1 - y0, w_a = x1 - x0;
  double dx0 = dg_dA * (-h_a), dx1 = dg_dA * h_a;
  double dy0 = dg_dA * (-w_a), dy1 = dg_dA * w_a;
  if (iw > 0.0 && ih > 0.0) {
    if (x0 > tgt.x0) dx0 += dg_dI * (-ih);
    if (x1 < tgt.x1) dx1 += dg_dI * ih;
    if (y0 > tgt.y0) dy0 += dg_dI * (-iw);
    if (y1 < tgt.y1) dy1 += dg_dI * iw;
  }
  if (x0 < tgt.x0) dx0 += dg_dC * (-ch);
  if (x1 > tgt.x1) dx1 += dg_dC * ch;
  if (y0 < tgt.y0) dy0 += dg_dC * (-cw);
  if (y1 > tgt.y1) dy1 += dg_dC * cw;
  dparam[0] = dx0 + dx1;                  // d/dcx
  dparam[1] = dy0 + dy1;                  // d/dcy
  dparam[2] = 0.5 * (dx1 - dx0);          // d/dw
  dparam[3] = 0.5 * (dy1 - dy0);          // d/dh
  return g;
}

json prior_to_json(const PriorSpec& p) {
  json j;
  j["kind"] = prior_kind_name(p.kind);
  j["mu"] = p.mu;
  j["sigma"] = p.sigma;
  j["dependent_hidden"] = p.dependent_hidden;
  json buckets = json::array();
  for (const auto& b : p.buckets) {
    buckets.push_back({{"weight", b.weight}, {"mu", b.mu}, {"sigma", b.sigma}});
  }
  j["buckets"] = buckets;
  return j;
}

PriorSpec prior_from_json(const json& j) {
  PriorSpec p;
  p.kind = prior_kind_from_name(j.at("kind").get<std::string>());
  p.mu = j.at("mu").get<BoxStats>();
  p.sigma = j.at("sigma").get<BoxStats>();
  p.dependent_hidden = j.at("dependent_hidden").get<int>();
  for (const auto& b : j.at("buckets")) {
    PriorBucket bucket;
    bucket.weight = b.at("weight").get<double>();
    bucket.mu = b.at("mu").get<BoxStats>();
    bucket.sigma = b.at("sigma").get<BoxStats>();
    p.buckets.push_back(bucket);
  }
  return p;
}

}  // namespace

void LossWeights::validate() const {
  if (lambda_cls < 0.0 || lambda_l1 < 0.0 || lambda_giou < 0.0)
    raise(ErrorCode::ConfigError, "loss weights must be >= 0");
  if (top_k < 1) raise(ErrorCode::ConfigError, "top_k must be >= 1");
  if (!(focal_alpha > 0.0 && focal_alpha < 1.0) || focal_gamma < 0.0)
    raise(ErrorCode::ConfigError, "bad focal constants");
}

double focal_loss(const std::vector<double>& logits, int target_class,
                  double alpha, double gamma) {
  const int k = static_cast<int>(logits.size());
  if (target_class != kBackgroundClass && (target_class < 0 || target_class >= k))
    raise(ErrorCode::InvalidParameter, "focal_loss: target class out of range");
  double total = 0.0;
  for (int c = 0; c < k; ++c) {
    if (!std::isfinite(logits[c]))
      raise(ErrorCode::InvalidParameter, "focal_loss: non-finite logit");
    total += focal_term(logits[c], c == target_class, alpha, gamma).first;
  }
  return total;
}

nn::NodeId focal_loss_node(nn::Tape& tape, nn::NodeId logits,
                           const std::vector<std::vector<char>>& y,
                           double alpha, double gamma,
                           const std::vector<char>* row_mask) {
  const nn::Tensor& lv = tape.value(logits);
  const int n = lv.rows(), k = lv.cols();
  if (static_cast<int>(y.size()) != n)
    raise(ErrorCode::ShapeError, "focal_loss_node: target rows mismatch");
  for (const auto& row : y)
    if (static_cast<int>(row.size()) != k)
      raise(ErrorCode::ShapeError, "focal_loss_node: target cols mismatch");
  if (row_mask && static_cast<int>(row_mask->size()) != n)
    raise(ErrorCode::ShapeError, "focal_loss_node: row mask size mismatch");
  double total = 0.0;
  std::vector<double> dz(static_cast<std::size_t>(n) * k, 0.0);
  for (int i = 0; i < n; ++i) {
    if (row_mask && !(*row_mask)[i]) continue;
    for (int c = 0; c < k; ++c) {
      const auto [value, grad] = focal_term(
          lv.values[static_cast<std::size_t>(i) * k + c], y[i][c] != 0, alpha, gamma);
      total += value;
      dz[static_cast<std::size_t>(i) * k + c] = grad;
    }
  }
  if (!std::isfinite(total))
    raise(ErrorCode::NumericalDivergence, "focal_loss_node: non-finite loss");
  return tape.emplace(
      nn::Tensor({1}, {total}),
      [logits, dz = std::move(dz)](const std::vector<double>& gy, nn::Tape& t) {
        std::vector<double>& gx = t.grad(logits);
        for (std::size_t i = 0; i < dz.size(); ++i) gx[i] += gy[0] * dz[i];
      });
}

nn::NodeId l1_pairs_node(nn::Tape& tape, nn::NodeId boxes,
                         const std::vector<std::pair<int, BoundingBox>>& pairs) {
  const nn::Tensor& bv = tape.value(boxes);
  if (bv.cols() != 4) raise(ErrorCode::ShapeError, "l1_pairs_node: boxes must be [N,4]");
  const int n = bv.rows();
  double total = 0.0;
  std::vector<double> dz(static_cast<std::size_t>(n) * 4, 0.0);
  for (const auto& [row, tgt] : pairs) {
    if (row < 0 || row >= n)
      raise(ErrorCode::ShapeError, "l1_pairs_node: row out of range");
    const double* p = bv.values.data() + static_cast<std::size_t>(row) * 4;
    const double target[4] = {tgt.cx, tgt.cy, tgt.w, tgt.h};
    for (int c = 0; c < 4; ++c) {
      const double d = p[c] - target[c];
      total += std::abs(d);
      dz[static_cast<std::size_t>(row) * 4 + c] += d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
    }
  }
  return tape.emplace(
      nn::Tensor({1}, {total}),
      [boxes, dz = std::move(dz)](const std::vector<double>& gy, nn::Tape& t) {
        std::vector<double>& gx = t.grad(boxes);
        for (std::size_t i = 0; i < dz.size(); ++i) gx[i] += gy[0] * dz[i];
      });
}

nn::NodeId giou_pairs_node(nn::Tape& tape, nn::NodeId boxes,
                           const std::vector<std::pair<int, BoundingBox>>& pairs) {
  const nn::Tensor& bv = tape.value(boxes);
  if (bv.cols() != 4) raise(ErrorCode::ShapeError, "giou_pairs_node: boxes must be [N,4]");
  const int n = bv.rows();
  double total = 0.0;
  std::vector<double> dz(static_cast<std::size_t>(n) * 4, 0.0);
  for (const auto& [row, tgt] : pairs) {
    if (row < 0 || row >= n)
      raise(ErrorCode::ShapeError, "giou_pairs_node: row out of range");
    const double* p = bv.values.data() + static_cast<std::size_t>(row) * 4;
    const BoundingBox pred{p[0], p[1], p[2], p[3]};
    std::array<double, 4> dparam{};
    total += 1.0 - giou_with_grad(pred, to_corners(tgt), dparam);
    // loss term is (1 - g), so the gradient flips sign.
    for (int c = 0; c < 4; ++c)
      dz[static_cast<std::size_t>(row) * 4 + c] -= dparam[c];
  }
  if (!std::isfinite(total))
    raise(ErrorCode::NumericalDivergence, "giou_pairs_node: non-finite loss");
  return tape.emplace(
      nn::Tensor({1}, {total}),
      [boxes, dz = std::move(dz)](const std::vector<double>& gy, nn::Tape& t) {
        std::vector<double>& gx = t.grad(boxes);
        for (std::size_t i = 0; i < dz.size(); ++i) gx[i] += gy[0] * dz[i];
      });
}

std::vector<std::vector<double>> match_cost_matrix(
    const StageOutput& preds, const std::vector<BoundingBox>& gt_boxes,
    const std::vector<int>& gt_classes, const LossWeights& weights) {
  if (gt_boxes.size() != gt_classes.size())
    raise(ErrorCode::SizeMismatch, "match_cost_matrix: gt boxes/classes mismatch");
  if (gt_boxes.empty())
    raise(ErrorCode::InvalidParameter, "match_cost_matrix: needs >= 1 gt");
  const int n = static_cast<int>(preds.boxes.size());
  const int k = preds.class_logits.cols();
  const int m = static_cast<int>(gt_boxes.size());
  std::vector<Corners> gt_corners(m);
  for (int j = 0; j < m; ++j) {
    if (gt_classes[j] < 0 || gt_classes[j] >= k)
      raise(ErrorCode::InvalidParameter, "match_cost_matrix: gt class out of range");
    gt_corners[j] = to_corners(gt_boxes[j]);
  }
  std::vector<std::vector<double>> cost(n, std::vector<double>(m, 0.0));
  for (int i = 0; i < n; ++i) {
    const double* logit_row =
        preds.class_logits.values.data() + static_cast<std::size_t>(i) * k;
    const Corners pc = to_corners(preds.boxes[i]);
    for (int j = 0; j < m; ++j) {
      const double z = logit_row[gt_classes[j]];
      const double c_cls =
          focal_term(z, true, weights.focal_alpha, weights.focal_gamma).first -
          focal_term(z, false, weights.focal_alpha, weights.focal_gamma).first;
      const double c_l1 = std::abs(preds.boxes[i].cx - gt_boxes[j].cx) +
                          std::abs(preds.boxes[i].cy - gt_boxes[j].cy) +
                          std::abs(preds.boxes[i].w - gt_boxes[j].w) +
                          std::abs(preds.boxes[i].h - gt_boxes[j].h);
      const double c_giou = 1.0 - giou(pc, gt_corners[j]);
      cost[i][j] = weights.lambda_cls * c_cls + weights.lambda_l1 * c_l1 +
                   weights.lambda_giou * c_giou;
    }
  }
  return cost;
}

AssignmentResult topk_assign(const std::vector<std::vector<double>>& cost, int k) {
  if (k < 1) raise(ErrorCode::InvalidParameter, "topk_assign: k must be >= 1");
  const int n = static_cast<int>(cost.size());
  const int m = n > 0 ? static_cast<int>(cost[0].size()) : 0;
  for (const auto& row : cost)
    if (static_cast<int>(row.size()) != m)
      raise(ErrorCode::InvalidCostMatrix, "topk_assign: ragged cost matrix");
  AssignmentResult result;
  result.per_gt.resize(m);
  std::vector<char> selected(n, 0);
  for (int j = 0; j < m; ++j) {
    std::vector<int> rows(n);
    std::iota(rows.begin(), rows.end(), 0);
    const int take = std::min(k, n);
    std::partial_sort(rows.begin(), rows.begin() + take, rows.end(),
                      [&](int a, int b) {
                        if (cost[a][j] != cost[b][j]) return cost[a][j] < cost[b][j];
                        return a < b;
                      });
    rows.resize(take);
    for (int r : rows) selected[r] = 1;
    result.per_gt[j] = std::move(rows);
  }
  for (int i = 0; i < n; ++i)
    if (!selected[i]) result.unselected.push_back(i);
  return result;
}

nn::NodeId stage_loss_given(nn::Tape& tape, const StageOutput& stage,
                            const std::vector<BoundingBox>& gt_boxes,
                            const std::vector<int>& gt_classes,
                            const AssignmentResult& assignment,
                            const LossWeights& weights, bool ignore_unselected,
                            LossComponents* components) {
  const int n = static_cast<int>(stage.boxes.size());
  const int k = stage.class_logits.cols();
  std::vector<std::vector<char>> y(n, std::vector<char>(k, 0));
  std::vector<char> mask(n, 1);
  std::vector<std::pair<int, BoundingBox>> pairs;
  int n_pos = 0;
  for (std::size_t j = 0; j < assignment.per_gt.size(); ++j) {
    for (int row : assignment.per_gt[j]) {
      y[row][gt_classes[j]] = 1;
      pairs.emplace_back(row, gt_boxes[j]);
      ++n_pos;
    }
  }
  if (ignore_unselected) {
    for (int row : assignment.unselected) mask[row] = 0;
  }
  const double norm = 1.0 / std::max(1, n_pos);
  const nn::NodeId cls = focal_loss_node(tape, stage.logits_node, y,
                                         weights.focal_alpha, weights.focal_gamma,
                                         ignore_unselected ? &mask : nullptr);
  std::vector<std::pair<nn::NodeId, double>> terms;
  terms.emplace_back(cls, weights.lambda_cls * norm);
  nn::NodeId l1 = -1, gi = -1;
  if (!pairs.empty()) {
    l1 = l1_pairs_node(tape, stage.boxes_node, pairs);
    gi = giou_pairs_node(tape, stage.boxes_node, pairs);
    terms.emplace_back(l1, weights.lambda_l1 * norm);
    terms.emplace_back(gi, weights.lambda_giou * norm);
  }
  const nn::NodeId total = nn::weighted_sum(tape, terms);
  if (components) {
    components->cls += weights.lambda_cls * norm * tape.value(cls).values[0];
    if (l1 >= 0) components->l1 += weights.lambda_l1 * norm * tape.value(l1).values[0];
    if (gi >= 0)
      components->giou += weights.lambda_giou * norm * tape.value(gi).values[0];
    components->n_pos += n_pos;
  }
  return total;
}

SetLossResult set_loss(nn::Tape& tape, const std::vector<StageOutput>& stages,
                       const std::vector<BoundingBox>& gt_boxes,
                       const std::vector<int>& gt_classes,
                       const LossWeights& weights, bool ignore_unselected) {
  weights.validate();
  if (stages.empty())
    raise(ErrorCode::InvalidParameter, "set_loss: needs at least one stage");
  if (gt_boxes.size() != gt_classes.size())
    raise(ErrorCode::SizeMismatch, "set_loss: gt boxes/classes mismatch");
  SetLossResult result;
  std::vector<std::pair<nn::NodeId, double>> stage_terms;
  for (const StageOutput& stage : stages) {
    AssignmentResult assignment;
    if (!gt_boxes.empty()) {
      assignment = topk_assign(match_cost_matrix(stage, gt_boxes, gt_classes, weights),
                               weights.top_k);
    } else {
      assignment.unselected.resize(stage.boxes.size());
      std::iota(assignment.unselected.begin(), assignment.unselected.end(), 0);
    }
    stage_terms.emplace_back(
        stage_loss_given(tape, stage, gt_boxes, gt_classes, assignment, weights,
                         ignore_unselected, &result.components),
        1.0);
  }
  result.total = nn::weighted_sum(tape, stage_terms);
  result.value = tape.value(result.total).values[0];
  return result;
}

void TrainConfig::validate() const {
  decoder.validate();
  weights.validate();
  if (n_train < 1) raise(ErrorCode::ConfigError, "n_train must be >= 1");
  if (batch_size < 1) raise(ErrorCode::ConfigError, "batch_size must be >= 1");
  if (total_steps < 1) raise(ErrorCode::ConfigError, "total_steps must be >= 1");
  if (warmup_steps < 0) raise(ErrorCode::ConfigError, "warmup_steps must be >= 0");
  if (!(base_lr > 0.0)) raise(ErrorCode::ConfigError, "base_lr must be > 0");
  if (weight_decay < 0.0) raise(ErrorCode::ConfigError, "weight_decay must be >= 0");
  if (objective != "cfm" && objective != "ddpm")
    raise(ErrorCode::ConfigError, "objective must be cfm or ddpm");
  if (ddpm_timesteps < 1) raise(ErrorCode::ConfigError, "ddpm timesteps must be >= 1");
  if (!(ddpm_scale > 0.0)) raise(ErrorCode::ConfigError, "ddpm scale must be > 0");
  if (prior_buckets < 1) raise(ErrorCode::ConfigError, "prior_buckets must be >= 1");
  if (lambda_prior < 0.0) raise(ErrorCode::ConfigError, "lambda_prior must be >= 0");
}

double lr_at_step(const TrainConfig& cfg, std::int64_t step) {
  double lr = cfg.base_lr;
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps) {
    lr *= static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
  }
  if (step >= (2 * cfg.total_steps) / 3) lr *= 0.1;
  return lr;
}

DdpmCoeffs ddpm_coeffs_at(int t_index, int timesteps) {
  if (t_index >= timesteps)
    raise(ErrorCode::InvalidParameter, "ddpm_coeffs_at: index out of range");
  if (t_index < 0) return {1.0, 0.0};
  // Cosine alpha-bar with offset s = 0.008; index t covers (t+1)/T of the
  // schedule so index -1 is exactly clean.
  const double s = 0.008;
  auto f = [&](double u) {
    const double c = std::cos((u + s) / (1.0 + s) * (3.14159265358979323846 / 2.0));
    return c * c;
  };
  const double abar =
      f(static_cast<double>(t_index + 1) / timesteps) / f(0.0);
  DdpmCoeffs out;
  out.a = std::sqrt(std::max(0.0, abar));
  out.s = std::sqrt(std::max(0.0, 1.0 - abar));
  return out;
}

std::vector<BoundingBox> ddpm_corrupt(const std::vector<BoundingBox>& clean,
                                      double a, double s, double scale,
                                      Rng& rng) {
  std::vector<BoundingBox> out(clean.size());
  for (std::size_t i = 0; i < clean.size(); ++i) {
    const double coords[4] = {clean[i].cx, clean[i].cy, clean[i].w, clean[i].h};
    double z[4];
    for (int c = 0; c < 4; ++c) {
      const double z0 = (2.0 * coords[c] - 1.0) * scale;
      z[c] = std::clamp(a * z0 + s * rng.normal() * scale, -scale, scale);
    }
    out[i] = {(z[0] / scale + 1.0) / 2.0, (z[1] / scale + 1.0) / 2.0,
              (z[2] / scale + 1.0) / 2.0, (z[3] / scale + 1.0) / 2.0};
  }
  return out;
}

StepMetrics train_step(const std::vector<const Scene*>& batch,
                       nn::ParamStore& params, const PriorSpec& prior,
                       const TrainConfig& cfg, std::int64_t step) {
  cfg.validate();
  if (batch.empty()) raise(ErrorCode::InvalidParameter, "train_step: empty batch");
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  StepMetrics metrics;
  metrics.lr = lr_at_step(cfg, step);
  nn::Tape tape;
  std::vector<std::pair<nn::NodeId, double>> image_losses;
  // Batch-global gt statistics: the Dependent-prior target for items with
  // fewer than two boxes of their own.
  std::vector<BoundingBox> batch_boxes;
  if (prior.kind == PriorKind::Dependent && cfg.lambda_prior > 0.0)
    for (const Scene* scene : batch)
      batch_boxes.insert(batch_boxes.end(), scene->gt_boxes.begin(),
                         scene->gt_boxes.end());
  try {
    for (std::size_t bi = 0; bi < batch.size(); ++bi) {
      const Scene& scene = *batch[bi];
      Rng rng = Rng::child(cfg.seed, hash_combine(kTrainStreamSalt, step), bi);
      const nn::ParamStore* head =
          prior.kind == PriorKind::Dependent ? &params : nullptr;
      PaddedTargets padded =
          pad_ground_truth(scene.gt_boxes, scene.gt_classes, cfg.n_train, prior,
                           rng, &scene.raster, head);
      std::vector<BoundingBox> xt;
      double t_model = 0.0;
      if (cfg.objective == "cfm") {
        std::vector<BoundingBox> x0 =
            sample_prior(prior, cfg.n_train, rng, &scene.raster, head);
        x0 = pair_sources(x0, padded.boxes, cfg.strategy, rng);
        const double t = rng.u01();
        CoupledBatch cb = build_interpolants_at(x0, padded.boxes, t);
        xt = std::move(cb.xt);
        t_model = t;
      } else {
        const int tau = static_cast<int>(rng.uniform_int(cfg.ddpm_timesteps));
        const DdpmCoeffs co = ddpm_coeffs_at(tau, cfg.ddpm_timesteps);
        xt = ddpm_corrupt(padded.boxes, co.a, co.s, cfg.ddpm_scale, rng);
        // Same time orientation as the flow path: 0 is pure noise, 1 clean.
        t_model = 1.0 - static_cast<double>(tau + 1) / cfg.ddpm_timesteps;
      }
      const HeadResult head_out =
          run_head(tape, params, cfg.decoder, scene.raster, xt, t_model);
      const SetLossResult img_loss =
          set_loss(tape, head_out.stages, scene.gt_boxes, scene.gt_classes,
                   cfg.weights, cfg.ignore_unselected);
      metrics.cls += img_loss.components.cls * inv_b;
      metrics.l1 += img_loss.components.l1 * inv_b;
      metrics.giou += img_loss.components.giou * inv_b;
      std::vector<std::pair<nn::NodeId, double>> parts{{img_loss.total, 1.0}};
      if (prior.kind == PriorKind::Dependent && cfg.lambda_prior > 0.0 &&
          !scene.gt_boxes.empty()) {
        const nn::NodeId stats8 = prior_head_forward(
            tape, params, global_average_pool(scene.raster));
        PriorStats target;
        if (scene.gt_boxes.size() >= 2) {
          auto [mu, sigma] = fit_derived_stats(scene.gt_boxes);
          target.mu_hat = mu;
          target.sigma_hat = sigma;
        } else if (batch_boxes.size() >= 2) {
          auto [mu, sigma] = fit_derived_stats(batch_boxes);
          target.mu_hat = mu;
          target.sigma_hat = sigma;
        } else {  // single box in the whole batch: degenerate spread
          target.mu_hat = {scene.gt_boxes[0].cx, scene.gt_boxes[0].cy,
                           scene.gt_boxes[0].w, scene.gt_boxes[0].h};
          target.sigma_hat = {kSigmaMin, kSigmaMin, kSigmaMin, kSigmaMin};
        }
        const nn::NodeId mu_err = nn::squared_error_sum(
            tape, nn::slice_cols(tape, stats8, 0, 4),
            nn::Tensor({1, 4}, {target.mu_hat.begin(), target.mu_hat.end()}));
        const nn::NodeId sig_err = nn::squared_error_sum(
            tape, nn::slice_cols(tape, stats8, 4, 8),
            nn::Tensor({1, 4},
                       {target.sigma_hat.begin(), target.sigma_hat.end()}));
        const nn::NodeId ploss =
            nn::weighted_sum(tape, {{mu_err, 1.0}, {sig_err, 1.0}});
        parts.emplace_back(ploss, cfg.lambda_prior);
        metrics.prior += cfg.lambda_prior * tape.value(ploss).values[0] * inv_b;
      }
      image_losses.emplace_back(nn::weighted_sum(tape, parts), inv_b);
    }
    const nn::NodeId total = nn::weighted_sum(tape, image_losses);
    metrics.total = tape.value(total).values[0];
    if (!std::isfinite(metrics.total))
      raise(ErrorCode::NumericalDivergence, "train_step: non-finite loss");
    tape.backward(total);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::NumericalDivergence) {
      raise(ErrorCode::NumericalDivergence,
            std::string(e.what()) + " (seed " + std::to_string(cfg.seed) +
                ", step " + std::to_string(step) + ")");
    }
    throw;
  }
  double sq_norm = 0.0;
  for (const auto& [name, p] : params.entries()) {
    (void)name;
    if (!p.has_grad) continue;
    for (double g : p.grad) sq_norm += g * g;
  }
  metrics.grad_norm = std::sqrt(sq_norm);
  if (cfg.grad_clip > 0.0 && metrics.grad_norm > cfg.grad_clip) {
    const double scale = cfg.grad_clip / metrics.grad_norm;
    for (auto& [name, p] : params.entries()) {
      (void)name;
      for (double& g : p.grad) g *= scale;
    }
  }
  nn::AdamConfig adam;
  adam.lr = metrics.lr;
  adam.weight_decay = cfg.weight_decay;
  params.adam_step(adam);
  return metrics;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  json j;
  j["kind"] = "flowdet-checkpoint";
  j["version"] = ckpt.version;
  j["config"] = ckpt.config;
  j["config_hash"] = ckpt.config_hash.empty() ? config_hash_hex(ckpt.config)
                                              : ckpt.config_hash;
  j["objective"] = ckpt.objective;
  j["prior"] = prior_to_json(ckpt.prior);
  j["step_count"] = ckpt.params.step_count();
  json params = json::object();
  for (const auto& [name, p] : ckpt.params.entries()) {
    params[name] = {{"shape", p.value.shape},
                    {"values", p.value.values},
                    {"m1", p.moment1},
                    {"m2", p.moment2}};
  }
  j["params"] = params;
  std::ofstream out(path, std::ios::binary);
  if (!out) raise(ErrorCode::IoError, "cannot open checkpoint for writing: " + path);
  out << j.dump() << "\n";
  if (!out) raise(ErrorCode::IoError, "short write to checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(ErrorCode::IoError, "cannot open checkpoint: " + path);
  std::stringstream buffer;
  buffer << in.rdbuf();
  json j = json::parse(buffer.str(), nullptr, false);
  if (j.is_discarded())
    raise(ErrorCode::FormatError, "checkpoint is not valid JSON: " + path);
  try {
    if (j.at("kind").get<std::string>() != "flowdet-checkpoint")
      raise(ErrorCode::VersionError, "not a checkpoint file: " + path);
    Checkpoint ckpt;
    ckpt.version = j.at("version").get<int>();
    if (ckpt.version != 1)
      raise(ErrorCode::VersionError,
            "unsupported checkpoint version " + std::to_string(ckpt.version));
    ckpt.config = j.at("config").get<std::map<std::string, std::string>>();
    ckpt.config_hash = j.at("config_hash").get<std::string>();
    if (ckpt.config_hash != config_hash_hex(ckpt.config))
      raise(ErrorCode::VersionError,
            "checkpoint config hash mismatch (file edited or corrupted)");
    ckpt.objective = j.at("objective").get<std::string>();
    ckpt.prior = prior_from_json(j.at("prior"));
    for (const auto& [name, pj] : j.at("params").items()) {
      nn::Tensor& t =
          ckpt.params.create(name, pj.at("shape").get<std::vector<int>>());
      t.values = pj.at("values").get<std::vector<double>>();
      auto& entry = ckpt.params.at(name);
      entry.moment1 = pj.at("m1").get<std::vector<double>>();
      entry.moment2 = pj.at("m2").get<std::vector<double>>();
      if (t.values.size() != t.numel() || entry.moment1.size() != t.numel() ||
          entry.moment2.size() != t.numel())
        raise(ErrorCode::FormatError, "checkpoint parameter " + name +
                                          " has inconsistent sizes");
      entry.grad.assign(t.numel(), 0.0);
    }
    ckpt.params.set_step_count(j.at("step_count").get<std::int64_t>());
    return ckpt;
  } catch (const json::exception& e) {
    raise(ErrorCode::FormatError,
          std::string("malformed checkpoint: ") + e.what());
  }
}

}  // namespace flowdet
