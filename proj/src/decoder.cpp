#include "flowdet/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "flowdet/error.hpp"

namespace flowdet {
namespace {

std::string stage_prefix(int stage) {
  return "stage" + std::to_string(stage) + ".";
}

// Focal-style prior so classification starts near p = 0.01 everywhere.
constexpr double kClsBiasInit = -4.59511985013459;

nn::NodeId stage_param(nn::Tape& tape, nn::ParamStore& store, int stage,
                       const char* name) {
  return tape.param(store, stage_prefix(stage) + name);
}

}  // namespace

void DecoderConfig::validate() const {
  if (n_stages < 1) raise(ErrorCode::ConfigError, "decoder: n_stages must be >= 1");
  if (num_classes < 1) raise(ErrorCode::ConfigError, "decoder: num_classes must be >= 1");
  if (pooled < 1) raise(ErrorCode::ConfigError, "decoder: pooled must be >= 1");
  if (hidden < 1 || ffn_dim < 1)
    raise(ErrorCode::ConfigError, "decoder: hidden dims must be >= 1");
  if (time_dim < 2 || time_dim % 2 != 0)
    raise(ErrorCode::ConfigError, "decoder: time_dim must be even and >= 2");
  if (channels < 1) raise(ErrorCode::ConfigError, "decoder: channels must be >= 1");
}

void init_decoder(nn::ParamStore& store, const DecoderConfig& cfg, Rng& rng) {
  cfg.validate();
  const int d = cfg.hidden;
  for (int s = 0; s < cfg.n_stages; ++s) {
    const std::string p = stage_prefix(s);
    nn::init_xavier(store.create(p + "in_w", {cfg.roi_dim(), d}), rng);
    store.create(p + "in_b", {d});
    // The box's own (cx,cy,w,h) joins the crop features; without it the head
    // cannot tell where its proposal sits in the image.
    nn::init_xavier(store.create(p + "pos_w", {4, d}), rng);
    store.create(p + "pos_b", {d});
    if (s > 0) {  // stage 0 has no previous-stage features to project
      nn::init_xavier(store.create(p + "ctx_w", {d, d}), rng);
      store.create(p + "ctx_b", {d});
    }
    nn::init_xavier(store.create(p + "q_w", {d, d}), rng);
    store.create(p + "q_b", {d});
    nn::init_xavier(store.create(p + "k_w", {d, d}), rng);
    store.create(p + "k_b", {d});
    nn::init_xavier(store.create(p + "v_w", {d, d}), rng);
    store.create(p + "v_b", {d});
    store.create(p + "ln1_g", {d}).values.assign(d, 1.0);
    store.create(p + "ln1_b", {d});
    nn::init_xavier(store.create(p + "ffn_w1", {d, cfg.ffn_dim}), rng);
    store.create(p + "ffn_b1", {cfg.ffn_dim});
    nn::init_xavier(store.create(p + "ffn_w2", {cfg.ffn_dim, d}), rng);
    store.create(p + "ffn_b2", {d});
    store.create(p + "ln2_g", {d}).values.assign(d, 1.0);
    store.create(p + "ln2_b", {d});
    // FiLM starts as the identity: gamma = 1, beta = 0 for every feature.
    store.create(p + "film_g_w", {cfg.time_dim, d});
    store.create(p + "film_g_b", {d}).values.assign(d, 1.0);
    store.create(p + "film_b_w", {cfg.time_dim, d});
    store.create(p + "film_b_b", {d});
    nn::init_xavier(store.create(p + "box_w1", {d, d}), rng);
    store.create(p + "box_b1", {d});
    // Zero offset at init: boxes pass through untouched on the first steps.
    store.create(p + "box_w2", {d, 4});
    store.create(p + "box_b2", {4});
    nn::init_xavier(store.create(p + "cls_w", {d, cfg.num_classes}), rng);
    store.create(p + "cls_b", {cfg.num_classes})
        .values.assign(cfg.num_classes, kClsBiasInit);
  }
}

StageOutput run_stage(nn::Tape& tape, nn::ParamStore& store,
                      const DecoderConfig& cfg, const FeatureGrid& grid,
                      const std::vector<BoundingBox>& boxes_in,
                      nn::NodeId h_prev, double t, int stage_index) {
  if (grid.channels != cfg.channels)
    raise(ErrorCode::ShapeError, "run_stage: grid channel count mismatch");
  const int n = static_cast<int>(boxes_in.size());
  if (n == 0) raise(ErrorCode::InvalidParameter, "run_stage: empty box set");
  for (const auto& b : boxes_in)
    if (!std::isfinite(b.cx) || !std::isfinite(b.cy) || !std::isfinite(b.w) ||
        !std::isfinite(b.h))
      raise(ErrorCode::InvalidBox, "run_stage: non-finite input box");

  // RoI crops, flattened to [N, C*P*P]. Boxes enter as constants here: the
  // crop is not differentiated w.r.t. box coordinates.
  nn::Tensor roi({n, cfg.roi_dim()}, std::vector<double>());
  roi.values.reserve(static_cast<std::size_t>(n) * cfg.roi_dim());
  for (const auto& b : boxes_in) {
    const RoiFeature f = roi_align(grid, b, cfg.pooled);
    roi.values.insert(roi.values.end(), f.values.begin(), f.values.end());
  }
  const int s = stage_index;
  nn::Tensor coords({n, 4}, std::vector<double>());
  coords.values.reserve(static_cast<std::size_t>(n) * 4);
  for (const auto& b : boxes_in) {
    coords.values.push_back(b.cx);
    coords.values.push_back(b.cy);
    coords.values.push_back(b.w);
    coords.values.push_back(b.h);
  }
  nn::NodeId x = nn::affine(tape, tape.leaf(std::move(roi)),
                            stage_param(tape, store, s, "in_w"),
                            stage_param(tape, store, s, "in_b"));
  x = nn::add(tape, x,
              nn::affine(tape, tape.leaf(coords),
                         stage_param(tape, store, s, "pos_w"),
                         stage_param(tape, store, s, "pos_b")));
  if (h_prev >= 0) {
    x = nn::add(tape, x,
                nn::affine(tape, h_prev, stage_param(tape, store, s, "ctx_w"),
                           stage_param(tape, store, s, "ctx_b")));
  }
  // Cross-box context: one attention block with residual + layer norm.
  const nn::NodeId q = nn::affine(tape, x, stage_param(tape, store, s, "q_w"),
                                  stage_param(tape, store, s, "q_b"));
  const nn::NodeId k = nn::affine(tape, x, stage_param(tape, store, s, "k_w"),
                                  stage_param(tape, store, s, "k_b"));
  const nn::NodeId v = nn::affine(tape, x, stage_param(tape, store, s, "v_w"),
                                  stage_param(tape, store, s, "v_b"));
  x = nn::layer_norm(tape, nn::add(tape, x, nn::attention(tape, q, k, v)),
                     stage_param(tape, store, s, "ln1_g"),
                     stage_param(tape, store, s, "ln1_b"));
  const nn::NodeId f1 = nn::relu(
      tape, nn::affine(tape, x, stage_param(tape, store, s, "ffn_w1"),
                       stage_param(tape, store, s, "ffn_b1")));
  const nn::NodeId f2 = nn::affine(tape, f1, stage_param(tape, store, s, "ffn_w2"),
                                   stage_param(tape, store, s, "ffn_b2"));
  x = nn::layer_norm(tape, nn::add(tape, x, f2),
                     stage_param(tape, store, s, "ln2_g"),
                     stage_param(tape, store, s, "ln2_b"));
  // Time conditioning: h̃ = gamma(tau) ⊙ h + beta(tau).
  nn::Tensor tau({1, cfg.time_dim}, nn::sinusoidal_embed(t, cfg.time_dim));
  const nn::NodeId tau_node = tape.leaf(std::move(tau));
  const nn::NodeId gamma =
      nn::affine(tape, tau_node, stage_param(tape, store, s, "film_g_w"),
                 stage_param(tape, store, s, "film_g_b"));
  const nn::NodeId beta =
      nn::affine(tape, tau_node, stage_param(tape, store, s, "film_b_w"),
                 stage_param(tape, store, s, "film_b_b"));
  const nn::NodeId h = nn::film_modulate(tape, x, gamma, beta);

  // Heads: R-CNN deltas against the incoming boxes, then clip; class logits.
  const nn::NodeId b1 = nn::relu(
      tape, nn::affine(tape, h, stage_param(tape, store, s, "box_w1"),
                       stage_param(tape, store, s, "box_b1")));
  const nn::NodeId delta = nn::affine(tape, b1, stage_param(tape, store, s, "box_w2"),
                                      stage_param(tape, store, s, "box_b2"));
  const nn::NodeId boxes_node =
      nn::clip_unit_boxes(tape, nn::apply_box_deltas(tape, delta, coords));
  const nn::NodeId logits_node =
      nn::affine(tape, h, stage_param(tape, store, s, "cls_w"),
                 stage_param(tape, store, s, "cls_b"));

  StageOutput out;
  out.boxes_node = boxes_node;
  out.logits_node = logits_node;
  out.features_node = h;
  out.class_logits = tape.value(logits_node);
  const auto& bv = tape.value(boxes_node).values;
  out.boxes.resize(n);
  for (int i = 0; i < n; ++i)
    out.boxes[i] = {bv[i * 4 + 0], bv[i * 4 + 1], bv[i * 4 + 2], bv[i * 4 + 3]};
  return out;
}

HeadResult run_head(nn::Tape& tape, nn::ParamStore& store,
                    const DecoderConfig& cfg, const FeatureGrid& grid,
                    const std::vector<BoundingBox>& boxes_t, double t) {
  cfg.validate();
  HeadResult result;
  nn::NodeId h_prev = -1;
  std::vector<BoundingBox> boxes = boxes_t;
  for (int s = 0; s < cfg.n_stages; ++s) {
    StageOutput stage = run_stage(tape, store, cfg, grid, boxes, h_prev, t, s);
    boxes = stage.boxes;  // detached: next stage sees plain values
    h_prev = stage.features_node;
    result.stages.push_back(std::move(stage));
  }
  return result;
}

std::vector<std::array<double, 4>> recover_velocity(
    const std::vector<BoundingBox>& x1_hat, const std::vector<BoundingBox>& xt,
    double t, double eps) {
  if (x1_hat.size() != xt.size())
    raise(ErrorCode::SizeMismatch, "recover_velocity: length mismatch");
  if (!(eps > 0.0))
    raise(ErrorCode::InvalidParameter, "recover_velocity: eps must be > 0");
  const double denom = std::max(1.0 - t, eps);
  std::vector<std::array<double, 4>> u(x1_hat.size());
  for (size_t i = 0; i < x1_hat.size(); ++i) {
    u[i] = {(x1_hat[i].cx - xt[i].cx) / denom, (x1_hat[i].cy - xt[i].cy) / denom,
            (x1_hat[i].w - xt[i].w) / denom, (x1_hat[i].h - xt[i].h) / denom};
  }
  return u;
}

}  // namespace flowdet
