#include "flowdet/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <optional>

#include "flowdet/error.hpp"
#include "flowdet/mathutil.hpp"

namespace flowdet {
namespace {

std::vector<double> boxes_to_flat(const std::vector<BoundingBox>& boxes) {
  std::vector<double> flat;
  flat.reserve(boxes.size() * 4);
  for (const auto& b : boxes) {
    flat.push_back(b.cx);
    flat.push_back(b.cy);
    flat.push_back(b.w);
    flat.push_back(b.h);
  }
  return flat;
}

std::vector<BoundingBox> flat_to_boxes(const std::vector<double>& flat) {
  std::vector<BoundingBox> boxes(flat.size() / 4);
  for (std::size_t i = 0; i < boxes.size(); ++i)
    boxes[i] = {flat[i * 4], flat[i * 4 + 1], flat[i * 4 + 2], flat[i * 4 + 3]};
  return boxes;
}

// One head evaluation's results, as plain values.
struct HeadEval {
  std::vector<BoundingBox> x1_hat;
  nn::Tensor logits;
};

// Stateful evaluator: carries the final-stage object features from one head
// evaluation into the next (the across-timestep recurrence) and counts NFE.
class HeadField {
 public:
  HeadField(const FeatureGrid& grid, nn::ParamStore& params,
            const DecoderConfig& dcfg)
      : grid_(grid), params_(params), dcfg_(dcfg) {}

  HeadEval eval(const std::vector<BoundingBox>& boxes, double t) {
    nn::Tape tape;
    const HeadResult out = run_head(tape, params_, dcfg_, grid_, boxes, t);
    ++nfe_;
    HeadEval ev;
    ev.x1_hat = out.x1_hat();
    ev.logits = out.final_stage().class_logits;
    return ev;
  }

  // Velocity field over flat state for the generic steppers.
  std::vector<double> velocity(const std::vector<double>& state, double t) {
    const std::vector<BoundingBox> boxes = flat_to_boxes(state);
    const HeadEval ev = eval(boxes, t);
    const auto u = recover_velocity(ev.x1_hat, boxes, t);
    std::vector<double> flat;
    flat.reserve(state.size());
    for (const auto& ui : u)
      flat.insert(flat.end(), ui.begin(), ui.end());
    return flat;
  }

  int nfe() const { return nfe_; }

 private:
  const FeatureGrid& grid_;
  nn::ParamStore& params_;
  const DecoderConfig& dcfg_;
  int nfe_ = 0;
};

// One detection per box: argmax sigmoid class (ties to the lower id).
std::vector<Detection> detections_from(const HeadEval& ev) {
  const int k = ev.logits.cols();
  std::vector<Detection> dets;
  dets.reserve(ev.x1_hat.size());
  for (std::size_t i = 0; i < ev.x1_hat.size(); ++i) {
    int best = 0;
    double best_z = ev.logits.values[i * k];
    for (int c = 1; c < k; ++c) {
      const double z = ev.logits.values[i * k + c];
      if (z > best_z) {
        best_z = z;
        best = c;
      }
    }
    dets.push_back({ev.x1_hat[i], best, sigmoid(best_z)});
  }
  return dets;
}

std::vector<BoundingBox> clip_all(std::vector<BoundingBox> boxes) {
  for (auto& b : boxes) b = clip_to_unit(b);
  return boxes;
}

SampleResult finish(std::vector<std::vector<Detection>> per_step, bool ensemble,
                    double nms_iou) {
  SampleResult result;
  for (const auto& dets : per_step)
    result.per_step_counts.push_back(static_cast<int>(dets.size()));
  if (ensemble && per_step.size() >= 2) {
    std::vector<Detection> pool;
    for (auto& dets : per_step)
      pool.insert(pool.end(), dets.begin(), dets.end());
    result.detections = class_wise_nms(pool, nms_iou);
  } else if (!per_step.empty()) {
    result.detections = class_wise_nms(per_step.back(), nms_iou);
  }
  return result;
}

}  // namespace

void SamplerConfig::validate() const {
  if (n_eval < 1) raise(ErrorCode::ConfigError, "sampler: n_eval must be >= 1");
  if (steps < 1) raise(ErrorCode::ConfigError, "sampler: steps must be >= 1");
  if (!(renewal_threshold >= 0.0 && renewal_threshold <= 1.0))
    raise(ErrorCode::ConfigError, "sampler: renewal_threshold outside [0,1]");
  if (!(nms_iou >= 0.0 && nms_iou <= 1.0))
    raise(ErrorCode::ConfigError, "sampler: nms_iou outside [0,1]");
  if (!(dopri_atol > 0.0))
    raise(ErrorCode::ConfigError, "sampler: dopri atol must be > 0");
  if (dopri_max_steps < 1)
    raise(ErrorCode::ConfigError, "sampler: dopri max_steps must be >= 1");
  if (ddpm_timesteps < 1)
    raise(ErrorCode::ConfigError, "sampler: ddpm timesteps must be >= 1");
  if (!(ddpm_scale > 0.0))
    raise(ErrorCode::ConfigError, "sampler: ddpm scale must be > 0");
}

const char* solver_kind_name(SolverKind kind) {
  switch (kind) {
    case SolverKind::Euler: return "euler";
    case SolverKind::Heun: return "heun";
    case SolverKind::Rk4: return "rk4";
    case SolverKind::Dopri5: return "dopri5";
    case SolverKind::DdimBaseline: return "ddim";
  }
  return "euler";
}

SolverKind solver_kind_from_name(const std::string& name) {
  if (name == "euler") return SolverKind::Euler;
  if (name == "heun") return SolverKind::Heun;
  if (name == "rk4") return SolverKind::Rk4;
  if (name == "dopri5") return SolverKind::Dopri5;
  if (name == "ddim") return SolverKind::DdimBaseline;
  raise(ErrorCode::InvalidParameter, "unknown solver: " + name);
}

DiffusionSchedule make_cosine_schedule(int timesteps) {
  if (timesteps < 1)
    raise(ErrorCode::InvalidParameter, "make_cosine_schedule: timesteps >= 1");
  DiffusionSchedule sched;
  sched.timesteps = timesteps;
  sched.alpha_bar.resize(timesteps);
  for (int t = 0; t < timesteps; ++t) {
    const DdpmCoeffs co = ddpm_coeffs_at(t, timesteps);
    sched.alpha_bar[t] = co.a * co.a;
  }
  return sched;
}

std::vector<double> euler_step(const std::vector<double>& x,
                               const std::vector<double>& u, double dt) {
  if (x.size() != u.size())
    raise(ErrorCode::SizeMismatch, "euler_step: state/velocity size mismatch");
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + u[i] * dt;
  return out;
}

namespace {

void check_field_output(const std::vector<double>& u, std::size_t n) {
  if (u.size() != n)
    raise(ErrorCode::SizeMismatch, "field produced wrong-size output");
  for (double v : u)
    if (!std::isfinite(v))
      raise(ErrorCode::NumericalDivergence, "field produced non-finite value");
}

}  // namespace

std::vector<double> heun_step(const FieldEval& field,
                              const std::vector<double>& x, double t, double dt) {
  const std::vector<double> k1 = field(x, t);
  check_field_output(k1, x.size());
  const std::vector<double> k2 = field(euler_step(x, k1, dt), t + dt);
  check_field_output(k2, x.size());
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    out[i] = x[i] + dt * 0.5 * (k1[i] + k2[i]);
  return out;
}

std::vector<double> rk4_step(const FieldEval& field,
                             const std::vector<double>& x, double t, double dt) {
  const std::vector<double> k1 = field(x, t);
  check_field_output(k1, x.size());
  const std::vector<double> k2 = field(euler_step(x, k1, dt / 2.0), t + dt / 2.0);
  check_field_output(k2, x.size());
  const std::vector<double> k3 = field(euler_step(x, k2, dt / 2.0), t + dt / 2.0);
  check_field_output(k3, x.size());
  const std::vector<double> k4 = field(euler_step(x, k3, dt), t + dt);
  check_field_output(k4, x.size());
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    out[i] = x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
  return out;
}

Dopri5Result dopri5_integrate(const FieldEval& field, std::vector<double> x0,
                              double t0, double t1, double atol, int max_steps) {
  if (!(atol > 0.0))
    raise(ErrorCode::InvalidParameter, "dopri5: atol must be > 0");
  if (max_steps < 1)
    raise(ErrorCode::InvalidParameter, "dopri5: max_steps must be >= 1");
  if (!(t1 > t0)) raise(ErrorCode::InvalidParameter, "dopri5: needs t1 > t0");
  // Dormand-Prince 5(4) tableau.
  static const double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
  static const double a21 = 1.0 / 5;
  static const double a31 = 3.0 / 40, a32 = 9.0 / 40;
  static const double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
  static const double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187,
                      a53 = 64448.0 / 6561, a54 = -212.0 / 729;
  static const double a61 = 9017.0 / 3168, a62 = -355.0 / 33,
                      a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                      a65 = -5103.0 / 18656;
  static const double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192,
                      b5 = -2187.0 / 6784, b6 = 11.0 / 84;
  static const double e1 = 5179.0 / 57600, e3 = 7571.0 / 16695, e4 = 393.0 / 640,
                      e5 = -92097.0 / 339200, e6 = 187.0 / 2100, e7 = 1.0 / 40;
  const std::size_t n = x0.size();
  Dopri5Result res;
  res.state = std::move(x0);
  double t = t0;
  double h = t1 - t0;  // try the whole interval first
  double err_prev = 1.0;
  auto stage = [&](const std::vector<double>& base,
                   const std::vector<std::pair<const std::vector<double>*, double>>&
                       contribs,
                   double hh) {
    std::vector<double> y = base;
    for (const auto& [k, w] : contribs)
      for (std::size_t i = 0; i < n; ++i) y[i] += hh * w * (*k)[i];
    return y;
  };
  int attempts = 0;
  while (t < t1 - 1e-15) {
    if (attempts >= max_steps) {
      res.truncated = true;
      return res;
    }
    ++attempts;
    h = std::min(h, t1 - t);
    if (h < 1e-14 * (t1 - t0))
      raise(ErrorCode::StepSizeUnderflow, "dopri5: step size underflow");
    const std::vector<double> k1 = field(res.state, t);
    check_field_output(k1, n);
    const std::vector<double> k2 = field(stage(res.state, {{&k1, a21}}, h), t + c2 * h);
    check_field_output(k2, n);
    const std::vector<double> k3 =
        field(stage(res.state, {{&k1, a31}, {&k2, a32}}, h), t + c3 * h);
    check_field_output(k3, n);
    const std::vector<double> k4 =
        field(stage(res.state, {{&k1, a41}, {&k2, a42}, {&k3, a43}}, h), t + c4 * h);
    check_field_output(k4, n);
    const std::vector<double> k5 = field(
        stage(res.state, {{&k1, a51}, {&k2, a52}, {&k3, a53}, {&k4, a54}}, h),
        t + c5 * h);
    check_field_output(k5, n);
    const std::vector<double> k6 = field(
        stage(res.state,
              {{&k1, a61}, {&k2, a62}, {&k3, a63}, {&k4, a64}, {&k5, a65}}, h),
        t + h);
    check_field_output(k6, n);
    std::vector<double> y5(n);
    for (std::size_t i = 0; i < n; ++i)
      y5[i] = res.state[i] +
              h * (b1 * k1[i] + b3 * k3[i] + b4 * k4[i] + b5 * k5[i] + b6 * k6[i]);
    const std::vector<double> k7 = field(y5, t + h);
    check_field_output(k7, n);
    res.nfe += 7;
    double err_sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double y4 = res.state[i] + h * (e1 * k1[i] + e3 * k3[i] + e4 * k4[i] +
                                            e5 * k5[i] + e6 * k6[i] + e7 * k7[i]);
      const double e = (y5[i] - y4) / atol;
      err_sq += e * e;
    }
    const double err = std::sqrt(err_sq / static_cast<double>(n));
    if (err <= 1.0) {
      t += h;
      res.state = std::move(y5);
      res.steps_accepted += 1;
      // PI controller (Hairer's coefficients for a 5th-order pair).
      const double fac =
          0.9 * std::pow(std::max(err, 1e-10), -0.17) * std::pow(err_prev, 0.04);
      h *= std::clamp(fac, 0.2, 5.0);
      err_prev = std::max(err, 1e-10);
    } else {
      res.steps_rejected += 1;
      h *= std::clamp(0.9 * std::pow(err, -0.2), 0.1, 1.0);
    }
  }
  return res;
}

std::vector<BoundingBox> box_renewal(const std::vector<BoundingBox>& boxes,
                                     const nn::Tensor& logits,
                                     const PriorSpec& prior, double threshold,
                                     Rng& rng, const FeatureGrid* context,
                                     const nn::ParamStore* head) {
  if (logits.rows() != static_cast<int>(boxes.size()))
    raise(ErrorCode::SizeMismatch, "box_renewal: boxes/logits misaligned");
  const int k = logits.cols();
  std::vector<int> weak;
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    double best = -1e300;
    for (int c = 0; c < k; ++c)
      best = std::max(best, logits.values[i * k + c]);
    if (sigmoid(best) < threshold) weak.push_back(static_cast<int>(i));
  }
  std::vector<BoundingBox> out = boxes;
  const std::vector<BoundingBox> fresh =
      sample_prior(prior, static_cast<int>(weak.size()), rng, context, head);
  for (std::size_t j = 0; j < weak.size(); ++j) out[weak[j]] = fresh[j];
  return out;
}

SampleResult sample_detections(const FeatureGrid& grid, nn::ParamStore& params,
                               const DecoderConfig& dcfg, const PriorSpec& prior,
                               const SamplerConfig& cfg, Rng& rng) {
  cfg.validate();
  if (cfg.solver == SolverKind::DdimBaseline)
    return ddim_sample(grid, params, dcfg, prior, cfg, rng);

  const nn::ParamStore* head =
      prior.kind == PriorKind::Dependent ? &params : nullptr;
  HeadField hf(grid, params, dcfg);
  std::vector<BoundingBox> x =
      sample_prior(prior, cfg.n_eval, rng, &grid, head);

  if (cfg.solver == SolverKind::Dopri5) {
    Dopri5Result ir;
    try {
      ir = dopri5_integrate(
          [&](const std::vector<double>& s, double t) { return hf.velocity(s, t); },
          boxes_to_flat(x), 0.0, 1.0, cfg.dopri_atol, cfg.dopri_max_steps);
    } catch (const Error& e) {
      if (e.code() == ErrorCode::NumericalDivergence)
        raise(ErrorCode::NumericalDivergence,
              std::string(e.what()) + " (during adaptive integration)");
      throw;
    }
    x = clip_all(flat_to_boxes(ir.state));
    // Detections come from one final head evaluation just inside t = 1.
    const HeadEval ev = hf.eval(x, 1.0 - kVelocityEps);
    SampleResult result = finish({detections_from(ev)}, false, cfg.nms_iou);
    result.nfe = hf.nfe();
    result.truncated = ir.truncated;
    return result;
  }

  const int s_steps = cfg.steps;
  const double dt = 1.0 / s_steps;
  std::vector<std::vector<Detection>> per_step;
  for (int i = 0; i < s_steps; ++i) {
    const double t = static_cast<double>(i) / s_steps;
    HeadEval ev;
    std::vector<BoundingBox> x_next;
    try {
      switch (cfg.solver) {
        case SolverKind::Euler: {
          ev = hf.eval(x, t);
          const auto u = recover_velocity(ev.x1_hat, x, t);
          x_next.resize(x.size());
          for (std::size_t j = 0; j < x.size(); ++j)
            x_next[j] = {x[j].cx + u[j][0] * dt, x[j].cy + u[j][1] * dt,
                         x[j].w + u[j][2] * dt, x[j].h + u[j][3] * dt};
          break;
        }
        case SolverKind::Heun:
        case SolverKind::Rk4: {
          // The step's first evaluation doubles as k1 and as the detection
          // source; the remaining stages go through the generic stepper.
          ev = hf.eval(x, t);
          const auto u1 = recover_velocity(ev.x1_hat, x, t);
          std::vector<double> k1;
          k1.reserve(x.size() * 4);
          for (const auto& ui : u1) k1.insert(k1.end(), ui.begin(), ui.end());
          bool first = true;
          FieldEval field = [&](const std::vector<double>& s, double tt)
              -> std::vector<double> {
            if (first) {
              first = false;
              return k1;
            }
            return hf.velocity(s, tt);
          };
          const std::vector<double> next =
              cfg.solver == SolverKind::Heun
                  ? heun_step(field, boxes_to_flat(x), t, dt)
                  : rk4_step(field, boxes_to_flat(x), t, dt);
          x_next = flat_to_boxes(next);
          break;
        }
        default:
          raise(ErrorCode::InvalidParameter, "sample_detections: bad solver");
      }
    } catch (const Error& e) {
      if (e.code() == ErrorCode::NumericalDivergence)
        raise(ErrorCode::NumericalDivergence,
              std::string(e.what()) + " (at step " + std::to_string(i) + ")");
      throw;
    }
    x = clip_all(std::move(x_next));
    per_step.push_back(detections_from(ev));
    if (i + 1 < s_steps)
      x = box_renewal(x, ev.logits, prior, cfg.renewal_threshold, rng, &grid,
                      head);
  }
  SampleResult result =
      finish(std::move(per_step), cfg.ensemble && s_steps >= 2, cfg.nms_iou);
  result.nfe = hf.nfe();
  return result;
}

SampleResult ddim_sample(const FeatureGrid& grid, nn::ParamStore& params,
                         const DecoderConfig& dcfg, const PriorSpec& prior,
                         const SamplerConfig& cfg, Rng& rng) {
  cfg.validate();
  const int T = cfg.ddpm_timesteps;
  const int S = cfg.steps;
  const double scale = cfg.ddpm_scale;
  const nn::ParamStore* head =
      prior.kind == PriorKind::Dependent ? &params : nullptr;
  HeadField hf(grid, params, dcfg);
  // Sub-schedule: S+1 indices from T-1 down to -1 (index -1 is exactly clean).
  std::vector<int> times(S + 1);
  for (int i = 0; i <= S; ++i)
    times[i] = static_cast<int>((static_cast<long long>(S - i) * T) / S) - 1;
  std::vector<BoundingBox> x =
      sample_prior(prior, cfg.n_eval, rng, &grid, head);
  std::vector<std::vector<Detection>> per_step;
  for (int i = 0; i < S; ++i) {
    const int tau = times[i], tau_next = times[i + 1];
    const DdpmCoeffs cur = ddpm_coeffs_at(tau, T);
    const DdpmCoeffs nxt = ddpm_coeffs_at(tau_next, T);
    const double t_model = 1.0 - static_cast<double>(tau + 1) / T;
    const HeadEval ev = hf.eval(x, t_model);
    std::vector<BoundingBox> x_next(x.size());
    for (std::size_t j = 0; j < x.size(); ++j) {
      const double zt[4] = {(2.0 * x[j].cx - 1.0) * scale,
                            (2.0 * x[j].cy - 1.0) * scale,
                            (2.0 * x[j].w - 1.0) * scale,
                            (2.0 * x[j].h - 1.0) * scale};
      const double zh[4] = {(2.0 * ev.x1_hat[j].cx - 1.0) * scale,
                            (2.0 * ev.x1_hat[j].cy - 1.0) * scale,
                            (2.0 * ev.x1_hat[j].w - 1.0) * scale,
                            (2.0 * ev.x1_hat[j].h - 1.0) * scale};
      double out[4];
      const double ratio = cur.s > 0.0 ? nxt.s / cur.s : 0.0;
      for (int c = 0; c < 4; ++c)
        out[c] = nxt.a * zh[c] + ratio * (zt[c] - cur.a * zh[c]);
      x_next[j] = {(out[0] / scale + 1.0) / 2.0, (out[1] / scale + 1.0) / 2.0,
                   (out[2] / scale + 1.0) / 2.0, (out[3] / scale + 1.0) / 2.0};
    }
    x = clip_all(std::move(x_next));
    per_step.push_back(detections_from(ev));
    if (i + 1 < S)
      x = box_renewal(x, ev.logits, prior, cfg.renewal_threshold, rng, &grid,
                      head);
  }
  SampleResult result =
      finish(std::move(per_step), cfg.ensemble && S >= 2, cfg.nms_iou);
  result.nfe = hf.nfe();
  return result;
}

}  // namespace flowdet
