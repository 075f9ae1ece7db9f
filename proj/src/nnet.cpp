#include "flowdet/nnet.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "flowdet/error.hpp"

namespace flowdet::nn {

Tensor Tensor::zeros(std::vector<int> shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor& ParamStore::create(const std::string& name, std::vector<int> shape) {
  if (params_.count(name)) {
    raise(ErrorCode::InvalidParameter, "duplicate parameter name " + name);
  }
  Parameter& p = params_[name];
  p.value = Tensor::zeros(std::move(shape));
  p.grad.assign(p.value.numel(), 0.0);
  p.moment1.assign(p.value.numel(), 0.0);
  p.moment2.assign(p.value.numel(), 0.0);
  return p.value;
}

ParamStore::Parameter& ParamStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) {
    raise(ErrorCode::InvalidParameter, "unknown parameter " + name);
  }
  return it->second;
}

const ParamStore::Parameter& ParamStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) {
    raise(ErrorCode::InvalidParameter, "unknown parameter " + name);
  }
  return it->second;
}

void ParamStore::zero_grad() {
  for (auto& [name, p] : params_) {
    std::fill(p.grad.begin(), p.grad.end(), 0.0);
    p.has_grad = false;
  }
}

void ParamStore::adam_step(const AdamConfig& cfg) {
  for (auto& [name, p] : params_) {
    if (!p.has_grad) {
      raise(ErrorCode::MissingGradient, "parameter " + name + " has no gradient");
    }
  }
  step_count_ += 1;
  const double t = static_cast<double>(step_count_);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto& [name, p] : params_) {
    double* w = p.value.values.data();
    double* g = p.grad.data();
    double* m = p.moment1.data();
    double* v = p.moment2.data();
    const std::size_t n = p.value.numel();
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      double mhat = m[i] / bc1;
      double vhat = v[i] / bc2;
      w[i] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) +
                        cfg.weight_decay * w[i]);
    }
    std::fill(p.grad.begin(), p.grad.end(), 0.0);
    p.has_grad = false;
  }
}

void init_xavier(Tensor& t, Rng& rng) {
  int fan_in = t.shape.size() >= 2 ? t.shape[0] : static_cast<int>(t.numel());
  int fan_out = t.shape.size() >= 2 ? t.shape[1] : static_cast<int>(t.numel());
  double bound = std::sqrt(6.0 / (fan_in + fan_out));
  for (double& v : t.values) v = rng.uniform(-bound, bound);
}

void matmul(const double* a, const double* b, double* c, int m, int k, int n) {
  std::memset(c, 0, sizeof(double) * static_cast<std::size_t>(m) * n);
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<std::size_t>(i) * k;
    double* crow = c + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) {
        crow[j] += av * brow[j];
      }
    }
  }
}

namespace {

void check_finite(const Tensor& t, const char* op) {
  for (double v : t.values) {
    if (!std::isfinite(v)) {
      raise(ErrorCode::NumericalDivergence,
            std::string(op) + " produced a non-finite value");
    }
  }
}

void expect_2d(const Tensor& t, const char* op) {
  if (t.shape.size() != 2) {
    raise(ErrorCode::ShapeError, std::string(op) + " expects a 2-D tensor");
  }
}

}  // namespace

NodeId Tape::leaf(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, nullptr});
  return static_cast<NodeId>(nodes_.size()) - 1;
}

NodeId Tape::param(ParamStore& store, const std::string& name) {
  ParamStore::Parameter& p = store.at(name);
  NodeId id = leaf(p.value);
  bindings_.emplace_back(id, &p);
  return id;
}

NodeId Tape::emplace(Tensor value, BackFn back) {
  nodes_.push_back(Node{std::move(value), {}, std::move(back)});
  return static_cast<NodeId>(nodes_.size()) - 1;
}

std::vector<double>& Tape::grad(NodeId id) {
  Node& node = nodes_[id];
  if (node.grad.empty()) {
    node.grad.assign(node.value.numel(), 0.0);
  }
  return node.grad;
}

void Tape::backward(NodeId loss) {
  if (nodes_[loss].value.numel() != 1) {
    raise(ErrorCode::ShapeError, "backward target must be a scalar");
  }
  grad(loss)[0] = 1.0;
  for (NodeId id = loss; id >= 0; --id) {
    Node& node = nodes_[id];
    if (node.grad.empty() || !node.back) continue;
    node.back(node.grad, *this);
  }
  for (auto& [id, parameter] : bindings_) {
    Node& node = nodes_[id];
    if (node.grad.empty()) continue;
    for (std::size_t i = 0; i < node.grad.size(); ++i) {
      parameter->grad[i] += node.grad[i];
    }
    parameter->has_grad = true;
  }
}

NodeId affine(Tape& tape, NodeId x, NodeId w, NodeId b) {
  const Tensor& xv = tape.value(x);
  const Tensor& wv = tape.value(w);
  const Tensor& bv = tape.value(b);
  expect_2d(xv, "affine");
  expect_2d(wv, "affine");
  const int n = xv.rows(), din = xv.cols(), dout = wv.cols();
  if (wv.rows() != din || static_cast<int>(bv.numel()) != dout) {
    raise(ErrorCode::ShapeError, "affine shape mismatch");
  }
  Tensor out = Tensor::zeros({n, dout});
  matmul(xv.values.data(), wv.values.data(), out.values.data(), n, din, dout);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < dout; ++j) {
      out.values[static_cast<std::size_t>(i) * dout + j] += bv.values[j];
    }
  }
  check_finite(out, "affine");
  return tape.emplace(std::move(out), [x, w, b, n, din, dout](
                                          const std::vector<double>& gy, Tape& t) {
    const std::vector<double>& xval = t.value(x).values;
    const std::vector<double>& wval = t.value(w).values;
    std::vector<double>& gx = t.grad(x);
    std::vector<double>& gw = t.grad(w);
    std::vector<double>& gb = t.grad(b);
    // gx += gy * w^T
    for (int i = 0; i < n; ++i) {
      for (int p = 0; p < din; ++p) {
        double acc = 0.0;
        for (int j = 0; j < dout; ++j) {
          acc += gy[static_cast<std::size_t>(i) * dout + j] *
                 wval[static_cast<std::size_t>(p) * dout + j];
        }
        gx[static_cast<std::size_t>(i) * din + p] += acc;
      }
    }
    // gw += x^T * gy
    for (int p = 0; p < din; ++p) {
      for (int i = 0; i < n; ++i) {
        const double xv_ = xval[static_cast<std::size_t>(i) * din + p];
        if (xv_ == 0.0) continue;
        for (int j = 0; j < dout; ++j) {
          gw[static_cast<std::size_t>(p) * dout + j] +=
              xv_ * gy[static_cast<std::size_t>(i) * dout + j];
        }
      }
    }
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < dout; ++j) {
        gb[j] += gy[static_cast<std::size_t>(i) * dout + j];
      }
    }
  });
}

NodeId relu(Tape& tape, NodeId x) {
  Tensor out = tape.value(x);
  for (double& v : out.values) v = v > 0.0 ? v : 0.0;
  return tape.emplace(std::move(out), [x](const std::vector<double>& gy, Tape& t) {
    const std::vector<double>& xval = t.value(x).values;
    std::vector<double>& gx = t.grad(x);
    for (std::size_t i = 0; i < gy.size(); ++i) {
      if (xval[i] > 0.0) gx[i] += gy[i];
    }
  });
}

NodeId layer_norm(Tape& tape, NodeId x, NodeId gain, NodeId bias, double eps) {
  const Tensor& xv = tape.value(x);
  expect_2d(xv, "layer_norm");
  const int n = xv.rows(), d = xv.cols();
  const Tensor& gv = tape.value(gain);
  const Tensor& bv = tape.value(bias);
  if (static_cast<int>(gv.numel()) != d || static_cast<int>(bv.numel()) != d) {
    raise(ErrorCode::ShapeError, "layer_norm gain/bias must have width D");
  }
  Tensor out = Tensor::zeros({n, d});
  std::vector<double> xhat(static_cast<std::size_t>(n) * d);
  std::vector<double> inv_std(n);
  for (int i = 0; i < n; ++i) {
    const double* row = xv.values.data() + static_cast<std::size_t>(i) * d;
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += row[j];
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= d;
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < d; ++j) {
      double xh = (row[j] - mean) * inv_std[i];
      xhat[static_cast<std::size_t>(i) * d + j] = xh;
      out.values[static_cast<std::size_t>(i) * d + j] =
          xh * gv.values[j] + bv.values[j];
    }
  }
  check_finite(out, "layer_norm");
  return tape.emplace(
      std::move(out),
      [x, gain, bias, n, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          const std::vector<double>& gy, Tape& t) {
        const std::vector<double>& gval = t.value(gain).values;
        std::vector<double>& gx = t.grad(x);
        std::vector<double>& gg = t.grad(gain);
        std::vector<double>& gb = t.grad(bias);
        for (int i = 0; i < n; ++i) {
          const std::size_t off = static_cast<std::size_t>(i) * d;
          double mean_gxhat = 0.0, mean_gxhat_xhat = 0.0;
          for (int j = 0; j < d; ++j) {
            double gxh = gy[off + j] * gval[j];
            mean_gxhat += gxh;
            mean_gxhat_xhat += gxh * xhat[off + j];
          }
          mean_gxhat /= d;
          mean_gxhat_xhat /= d;
          for (int j = 0; j < d; ++j) {
            double gxh = gy[off + j] * gval[j];
            gx[off + j] += (gxh - mean_gxhat - xhat[off + j] * mean_gxhat_xhat) *
                           inv_std[i];
            gg[j] += gy[off + j] * xhat[off + j];
            gb[j] += gy[off + j];
          }
        }
      });
}

NodeId attention(Tape& tape, NodeId q, NodeId k, NodeId v) {
  const Tensor& qv = tape.value(q);
  const Tensor& kv = tape.value(k);
  const Tensor& vv = tape.value(v);
  expect_2d(qv, "attention");
  const int n = qv.rows(), d = qv.cols();
  if (kv.rows() != n || kv.cols() != d || vv.rows() != n || vv.cols() != d) {
    raise(ErrorCode::ShapeError, "attention expects q,k,v of equal shape");
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  // scores and row softmax
  std::vector<double> weights(static_cast<std::size_t>(n) * n);
  for (int i = 0; i < n; ++i) {
    double maxv = -HUGE_VAL;
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int p = 0; p < d; ++p) {
        s += qv.values[static_cast<std::size_t>(i) * d + p] *
             kv.values[static_cast<std::size_t>(j) * d + p];
      }
      s *= scale;
      weights[static_cast<std::size_t>(i) * n + j] = s;
      maxv = std::max(maxv, s);
    }
    double denom = 0.0;
    for (int j = 0; j < n; ++j) {
      double e = std::exp(weights[static_cast<std::size_t>(i) * n + j] - maxv);
      weights[static_cast<std::size_t>(i) * n + j] = e;
      denom += e;
    }
    for (int j = 0; j < n; ++j) {
      weights[static_cast<std::size_t>(i) * n + j] /= denom;
    }
  }
  Tensor out = Tensor::zeros({n, d});
  matmul(weights.data(), vv.values.data(), out.values.data(), n, n, d);
  check_finite(out, "attention");
  return tape.emplace(
      std::move(out),
      [q, k, v, n, d, scale, weights = std::move(weights)](
          const std::vector<double>& gy, Tape& t) {
        const std::vector<double>& qval = t.value(q).values;
        const std::vector<double>& kval = t.value(k).values;
        const std::vector<double>& vval = t.value(v).values;
        std::vector<double>& gq = t.grad(q);
        std::vector<double>& gk = t.grad(k);
        std::vector<double>& gv = t.grad(v);
        // gv += A^T * gy
        for (int j = 0; j < n; ++j) {
          for (int i = 0; i < n; ++i) {
            const double a = weights[static_cast<std::size_t>(i) * n + j];
            if (a == 0.0) continue;
            for (int p = 0; p < d; ++p) {
              gv[static_cast<std::size_t>(j) * d + p] +=
                  a * gy[static_cast<std::size_t>(i) * d + p];
            }
          }
        }
        // dA = gy * v^T, then softmax jacobian to dS
        std::vector<double> ds(static_cast<std::size_t>(n) * n);
        for (int i = 0; i < n; ++i) {
          double row_dot = 0.0;
          for (int j = 0; j < n; ++j) {
            double da = 0.0;
            for (int p = 0; p < d; ++p) {
              da += gy[static_cast<std::size_t>(i) * d + p] *
                    vval[static_cast<std::size_t>(j) * d + p];
            }
            ds[static_cast<std::size_t>(i) * n + j] = da;
            row_dot += da * weights[static_cast<std::size_t>(i) * n + j];
          }
          for (int j = 0; j < n; ++j) {
            ds[static_cast<std::size_t>(i) * n + j] =
                weights[static_cast<std::size_t>(i) * n + j] *
                (ds[static_cast<std::size_t>(i) * n + j] - row_dot);
          }
        }
        // gq += dS * k * scale ; gk += dS^T * q * scale
        for (int i = 0; i < n; ++i) {
          for (int j = 0; j < n; ++j) {
            const double s = ds[static_cast<std::size_t>(i) * n + j] * scale;
            if (s == 0.0) continue;
            for (int p = 0; p < d; ++p) {
              gq[static_cast<std::size_t>(i) * d + p] +=
                  s * kval[static_cast<std::size_t>(j) * d + p];
              gk[static_cast<std::size_t>(j) * d + p] +=
                  s * qval[static_cast<std::size_t>(i) * d + p];
            }
          }
        }
      });
}

NodeId add(Tape& tape, NodeId a, NodeId b) {
  const Tensor& av = tape.value(a);
  const Tensor& bv = tape.value(b);
  if (av.numel() != bv.numel()) {
    raise(ErrorCode::ShapeError, "add expects equal element counts");
  }
  Tensor out = av;
  for (std::size_t i = 0; i < out.numel(); ++i) out.values[i] += bv.values[i];
  check_finite(out, "add");
  return tape.emplace(std::move(out), [a, b](const std::vector<double>& gy, Tape& t) {
    std::vector<double>& ga = t.grad(a);
    std::vector<double>& gb = t.grad(b);
    for (std::size_t i = 0; i < gy.size(); ++i) {
      ga[i] += gy[i];
      gb[i] += gy[i];
    }
  });
}

NodeId film_modulate(Tape& tape, NodeId h, NodeId gamma, NodeId beta) {
  const Tensor& hv = tape.value(h);
  expect_2d(hv, "film_modulate");
  const int n = hv.rows(), d = hv.cols();
  const Tensor& gv = tape.value(gamma);
  const Tensor& bv = tape.value(beta);
  if (static_cast<int>(gv.numel()) != d || static_cast<int>(bv.numel()) != d) {
    raise(ErrorCode::ShapeError, "film gamma/beta must have width D");
  }
  Tensor out = Tensor::zeros({n, d});
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) {
      out.values[static_cast<std::size_t>(i) * d + j] =
          hv.values[static_cast<std::size_t>(i) * d + j] * gv.values[j] +
          bv.values[j];
    }
  }
  check_finite(out, "film_modulate");
  return tape.emplace(std::move(out), [h, gamma, beta, n, d](
                                          const std::vector<double>& gy, Tape& t) {
    const std::vector<double>& hval = t.value(h).values;
    const std::vector<double>& gval = t.value(gamma).values;
    std::vector<double>& gh = t.grad(h);
    std::vector<double>& gg = t.grad(gamma);
    std::vector<double>& gb = t.grad(beta);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < d; ++j) {
        const std::size_t idx = static_cast<std::size_t>(i) * d + j;
        gh[idx] += gy[idx] * gval[j];
        gg[j] += gy[idx] * hval[idx];
        gb[j] += gy[idx];
      }
    }
  });
}

NodeId sigmoid_op(Tape& tape, NodeId x) {
  Tensor out = tape.value(x);
  for (double& v : out.values) v = sigmoid(v);
  std::vector<double> cached = out.values;
  return tape.emplace(std::move(out),
                      [x, cached = std::move(cached)](const std::vector<double>& gy,
                                                      Tape& t) {
                        std::vector<double>& gx = t.grad(x);
                        for (std::size_t i = 0; i < gy.size(); ++i) {
                          gx[i] += gy[i] * cached[i] * (1.0 - cached[i]);
                        }
                      });
}

NodeId slice_cols(Tape& tape, NodeId x, int c0, int c1) {
  const Tensor& xv = tape.value(x);
  expect_2d(xv, "slice_cols");
  const int n = xv.rows(), d = xv.cols();
  if (c0 < 0 || c1 > d || c0 >= c1) {
    raise(ErrorCode::ShapeError, "slice_cols range invalid");
  }
  const int w = c1 - c0;
  Tensor out = Tensor::zeros({n, w});
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < w; ++j) {
      out.values[static_cast<std::size_t>(i) * w + j] =
          xv.values[static_cast<std::size_t>(i) * d + c0 + j];
    }
  }
  return tape.emplace(std::move(out), [x, c0, n, d, w](
                                          const std::vector<double>& gy, Tape& t) {
    std::vector<double>& gx = t.grad(x);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < w; ++j) {
        gx[static_cast<std::size_t>(i) * d + c0 + j] +=
            gy[static_cast<std::size_t>(i) * w + j];
      }
    }
  });
}

NodeId apply_box_deltas(Tape& tape, NodeId deltas, const Tensor& ref) {
  const Tensor& dv = tape.value(deltas);
  expect_2d(dv, "apply_box_deltas");
  if (dv.cols() != 4 || ref.shape != dv.shape) {
    raise(ErrorCode::ShapeError, "apply_box_deltas expects matching [N,4]");
  }
  const int n = dv.rows();
  Tensor out = Tensor::zeros({n, 4});
  // Cached local derivatives: d(cx')/d(dx) = w, d(w')/d(dw) = w' (zero where
  // the log-scale clamp saturates).
  std::vector<double> jac(static_cast<std::size_t>(n) * 4);
  for (int i = 0; i < n; ++i) {
    const double* d = dv.values.data() + static_cast<std::size_t>(i) * 4;
    const double* r = ref.values.data() + static_cast<std::size_t>(i) * 4;
    double* o = out.values.data() + static_cast<std::size_t>(i) * 4;
    double* j = jac.data() + static_cast<std::size_t>(i) * 4;
    o[0] = r[0] + d[0] * r[2];
    o[1] = r[1] + d[1] * r[3];
    const double dw = std::clamp(d[2], -kDeltaClamp, kDeltaClamp);
    const double dh = std::clamp(d[3], -kDeltaClamp, kDeltaClamp);
    o[2] = r[2] * std::exp(dw);
    o[3] = r[3] * std::exp(dh);
    j[0] = r[2];
    j[1] = r[3];
    j[2] = std::abs(d[2]) < kDeltaClamp ? o[2] : 0.0;
    j[3] = std::abs(d[3]) < kDeltaClamp ? o[3] : 0.0;
  }
  check_finite(out, "apply_box_deltas");
  return tape.emplace(
      std::move(out),
      [deltas, n, jac = std::move(jac)](const std::vector<double>& gy, Tape& t) {
        std::vector<double>& gd = t.grad(deltas);
        for (std::size_t i = 0; i < static_cast<std::size_t>(n) * 4; ++i) {
          gd[i] += gy[i] * jac[i];
        }
      });
}

NodeId clip_unit_boxes(Tape& tape, NodeId boxes) {
  const Tensor& bv = tape.value(boxes);
  expect_2d(bv, "clip_unit_boxes");
  if (bv.cols() != 4) {
    raise(ErrorCode::ShapeError, "clip_unit_boxes expects [N,4]");
  }
  const int n = bv.rows();
  Tensor out = Tensor::zeros({n, 4});
  // live[c] marks corner coordinates inside [0,1] (clamp derivative 1).
  std::vector<unsigned char> live(static_cast<std::size_t>(n) * 4);
  for (int i = 0; i < n; ++i) {
    const double* b = bv.values.data() + static_cast<std::size_t>(i) * 4;
    double corners[4] = {b[0] - b[2] / 2.0, b[1] - b[3] / 2.0,
                         b[0] + b[2] / 2.0, b[1] + b[3] / 2.0};
    for (int c = 0; c < 4; ++c) {
      live[static_cast<std::size_t>(i) * 4 + c] =
          corners[c] > 0.0 && corners[c] < 1.0;
      corners[c] = std::clamp(corners[c], 0.0, 1.0);
    }
    double* o = out.values.data() + static_cast<std::size_t>(i) * 4;
    o[0] = (corners[0] + corners[2]) / 2.0;
    o[1] = (corners[1] + corners[3]) / 2.0;
    o[2] = corners[2] - corners[0];
    o[3] = corners[3] - corners[1];
  }
  check_finite(out, "clip_unit_boxes");
  return tape.emplace(
      std::move(out),
      [boxes, n, live = std::move(live)](const std::vector<double>& gy, Tape& t) {
        std::vector<double>& gb = t.grad(boxes);
        for (int i = 0; i < n; ++i) {
          const double* g = gy.data() + static_cast<std::size_t>(i) * 4;
          const unsigned char* lv = live.data() + static_cast<std::size_t>(i) * 4;
          // d(out)/d(corners): x0 -> (0.5, 0, -1, 0), x1 -> (0.5, 0, 1, 0), etc.
          double gc[4] = {0.5 * g[0] - g[2], 0.5 * g[1] - g[3],
                          0.5 * g[0] + g[2], 0.5 * g[1] + g[3]};
          for (int c = 0; c < 4; ++c) {
            if (!lv[c]) gc[c] = 0.0;
          }
          double* out_g = gb.data() + static_cast<std::size_t>(i) * 4;
          // corners back to (cx,cy,w,h): x0 = cx - w/2, x1 = cx + w/2, ...
          out_g[0] += gc[0] + gc[2];
          out_g[1] += gc[1] + gc[3];
          out_g[2] += 0.5 * (gc[2] - gc[0]);
          out_g[3] += 0.5 * (gc[3] - gc[1]);
        }
      });
}

NodeId squared_error_sum(Tape& tape, NodeId pred, const Tensor& target) {
  const Tensor& pv = tape.value(pred);
  if (pv.numel() != target.numel()) {
    raise(ErrorCode::ShapeError, "squared_error_sum size mismatch");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < pv.numel(); ++i) {
    const double diff = pv.values[i] - target.values[i];
    total += diff * diff;
  }
  Tensor out({1}, {total});
  check_finite(out, "squared_error_sum");
  return tape.emplace(
      std::move(out),
      [pred, target_vals = target.values](const std::vector<double>& gy, Tape& t) {
        const std::vector<double>& pval = t.value(pred).values;
        std::vector<double>& gp = t.grad(pred);
        for (std::size_t i = 0; i < pval.size(); ++i) {
          gp[i] += gy[0] * 2.0 * (pval[i] - target_vals[i]);
        }
      });
}

NodeId weighted_sum(Tape& tape,
                    const std::vector<std::pair<NodeId, double>>& terms) {
  double total = 0.0;
  for (const auto& [id, w] : terms) {
    if (tape.value(id).numel() != 1) {
      raise(ErrorCode::ShapeError, "weighted_sum terms must be scalars");
    }
    total += w * tape.value(id).values[0];
  }
  Tensor out({1}, {total});
  check_finite(out, "weighted_sum");
  return tape.emplace(std::move(out),
                      [terms](const std::vector<double>& gy, Tape& t) {
                        for (const auto& [id, w] : terms) {
                          t.grad(id)[0] += gy[0] * w;
                        }
                      });
}

std::vector<double> sinusoidal_embed(double t, int dim) {
  if (dim <= 0 || dim % 2 != 0) {
    raise(ErrorCode::InvalidParameter, "sinusoidal_embed requires even dim");
  }
  std::vector<double> out(dim);
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::pow(10000.0, -2.0 * i / dim);
    out[2 * i] = std::sin(t * freq);
    out[2 * i + 1] = std::cos(t * freq);
  }
  return out;
}

}  // namespace flowdet::nn
