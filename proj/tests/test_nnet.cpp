#include <doctest.h>

#include <cmath>
#include <vector>

#include "flowdet/error.hpp"
#include "flowdet/nnet.hpp"
#include "test_util.hpp"

using namespace flowdet;
using nn::NodeId;
using nn::ParamStore;
using nn::Tape;
using nn::Tensor;
using test::max_fd_error;
using test::rel_err;

namespace {

// Random values bounded away from zero so relu/clip kinks sit farther than
// the finite-difference step from every sample.
void fill_away_from_kinks(Tensor& t, Rng& rng, double lo = 0.05,
                          double hi = 1.0) {
  for (double& v : t.values) {
    const double mag = rng.uniform(lo, hi);
    v = rng.u01() < 0.5 ? -mag : mag;
  }
}

void fill_uniform(Tensor& t, Rng& rng, double lo, double hi) {
  for (double& v : t.values) v = rng.uniform(lo, hi);
}

}  // namespace

TEST_SUITE("nnet") {

TEST_CASE("tensor basics") {
  const Tensor z = Tensor::zeros({2, 3});
  CHECK(z.numel() == 6);
  CHECK(z.rows() == 2);
  CHECK(z.cols() == 3);
  for (double v : z.values) CHECK(v == 0.0);
  const Tensor vec({4}, {1, 2, 3, 4});
  CHECK(vec.rows() == 4);
  CHECK(vec.cols() == 1);
}

TEST_CASE("matmul matches a naive triple loop") {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const int m = 1 + static_cast<int>(rng.uniform_int(5));
    const int k = 1 + static_cast<int>(rng.uniform_int(5));
    const int n = 1 + static_cast<int>(rng.uniform_int(5));
    std::vector<double> a(m * k), b(k * n), c(m * n), want(m * n, 0.0);
    for (double& v : a) v = rng.uniform(-2, 2);
    for (double& v : b) v = rng.uniform(-2, 2);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        for (int p = 0; p < k; ++p)
          want[i * n + j] += a[i * k + p] * b[p * n + j];
    nn::matmul(a.data(), b.data(), c.data(), m, k, n);
    for (int i = 0; i < m * n; ++i)
      CHECK(c[i] == doctest::Approx(want[i]).epsilon(1e-12));
  }
}

TEST_CASE("init_xavier stays inside the fan bound") {
  Tensor w = Tensor::zeros({8, 12});
  Rng rng(7);
  nn::init_xavier(w, rng);
  const double bound = std::sqrt(6.0 / (8 + 12));
  double spread = 0.0;
  for (double v : w.values) {
    CHECK(std::abs(v) <= bound);
    spread = std::max(spread, std::abs(v));
  }
  CHECK(spread > 0.1 * bound);
}

TEST_CASE("affine forward oracle") {
  ParamStore store;
  store.create("x", {2, 3}).values = {1, 2, 3, 4, 5, 6};
  store.create("w", {3, 2}).values = {1, 0, 0, 1, 1, 1};
  store.create("b", {2}).values = {0.5, -0.5};
  Tape tape;
  const NodeId y = nn::affine(tape, tape.param(store, "x"),
                              tape.param(store, "w"), tape.param(store, "b"));
  const Tensor& out = tape.value(y);
  REQUIRE(out.shape == std::vector<int>({2, 2}));
  CHECK(out.values[0] == doctest::Approx(1 + 3 + 0.5));
  CHECK(out.values[1] == doctest::Approx(2 + 3 - 0.5));
  CHECK(out.values[2] == doctest::Approx(4 + 6 + 0.5));
  CHECK(out.values[3] == doctest::Approx(5 + 6 - 0.5));
}

TEST_CASE("layer_norm normalizes each row") {
  ParamStore store;
  store.create("x", {2, 4}).values = {1, 2, 3, 4, -1, 0, 3, 10};
  auto& gain = store.create("gain", {4});
  gain.values = {1, 1, 1, 1};
  store.create("bias", {4});
  Tape tape;
  const NodeId y =
      nn::layer_norm(tape, tape.param(store, "x"), tape.param(store, "gain"),
                     tape.param(store, "bias"));
  const Tensor& out = tape.value(y);
  for (int r = 0; r < 2; ++r) {
    double mean = 0.0, var = 0.0;
    for (int c = 0; c < 4; ++c) mean += out.values[r * 4 + c];
    mean /= 4;
    for (int c = 0; c < 4; ++c) {
      const double d = out.values[r * 4 + c] - mean;
      var += d * d;
    }
    var /= 4;
    CHECK(mean == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(var == doctest::Approx(1.0).epsilon(1e-3));  // eps shrinks it a touch
  }
}

TEST_CASE("attention with identical keys averages the values") {
  ParamStore store;
  auto& q = store.create("q", {3, 2});
  q.values = {1, 0, 0, 1, 1, 1};
  auto& k = store.create("k", {3, 2});
  k.values = {0.7, -0.3, 0.7, -0.3, 0.7, -0.3};  // all rows equal -> uniform
  auto& v = store.create("v", {3, 2});
  v.values = {3, 0, 0, 3, 6, 3};
  Tape tape;
  const NodeId y = nn::attention(tape, tape.param(store, "q"),
                                 tape.param(store, "k"), tape.param(store, "v"));
  const Tensor& out = tape.value(y);
  for (int r = 0; r < 3; ++r) {
    CHECK(out.values[r * 2 + 0] == doctest::Approx(3.0).epsilon(1e-9));
    CHECK(out.values[r * 2 + 1] == doctest::Approx(2.0).epsilon(1e-9));
  }
}

TEST_CASE("gradients match central differences per primitive") {
  // Worst relative error across every parameter coordinate must clear the
  // 1e-4 bar used by the full gradient suite.
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    Rng rng(1000 + seed);

    SUBCASE("affine") {
      ParamStore store;
      fill_uniform(store.create("x", {3, 4}), rng, -1, 1);
      fill_uniform(store.create("w", {4, 5}), rng, -1, 1);
      fill_uniform(store.create("b", {5}), rng, -1, 1);
      Tensor target = Tensor::zeros({3, 5});
      fill_uniform(target, rng, -1, 1);
      const auto build = [&](Tape& t, ParamStore& s) {
        const NodeId y = nn::affine(t, t.param(s, "x"), t.param(s, "w"),
                                    t.param(s, "b"));
        return nn::squared_error_sum(t, y, target);
      };
      CHECK(max_fd_error(store, build) < 1e-4);
    }

    SUBCASE("relu") {
      ParamStore store;
      fill_away_from_kinks(store.create("x", {4, 3}), rng);
      Tensor target = Tensor::zeros({4, 3});
      const auto build = [&](Tape& t, ParamStore& s) {
        return nn::squared_error_sum(t, nn::relu(t, t.param(s, "x")), target);
      };
      CHECK(max_fd_error(store, build) < 1e-4);
    }

    SUBCASE("layer_norm") {
      ParamStore store;
      fill_uniform(store.create("x", {3, 6}), rng, -2, 2);
      fill_uniform(store.create("gain", {6}), rng, 0.5, 1.5);
      fill_uniform(store.create("bias", {6}), rng, -0.5, 0.5);
      Tensor target = Tensor::zeros({3, 6});
      fill_uniform(target, rng, -1, 1);
      const auto build = [&](Tape& t, ParamStore& s) {
        const NodeId y = nn::layer_norm(t, t.param(s, "x"), t.param(s, "gain"),
                                        t.param(s, "bias"));
        return nn::squared_error_sum(t, y, target);
      };
      CHECK(max_fd_error(store, build) < 1e-4);
    }

    SUBCASE("attention") {
      ParamStore store;
      fill_uniform(store.create("q", {4, 5}), rng, -1, 1);
      fill_uniform(store.create("k", {4, 5}), rng, -1, 1);
      fill_uniform(store.create("v", {4, 5}), rng, -1, 1);
      Tensor target = Tensor::zeros({4, 5});
      fill_uniform(target, rng, -1, 1);
      const auto build = [&](Tape& t, ParamStore& s) {
        const NodeId y = nn::attention(t, t.param(s, "q"), t.param(s, "k"),
                                       t.param(s, "v"));
        return nn::squared_error_sum(t, y, target);
      };
      CHECK(max_fd_error(store, build) < 1e-4);
    }

    SUBCASE("add and film_modulate") {
      ParamStore store;
      fill_uniform(store.create("h", {3, 6}), rng, -1, 1);
      fill_uniform(store.create("h2", {3, 6}), rng, -1, 1);
      fill_uniform(store.create("gamma", {6}), rng, 0.5, 1.5);
      fill_uniform(store.create("beta", {6}), rng, -0.5, 0.5);
      Tensor target = Tensor::zeros({3, 6});
      fill_uniform(target, rng, -1, 1);
      const auto build = [&](Tape& t, ParamStore& s) {
        const NodeId sum = nn::add(t, t.param(s, "h"), t.param(s, "h2"));
        const NodeId y = nn::film_modulate(t, sum, t.param(s, "gamma"),
                                           t.param(s, "beta"));
        return nn::squared_error_sum(t, y, target);
      };
      CHECK(max_fd_error(store, build) < 1e-4);
    }

    SUBCASE("sigmoid and slice_cols") {
      ParamStore store;
      fill_uniform(store.create("x", {3, 8}), rng, -2, 2);
      Tensor target = Tensor::zeros({3, 3});
      fill_uniform(target, rng, 0, 1);
      const auto build = [&](Tape& t, ParamStore& s) {
        const NodeId sig = nn::sigmoid_op(t, t.param(s, "x"));
        const NodeId cut = nn::slice_cols(t, sig, 2, 5);
        return nn::squared_error_sum(t, cut, target);
      };
      CHECK(max_fd_error(store, build) < 1e-4);
    }

    SUBCASE("clip_unit_boxes") {
      // Mix of strictly-inside boxes (pass-through region) and boxes pushed
      // far outside (saturated region); corners stay > h away from 0 and 1.
      ParamStore store;
      auto& boxes = store.create("boxes", {4, 4});
      boxes.values = {0.4, 0.5, 0.2, 0.3,   //
                      0.3, 0.7, 0.1, 0.2,   //
                      1.4, 0.5, 0.2, 0.2,   // right corner deep past 1
                      0.5, -0.6, 0.3, 0.4};  // top corner deep past 0
      for (double& v : boxes.values) v += rng.uniform(-0.01, 0.01);
      Tensor target = Tensor::zeros({4, 4});
      fill_uniform(target, rng, 0, 1);
      const auto build = [&](Tape& t, ParamStore& s) {
        const NodeId y = nn::clip_unit_boxes(t, t.param(s, "boxes"));
        return nn::squared_error_sum(t, y, target);
      };
      CHECK(max_fd_error(store, build) < 1e-4);
    }

    SUBCASE("apply_box_deltas") {
      ParamStore store;
      // Keep dw/dh well inside the +-kDeltaClamp log-scale window.
      fill_uniform(store.create("d", {3, 4}), rng, -1.5, 1.5);
      Tensor ref({3, 4}, {0.3, 0.4, 0.2, 0.25,  //
                          0.6, 0.5, 0.35, 0.15,  //
                          0.45, 0.7, 0.1, 0.3});
      Tensor target = Tensor::zeros({3, 4});
      fill_uniform(target, rng, 0, 1);
      const auto build = [&](Tape& t, ParamStore& s) {
        const NodeId y = nn::apply_box_deltas(t, t.param(s, "d"), ref);
        return nn::squared_error_sum(t, y, target);
      };
      CHECK(max_fd_error(store, build) < 1e-4);
    }

    SUBCASE("weighted_sum of scalars") {
      ParamStore store;
      fill_uniform(store.create("a", {2, 2}), rng, -1, 1);
      fill_uniform(store.create("b", {2, 2}), rng, -1, 1);
      Tensor ta = Tensor::zeros({2, 2});
      Tensor tb = Tensor::zeros({2, 2});
      const auto build = [&](Tape& t, ParamStore& s) {
        const NodeId la = nn::squared_error_sum(t, t.param(s, "a"), ta);
        const NodeId lb = nn::squared_error_sum(t, t.param(s, "b"), tb);
        return nn::weighted_sum(t, {{la, 2.0}, {lb, 5.0}});
      };
      CHECK(max_fd_error(store, build) < 1e-4);
    }

    SUBCASE("stacked chain") {
      ParamStore store;
      fill_uniform(store.create("x", {4, 6}), rng, -1, 1);
      fill_uniform(store.create("w1", {6, 6}), rng, -0.7, 0.7);
      fill_uniform(store.create("b1", {6}), rng, -0.2, 0.2);
      fill_uniform(store.create("gain", {6}), rng, 0.8, 1.2);
      fill_uniform(store.create("bias", {6}), rng, -0.2, 0.2);
      fill_uniform(store.create("gamma", {6}), rng, 0.5, 1.5);
      fill_uniform(store.create("beta", {6}), rng, -0.3, 0.3);
      Tensor target = Tensor::zeros({4, 2});
      fill_uniform(target, rng, 0, 1);
      const auto build = [&](Tape& t, ParamStore& s) {
        NodeId h = nn::affine(t, t.param(s, "x"), t.param(s, "w1"),
                              t.param(s, "b1"));
        h = nn::layer_norm(t, h, t.param(s, "gain"), t.param(s, "bias"));
        h = nn::film_modulate(t, h, t.param(s, "gamma"), t.param(s, "beta"));
        h = nn::attention(t, h, h, h);
        h = nn::sigmoid_op(t, h);
        h = nn::slice_cols(t, h, 1, 3);
        return nn::squared_error_sum(t, h, target);
      };
      CHECK(max_fd_error(store, build) < 1e-4);
    }
  }
}

TEST_CASE("apply_box_deltas forward oracle and clamp") {
  ParamStore store;
  store.create("d", {2, 4}).values = {0.5, -0.25, std::log(2.0), 0.0,  //
                                      0.0, 0.0, 9.0, -9.0};
  const Tensor ref({2, 4}, {0.4, 0.6, 0.2, 0.4,  //
                            0.5, 0.5, 0.1, 0.1});
  Tape tape;
  const NodeId y = nn::apply_box_deltas(tape, tape.param(store, "d"), ref);
  // Copy: later tape ops may reallocate node storage.
  const std::vector<double> out = tape.value(y).values;
  CHECK(out[0] == doctest::Approx(0.4 + 0.5 * 0.2).epsilon(1e-12));
  CHECK(out[1] == doctest::Approx(0.6 - 0.25 * 0.4).epsilon(1e-12));
  CHECK(out[2] == doctest::Approx(0.4).epsilon(1e-12));  // w doubles
  CHECK(out[3] == doctest::Approx(0.4).epsilon(1e-12));  // h unchanged
  // Log-scale deltas saturate at +-kDeltaClamp.
  CHECK(out[6] == doctest::Approx(0.1 * std::exp(nn::kDeltaClamp)).epsilon(1e-12));
  CHECK(out[7] == doctest::Approx(0.1 * std::exp(-nn::kDeltaClamp)).epsilon(1e-12));
  // Saturated coordinates get zero gradient; live ones scale by the jacobian.
  tape.backward(nn::squared_error_sum(tape, y, Tensor::zeros({2, 4})));
  const auto& g = store.at("d").grad;
  CHECK(g[0] == doctest::Approx(2.0 * out[0] * 0.2).epsilon(1e-12));
  CHECK(g[2] == doctest::Approx(2.0 * out[2] * out[2]).epsilon(1e-12));
  CHECK(g[6] == 0.0);
  CHECK(g[7] == 0.0);

  Tape t2;
  CHECK_THROWS_AS(
      nn::apply_box_deltas(t2, t2.param(store, "d"), Tensor::zeros({3, 4})),
      Error);
}

TEST_CASE("backward accumulates into bound parameters") {
  ParamStore store;
  store.create("x", {2}).values = {3.0, -2.0};
  Tape tape;
  const NodeId loss =
      nn::squared_error_sum(tape, tape.param(store, "x"), Tensor({2}, {1, 1}));
  CHECK(tape.value(loss).values[0] == doctest::Approx(4.0 + 9.0));
  tape.backward(loss);
  const auto& p = store.at("x");
  REQUIRE(p.has_grad);
  CHECK(p.grad[0] == doctest::Approx(2.0 * (3.0 - 1.0)));
  CHECK(p.grad[1] == doctest::Approx(2.0 * (-2.0 - 1.0)));

  // A second tape accumulates on top of the first.
  Tape tape2;
  const NodeId loss2 =
      nn::squared_error_sum(tape2, tape2.param(store, "x"), Tensor({2}, {1, 1}));
  tape2.backward(loss2);
  CHECK(store.at("x").grad[0] == doctest::Approx(8.0));

  store.zero_grad();
  CHECK(!store.at("x").has_grad);
  CHECK(store.at("x").grad[0] == 0.0);
}

TEST_CASE("adam_step matches a hand-stepped oracle") {
  nn::AdamConfig cfg;
  cfg.lr = 0.1;
  cfg.beta1 = 0.9;
  cfg.beta2 = 0.99;
  cfg.eps = 1e-8;
  cfg.weight_decay = 0.01;

  ParamStore store;
  store.create("w", {2}).values = {1.0, -0.5};
  std::vector<double> w = {1.0, -0.5};
  std::vector<double> m = {0.0, 0.0}, v = {0.0, 0.0};
  const std::vector<std::vector<double>> grads = {{0.3, -0.7}, {-0.1, 0.4}};

  for (int step = 0; step < 2; ++step) {
    auto& p = store.at("w");
    p.grad = grads[step];
    p.has_grad = true;
    store.adam_step(cfg);

    const double t = step + 1.0;
    for (int i = 0; i < 2; ++i) {
      const double g = grads[step][i];
      m[i] = cfg.beta1 * m[i] + (1 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1 - cfg.beta2) * g * g;
      const double mhat = m[i] / (1 - std::pow(cfg.beta1, t));
      const double vhat = v[i] / (1 - std::pow(cfg.beta2, t));
      w[i] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) +
                        cfg.weight_decay * w[i]);
      CHECK(store.at("w").value.values[i] == doctest::Approx(w[i]).epsilon(1e-12));
    }
    CHECK(store.step_count() == step + 1);
    CHECK(!store.at("w").has_grad);  // step consumes the gradient
  }
}

TEST_CASE("adam_step raises MissingGradient when a parameter was never touched") {
  ParamStore store;
  store.create("used", {1}).values = {1.0};
  store.create("orphan", {1}).values = {1.0};
  auto& p = store.at("used");
  p.grad = {0.5};
  p.has_grad = true;
  CHECK_THROWS_AS(store.adam_step(nn::AdamConfig{}), Error);
}

TEST_CASE("sinusoidal_embed fixtures") {
  const auto at0 = nn::sinusoidal_embed(0.0, 6);
  REQUIRE(at0.size() == 6);
  for (int i = 0; i < 3; ++i) {
    CHECK(at0[2 * i] == 0.0);
    CHECK(at0[2 * i + 1] == 1.0);
  }
  const auto at1 = nn::sinusoidal_embed(1.0, 4);
  CHECK(at1[0] == doctest::Approx(std::sin(1.0)).epsilon(1e-15));
  CHECK(at1[1] == doctest::Approx(std::cos(1.0)).epsilon(1e-15));
  const double w1 = std::pow(10000.0, -2.0 / 4.0);  // second frequency
  CHECK(at1[2] == doctest::Approx(std::sin(w1)).epsilon(1e-15));
  CHECK(at1[3] == doctest::Approx(std::cos(w1)).epsilon(1e-15));
  CHECK_THROWS_AS(nn::sinusoidal_embed(0.5, 3), Error);
  CHECK_THROWS_AS(nn::sinusoidal_embed(0.5, 0), Error);
}

TEST_CASE("ops reject non-finite outputs") {
  ParamStore store;
  store.create("big", {1, 1}).values = {1e308};
  Tape tape;
  const NodeId x = tape.param(store, "big");
  CHECK_THROWS_AS(nn::add(tape, x, x), Error);  // overflows to inf
}

}  // TEST_SUITE
