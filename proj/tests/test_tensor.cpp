#include <doctest.h>

#include <functional>

#include "cfx/nn.hpp"
#include "cfx/ops.hpp"

using namespace cfx;
using namespace cfx::ad;

namespace {

Arr random_arr(Rng& rng, Eigen::Index n, double scale = 1.0) {
  Arr a(n);
  for (Eigen::Index i = 0; i < n; ++i) a[i] = float(scale * rng.normal());
  return a;
}

// central finite differences on the leaf against the autodiff gradient
double max_rel_grad_err(const std::function<Var(const Var&)>& f, const Arr& x0,
                        const std::vector<int>& shape, int probes, Rng& rng, float h = 1e-2f) {
  Var x = leaf(x0, shape, true);
  Var y = f(x);
  backward(y);
  double worst = 0.0;
  for (int k = 0; k < probes; ++k) {
    const Eigen::Index i = Eigen::Index(rng.uniform_int(0, x0.size() - 1));
    Arr xp = x0, xm = x0;
    xp[i] += h;
    xm[i] -= h;
    const double fp = double(f(constant(xp, shape))->val[0]);
    const double fm = double(f(constant(xm, shape))->val[0]);
    const double fd = (fp - fm) / (2.0 * double(h));
    const double an = double(x->grad[i]);
    worst = std::max(worst, std::abs(an - fd) / (std::abs(an) + std::abs(fd) + 1e-4));
  }
  return worst;
}

}  // namespace

TEST_CASE("elementwise op gradients") {
  Rng rng(1);
  const std::vector<int> shape{2, 6};
  const Arr x0 = random_arr(rng, 12, 0.7);
  auto check = [&](const std::function<Var(const Var&)>& f, float h = 1e-2f) {
    Rng probe(9);
    CHECK(max_rel_grad_err(f, x0, shape, 8, probe, h) < 2e-2);
  };
  check([](const Var& x) { return sum_all(mul(x, x)); });
  check([](const Var& x) { return mean_all(abs_op(scalar_add(x, 0.3f))); });
  check([](const Var& x) { return sum_all(relu(x)); });
  check([](const Var& x) { return sum_all(leaky_relu(x, 0.1f)); });
  check([](const Var& x) { return sum_all(tanh_op(x)); });
  check([](const Var& x) { return sum_all(sigmoid(x)); });
  check([](const Var& x) { return sum_all(softplus(x)); });
  check([](const Var& x) { return sum_all(log_op(scalar_add(sigmoid(x), 0.5f))); });
  check([](const Var& x) { return mean_all(sub(x, mul(x, x))); });
  check([](const Var& x) { return sum_all(rowwise_sum(mul(x, x))); });
}

TEST_CASE("dense and matmul gradients") {
  Rng rng(2);
  const Arr x0 = random_arr(rng, 3 * 4);
  const Arr w0 = random_arr(rng, 4 * 2);
  const Arr b0 = random_arr(rng, 2);
  // gradient w.r.t. input
  {
    Rng probe(11);
    auto f = [&](const Var& x) {
      Var w = constant(w0, {4, 2});
      Var b = constant(b0, {2});
      return sum_all(tanh_op(dense(x, w, b)));
    };
    CHECK(max_rel_grad_err(f, x0, {3, 4}, 8, probe) < 2e-2);
  }
  // gradient w.r.t. weight
  {
    Rng probe(12);
    auto f = [&](const Var& w) {
      Var x = constant(x0, {3, 4});
      Var b = constant(b0, {2});
      return sum_all(tanh_op(dense(x, w, b)));
    };
    CHECK(max_rel_grad_err(f, w0, {4, 2}, 8, probe) < 2e-2);
  }
}

TEST_CASE("conv2d gradients (stride 1 and 2)") {
  Rng rng(3);
  const Arr x0 = random_arr(rng, 2 * 2 * 6 * 6);
  const Arr w0 = random_arr(rng, 3 * 2 * 3 * 3, 0.4);
  const Arr b0 = random_arr(rng, 3, 0.2);
  for (int stride : {1, 2}) {
    Rng probe(20 + stride);
    auto fx = [&](const Var& x) {
      Var w = constant(w0, {3, 2, 3, 3});
      Var b = constant(b0, {3});
      return mean_all(tanh_op(conv2d(x, w, b, stride, 1)));
    };
    CHECK(max_rel_grad_err(fx, x0, {2, 2, 6, 6}, 10, probe) < 2e-2);
    auto fw = [&](const Var& w) {
      Var x = constant(x0, {2, 2, 6, 6});
      Var b = constant(b0, {3});
      return mean_all(tanh_op(conv2d(x, w, b, stride, 1)));
    };
    CHECK(max_rel_grad_err(fw, w0, {3, 2, 3, 3}, 10, probe) < 2e-2);
    auto fb = [&](const Var& b) {
      Var x = constant(x0, {2, 2, 6, 6});
      Var w = constant(w0, {3, 2, 3, 3});
      return mean_all(tanh_op(conv2d(x, w, b, stride, 1)));
    };
    CHECK(max_rel_grad_err(fb, b0, {3}, 3, probe) < 2e-2);
  }
}

TEST_CASE("pooling and upsampling gradients") {
  Rng rng(4);
  const Arr x0 = random_arr(rng, 2 * 3 * 4 * 4);
  Rng probe(31);
  auto favg = [](const Var& x) { return sum_all(mul(global_avg_pool(x), global_avg_pool(x))); };
  CHECK(max_rel_grad_err(favg, x0, {2, 3, 4, 4}, 8, probe) < 2e-2);
  auto fsum = [](const Var& x) { return mean_all(tanh_op(global_sum_pool(x))); };
  CHECK(max_rel_grad_err(fsum, x0, {2, 3, 4, 4}, 8, probe) < 2e-2);
  auto fup = [](const Var& x) { return mean_all(mul(upsample_nearest2x(x), upsample_nearest2x(x))); };
  CHECK(max_rel_grad_err(fup, x0, {2, 3, 4, 4}, 8, probe) < 2e-2);
}

TEST_CASE("batch norm gradients, training and eval") {
  Rng rng(5);
  const Arr x0 = random_arr(rng, 2 * 3 * 4 * 4);
  const Arr g0 = random_arr(rng, 3, 0.5) + 1.0f;
  const Arr beta0 = random_arr(rng, 3, 0.3);
  for (bool training : {true, false}) {
    Rng probe(41 + training);
    auto fx = [&](const Var& x) {
      Var g = constant(g0, {3});
      Var b = constant(beta0, {3});
      BnBuffers buf;
      buf.running_mean = Arr::Constant(3, 0.2f);
      buf.running_var = Arr::Constant(3, 1.3f);
      buf.initialized = true;
      return mean_all(tanh_op(batchnorm2d(x, g, b, buf, training)));
    };
    CHECK(max_rel_grad_err(fx, x0, {2, 3, 4, 4}, 10, probe) < 3e-2);
    auto fg = [&](const Var& g) {
      Var x = constant(x0, {2, 3, 4, 4});
      Var b = constant(beta0, {3});
      BnBuffers buf;
      buf.running_mean = Arr::Constant(3, 0.2f);
      buf.running_var = Arr::Constant(3, 1.3f);
      buf.initialized = true;
      return mean_all(tanh_op(batchnorm2d(x, g, b, buf, training)));
    };
    CHECK(max_rel_grad_err(fg, g0, {3}, 3, probe) < 3e-2);
  }
}

TEST_CASE("conditional batch norm selects per-sample rows") {
  Rng rng(6);
  const Arr x0 = random_arr(rng, 2 * 2 * 3 * 3);
  const Arr g0 = random_arr(rng, 4 * 2, 0.4) + 1.0f;
  const Arr b0 = random_arr(rng, 4 * 2, 0.3);
  const std::vector<int> cond{1, 3};
  Rng probe(55);
  auto fg = [&](const Var& g) {
    Var x = constant(x0, {2, 2, 3, 3});
    Var b = constant(b0, {4, 2});
    BnBuffers buf;
    return mean_all(tanh_op(cond_batchnorm2d(x, g, b, cond, buf, true)));
  };
  CHECK(max_rel_grad_err(fg, g0, {4, 2}, 10, probe) < 3e-2);

  // rows not referenced by the batch get zero gradient
  Var g = leaf(g0, {4, 2}, true);
  Var x = constant(x0, {2, 2, 3, 3});
  Var b = constant(b0, {4, 2});
  BnBuffers buf;
  backward(mean_all(tanh_op(cond_batchnorm2d(x, g, b, cond, buf, true))));
  CHECK(g->grad[0 * 2 + 0] == 0.0f);
  CHECK(g->grad[2 * 2 + 1] == 0.0f);
  CHECK(g->grad[1 * 2 + 0] != 0.0f);
  CHECK(g->grad[3 * 2 + 1] != 0.0f);
}

TEST_CASE("spectral scale divides by u^T W v and backpropagates") {
  Rng rng(7);
  const Arr w0 = random_arr(rng, 3 * 4);
  Arr u = random_arr(rng, 3).abs() + 0.2f;
  Arr v = random_arr(rng, 4).abs() + 0.2f;
  u /= std::sqrt(u.square().sum());
  v /= std::sqrt(v.square().sum());
  Rng probe(66);
  auto f = [&](const Var& w) { return mean_all(tanh_op(spectral_scale(w, u, v))); };
  CHECK(max_rel_grad_err(f, w0, {3, 4}, 10, probe) < 2e-2);

  Var w = constant(w0, {3, 4});
  Var ws = spectral_scale(w, u, v);
  CMatMap W(w0.data(), 3, 4);
  Eigen::Map<const Eigen::VectorXf> U(u.data(), 3), V(v.data(), 4);
  const float sigma = U.transpose() * (W * V);
  for (int i = 0; i < 12; ++i) CHECK(ws->val[i] == doctest::Approx(w0[i] / sigma).epsilon(1e-5));
}

TEST_CASE("bernoulli kl mean matches the scalar formula") {
  Arr q(3);
  q << 0.9f, 0.3f, 0.5f;
  Arr p0(3);
  p0 << 0.5f, 0.3f, 0.25f;
  Var p = leaf(p0, {3, 1}, true);
  Var kl = bernoulli_kl_mean(q, p, 1e-4f);
  double expect = 0.0;
  for (int i = 0; i < 3; ++i)
    expect += q[i] * std::log(q[i] / p0[i]) + (1.0 - q[i]) * std::log((1.0 - q[i]) / (1.0 - p0[i]));
  expect /= 3.0;
  CHECK(double(kl->val[0]) == doctest::Approx(expect).epsilon(1e-4));
  backward(kl);
  for (int i = 0; i < 3; ++i) {
    const double an = -double(q[i]) / p0[i] + (1.0 - double(q[i])) / (1.0 - p0[i]);
    CHECK(double(p->grad[i]) == doctest::Approx(an / 3.0).epsilon(1e-3));
  }
}

TEST_CASE("no-grad mode builds no graph") {
  Rng rng(8);
  const Arr x0 = random_arr(rng, 4);
  Var x = leaf(x0, {4}, true);
  NoGrad ng;
  Var y = sum_all(mul(x, x));
  CHECK_FALSE(y->needs_grad);
  CHECK(y->parents.empty());
}

TEST_CASE("adam reduces a quadratic") {
  nn::ParamSet ps;
  Rng rng(9);
  auto p = ps.add_param("p", {4}, random_arr(rng, 4, 2.0));
  nn::Adam opt(ps, 0.05f, 0.9f, 0.999f);
  double first = 0.0, last = 0.0;
  for (int i = 0; i < 200; ++i) {
    Var loss = sum_all(mul(p, p));
    if (i == 0) first = double(loss->val[0]);
    last = double(loss->val[0]);
    backward(loss);
    opt.step();
  }
  CHECK(last < 0.01 * first);
}
