#pragma once

#include "cfx/tensor.hpp"

namespace cfx::ad {

// elementwise
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var neg(const Var& a);
Var scalar_mul(const Var& a, float s);
Var scalar_add(const Var& a, float s);
Var relu(const Var& a);
Var leaky_relu(const Var& a, float slope);
Var tanh_op(const Var& a);
Var sigmoid(const Var& a);
Var softplus(const Var& a);
Var abs_op(const Var& a);
Var log_op(const Var& a);
Var clamp_op(const Var& a, float lo, float hi);

// shape / reduction
Var reshape(const Var& a, std::vector<int> shape);
Var sum_all(const Var& a);
Var mean_all(const Var& a);
// [R, S] -> [R, 1], summing everything but the leading dimension
Var rowwise_sum(const Var& a);
// out[r, :] = a[r, :] * w[r], w fixed
Var row_scale_const(const Var& a, const Arr& w);

// linear algebra
// x: [N, in], w: [in, out], b: [out] or nullptr
Var dense(const Var& x, const Var& w, const Var& b);

// x: [N,Cin,H,W], w: [Cout,Cin,kh,kw], b: [Cout] or nullptr
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);

Var upsample_nearest2x(const Var& x);
Var global_avg_pool(const Var& x);  // [N,C,H,W] -> [N,C]
Var global_sum_pool(const Var& x);

// batch normalization over (N,H,W) per channel
struct BnBuffers {
  Arr running_mean;
  Arr running_var;
  float momentum = 0.1f;
  float eps = 1e-5f;
  bool initialized = false;
};
// gamma/beta: [C]; training mode uses batch stats and updates buffers
Var batchnorm2d(const Var& x, const Var& gamma, const Var& beta, BnBuffers& buf, bool training);
// conditional variant: gamma/beta are [num_conditions, C], one row per sample
Var cond_batchnorm2d(const Var& x, const Var& gamma, const Var& beta,
                     const std::vector<int>& condition, BnBuffers& buf, bool training);

// w scaled by 1/sigma, sigma = u^T W v with u, v fixed power-iteration vectors
Var spectral_scale(const Var& w, const Arr& u, const Arr& v);

// mean over rows of the Bernoulli KL D(q || p), q fixed targets in (0,1),
// p: [N,1] graph node; both sides clamped to [eps, 1-eps]
Var bernoulli_kl_mean(const Arr& q, const Var& p, float eps);

}  // namespace cfx::ad
