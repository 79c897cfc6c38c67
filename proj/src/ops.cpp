#include "cfx/ops.hpp"

#include <cmath>
#include <stdexcept>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace cfx::ad {

namespace {

Var make_like(const Var& a, Arr v) {
  auto n = std::make_shared<Node>();
  n->val = std::move(v);
  n->shape = a->shape;
  return n;
}

bool track(const std::initializer_list<Var>& parents) {
  if (!grad_enabled()) return false;
  for (const auto& p : parents)
    if (p && p->needs_grad) return true;
  return false;
}

void attach(Var& out, std::initializer_list<Var> parents, std::function<void(Node&)> fn) {
  out->needs_grad = true;
  out->parents.assign(parents.begin(), parents.end());
  out->backprop = std::move(fn);
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a->shape != b->shape) throw std::logic_error(std::string(op) + ": shape mismatch");
}

}  // namespace

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Var out = make_like(a, a->val + b->val);
  if (track({a, b}))
    attach(out, {a, b}, [a, b](Node& o) {
      if (a->needs_grad) {
        a->ensure_grad();
        a->grad += o.grad;
      }
      if (b->needs_grad) {
        b->ensure_grad();
        b->grad += o.grad;
      }
    });
  return out;
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Var out = make_like(a, a->val - b->val);
  if (track({a, b}))
    attach(out, {a, b}, [a, b](Node& o) {
      if (a->needs_grad) {
        a->ensure_grad();
        a->grad += o.grad;
      }
      if (b->needs_grad) {
        b->ensure_grad();
        b->grad -= o.grad;
      }
    });
  return out;
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Var out = make_like(a, a->val * b->val);
  if (track({a, b}))
    attach(out, {a, b}, [a, b](Node& o) {
      if (a->needs_grad) {
        a->ensure_grad();
        a->grad += o.grad * b->val;
      }
      if (b->needs_grad) {
        b->ensure_grad();
        b->grad += o.grad * a->val;
      }
    });
  return out;
}

Var neg(const Var& a) { return scalar_mul(a, -1.0f); }

Var scalar_mul(const Var& a, float s) {
  Var out = make_like(a, a->val * s);
  if (track({a}))
    attach(out, {a}, [a, s](Node& o) {
      a->ensure_grad();
      a->grad += o.grad * s;
    });
  return out;
}

Var scalar_add(const Var& a, float s) {
  Var out = make_like(a, a->val + s);
  if (track({a}))
    attach(out, {a}, [a](Node& o) {
      a->ensure_grad();
      a->grad += o.grad;
    });
  return out;
}

Var relu(const Var& a) {
  Var out = make_like(a, a->val.max(0.0f));
  if (track({a}))
    attach(out, {a}, [a](Node& o) {
      a->ensure_grad();
      a->grad += o.grad * (a->val > 0.0f).cast<float>();
    });
  return out;
}

Var leaky_relu(const Var& a, float slope) {
  Var out = make_like(a, a->val.max(a->val * slope));
  if (track({a}))
    attach(out, {a}, [a, slope](Node& o) {
      a->ensure_grad();
      a->grad += o.grad * (a->val > 0.0f).select(Arr::Ones(a->size()), Arr::Constant(a->size(), slope));
    });
  return out;
}

Var tanh_op(const Var& a) {
  Var out = make_like(a, a->val.tanh());
  if (track({a})) {
    Arr y = out->val;
    attach(out, {a}, [a, y](Node& o) {
      a->ensure_grad();
      a->grad += o.grad * (1.0f - y.square());
    });
  }
  return out;
}

Var sigmoid(const Var& a) {
  Arr y = 0.5f * ((0.5f * a->val).tanh() + 1.0f);  // stable logistic
  Var out = make_like(a, y);
  if (track({a})) {
    Arr yy = out->val;
    attach(out, {a}, [a, yy](Node& o) {
      a->ensure_grad();
      a->grad += o.grad * yy * (1.0f - yy);
    });
  }
  return out;
}

Var softplus(const Var& a) {
  Arr y = a->val.max(0.0f) + (1.0f + (-a->val.abs()).exp()).log();
  Var out = make_like(a, std::move(y));
  if (track({a}))
    attach(out, {a}, [a](Node& o) {
      a->ensure_grad();
      Arr s = 0.5f * ((0.5f * a->val).tanh() + 1.0f);
      a->grad += o.grad * s;
    });
  return out;
}

Var abs_op(const Var& a) {
  Var out = make_like(a, a->val.abs());
  if (track({a}))
    attach(out, {a}, [a](Node& o) {
      a->ensure_grad();
      a->grad += o.grad * a->val.sign();
    });
  return out;
}

Var log_op(const Var& a) {
  Var out = make_like(a, a->val.log());
  if (track({a}))
    attach(out, {a}, [a](Node& o) {
      a->ensure_grad();
      a->grad += o.grad / a->val;
    });
  return out;
}

Var clamp_op(const Var& a, float lo, float hi) {
  Var out = make_like(a, a->val.min(hi).max(lo));
  if (track({a}))
    attach(out, {a}, [a, lo, hi](Node& o) {
      a->ensure_grad();
      a->grad += o.grad * ((a->val > lo) && (a->val < hi)).cast<float>();
    });
  return out;
}

Var reshape(const Var& a, std::vector<int> shape) {
  if (shape_size(shape) != a->size()) throw std::logic_error("reshape: size mismatch");
  auto out = std::make_shared<Node>();
  out->val = a->val;
  out->shape = std::move(shape);
  if (track({a}))
    attach(out, {a}, [a](Node& o) {
      a->ensure_grad();
      a->grad += o.grad;
    });
  return out;
}

Var sum_all(const Var& a) {
  Arr v(1);
  v[0] = float(a->val.cast<double>().sum());
  Var out = constant(std::move(v), {1});
  if (track({a}))
    attach(out, {a}, [a](Node& o) {
      a->ensure_grad();
      a->grad += o.grad[0];
    });
  return out;
}

Var mean_all(const Var& a) {
  const float inv = 1.0f / float(a->size());
  Arr v(1);
  v[0] = float(a->val.cast<double>().sum() / double(a->size()));
  Var out = constant(std::move(v), {1});
  if (track({a}))
    attach(out, {a}, [a, inv](Node& o) {
      a->ensure_grad();
      a->grad += o.grad[0] * inv;
    });
  return out;
}

Var rowwise_sum(const Var& a) {
  const int rows = a->dim(0);
  const Eigen::Index cols = a->size() / rows;
  Arr v(rows);
  for (int r = 0; r < rows; ++r) v[r] = a->val.segment(r * cols, cols).sum();
  Var out = constant(std::move(v), {rows, 1});
  if (track({a}))
    attach(out, {a}, [a, rows, cols](Node& o) {
      a->ensure_grad();
      for (int r = 0; r < rows; ++r) a->grad.segment(r * cols, cols) += o.grad[r];
    });
  return out;
}

Var row_scale_const(const Var& a, const Arr& w) {
  const int rows = a->dim(0);
  if (w.size() != rows) throw std::logic_error("row_scale_const: weight size mismatch");
  const Eigen::Index cols = a->size() / rows;
  Arr v = a->val;
  for (int r = 0; r < rows; ++r) v.segment(r * cols, cols) *= w[r];
  Var out = make_like(a, std::move(v));
  if (track({a}))
    attach(out, {a}, [a, w, rows, cols](Node& o) {
      a->ensure_grad();
      for (int r = 0; r < rows; ++r) a->grad.segment(r * cols, cols) += o.grad.segment(r * cols, cols) * w[r];
    });
  return out;
}

Var dense(const Var& x, const Var& w, const Var& b) {
  const int n = x->dim(0);
  const int in = int(x->size() / n);
  if (w->dim(0) != in) throw std::logic_error("dense: weight rows != input features");
  const int out_f = w->dim(1);
  CMatMap X(x->val.data(), n, in), W(w->val.data(), in, out_f);
  Arr v(Eigen::Index(n) * out_f);
  MatMap Y(v.data(), n, out_f);
  Y.noalias() = X * W;
  if (b) {
    CMatMap B(b->val.data(), 1, out_f);
    Y.rowwise() += B.row(0);
  }
  Var out = constant(std::move(v), {n, out_f});
  if (track({x, w, b}))
    attach(out, {x, w, b ? b : x}, [x, w, b, n, in, out_f](Node& o) {
      CMatMap G(o.grad.data(), n, out_f);
      if (x->needs_grad) {
        x->ensure_grad();
        MatMap GX(x->grad.data(), n, in);
        CMatMap W(w->val.data(), in, out_f);
        GX.noalias() += G * W.transpose();
      }
      if (w->needs_grad) {
        w->ensure_grad();
        MatMap GW(w->grad.data(), in, out_f);
        CMatMap X(x->val.data(), n, in);
        GW.noalias() += X.transpose() * G;
      }
      if (b && b->needs_grad) {
        b->ensure_grad();
        MatMap GB(b->grad.data(), 1, out_f);
        GB.row(0) += G.colwise().sum();
      }
    });
  return out;
}

// ---------------------------------------------------------------------------
// convolution via batched im2col + one GEMM

namespace {

struct ConvDims {
  int n, cin, h, w, cout, kh, kw, stride, pad, ho, wo;
};

ConvDims conv_dims(const Var& x, const Var& w, int stride, int pad) {
  ConvDims d;
  d.n = x->dim(0);
  d.cin = x->dim(1);
  d.h = x->dim(2);
  d.w = x->dim(3);
  d.cout = w->dim(0);
  if (w->dim(1) != d.cin) throw std::logic_error("conv2d: channel mismatch");
  d.kh = w->dim(2);
  d.kw = w->dim(3);
  d.stride = stride;
  d.pad = pad;
  d.ho = (d.h + 2 * pad - d.kh) / stride + 1;
  d.wo = (d.w + 2 * pad - d.kw) / stride + 1;
  return d;
}

// col: [cin*kh*kw, n*ho*wo] row-major
void im2col_batch(const float* x, const ConvDims& d, float* col) {
  const Eigen::Index K = Eigen::Index(d.cin) * d.kh * d.kw;
  const Eigen::Index cols = Eigen::Index(d.n) * d.ho * d.wo;
#pragma omp parallel for schedule(static)
  for (int n = 0; n < d.n; ++n) {
    for (int c = 0; c < d.cin; ++c) {
      const float* xc = x + (Eigen::Index(n) * d.cin + c) * d.h * d.w;
      for (int ki = 0; ki < d.kh; ++ki)
        for (int kj = 0; kj < d.kw; ++kj) {
          float* dst = col + ((Eigen::Index(c) * d.kh + ki) * d.kw + kj) * cols +
                       Eigen::Index(n) * d.ho * d.wo;
          for (int ho = 0; ho < d.ho; ++ho) {
            const int hi = ho * d.stride - d.pad + ki;
            if (hi < 0 || hi >= d.h) {
              for (int wo = 0; wo < d.wo; ++wo) dst[Eigen::Index(ho) * d.wo + wo] = 0.0f;
              continue;
            }
            const float* src = xc + Eigen::Index(hi) * d.w;
            for (int wo = 0; wo < d.wo; ++wo) {
              const int wi = wo * d.stride - d.pad + kj;
              dst[Eigen::Index(ho) * d.wo + wo] = (wi >= 0 && wi < d.w) ? src[wi] : 0.0f;
            }
          }
        }
    }
  }
  (void)K;
}

void col2im_batch(const float* col, const ConvDims& d, float* gx) {
  const Eigen::Index cols = Eigen::Index(d.n) * d.ho * d.wo;
#pragma omp parallel for schedule(static)
  for (int n = 0; n < d.n; ++n) {
    for (int c = 0; c < d.cin; ++c) {
      float* gxc = gx + (Eigen::Index(n) * d.cin + c) * d.h * d.w;
      for (int ki = 0; ki < d.kh; ++ki)
        for (int kj = 0; kj < d.kw; ++kj) {
          const float* src = col + ((Eigen::Index(c) * d.kh + ki) * d.kw + kj) * cols +
                             Eigen::Index(n) * d.ho * d.wo;
          for (int ho = 0; ho < d.ho; ++ho) {
            const int hi = ho * d.stride - d.pad + ki;
            if (hi < 0 || hi >= d.h) continue;
            float* dst = gxc + Eigen::Index(hi) * d.w;
            for (int wo = 0; wo < d.wo; ++wo) {
              const int wi = wo * d.stride - d.pad + kj;
              if (wi >= 0 && wi < d.w) dst[wi] += src[Eigen::Index(ho) * d.wo + wo];
            }
          }
        }
    }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  const ConvDims d = conv_dims(x, w, stride, pad);
  const Eigen::Index K = Eigen::Index(d.cin) * d.kh * d.kw;
  const Eigen::Index cols = Eigen::Index(d.n) * d.ho * d.wo;

  Arr col(K * cols);
  im2col_batch(x->val.data(), d, col.data());

  // gemm: [cout, K] x [K, cols]
  Arr prod(Eigen::Index(d.cout) * cols);
  {
    CMatMap W(w->val.data(), d.cout, K), C(col.data(), K, cols);
    MatMap P(prod.data(), d.cout, cols);
    P.noalias() = W * C;
  }
  // scatter to [n, cout, ho, wo] and add bias
  Arr v(Eigen::Index(d.n) * d.cout * d.ho * d.wo);
  const Eigen::Index plane = Eigen::Index(d.ho) * d.wo;
#pragma omp parallel for schedule(static)
  for (int n = 0; n < d.n; ++n)
    for (int co = 0; co < d.cout; ++co) {
      const float bias = b ? b->val[co] : 0.0f;
      const float* src = prod.data() + Eigen::Index(co) * cols + Eigen::Index(n) * plane;
      float* dst = v.data() + (Eigen::Index(n) * d.cout + co) * plane;
      for (Eigen::Index i = 0; i < plane; ++i) dst[i] = src[i] + bias;
    }

  Var out = constant(std::move(v), {d.n, d.cout, d.ho, d.wo});
  if (track({x, w, b})) {
    // col is rebuilt in backward instead of retained; graphs here hold the
    // generator three times per step and the GEMM dwarfs the im2col cost
    attach(out, {x, w, b ? b : x}, [x, w, b, d, K, cols, plane](Node& o) {
      // gather grad to [cout, cols]
      Arr G(Eigen::Index(d.cout) * cols);
#pragma omp parallel for schedule(static)
      for (int n = 0; n < d.n; ++n)
        for (int co = 0; co < d.cout; ++co) {
          const float* src = o.grad.data() + (Eigen::Index(n) * d.cout + co) * plane;
          float* dst = G.data() + Eigen::Index(co) * cols + Eigen::Index(n) * plane;
          for (Eigen::Index i = 0; i < plane; ++i) dst[i] = src[i];
        }
      CMatMap Gm(G.data(), d.cout, cols);
      if (b && b->needs_grad) {
        b->ensure_grad();
        for (int co = 0; co < d.cout; ++co) b->grad[co] += Gm.row(co).sum();
      }
      if (w->needs_grad) {
        w->ensure_grad();
        Arr col(K * cols);
        im2col_batch(x->val.data(), d, col.data());
        MatMap GW(w->grad.data(), d.cout, K);
        CMatMap C(col.data(), K, cols);
        GW.noalias() += Gm * C.transpose();
      }
      if (x->needs_grad) {
        x->ensure_grad();
        Arr gcol(K * cols);
        MatMap GC(gcol.data(), K, cols);
        CMatMap W(w->val.data(), d.cout, K);
        GC.noalias() = W.transpose() * Gm;
        col2im_batch(gcol.data(), d, x->grad.data());
      }
    });
  }
  return out;
}

Var upsample_nearest2x(const Var& x) {
  const int n = x->dim(0), c = x->dim(1), h = x->dim(2), w = x->dim(3);
  Arr v(Eigen::Index(n) * c * 4 * h * w);
  const Eigen::Index planes = Eigen::Index(n) * c;
#pragma omp parallel for schedule(static)
  for (Eigen::Index p = 0; p < planes; ++p) {
    const float* src = x->val.data() + p * h * w;
    float* dst = v.data() + p * 4 * h * w;
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        const float s = src[Eigen::Index(i) * w + j];
        float* d0 = dst + (Eigen::Index(2 * i) * 2 * w + 2 * j);
        d0[0] = s;
        d0[1] = s;
        d0[2 * w] = s;
        d0[2 * w + 1] = s;
      }
  }
  Var out = constant(std::move(v), {n, c, 2 * h, 2 * w});
  if (track({x}))
    attach(out, {x}, [x, planes, h, w](Node& o) {
      x->ensure_grad();
      for (Eigen::Index p = 0; p < planes; ++p) {
        const float* g = o.grad.data() + p * 4 * h * w;
        float* dst = x->grad.data() + p * h * w;
        for (int i = 0; i < h; ++i)
          for (int j = 0; j < w; ++j) {
            const float* g0 = g + (Eigen::Index(2 * i) * 2 * w + 2 * j);
            dst[Eigen::Index(i) * w + j] += g0[0] + g0[1] + g0[2 * w] + g0[2 * w + 1];
          }
      }
    });
  return out;
}

namespace {
Var pool_impl(const Var& x, bool average) {
  const int n = x->dim(0), c = x->dim(1), h = x->dim(2), w = x->dim(3);
  const Eigen::Index plane = Eigen::Index(h) * w;
  const float scale = average ? 1.0f / float(plane) : 1.0f;
  Arr v(Eigen::Index(n) * c);
  for (Eigen::Index p = 0; p < Eigen::Index(n) * c; ++p) v[p] = x->val.segment(p * plane, plane).sum() * scale;
  Var out = constant(std::move(v), {n, c});
  if (track({x}))
    attach(out, {x}, [x, plane, scale](Node& o) {
      x->ensure_grad();
      for (Eigen::Index p = 0; p < o.grad.size(); ++p) x->grad.segment(p * plane, plane) += o.grad[p] * scale;
    });
  return out;
}
}  // namespace

Var global_avg_pool(const Var& x) { return pool_impl(x, true); }
Var global_sum_pool(const Var& x) { return pool_impl(x, false); }

// ---------------------------------------------------------------------------
// batch norm

namespace {

Var bn_impl(const Var& x, const Var& gamma, const Var& beta, const std::vector<int>* cond,
            BnBuffers& buf, bool training) {
  const int n = x->dim(0), c = x->dim(1), h = x->dim(2), w = x->dim(3);
  const Eigen::Index plane = Eigen::Index(h) * w;
  const Eigen::Index m = Eigen::Index(n) * plane;  // samples per channel
  if (!buf.initialized) {
    buf.running_mean = Arr::Zero(c);
    buf.running_var = Arr::Ones(c);
    buf.initialized = true;
  }
  Arr mean(c), invstd(c);
  if (training) {
    for (int ch = 0; ch < c; ++ch) {
      double s = 0.0, s2 = 0.0;
      for (int i = 0; i < n; ++i) {
        const auto seg = x->val.segment((Eigen::Index(i) * c + ch) * plane, plane);
        s += double(seg.sum());
        s2 += double(seg.square().sum());
      }
      const double mu = s / double(m);
      const double var = std::max(0.0, s2 / double(m) - mu * mu);
      mean[ch] = float(mu);
      invstd[ch] = float(1.0 / std::sqrt(var + double(buf.eps)));
      buf.running_mean[ch] = (1.0f - buf.momentum) * buf.running_mean[ch] + buf.momentum * float(mu);
      buf.running_var[ch] = (1.0f - buf.momentum) * buf.running_var[ch] + buf.momentum * float(var);
    }
  } else {
    mean = buf.running_mean;
    invstd = (buf.running_var + buf.eps).sqrt().inverse();
  }

  auto xhat = std::make_shared<Arr>(x->size());
  Arr v(x->size());
  auto gamma_of = [&](int i, int ch) { return cond ? gamma->val[Eigen::Index((*cond)[std::size_t(i)]) * c + ch] : gamma->val[ch]; };
  auto beta_of = [&](int i, int ch) { return cond ? beta->val[Eigen::Index((*cond)[std::size_t(i)]) * c + ch] : beta->val[ch]; };
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const Eigen::Index off = (Eigen::Index(i) * c + ch) * plane;
      const float g = gamma_of(i, ch), bval = beta_of(i, ch);
      for (Eigen::Index k = 0; k < plane; ++k) {
        const float xh = (x->val[off + k] - mean[ch]) * invstd[ch];
        (*xhat)[off + k] = xh;
        v[off + k] = g * xh + bval;
      }
    }

  Var out = constant(std::move(v), x->shape);
  if (track({x, gamma, beta})) {
    std::vector<int> cond_copy = cond ? *cond : std::vector<int>{};
    const bool conditional = cond != nullptr;
    attach(out, {x, gamma, beta},
           [x, gamma, beta, xhat, mean, invstd, n, c, plane, m, training, conditional,
            cond_copy](Node& o) {
             // per-channel sums of dxhat and dxhat*xhat
             for (int ch = 0; ch < c; ++ch) {
               double sum_dxh = 0.0, sum_dxh_xh = 0.0;
               for (int i = 0; i < n; ++i) {
                 const Eigen::Index off = (Eigen::Index(i) * c + ch) * plane;
                 const float g = conditional ? gamma->val[Eigen::Index(cond_copy[std::size_t(i)]) * c + ch]
                                             : gamma->val[ch];
                 for (Eigen::Index k = 0; k < plane; ++k) {
                   const float dxh = o.grad[off + k] * g;
                   sum_dxh += double(dxh);
                   sum_dxh_xh += double(dxh) * double((*xhat)[off + k]);
                 }
               }
               for (int i = 0; i < n; ++i) {
                 const Eigen::Index off = (Eigen::Index(i) * c + ch) * plane;
                 const float g = conditional ? gamma->val[Eigen::Index(cond_copy[std::size_t(i)]) * c + ch]
                                             : gamma->val[ch];
                 if (gamma->needs_grad) {
                   gamma->ensure_grad();
                   beta->ensure_grad();
                   double dg = 0.0, db = 0.0;
                   for (Eigen::Index k = 0; k < plane; ++k) {
                     dg += double(o.grad[off + k]) * double((*xhat)[off + k]);
                     db += double(o.grad[off + k]);
                   }
                   const Eigen::Index row = conditional ? Eigen::Index(cond_copy[std::size_t(i)]) : 0;
                   gamma->grad[row * c + ch] += float(dg);
                   beta->grad[row * c + ch] += float(db);
                 }
                 if (x->needs_grad) {
                   x->ensure_grad();
                   if (training) {
                     const float k1 = float(sum_dxh / double(m));
                     const float k2 = float(sum_dxh_xh / double(m));
                     for (Eigen::Index k = 0; k < plane; ++k) {
                       const float dxh = o.grad[off + k] * g;
                       x->grad[off + k] += invstd[ch] * (dxh - k1 - (*xhat)[off + k] * k2);
                     }
                   } else {
                     for (Eigen::Index k = 0; k < plane; ++k)
                       x->grad[off + k] += o.grad[off + k] * g * invstd[ch];
                   }
                 }
               }
             }
           });
  }
  return out;
}

}  // namespace

Var batchnorm2d(const Var& x, const Var& gamma, const Var& beta, BnBuffers& buf, bool training) {
  return bn_impl(x, gamma, beta, nullptr, buf, training);
}

Var cond_batchnorm2d(const Var& x, const Var& gamma, const Var& beta,
                     const std::vector<int>& condition, BnBuffers& buf, bool training) {
  if (int(condition.size()) != x->dim(0)) throw std::logic_error("cond_batchnorm2d: condition size");
  return bn_impl(x, gamma, beta, &condition, buf, training);
}

Var spectral_scale(const Var& w, const Arr& u, const Arr& v) {
  const int rows = w->dim(0);
  const Eigen::Index cols = w->size() / rows;
  CMatMap W(w->val.data(), rows, cols);
  Eigen::Map<const Eigen::VectorXf> U(u.data(), rows), V(v.data(), cols);
  const float sigma = U.transpose() * (W * V);
  Var out = constant(w->val / sigma, w->shape);
  if (track({w}))
    attach(out, {w}, [w, u, v, sigma, rows, cols](Node& o) {
      w->ensure_grad();
      // d(W/sigma) with sigma = u^T W v, u,v fixed
      const float gw_dot_wsn = (o.grad * (w->val / sigma)).sum();
      MatMap GW(w->grad.data(), rows, cols);
      Eigen::Map<const Eigen::VectorXf> U(u.data(), rows), V(v.data(), cols);
      CMatMap G(o.grad.data(), rows, cols);
      GW.noalias() += G / sigma;
      GW.noalias() -= (gw_dot_wsn / sigma) * (U * V.transpose());
    });
  return out;
}

Var bernoulli_kl_mean(const Arr& q, const Var& p, float eps) {
  const int n = p->dim(0);
  if (q.size() != n) throw std::logic_error("bernoulli_kl_mean: q size mismatch");
  Arr qc = q.min(1.0f - eps).max(eps);
  Arr entropy = qc * qc.log() + (1.0f - qc) * (1.0f - qc).log();
  Var pc = clamp_op(p, eps, 1.0f - eps);
  Var term = add(constant(entropy, {n, 1}),
                 neg(add(mul(constant(qc, {n, 1}), log_op(pc)),
                         mul(constant(Arr(1.0f - qc), {n, 1}),
                             log_op(scalar_add(neg(pc), 1.0f))))));
  return mean_all(term);
}

}  // namespace cfx::ad
