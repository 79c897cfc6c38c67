#pragma once

#include <map>
#include <string>

#include "cfx/ops.hpp"
#include "cfx/util.hpp"

namespace cfx::nn {

// Named parameters and persistent buffers of one network.
class ParamSet {
 public:
  ad::Var add_param(const std::string& name, std::vector<int> shape, ad::Arr init);
  void add_buffer(const std::string& name, ad::Arr* buf);

  void set_trainable(bool on);
  void zero_grad();
  std::size_t parameter_count() const;

  const std::vector<std::pair<std::string, ad::Var>>& params() const { return params_; }
  const std::vector<std::pair<std::string, ad::Arr*>>& buffers() const { return buffers_; }

 private:
  std::vector<std::pair<std::string, ad::Var>> params_;
  std::vector<std::pair<std::string, ad::Arr*>> buffers_;
};

// Versioned on-disk container for named tensors plus a JSON metadata blob.
struct TensorStore {
  std::map<std::string, std::pair<std::vector<int>, ad::Arr>> items;
  std::string meta_json = "{}";

  void put(const std::string& name, const std::vector<int>& shape, const ad::Arr& data);
  const std::pair<std::vector<int>, ad::Arr>& get(const std::string& name) const;

  void save(const std::filesystem::path& p) const;
  static TensorStore load(const std::filesystem::path& p);
};

void save_params(const ParamSet& ps, TensorStore& out);
void load_params(ParamSet& ps, const TensorStore& in);

struct Adam {
  float lr = 2e-4f, beta1 = 0.0f, beta2 = 0.9f, eps = 1e-8f;
  Adam(ParamSet& ps, float lr_, float b1, float b2);
  void step();
  void zero_grad();

 private:
  struct Slot {
    ad::Var p;
    ad::Arr m, v;
  };
  std::vector<Slot> slots_;
  long t_ = 0;
};

// initializers
ad::Arr he_normal(Rng& rng, Eigen::Index n, int fan_in);
ad::Arr zeros(Eigen::Index n);
ad::Arr ones(Eigen::Index n);

struct Conv2d {
  ad::Var w, b;
  int stride = 1, pad = 1;
  Conv2d() = default;
  Conv2d(ParamSet& ps, const std::string& name, Rng& rng, int cin, int cout, int k, int stride,
         int pad);
  ad::Var forward(const ad::Var& x) const { return ad::conv2d(x, w, b, stride, pad); }
};

struct Dense {
  ad::Var w, b;
  Dense() = default;
  Dense(ParamSet& ps, const std::string& name, Rng& rng, int in, int out, bool bias = true);
  ad::Var forward(const ad::Var& x) const { return ad::dense(x, w, b); }
};

struct BatchNorm2d {
  ad::Var gamma, beta;
  ad::BnBuffers buf;
  BatchNorm2d() = default;
  BatchNorm2d(ParamSet& ps, const std::string& name, int c);
  ad::Var forward(const ad::Var& x, bool training) {
    return ad::batchnorm2d(x, gamma, beta, buf, training);
  }
};

struct CondBatchNorm2d {
  ad::Var gamma, beta;
  ad::BnBuffers buf;
  CondBatchNorm2d() = default;
  CondBatchNorm2d(ParamSet& ps, const std::string& name, int conditions, int c);
  ad::Var forward(const ad::Var& x, const std::vector<int>& cond, bool training) {
    return ad::cond_batchnorm2d(x, gamma, beta, cond, buf, training);
  }
};

// Spectral normalization state for one weight; one power iteration per
// training forward, identity when disabled.
struct SpectralNorm {
  ad::Arr u, v;
  bool enabled = true;
  SpectralNorm() = default;
  SpectralNorm(ParamSet& ps, const std::string& name, Rng& rng, const ad::Var& w, bool enabled);
  ad::Var apply(const ad::Var& w, bool training);
};

}  // namespace cfx::nn
