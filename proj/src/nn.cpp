#include "cfx/nn.hpp"

#include <cstring>
#include <fstream>

namespace cfx::nn {

ad::Var ParamSet::add_param(const std::string& name, std::vector<int> shape, ad::Arr init) {
  auto v = ad::leaf(std::move(init), std::move(shape), true);
  params_.emplace_back(name, v);
  return v;
}

void ParamSet::add_buffer(const std::string& name, ad::Arr* buf) {
  buffers_.emplace_back(name, buf);
}

void ParamSet::set_trainable(bool on) {
  for (auto& [name, p] : params_) p->needs_grad = on;
}

void ParamSet::zero_grad() {
  for (auto& [name, p] : params_) p->grad.setZero();
}

std::size_t ParamSet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, p] : params_) n += std::size_t(p->size());
  return n;
}

// ---------------------------------------------------------------------------

void TensorStore::put(const std::string& name, const std::vector<int>& shape, const ad::Arr& data) {
  items[name] = {shape, data};
}

const std::pair<std::vector<int>, ad::Arr>& TensorStore::get(const std::string& name) const {
  auto it = items.find(name);
  if (it == items.end()) throw DataError("checkpoint missing tensor: " + name);
  return it->second;
}

namespace {
constexpr char kMagic[4] = {'C', 'F', 'X', 'T'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put_raw(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T get_raw(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}
}  // namespace

void TensorStore::save(const std::filesystem::path& p) const {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw InputError("cannot write checkpoint: " + p.string());
  out.write(kMagic, 4);
  put_raw(out, kVersion);
  put_raw(out, std::uint64_t(meta_json.size()));
  out.write(meta_json.data(), std::streamsize(meta_json.size()));
  put_raw(out, std::uint32_t(items.size()));
  for (const auto& [name, entry] : items) {
    put_raw(out, std::uint16_t(name.size()));
    out.write(name.data(), std::streamsize(name.size()));
    put_raw(out, std::uint8_t(entry.first.size()));
    for (int d : entry.first) put_raw(out, std::int32_t(d));
    out.write(reinterpret_cast<const char*>(entry.second.data()),
              std::streamsize(sizeof(float) * std::size_t(entry.second.size())));
  }
}

TensorStore TensorStore::load(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw InputError("cannot read checkpoint: " + p.string());
  char magic[4];
  in.read(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw DataError("not a checkpoint file: " + p.string());
  const auto version = get_raw<std::uint32_t>(in);
  if (version != kVersion) throw DataError("unsupported checkpoint version");
  TensorStore ts;
  const auto meta_len = get_raw<std::uint64_t>(in);
  ts.meta_json.resize(meta_len);
  in.read(ts.meta_json.data(), std::streamsize(meta_len));
  const auto count = get_raw<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = get_raw<std::uint16_t>(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const auto ndim = get_raw<std::uint8_t>(in);
    std::vector<int> shape(ndim);
    Eigen::Index total = 1;
    for (auto& d : shape) {
      d = get_raw<std::int32_t>(in);
      total *= d;
    }
    ad::Arr data(total);
    in.read(reinterpret_cast<char*>(data.data()), std::streamsize(sizeof(float) * std::size_t(total)));
    if (!in) throw DataError("truncated checkpoint: " + p.string());
    ts.items[name] = {std::move(shape), std::move(data)};
  }
  return ts;
}

void save_params(const ParamSet& ps, TensorStore& out) {
  for (const auto& [name, p] : ps.params()) out.put(name, p->shape, p->val);
  for (const auto& [name, b] : ps.buffers()) out.put(name, {int(b->size())}, *b);
}

void load_params(ParamSet& ps, const TensorStore& in) {
  for (auto& [name, p] : ps.params()) {
    const auto& [shape, data] = in.get(name);
    if (shape != p->shape) throw DataError("checkpoint shape mismatch for " + name);
    p->val = data;
  }
  for (auto& [name, b] : ps.buffers()) {
    const auto& [shape, data] = in.get(name);
    if (data.size() != b->size()) b->resize(data.size());
    *b = data;
  }
}

// ---------------------------------------------------------------------------

Adam::Adam(ParamSet& ps, float lr_, float b1, float b2) : lr(lr_), beta1(b1), beta2(b2) {
  for (const auto& [name, p] : ps.params())
    slots_.push_back({p, ad::Arr::Zero(p->size()), ad::Arr::Zero(p->size())});
}

void Adam::step() {
  ++t_;
  const float bc1 = 1.0f - std::pow(beta1, float(t_));
  const float bc2 = 1.0f - std::pow(beta2, float(t_));
  for (auto& s : slots_) {
    if (s.p->grad.size() != s.p->val.size()) continue;  // no grad this step
    s.m = beta1 * s.m + (1.0f - beta1) * s.p->grad;
    s.v = beta2 * s.v + (1.0f - beta2) * s.p->grad.square();
    s.p->val -= lr * (s.m / bc1) / ((s.v / bc2).sqrt() + eps);
    s.p->grad.setZero();
  }
}

void Adam::zero_grad() {
  for (auto& s : slots_)
    if (s.p->grad.size() == s.p->val.size()) s.p->grad.setZero();
}

// ---------------------------------------------------------------------------

ad::Arr he_normal(Rng& rng, Eigen::Index n, int fan_in) {
  ad::Arr a(n);
  const float sd = std::sqrt(2.0f / float(fan_in));
  for (Eigen::Index i = 0; i < n; ++i) a[i] = sd * float(rng.normal());
  return a;
}

ad::Arr zeros(Eigen::Index n) { return ad::Arr::Zero(n); }
ad::Arr ones(Eigen::Index n) { return ad::Arr::Ones(n); }

Conv2d::Conv2d(ParamSet& ps, const std::string& name, Rng& rng, int cin, int cout, int k,
               int stride_, int pad_)
    : stride(stride_), pad(pad_) {
  w = ps.add_param(name + ".w", {cout, cin, k, k}, he_normal(rng, Eigen::Index(cout) * cin * k * k, cin * k * k));
  b = ps.add_param(name + ".b", {cout}, zeros(cout));
}

Dense::Dense(ParamSet& ps, const std::string& name, Rng& rng, int in, int out, bool bias) {
  w = ps.add_param(name + ".w", {in, out}, he_normal(rng, Eigen::Index(in) * out, in));
  if (bias) b = ps.add_param(name + ".b", {out}, zeros(out));
}

BatchNorm2d::BatchNorm2d(ParamSet& ps, const std::string& name, int c) {
  gamma = ps.add_param(name + ".gamma", {c}, ones(c));
  beta = ps.add_param(name + ".beta", {c}, zeros(c));
  buf.running_mean = ad::Arr::Zero(c);
  buf.running_var = ad::Arr::Ones(c);
  buf.initialized = true;
  ps.add_buffer(name + ".running_mean", &buf.running_mean);
  ps.add_buffer(name + ".running_var", &buf.running_var);
}

CondBatchNorm2d::CondBatchNorm2d(ParamSet& ps, const std::string& name, int conditions, int c) {
  gamma = ps.add_param(name + ".gamma", {conditions, c}, ones(Eigen::Index(conditions) * c));
  beta = ps.add_param(name + ".beta", {conditions, c}, zeros(Eigen::Index(conditions) * c));
  buf.running_mean = ad::Arr::Zero(c);
  buf.running_var = ad::Arr::Ones(c);
  buf.initialized = true;
  ps.add_buffer(name + ".running_mean", &buf.running_mean);
  ps.add_buffer(name + ".running_var", &buf.running_var);
}

SpectralNorm::SpectralNorm(ParamSet& ps, const std::string& name, Rng& rng, const ad::Var& w,
                           bool enabled_)
    : enabled(enabled_) {
  const int rows = w->dim(0);
  const Eigen::Index cols = w->size() / rows;
  u = ad::Arr(rows);
  v = ad::Arr(cols);
  for (int i = 0; i < rows; ++i) u[i] = float(rng.normal());
  for (Eigen::Index i = 0; i < cols; ++i) v[i] = float(rng.normal());
  u /= std::sqrt(u.square().sum()) + 1e-12f;
  v /= std::sqrt(v.square().sum()) + 1e-12f;
  ps.add_buffer(name + ".sn_u", &u);
  ps.add_buffer(name + ".sn_v", &v);
}

ad::Var SpectralNorm::apply(const ad::Var& w, bool training) {
  if (!enabled) return w;
  const int rows = w->dim(0);
  const Eigen::Index cols = w->size() / rows;
  ad::CMatMap W(w->val.data(), rows, cols);
  Eigen::Map<Eigen::VectorXf> U(u.data(), rows), V(v.data(), cols);
  if (training) {
    V.noalias() = W.transpose() * U;
    V /= V.norm() + 1e-12f;
    U.noalias() = W * V;
    U /= U.norm() + 1e-12f;
  }
  return ad::spectral_scale(w, u, v);
}

}  // namespace cfx::nn
