#include "cfx/explainer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace cfx {

using nlohmann::json;
using namespace cfx::ad;

namespace {

Var images01_node(const std::vector<const ImageF*>& imgs) {
  const int n = int(imgs.size());
  const int s = int(imgs[0]->rows());
  Arr v(Eigen::Index(n) * s * s);
  for (int i = 0; i < n; ++i)
    for (int r = 0; r < s; ++r)
      for (int c = 0; c < s; ++c) v[(Eigen::Index(i) * s + r) * s + c] = (*imgs[i])(r, c);
  return constant(std::move(v), {n, 1, s, s});
}

Var to_pm(const Var& x01) { return scalar_add(scalar_mul(x01, 2.0f), -1.0f); }
Var to01(const Var& xpm) { return scalar_add(scalar_mul(xpm, 0.5f), 0.5f); }

Arr ordinal_bits(const std::vector<int>& bins, int num_bins) {
  const int r = num_bins - 1;
  Arr bits = Arr::Zero(Eigen::Index(bins.size()) * r);
  for (int i = 0; i < int(bins.size()); ++i)
    for (int j = 0; j < bins[std::size_t(i)]; ++j) bits[Eigen::Index(i) * r + j] = 1.0f;
  return bits;
}

ImageF plane_to_image(const Arr& v, Eigen::Index offset, int s) {
  ImageF img(s, s);
  for (int r = 0; r < s; ++r)
    for (int c = 0; c < s; ++c)
      img(r, c) = std::min(1.0f, std::max(0.0f, v[offset + Eigen::Index(r) * s + c]));
  return img;
}

}  // namespace

ExplainerModel::ExplainerModel(const ExplainerConfig& cfg) : cfg_(cfg) {
  Rng rng(cfg.seed);
  const int eb = cfg.enc_base, gb = cfg.gen_base, db = cfg.disc_base;
  const int s8 = cfg.image_size / 8;

  e1_ = nn::Conv2d(eg_params_, "enc.c1", rng, 1, eb, 3, 2, 1);
  e2_ = nn::Conv2d(eg_params_, "enc.c2", rng, eb, 2 * eb, 3, 2, 1);
  e3_ = nn::Conv2d(eg_params_, "enc.c3", rng, 2 * eb, 4 * eb, 3, 2, 1);
  eb1_ = nn::BatchNorm2d(eg_params_, "enc.b1", eb);
  eb2_ = nn::BatchNorm2d(eg_params_, "enc.b2", 2 * eb);
  eb3_ = nn::BatchNorm2d(eg_params_, "enc.b3", 4 * eb);
  e_fc_ = nn::Dense(eg_params_, "enc.fc", rng, 4 * eb * s8 * s8, cfg.latent_dim);

  g_fc_ = nn::Dense(eg_params_, "gen.fc", rng, cfg.latent_dim, 8 * gb * s8 * s8);
  gb1_ = nn::CondBatchNorm2d(eg_params_, "gen.cb1", cfg.num_bins, 8 * gb);
  g1_ = nn::Conv2d(eg_params_, "gen.c1", rng, 8 * gb, 4 * gb, 3, 1, 1);
  gb2_ = nn::CondBatchNorm2d(eg_params_, "gen.cb2", cfg.num_bins, 4 * gb);
  g2_ = nn::Conv2d(eg_params_, "gen.c2", rng, 4 * gb, 2 * gb, 3, 1, 1);
  gb3_ = nn::CondBatchNorm2d(eg_params_, "gen.cb3", cfg.num_bins, 2 * gb);
  g3_ = nn::Conv2d(eg_params_, "gen.c3", rng, 2 * gb, gb, 3, 1, 1);
  gb_out_ = nn::BatchNorm2d(eg_params_, "gen.bout", gb);
  g_out_ = nn::Conv2d(eg_params_, "gen.cout", rng, gb, 1, 3, 1, 1);

  d1_ = nn::Conv2d(d_params_, "disc.c1", rng, 1, db, 3, 2, 1);
  d2_ = nn::Conv2d(d_params_, "disc.c2", rng, db, 2 * db, 3, 2, 1);
  d3_ = nn::Conv2d(d_params_, "disc.c3", rng, 2 * db, 4 * db, 3, 2, 1);
  d4_ = nn::Conv2d(d_params_, "disc.c4", rng, 4 * db, 4 * db, 3, 1, 1);
  d_psi_ = nn::Dense(d_params_, "disc.psi", rng, 4 * db, 1);
  d_embed_ = d_params_.add_param("disc.embed", {cfg.num_bins - 1, 4 * db},
                                 nn::he_normal(rng, Eigen::Index(cfg.num_bins - 1) * 4 * db, 4 * db));

  sn_.emplace_back(d_params_, "disc.c1", rng, d1_.w, cfg.spectral_norm);
  sn_.emplace_back(d_params_, "disc.c2", rng, d2_.w, cfg.spectral_norm);
  sn_.emplace_back(d_params_, "disc.c3", rng, d3_.w, cfg.spectral_norm);
  sn_.emplace_back(d_params_, "disc.c4", rng, d4_.w, cfg.spectral_norm);
  sn_.emplace_back(d_params_, "disc.psi", rng, d_psi_.w, cfg.spectral_norm);
  sn_.emplace_back(d_params_, "disc.embed", rng, d_embed_, cfg.spectral_norm);
}

ad::Var ExplainerModel::encode_node(const ad::Var& x_pm, bool training) {
  Var h = relu(eb1_.forward(e1_.forward(x_pm), training));
  h = relu(eb2_.forward(e2_.forward(h), training));
  h = relu(eb3_.forward(e3_.forward(h), training));
  h = reshape(h, {h->dim(0), int(h->size() / h->dim(0))});
  return e_fc_.forward(h);
}

ad::Var ExplainerModel::generate_node(const ad::Var& z, const std::vector<int>& bins,
                                      bool training) {
  const int gb = cfg_.gen_base, s8 = cfg_.image_size / 8;
  Var h = g_fc_.forward(z);
  h = reshape(h, {z->dim(0), 8 * gb, s8, s8});
  h = upsample_nearest2x(relu(gb1_.forward(h, bins, training)));
  h = g1_.forward(h);
  h = upsample_nearest2x(relu(gb2_.forward(h, bins, training)));
  h = g2_.forward(h);
  h = upsample_nearest2x(relu(gb3_.forward(h, bins, training)));
  h = g3_.forward(h);
  h = relu(gb_out_.forward(h, training));
  return tanh_op(g_out_.forward(h));
}

ad::Var ExplainerModel::disc_features_node(const ad::Var& x_pm, bool training) {
  Var h = leaky_relu(ad::conv2d(x_pm, sn_[0].apply(d1_.w, training), d1_.b, 2, 1), 0.1f);
  h = leaky_relu(ad::conv2d(h, sn_[1].apply(d2_.w, training), d2_.b, 2, 1), 0.1f);
  h = leaky_relu(ad::conv2d(h, sn_[2].apply(d3_.w, training), d3_.b, 2, 1), 0.1f);
  h = leaky_relu(ad::conv2d(h, sn_[3].apply(d4_.w, training), d4_.b, 1, 1), 0.1f);
  return global_sum_pool(h);
}

ad::Var ExplainerModel::disc_logit_node(const ad::Var& x_pm, const std::vector<int>& bins,
                                        bool training) {
  Var phi = disc_features_node(x_pm, training);
  Var psi = ad::dense(phi, sn_[4].apply(d_psi_.w, training), d_psi_.b);
  Var bits = constant(ordinal_bits(bins, cfg_.num_bins), {int(bins.size()), cfg_.num_bins - 1});
  Var proj_embed = ad::dense(bits, sn_[5].apply(d_embed_, training), nullptr);
  return add(psi, rowwise_sum(mul(proj_embed, phi)));
}

ExplainerModel::BatchExplainResult ExplainerModel::explain_batch(
    BlackBoxClassifier& clf, const std::vector<const ImageF*>& xs,
    const std::vector<double>& deltas) {
  if (!trained_) throw StateError("explainer model is not trained");
  if (xs.size() != deltas.size()) throw InputError("explain_batch: size mismatch");
  BatchExplainResult res;
  const int s = cfg_.image_size;
  const std::size_t chunk = 64;
  for (std::size_t off = 0; off < xs.size(); off += chunk) {
    const std::size_t n = std::min(chunk, xs.size() - off);
    std::vector<const ImageF*> part(xs.begin() + long(off), xs.begin() + long(off + n));
    NoGrad ng;
    const auto posts = clf.posterior_batch(part);
    std::vector<int> bins(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double base = posts[i][cfg_.target_label];
      res.base.push_back(base);
      bins[i] = discretize(base, deltas[off + i], cfg_.num_bins).value;
      res.bins.push_back(bins[i]);
    }
    Var x01 = images01_node(part);
    Var z = encode_node(to_pm(x01), false);
    Var xd = to01(generate_node(z, bins, false));
    std::vector<ImageF> imgs;
    std::vector<const ImageF*> img_ptrs;
    for (std::size_t i = 0; i < n; ++i) {
      imgs.push_back(plane_to_image(xd->val, Eigen::Index(i) * s * s, s));
    }
    for (const auto& im : imgs) img_ptrs.push_back(&im);
    const auto achieved = clf.posterior_batch(img_ptrs);
    for (std::size_t i = 0; i < n; ++i) {
      res.counterfactuals.push_back(std::move(imgs[i]));
      res.achieved.push_back(achieved[i][cfg_.target_label]);
    }
  }
  return res;
}

ImageF ExplainerModel::explain(BlackBoxClassifier& clf, const ImageF& x, double delta_shift) {
  auto r = explain_batch(clf, {&x}, {delta_shift});
  return r.counterfactuals[0];
}

ExplanationSeries ExplainerModel::generate_series(BlackBoxClassifier& clf, const ImageF& x,
                                                  const std::vector<double>& delta_grid) {
  if (delta_grid.empty()) throw InputError("generate_series: empty delta grid");
  std::vector<double> deltas = delta_grid;
  std::sort(deltas.begin(), deltas.end());
  std::vector<const ImageF*> xs(deltas.size(), &x);
  auto r = explain_batch(clf, xs, deltas);
  ExplanationSeries series;
  series.input = x;
  series.base_posterior = r.base[0];
  for (std::size_t i = 0; i < deltas.size(); ++i) {
    series.steps.push_back({deltas[i], std::move(r.counterfactuals[i]), r.achieved[i],
                            BinIndex{r.bins[i], cfg_.num_bins}});
  }
  return series;
}

double ExplainerModel::discriminator_logit(const ImageF& x01, int bin) {
  if (bin < 0 || bin >= cfg_.num_bins) throw InputError("discriminator_logit: bad bin");
  NoGrad ng;
  Var logit = disc_logit_node(to_pm(images01_node({&x01})), {bin}, false);
  return double(logit->val[0]);
}

Eigen::VectorXf ExplainerModel::disc_features(const ImageF& x01) {
  NoGrad ng;
  Var phi = disc_features_node(to_pm(images01_node({&x01})), false);
  Eigen::VectorXf out(phi->size());
  for (Eigen::Index i = 0; i < phi->size(); ++i) out[i] = phi->val[i];
  return out;
}

Eigen::MatrixXf ExplainerModel::projection_matrix() {
  NoGrad ng;
  Var v = sn_[5].apply(d_embed_, false);
  const int r = cfg_.num_bins - 1, f = 4 * cfg_.disc_base;
  Eigen::MatrixXf m(r, f);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < f; ++j) m(i, j) = v->val[Eigen::Index(i) * f + j];
  return m;
}

void ExplainerModel::save(const std::filesystem::path& p) const {
  nn::TensorStore ts;
  nn::save_params(eg_params_, ts);
  nn::save_params(d_params_, ts);
  json meta{{"kind", "explainer"},
            {"format_version", 1},
            {"image_size", cfg_.image_size},
            {"num_bins", cfg_.num_bins},
            {"latent_dim", cfg_.latent_dim},
            {"enc_base", cfg_.enc_base},
            {"gen_base", cfg_.gen_base},
            {"disc_base", cfg_.disc_base},
            {"lambda_adv", cfg_.lambda_adv},
            {"lambda_kl", cfg_.lambda_kl},
            {"lambda_identity", cfg_.lambda_identity},
            {"spectral_norm", cfg_.spectral_norm},
            {"cyclic_through_encoder", cfg_.cyclic_through_encoder},
            {"identity", cfg_.identity == IdentityLossKind::carl  ? "carl"
                         : cfg_.identity == IdentityLossKind::l1 ? "l1"
                                                                 : "none"},
            {"target_label", cfg_.target_label},
            {"kl_eps", cfg_.kl_eps},
            {"det_temperature", cfg_.det_temperature},
            {"seed", cfg_.seed},
            {"trained", trained_}};
  ts.meta_json = meta.dump();
  ts.save(p);
}

ExplainerModel ExplainerModel::load(const std::filesystem::path& p) {
  nn::TensorStore ts = nn::TensorStore::load(p);
  const json meta = json::parse(ts.meta_json);
  if (meta.at("kind").get<std::string>() != "explainer")
    throw DataError("checkpoint is not an explainer: " + p.string());
  ExplainerConfig cfg;
  cfg.image_size = meta.at("image_size").get<int>();
  cfg.num_bins = meta.at("num_bins").get<int>();
  cfg.latent_dim = meta.at("latent_dim").get<int>();
  cfg.enc_base = meta.at("enc_base").get<int>();
  cfg.gen_base = meta.at("gen_base").get<int>();
  cfg.disc_base = meta.at("disc_base").get<int>();
  cfg.lambda_adv = meta.at("lambda_adv").get<float>();
  cfg.lambda_kl = meta.at("lambda_kl").get<float>();
  cfg.lambda_identity = meta.at("lambda_identity").get<float>();
  cfg.spectral_norm = meta.at("spectral_norm").get<bool>();
  cfg.cyclic_through_encoder = meta.at("cyclic_through_encoder").get<bool>();
  const std::string id = meta.at("identity").get<std::string>();
  cfg.identity = id == "carl" ? IdentityLossKind::carl
                              : (id == "l1" ? IdentityLossKind::l1 : IdentityLossKind::none);
  cfg.target_label = meta.at("target_label").get<int>();
  cfg.kl_eps = meta.at("kl_eps").get<float>();
  cfg.det_temperature = meta.at("det_temperature").get<float>();
  cfg.seed = meta.at("seed").get<std::uint64_t>();
  ExplainerModel model(cfg);
  nn::load_params(model.eg_params_, ts);
  nn::load_params(model.d_params_, ts);
  model.trained_ = meta.at("trained").get<bool>();
  return model;
}

// ---------------------------------------------------------------------------
// losses

double loss_kl_condition(double achieved, double desired, double eps) {
  const double q = std::clamp(desired, eps, 1.0 - eps);
  const double p = std::clamp(achieved, eps, 1.0 - eps);
  return q * std::log(q / p) + (1.0 - q) * std::log((1.0 - q) / (1.0 - p));
}

double loss_carl(const ImageF& x, const ImageF& x_prime, const MaskI& seg, const ImageF* det_x,
                 const ImageF* det_x_prime, double eps) {
  if (seg.size() == 0) throw ConfigError("loss_carl: empty segmentation");
  if (x.rows() != x_prime.rows() || x.cols() != x_prime.cols() || x.rows() != seg.rows() ||
      x.cols() != seg.cols())
    throw InputError("loss_carl: spatial shapes differ");
  if ((det_x == nullptr) != (det_x_prime == nullptr))
    throw InputError("loss_carl: both detection masks or neither");

  std::set<int> labels;
  for (int y = 0; y < seg.rows(); ++y)
    for (int c = 0; c < seg.cols(); ++c) labels.insert(seg(y, c));

  double total = 0.0;
  for (int j : labels) {
    double err = 0.0;
    long count = 0;
    for (int y = 0; y < seg.rows(); ++y)
      for (int c = 0; c < seg.cols(); ++c)
        if (seg(y, c) == j) {
          err += std::abs(double(x(y, c)) - double(x_prime(y, c)));
          ++count;
        }
    if (count > 0) total += err / double(count);
  }
  if (det_x && det_x_prime) {
    double kl = 0.0;
    for (int y = 0; y < seg.rows(); ++y)
      for (int c = 0; c < seg.cols(); ++c)
        kl += loss_kl_condition(double((*det_x_prime)(y, c)), double((*det_x)(y, c)), eps);
    total += kl / double(seg.size());
  }
  return total;
}

double loss_discriminator_value(const std::vector<double>& real_logits,
                                const std::vector<double>& fake_logits) {
  double lr = 0.0, lf = 0.0;
  for (double v : real_logits) lr += std::max(0.0, 1.0 - v);
  for (double v : fake_logits) lf += std::max(0.0, 1.0 + v);
  return lr / double(real_logits.size()) + lf / double(fake_logits.size());
}

double loss_generator_adv_value(const std::vector<double>& fake_logits) {
  double s = 0.0;
  for (double v : fake_logits) s -= v;
  return s / double(fake_logits.size());
}

double loss_identity_value(ExplainerModel& model, BlackBoxClassifier& clf,
                           const SyntheticSample& s, double delta_shift) {
  const ImageF x0 = model.explain(clf, s.image, 0.0);
  const ImageF xd = model.explain(clf, s.image, delta_shift);
  const ImageF xc = model.explain(clf, xd, -delta_shift);
  const ImageF det = oracle_detect(s.image);
  const ImageF det0 = oracle_detect(x0);
  const ImageF detc = oracle_detect(xc);
  return loss_carl(s.image, x0, s.seg_mask, &det, &det0) +
         loss_carl(s.image, xc, s.seg_mask, &det, &detc);
}

// ---------------------------------------------------------------------------
// training

namespace {

struct BatchDraw {
  std::vector<int> ids;
  std::vector<int> source_bins;
  std::vector<int> target_bins;
  Arr desired;  // [batch]
  std::vector<double> delta;
};

BatchDraw draw_batch(const BinnedDataset& binned, const std::vector<double>& posterior, int batch,
                     int num_bins, float eps, Rng& rng, bool with_targets) {
  std::vector<int> nonempty;
  for (int b = 0; b < int(binned.bins.size()); ++b)
    if (!binned.bins[std::size_t(b)].empty()) nonempty.push_back(b);
  BatchDraw d;
  d.desired = Arr::Zero(batch);
  for (int i = 0; i < batch; ++i) {
    const int sb = nonempty[std::size_t(rng.uniform_int(0, int(nonempty.size()) - 1))];
    const auto& bin = binned.bins[std::size_t(sb)];
    const int id = bin[std::size_t(rng.uniform_int(0, int(bin.size()) - 1))];
    d.ids.push_back(id);
    d.source_bins.push_back(discretize(posterior[std::size_t(id)], 0.0, num_bins).value);
    if (with_targets) {
      const int tb = int(rng.uniform_int(0, num_bins - 1));
      d.target_bins.push_back(tb);
      const double p = std::clamp((tb + rng.uniform()) / num_bins, double(eps), 1.0 - double(eps));
      d.desired[i] = float(p);
      d.delta.push_back(p - posterior[std::size_t(id)]);
    }
  }
  return d;
}

struct CarlBatchContext {
  Arr x01;                     // [n*s*s]
  std::vector<Arr> seg_masks;  // per label
  std::vector<Arr> seg_inv_counts;
  Arr det_q;
  Arr support;
};

CarlBatchContext build_carl_context(const std::vector<SyntheticSample>& samples,
                                    const std::vector<int>& ids, int s) {
  const int n = int(ids.size());
  const Eigen::Index plane = Eigen::Index(s) * s;
  CarlBatchContext ctx;
  ctx.x01 = Arr::Zero(Eigen::Index(n) * plane);
  ctx.det_q = Arr::Zero(Eigen::Index(n) * plane);
  ctx.support = Arr::Zero(Eigen::Index(n) * plane);
  ctx.seg_masks.assign(3, Arr::Zero(Eigen::Index(n) * plane));
  ctx.seg_inv_counts.assign(3, Arr::Zero(n));
  for (int i = 0; i < n; ++i) {
    const auto& smp = samples[std::size_t(ids[std::size_t(i)])];
    const ImageF det = oracle_detect(smp.image);
    std::array<long, 3> counts{0, 0, 0};
    for (int r = 0; r < s; ++r)
      for (int c = 0; c < s; ++c) {
        const Eigen::Index at = Eigen::Index(i) * plane + Eigen::Index(r) * s + c;
        ctx.x01[at] = smp.image(r, c);
        ctx.det_q[at] = det(r, c);
        const int lbl = smp.seg_mask(r, c);
        ctx.seg_masks[std::size_t(lbl)][at] = 1.0f;
        ++counts[std::size_t(lbl)];
        if (lbl != kSegBackground) ctx.support[at] = 1.0f;
      }
    for (int l = 0; l < 3; ++l)
      if (counts[std::size_t(l)] > 0) ctx.seg_inv_counts[std::size_t(l)][i] = 1.0f / float(counts[std::size_t(l)]);
  }
  return ctx;
}

}  // namespace

ExplainerTrainResult train_explainer(ExplainerModel& model, BlackBoxClassifier& clf,
                                     const std::vector<SyntheticSample>& samples,
                                     const BinnedDataset& binned, const ExplainerConfig& cfg,
                                     const std::optional<std::filesystem::path>& out_dir) {
  if (!clf.trained()) throw StateError("train_explainer: classifier is not trained");
  if (!binned.empty.empty()) {
    std::ostringstream msg;
    msg << "train_explainer: empty condition bins {";
    for (std::size_t i = 0; i < binned.empty.size(); ++i)
      msg << (i ? "," : "") << binned.empty[i];
    msg << "}; every bin needs coverage";
    throw ConfigError(msg.str());
  }
  const int s = cfg.image_size, nb = cfg.num_bins;
  const Eigen::Index plane = Eigen::Index(s) * s;
  const SynthLevels lv;

  // posteriors of the frozen classifier over the pool
  std::vector<double> posterior(samples.size(), 0.0);
  {
    std::vector<const ImageF*> ptrs;
    std::vector<int> ids;
    for (const auto& bin : binned.bins)
      for (int id : bin) {
        ids.push_back(id);
        ptrs.push_back(&samples[std::size_t(id)].image);
      }
    for (std::size_t off = 0; off < ptrs.size(); off += 128) {
      const std::size_t n = std::min(std::size_t(128), ptrs.size() - off);
      std::vector<const ImageF*> part(ptrs.begin() + long(off), ptrs.begin() + long(off + n));
      const auto posts = clf.posterior_batch(part);
      for (std::size_t i = 0; i < n; ++i)
        posterior[std::size_t(ids[off + i])] = posts[i][cfg.target_label];
    }
  }

  clf.params().set_trainable(false);
  nn::Adam opt_eg(model.eg_params(), cfg.lr, cfg.beta1, cfg.beta2);
  nn::Adam opt_d(model.d_params(), cfg.lr, cfg.beta1, cfg.beta2);
  Rng rng(Rng(cfg.seed).fork("train-explainer").next_u64());

  Arr target_onehot = Arr::Zero(clf.num_labels());
  target_onehot[cfg.target_label] = 1.0f;

  auto snapshot = [&]() {
    auto ts = std::make_pair(nn::TensorStore{}, nn::TensorStore{});
    nn::save_params(model.eg_params(), ts.first);
    nn::save_params(model.d_params(), ts.second);
    return ts;
  };
  auto last_good = snapshot();
  int last_good_step = 0;

  auto restore_and_abort = [&](int step, const std::string& which) {
    nn::load_params(model.eg_params(), last_good.first);
    nn::load_params(model.d_params(), last_good.second);
    if (out_dir) {
      model.save(*out_dir / "explainer_lastgood.ckpt");
    }
    clf.params().set_trainable(true);
    throw StateError("train_explainer: non-finite " + which + " loss at step " +
                     std::to_string(step) + "; restored parameters from step " +
                     std::to_string(last_good_step));
  };

  auto write_grid = [&](int step) {
    if (!out_dir) return;
    std::filesystem::create_directories(*out_dir / "grids");
    NoGrad ng;
    const int rows = 4;
    std::vector<int> probe_ids;
    for (int b = 0; b < nb && int(probe_ids.size()) < rows; b += std::max(1, nb / rows))
      if (!binned.bins[std::size_t(b)].empty()) probe_ids.push_back(binned.bins[std::size_t(b)][0]);
    const int cols = nb + 1;
    ImageF grid = ImageF::Zero(int(probe_ids.size()) * (s + 2), cols * (s + 2));
    for (int r = 0; r < int(probe_ids.size()); ++r) {
      const auto& smp = samples[std::size_t(probe_ids[std::size_t(r)])];
      grid.block(r * (s + 2), 0, s, s) = smp.image;
      std::vector<const ImageF*> xs(std::size_t(nb), &smp.image);
      Var x01 = images01_node(xs);
      Var z = model.encode_node(to_pm(x01), false);
      std::vector<int> bins(static_cast<std::size_t>(nb), 0);
      for (int b = 0; b < nb; ++b) bins[std::size_t(b)] = b;
      Var xd = to01(model.generate_node(z, bins, false));
      for (int b = 0; b < nb; ++b)
        grid.block(r * (s + 2), (b + 1) * (s + 2), s, s) =
            plane_to_image(xd->val, Eigen::Index(b) * plane, s);
    }
    char name[32];
    std::snprintf(name, sizeof(name), "step_%06d.pgm", step);
    write_pgm(*out_dir / "grids" / name, grid);
  };

  ExplainerTrainResult result;
  std::ofstream log_csv;
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    log_csv.open(*out_dir / "train_log.csv");
    log_csv << "step,d_loss,g_adv,g_kl,g_identity,g_total\n";
  }

  const bool use_identity =
      cfg.identity != IdentityLossKind::none && cfg.lambda_identity > 0.0f;

  for (int step = 1; step <= cfg.steps; ++step) {
    // --- discriminator updates
    double d_loss_acc = 0.0;
    model.eg_params().set_trainable(false);
    for (int k = 0; k < cfg.n_dis; ++k) {
      auto real = draw_batch(binned, posterior, cfg.batch, nb, cfg.kl_eps, rng, false);
      auto fake_src = draw_batch(binned, posterior, cfg.batch, nb, cfg.kl_eps, rng, true);
      Arr fake_pm;
      {
        NoGrad ng;
        std::vector<const ImageF*> xs;
        for (int id : fake_src.ids) xs.push_back(&samples[std::size_t(id)].image);
        Var z = model.encode_node(to_pm(images01_node(xs)), true);
        Var xf = model.generate_node(z, fake_src.target_bins, true);
        fake_pm = xf->val;
      }
      std::vector<const ImageF*> xr;
      for (int id : real.ids) xr.push_back(&samples[std::size_t(id)].image);
      Var logit_real = model.disc_logit_node(to_pm(images01_node(xr)), real.source_bins, true);
      Var logit_fake = model.disc_logit_node(
          constant(fake_pm, {cfg.batch, 1, s, s}), fake_src.target_bins, true);
      Var d_loss = add(mean_all(relu(scalar_add(neg(logit_real), 1.0f))),
                       mean_all(relu(scalar_add(logit_fake, 1.0f))));
      backward(d_loss);
      opt_d.step();
      d_loss_acc += double(d_loss->val[0]);
      if (!std::isfinite(d_loss->val[0])) restore_and_abort(step, "discriminator");
    }
    model.eg_params().set_trainable(true);

    // --- encoder + generator update
    model.d_params().set_trainable(false);
    auto gb = draw_batch(binned, posterior, cfg.batch, nb, cfg.kl_eps, rng, true);
    std::vector<const ImageF*> xs;
    for (int id : gb.ids) xs.push_back(&samples[std::size_t(id)].image);
    Var x01 = images01_node(xs);
    Var x_pm = to_pm(x01);
    Var z = model.encode_node(x_pm, true);
    Var xd_pm = model.generate_node(z, gb.target_bins, true);
    Var adv = neg(mean_all(model.disc_logit_node(xd_pm, gb.target_bins, false)));

    Var xd01 = to01(xd_pm);
    Var post = clf.posterior_node(xd01, false);
    Var p_target = rowwise_sum(mul(post, constant(
        [&] {
          Arr m(Eigen::Index(cfg.batch) * clf.num_labels());
          for (int i = 0; i < cfg.batch; ++i)
            for (int l = 0; l < clf.num_labels(); ++l)
              m[Eigen::Index(i) * clf.num_labels() + l] = target_onehot[l];
          return m;
        }(),
        {cfg.batch, clf.num_labels()})));
    Var kl = bernoulli_kl_mean(gb.desired, p_target, cfg.kl_eps);

    Var total = add(scalar_mul(adv, cfg.lambda_adv), scalar_mul(kl, cfg.lambda_kl));
    Var identity;
    if (use_identity) {
      // self reconstruction in the source bin, cyclic reconstruction back
      // from the achieved posterior minus delta
      Var x0_pm = model.generate_node(z, gb.source_bins, true);
      std::vector<int> back_bins(static_cast<std::size_t>(cfg.batch), 0);
      for (int i = 0; i < cfg.batch; ++i)
        back_bins[std::size_t(i)] =
            discretize(double(p_target->val[i]), -gb.delta[std::size_t(i)], nb).value;
      Var z2 = model.encode_node(cfg.cyclic_through_encoder ? xd_pm : detach(xd_pm), true);
      Var xc_pm = model.generate_node(z2, back_bins, true);
      if (cfg.identity == IdentityLossKind::carl) {
        const CarlBatchContext ctx = build_carl_context(samples, gb.ids, s);
        Var x01c = constant(ctx.x01, {cfg.batch, 1, s, s});
        auto carl_of = [&](const Var& recon_pm) {
          Var recon01 = to01(recon_pm);
          Var diff = abs_op(sub(recon01, x01c));
          Var seg_total;
          for (int l = 0; l < 3; ++l) {
            Var masked = mul(diff, constant(ctx.seg_masks[std::size_t(l)], diff->shape));
            Var per = row_scale_const(rowwise_sum(reshape(masked, {cfg.batch, int(plane)})),
                                      ctx.seg_inv_counts[std::size_t(l)]);
            seg_total = seg_total ? add(seg_total, per) : per;
          }
          Var det_p = soft_detect_node(recon01, ctx.support, lv.fo_threshold, cfg.det_temperature);
          Var det_kl = bernoulli_kl_mean(ctx.det_q, reshape(det_p, {int(det_p->size()), 1}),
                                         cfg.kl_eps);
          return add(mean_all(seg_total), det_kl);
        };
        identity = add(carl_of(x0_pm), carl_of(xc_pm));
      } else {
        Var x01c = constant(
            [&] {
              Arr v(Eigen::Index(cfg.batch) * plane);
              for (int i = 0; i < cfg.batch; ++i) {
                const auto& smp = samples[std::size_t(gb.ids[std::size_t(i)])];
                for (int r = 0; r < s; ++r)
                  for (int c = 0; c < s; ++c)
                    v[Eigen::Index(i) * plane + Eigen::Index(r) * s + c] = smp.image(r, c);
              }
              return v;
            }(),
            {cfg.batch, 1, s, s});
        identity = add(mean_all(abs_op(sub(to01(x0_pm), x01c))),
                       mean_all(abs_op(sub(to01(xc_pm), x01c))));
      }
      total = add(total, scalar_mul(identity, cfg.lambda_identity));
    }
    backward(total);
    opt_eg.step();
    model.d_params().set_trainable(true);

    ExplainerLogRow row;
    row.step = step;
    row.d_loss = d_loss_acc / cfg.n_dis;
    row.g_adv = double(adv->val[0]);
    row.g_kl = double(kl->val[0]);
    row.g_identity = identity ? double(identity->val[0]) : 0.0;
    row.g_total = double(total->val[0]);
    result.log.push_back(row);
    if (log_csv)
      log_csv << row.step << "," << row.d_loss << "," << row.g_adv << "," << row.g_kl << ","
              << row.g_identity << "," << row.g_total << "\n";

    if (!std::isfinite(row.g_total)) restore_and_abort(step, "generator");
    if (step % cfg.checkpoint_every == 0) {
      last_good = snapshot();
      last_good_step = step;
      if (out_dir) model.save(*out_dir / "explainer_lastgood.ckpt");
    }
    if (cfg.grid_every > 0 && step % cfg.grid_every == 0) write_grid(step);
  }
  write_grid(cfg.steps);
  clf.params().set_trainable(true);
  model.mark_trained();
  return result;
}

}  // namespace cfx
