#include "cfx/classifier.hpp"

#include <json.hpp>

#include <algorithm>
#include <numeric>

namespace cfx {

using nlohmann::json;
using namespace cfx::ad;

BlackBoxClassifier::BlackBoxClassifier(const ClassifierConfig& cfg) : cfg_(cfg) {
  Rng rng(cfg.seed);
  const int c = cfg.base_channels;
  c1_ = nn::Conv2d(params_, "c1", rng, 1, c, 3, 2, 1);
  c2_ = nn::Conv2d(params_, "c2", rng, c, 2 * c, 3, 2, 1);
  c3_ = nn::Conv2d(params_, "c3", rng, 2 * c, 4 * c, 3, 2, 1);
  c4_ = nn::Conv2d(params_, "c4", rng, 4 * c, 8 * c, 3, 2, 1);
  b1_ = nn::BatchNorm2d(params_, "b1", c);
  b2_ = nn::BatchNorm2d(params_, "b2", 2 * c);
  b3_ = nn::BatchNorm2d(params_, "b3", 4 * c);
  b4_ = nn::BatchNorm2d(params_, "b4", 8 * c);
  embedding_dim_ = 8 * c;
  head_ = nn::Dense(params_, "head", rng, embedding_dim_, cfg.num_labels);
}

ad::Var BlackBoxClassifier::embed_node(const ad::Var& x, bool training) {
  Var h = relu(b1_.forward(c1_.forward(x), training));
  h = relu(b2_.forward(c2_.forward(h), training));
  h = relu(b3_.forward(c3_.forward(h), training));
  h = relu(b4_.forward(c4_.forward(h), training));
  return global_avg_pool(h);
}

ad::Var BlackBoxClassifier::logits_node(const ad::Var& x, bool training) {
  return head_.forward(embed_node(x, training));
}

ad::Var BlackBoxClassifier::posterior_node(const ad::Var& x, bool training) {
  return sigmoid(logits_node(x, training));
}

ad::Var images_to_node(const std::vector<const ImageF*>& imgs) {
  const int n = int(imgs.size());
  const int s = int(imgs[0]->rows());
  Arr v(Eigen::Index(n) * s * s);
  for (int i = 0; i < n; ++i)
    for (int r = 0; r < s; ++r)
      for (int c = 0; c < s; ++c) v[(Eigen::Index(i) * s + r) * s + c] = (*imgs[i])(r, c);
  return constant(std::move(v), {n, 1, s, s});
}

Eigen::VectorXd BlackBoxClassifier::posterior(const ImageF& img) {
  return posterior_batch({&img})[0];
}

std::vector<Eigen::VectorXd> BlackBoxClassifier::posterior_batch(
    const std::vector<const ImageF*>& imgs) {
  if (imgs.empty()) return {};
  for (const ImageF* im : imgs)
    if (int(im->rows()) != cfg_.image_size || int(im->cols()) != cfg_.image_size)
      throw InputError("classifier input shape mismatch");
  NoGrad ng;
  Var p = posterior_node(images_to_node(imgs), false);
  std::vector<Eigen::VectorXd> out(imgs.size());
  for (int i = 0; i < int(imgs.size()); ++i) {
    Eigen::VectorXd row(cfg_.num_labels);
    for (int l = 0; l < cfg_.num_labels; ++l) row[l] = double(p->val[Eigen::Index(i) * cfg_.num_labels + l]);
    out[std::size_t(i)] = row;
  }
  return out;
}

ImageF BlackBoxClassifier::input_gradient(const ImageF& img, int label) {
  if (label < 0 || label >= cfg_.num_labels) throw InputError("input_gradient: bad label index");
  const int s = cfg_.image_size;
  if (int(img.rows()) != s || int(img.cols()) != s)
    throw InputError("classifier input shape mismatch");
  params_.set_trainable(false);
  Arr v(Eigen::Index(s) * s);
  for (int r = 0; r < s; ++r)
    for (int c = 0; c < s; ++c) v[Eigen::Index(r) * s + c] = img(r, c);
  Var x = leaf(std::move(v), {1, 1, s, s}, true);
  Var p = posterior_node(x, false);
  Arr pick = Arr::Zero(cfg_.num_labels);
  pick[label] = 1.0f;
  Var target = sum_all(mul(p, constant(pick, {1, cfg_.num_labels})));
  backward(target);
  params_.set_trainable(true);
  ImageF g(s, s);
  for (int r = 0; r < s; ++r)
    for (int c = 0; c < s; ++c) g(r, c) = x->grad[Eigen::Index(r) * s + c];
  return g;
}

Eigen::VectorXf BlackBoxClassifier::embed(const ImageF& img) { return embed_batch({&img})[0]; }

std::vector<Eigen::VectorXf> BlackBoxClassifier::embed_batch(const std::vector<const ImageF*>& imgs) {
  NoGrad ng;
  Var e = embed_node(images_to_node(imgs), false);
  std::vector<Eigen::VectorXf> out(imgs.size());
  for (int i = 0; i < int(imgs.size()); ++i) {
    Eigen::VectorXf row(embedding_dim_);
    for (int d = 0; d < embedding_dim_; ++d) row[d] = e->val[Eigen::Index(i) * embedding_dim_ + d];
    out[std::size_t(i)] = row;
  }
  return out;
}

void BlackBoxClassifier::zero_heads() {
  head_.w->val.setZero();
  head_.b->val.setZero();
}

void BlackBoxClassifier::save(const std::filesystem::path& p) const {
  nn::TensorStore ts;
  nn::save_params(params_, ts);
  json meta{{"kind", "classifier"},
            {"format_version", 1},
            {"image_size", cfg_.image_size},
            {"num_labels", cfg_.num_labels},
            {"base_channels", cfg_.base_channels},
            {"soft_label_sharpness", cfg_.soft_label_sharpness},
            {"seed", cfg_.seed},
            {"trained", trained_}};
  ts.meta_json = meta.dump();
  ts.save(p);
}

BlackBoxClassifier BlackBoxClassifier::load(const std::filesystem::path& p) {
  nn::TensorStore ts = nn::TensorStore::load(p);
  const json meta = json::parse(ts.meta_json);
  if (meta.at("kind").get<std::string>() != "classifier")
    throw DataError("checkpoint is not a classifier: " + p.string());
  ClassifierConfig cfg;
  cfg.image_size = meta.at("image_size").get<int>();
  cfg.num_labels = meta.at("num_labels").get<int>();
  cfg.base_channels = meta.at("base_channels").get<int>();
  cfg.soft_label_sharpness = meta.at("soft_label_sharpness").get<double>();
  cfg.seed = meta.at("seed").get<std::uint64_t>();
  BlackBoxClassifier clf(cfg);
  nn::load_params(clf.params_, ts);
  clf.trained_ = meta.at("trained").get<bool>();
  return clf;
}

std::vector<TrainLogRow> train_classifier(BlackBoxClassifier& clf,
                                          const std::vector<SyntheticSample>& samples,
                                          const std::vector<int>& train_idx,
                                          const ClassifierConfig& cfg) {
  nn::Adam opt(clf.params(), cfg.lr, cfg.beta1, cfg.beta2);
  Rng rng(Rng(cfg.seed).fork("train").next_u64());
  std::vector<int> order = train_idx;
  std::vector<TrainLogRow> log;
  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (int i = int(order.size()) - 1; i > 0; --i)
      std::swap(order[std::size_t(i)], order[std::size_t(rng.uniform_int(0, i))]);
    for (std::size_t off = 0; off + std::size_t(cfg.batch) <= order.size(); off += std::size_t(cfg.batch)) {
      std::vector<const ImageF*> imgs;
      Arr targets(Eigen::Index(cfg.batch) * cfg.num_labels);
      for (int i = 0; i < cfg.batch; ++i) {
        const auto& s = samples[std::size_t(order[off + std::size_t(i)])];
        imgs.push_back(&s.image);
        const double soft =
            1.0 / (1.0 + std::exp(-cfg.soft_label_sharpness * (s.disease_factor - 0.5)));
        targets[Eigen::Index(i) * cfg.num_labels + kLabelDisease] = float(soft);
        targets[Eigen::Index(i) * cfg.num_labels + kLabelForeignObject] = s.fo_present ? 1.0f : 0.0f;
      }
      Var z = clf.logits_node(images_to_node(imgs), true);
      Var t = constant(targets, {cfg.batch, clf.num_labels()});
      Var loss = mean_all(sub(softplus(z), mul(t, z)));
      backward(loss);
      opt.step();
      log.push_back({step++, double(loss->val[0])});
    }
  }
  clf.mark_trained();
  return log;
}

double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  std::vector<int> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](int a, int b) { return scores[std::size_t(a)] < scores[std::size_t(b)]; });
  // rank-sum with midranks for ties
  std::vector<double> rank(scores.size());
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j + 1 < idx.size() &&
           scores[std::size_t(idx[j + 1])] == scores[std::size_t(idx[i])])
      ++j;
    const double mid = 0.5 * double(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[std::size_t(idx[k])] = mid;
    i = j + 1;
  }
  double rank_pos = 0.0;
  long n_pos = 0, n_neg = 0;
  for (std::size_t k = 0; k < scores.size(); ++k) {
    if (labels[k] == 1) {
      rank_pos += rank[k];
      ++n_pos;
    } else {
      ++n_neg;
    }
  }
  if (n_pos == 0 || n_neg == 0) throw DataError("auroc: needs both classes");
  return (rank_pos - 0.5 * double(n_pos) * double(n_pos + 1)) / (double(n_pos) * double(n_neg));
}

}  // namespace cfx
