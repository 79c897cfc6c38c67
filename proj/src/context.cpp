#include "cfx/context.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>

namespace cfx {

using nlohmann::json;
using namespace cfx::ad;

MaskI oracle_segment(const SyntheticSample& s) { return s.seg_mask; }

namespace {

MaskI majority3x3(const MaskI& m, int num_labels) {
  MaskI out = m;
  for (int y = 0; y < m.rows(); ++y)
    for (int x = 0; x < m.cols(); ++x) {
      int count[8] = {0};
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= m.rows() || xx < 0 || xx >= m.cols()) continue;
          ++count[m(yy, xx)];
        }
      int best = m(y, x);
      for (int l = 0; l < num_labels; ++l)
        if (count[l] > count[best]) best = l;
      out(y, x) = best;
    }
  return out;
}

MaskI dilate3x3(const MaskI& m) {
  MaskI out = MaskI::Zero(m.rows(), m.cols());
  for (int y = 0; y < m.rows(); ++y)
    for (int x = 0; x < m.cols(); ++x) {
      int v = 0;
      for (int dy = -1; dy <= 1 && !v; ++dy)
        for (int dx = -1; dx <= 1 && !v; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy >= 0 && yy < m.rows() && xx >= 0 && xx < m.cols() && m(yy, xx)) v = 1;
        }
      out(y, x) = v;
    }
  return out;
}

MaskI erode3x3(const MaskI& m) {
  MaskI out = MaskI::Zero(m.rows(), m.cols());
  for (int y = 0; y < m.rows(); ++y)
    for (int x = 0; x < m.cols(); ++x) {
      int v = 1;
      for (int dy = -1; dy <= 1 && v; ++dy)
        for (int dx = -1; dx <= 1 && v; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= m.rows() || xx < 0 || xx >= m.cols() || !m(yy, xx)) v = 0;
        }
      out(y, x) = v;
    }
  return out;
}

}  // namespace

MaskI oracle_segment(const ImageF& img, const SynthLevels& lv) {
  MaskI m(img.rows(), img.cols());
  for (int y = 0; y < img.rows(); ++y)
    for (int x = 0; x < img.cols(); ++x) {
      const float v = img(y, x);
      if (v >= lv.fo_threshold)
        m(y, x) = kSegThorax;  // foreign objects sit on the lung field
      else if (v >= lv.heart_threshold)
        m(y, x) = kSegEllipse;
      else if (v >= lv.thorax_threshold)
        m(y, x) = kSegThorax;
      else
        m(y, x) = kSegBackground;
    }
  return majority3x3(m, 3);
}

ImageF oracle_detect(const ImageF& img, const SynthLevels& lv) {
  MaskI hot = MaskI::Zero(img.rows(), img.cols());
  for (int y = 0; y < img.rows(); ++y)
    for (int x = 0; x < img.cols(); ++x)
      hot(y, x) = (img(y, x) > lv.fo_threshold && img(y, x) >= lv.thorax_threshold) ? 1 : 0;
  hot = erode3x3(dilate3x3(hot));  // 3x3 closing
  ImageF probs = ImageF::Zero(img.rows(), img.cols());
  for (int y = 0; y < img.rows(); ++y)
    for (int x = 0; x < img.cols(); ++x) probs(y, x) = float(hot(y, x));
  return probs;
}

ad::Var soft_detect_node(const ad::Var& x, const ad::Arr& support, float threshold,
                         float temperature) {
  Var shifted = scalar_mul(scalar_add(x, -threshold), 1.0f / temperature);
  Var probs = sigmoid(shifted);
  return mul(probs, constant(support, x->shape));
}

ImageF soft_detect(const ImageF& img, const MaskI& seg, const SynthLevels& lv, float temperature) {
  ImageF out(img.rows(), img.cols());
  for (int y = 0; y < img.rows(); ++y)
    for (int x = 0; x < img.cols(); ++x) {
      const float s = seg(y, x) != kSegBackground ? 1.0f : 0.0f;
      out(y, x) = s / (1.0f + std::exp(-(img(y, x) - lv.fo_threshold) / temperature));
    }
  return out;
}

double mask_iou(const MaskI& a, const MaskI& b, int label) {
  long inter = 0, uni = 0;
  for (int y = 0; y < a.rows(); ++y)
    for (int x = 0; x < a.cols(); ++x) {
      const bool pa = a(y, x) == label, pb = b(y, x) == label;
      inter += pa && pb;
      uni += pa || pb;
    }
  return uni == 0 ? 1.0 : double(inter) / double(uni);
}

// ---------------------------------------------------------------------------

ad::Var softmax_ce_pixelwise(const ad::Var& logits, const std::vector<int>& labels) {
  const int n = logits->dim(0), l = logits->dim(1), h = logits->dim(2), w = logits->dim(3);
  const Eigen::Index plane = Eigen::Index(h) * w;
  if (Eigen::Index(labels.size()) != Eigen::Index(n) * plane)
    throw ConfigError("softmax_ce_pixelwise: label count does not match pixels");
  const Eigen::Index total = Eigen::Index(n) * plane;

  // probs and loss
  auto probs = std::make_shared<Arr>(logits->size());
  double loss_acc = 0.0;
  for (Eigen::Index i = 0; i < total; ++i) {
    const Eigen::Index ni = i / plane, pi = i % plane;
    float mx = -1e30f;
    for (int c = 0; c < l; ++c) mx = std::max(mx, logits->val[(ni * l + c) * plane + pi]);
    float denom = 0.0f;
    for (int c = 0; c < l; ++c) denom += std::exp(logits->val[(ni * l + c) * plane + pi] - mx);
    const int y = labels[std::size_t(i)];
    for (int c = 0; c < l; ++c) {
      const float p = std::exp(logits->val[(ni * l + c) * plane + pi] - mx) / denom;
      (*probs)[(ni * l + c) * plane + pi] = p;
      if (c == y) loss_acc -= std::log(std::max(p, 1e-12f));
    }
  }
  Arr v(1);
  v[0] = float(loss_acc / double(total));
  Var out = constant(std::move(v), {1});
  if (grad_enabled() && logits->needs_grad) {
    out->needs_grad = true;
    out->parents = {logits};
    auto lbl = labels;
    out->backprop = [logits, probs, lbl, n, l, plane, total](Node& o) {
      logits->ensure_grad();
      const float g = o.grad[0] / float(total);
      for (Eigen::Index i = 0; i < total; ++i) {
        const Eigen::Index ni = i / plane, pi = i % plane;
        const int y = lbl[std::size_t(i)];
        for (int c = 0; c < l; ++c) {
          const float p = (*probs)[(ni * l + c) * plane + pi];
          logits->grad[(ni * l + c) * plane + pi] += g * (p - (c == y ? 1.0f : 0.0f));
        }
      }
    };
  }
  return out;
}

LearnedSegmenter::LearnedSegmenter(const SegmenterConfig& cfg) : cfg_(cfg) {
  Rng rng(cfg.seed);
  const int c = cfg.base_channels;
  c1_ = nn::Conv2d(params_, "c1", rng, 1, c, 3, 1, 1);
  c2_ = nn::Conv2d(params_, "c2", rng, c, 2 * c, 3, 2, 1);
  c3_ = nn::Conv2d(params_, "c3", rng, 2 * c, 2 * c, 3, 1, 1);
  c4_ = nn::Conv2d(params_, "c4", rng, 2 * c, c, 3, 1, 1);
  c5_ = nn::Conv2d(params_, "c5", rng, c, cfg.num_labels, 3, 1, 1);
  b1_ = nn::BatchNorm2d(params_, "b1", c);
  b2_ = nn::BatchNorm2d(params_, "b2", 2 * c);
  b3_ = nn::BatchNorm2d(params_, "b3", 2 * c);
  b4_ = nn::BatchNorm2d(params_, "b4", c);
}

ad::Var LearnedSegmenter::logits_node(const ad::Var& x, bool training) {
  Var h = relu(b1_.forward(c1_.forward(x), training));
  h = relu(b2_.forward(c2_.forward(h), training));
  h = relu(b3_.forward(c3_.forward(h), training));
  h = upsample_nearest2x(h);
  h = relu(b4_.forward(c4_.forward(h), training));
  return c5_.forward(h);
}

MaskI LearnedSegmenter::segment(const ImageF& img) {
  NoGrad ng;
  const int s = cfg_.image_size;
  Arr v(Eigen::Index(s) * s);
  for (int r = 0; r < s; ++r)
    for (int c = 0; c < s; ++c) v[Eigen::Index(r) * s + c] = img(r, c);
  Var logits = logits_node(constant(std::move(v), {1, 1, s, s}), false);
  MaskI m(s, s);
  const Eigen::Index plane = Eigen::Index(s) * s;
  for (Eigen::Index p = 0; p < plane; ++p) {
    int best = 0;
    for (int c = 1; c < cfg_.num_labels; ++c)
      if (logits->val[Eigen::Index(c) * plane + p] > logits->val[Eigen::Index(best) * plane + p])
        best = c;
    m(int(p / s), int(p % s)) = best;
  }
  return m;
}

void LearnedSegmenter::save(const std::filesystem::path& p) const {
  nn::TensorStore ts;
  nn::save_params(params_, ts);
  json meta{{"kind", "segmenter"},
            {"format_version", 1},
            {"image_size", cfg_.image_size},
            {"num_labels", cfg_.num_labels},
            {"base_channels", cfg_.base_channels},
            {"seed", cfg_.seed}};
  ts.meta_json = meta.dump();
  ts.save(p);
}

LearnedSegmenter LearnedSegmenter::load(const std::filesystem::path& p) {
  nn::TensorStore ts = nn::TensorStore::load(p);
  const json meta = json::parse(ts.meta_json);
  if (meta.at("kind").get<std::string>() != "segmenter")
    throw DataError("checkpoint is not a segmenter: " + p.string());
  SegmenterConfig cfg;
  cfg.image_size = meta.at("image_size").get<int>();
  cfg.num_labels = meta.at("num_labels").get<int>();
  cfg.base_channels = meta.at("base_channels").get<int>();
  cfg.seed = meta.at("seed").get<std::uint64_t>();
  LearnedSegmenter seg(cfg);
  nn::load_params(seg.params_, ts);
  return seg;
}

namespace {
void check_label_schema(const std::vector<SyntheticSample>& samples, const std::vector<int>& idx,
                        int num_labels) {
  for (int i : idx) {
    const auto& m = samples[std::size_t(i)].seg_mask;
    for (int y = 0; y < m.rows(); ++y)
      for (int x = 0; x < m.cols(); ++x)
        if (m(y, x) < 0 || m(y, x) >= num_labels)
          throw ConfigError("segmenter label schema mismatch: found label " +
                            std::to_string(m(y, x)));
  }
}
}  // namespace

SegmenterReport train_segmenter(LearnedSegmenter& seg, const std::vector<SyntheticSample>& samples,
                                const std::vector<int>& train_idx,
                                const std::vector<int>& eval_idx, const SegmenterConfig& cfg) {
  check_label_schema(samples, train_idx, cfg.num_labels);
  nn::Adam opt(seg.params(), cfg.lr, 0.9f, 0.999f);
  Rng rng(Rng(cfg.seed).fork("segtrain").next_u64());
  const int s = cfg.image_size;
  const Eigen::Index plane = Eigen::Index(s) * s;
  double last_loss = 0.0;
  for (int step = 0; step < cfg.steps; ++step) {
    Arr v(Eigen::Index(cfg.batch) * plane);
    std::vector<int> labels(std::size_t(cfg.batch) * std::size_t(plane));
    for (int i = 0; i < cfg.batch; ++i) {
      const auto& smp =
          samples[std::size_t(train_idx[std::size_t(rng.uniform_int(0, int(train_idx.size()) - 1))])];
      for (int r = 0; r < s; ++r)
        for (int c = 0; c < s; ++c) {
          v[Eigen::Index(i) * plane + r * s + c] = smp.image(r, c);
          labels[std::size_t(Eigen::Index(i) * plane + r * s + c)] = smp.seg_mask(r, c);
        }
    }
    Var logits = seg.logits_node(constant(std::move(v), {cfg.batch, 1, s, s}), true);
    Var loss = softmax_ce_pixelwise(logits, labels);
    backward(loss);
    opt.step();
    last_loss = double(loss->val[0]);
  }
  SegmenterReport rep = evaluate_segmenter(seg, samples, eval_idx);
  rep.final_loss = last_loss;
  return rep;
}

SegmenterReport evaluate_segmenter(LearnedSegmenter& seg,
                                   const std::vector<SyntheticSample>& samples,
                                   const std::vector<int>& eval_idx) {
  SegmenterReport rep;
  rep.per_label_iou.assign(std::size_t(seg.config().num_labels), 0.0);
  for (int i : eval_idx) {
    const MaskI pred = seg.segment(samples[std::size_t(i)].image);
    for (int l = 0; l < seg.config().num_labels; ++l)
      rep.per_label_iou[std::size_t(l)] += mask_iou(pred, samples[std::size_t(i)].seg_mask, l);
  }
  for (auto& v : rep.per_label_iou) v /= double(eval_idx.size());
  for (double v : rep.per_label_iou) rep.mean_iou += v;
  rep.mean_iou /= double(rep.per_label_iou.size());
  return rep;
}

}  // namespace cfx
