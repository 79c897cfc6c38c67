#pragma once

#include "cfx/nn.hpp"
#include "cfx/synthdata.hpp"

namespace cfx {

// Deterministic context providers backed by the synthetic ground truth.
// Dataset samples use their stored masks; arbitrary images (counterfactuals)
// are re-derived from the published intensity schema.
MaskI oracle_segment(const SyntheticSample& s);
MaskI oracle_segment(const ImageF& img, const SynthLevels& lv = {});

// Probability-1 mask on pixels above the foreign-object threshold inside the
// thorax, followed by a 3x3 morphological closing.
ImageF oracle_detect(const ImageF& img, const SynthLevels& lv = {});

// Differentiable detector used while training with CARL: a sharp sigmoid at
// the foreign-object threshold, restricted to a fixed support mask.
// x: [N,1,S,S] in [0,1]; support: same layout, 0/1.
ad::Var soft_detect_node(const ad::Var& x, const ad::Arr& support, float threshold,
                         float temperature);

ImageF soft_detect(const ImageF& img, const MaskI& seg, const SynthLevels& lv, float temperature);

double mask_iou(const MaskI& a, const MaskI& b, int label);

// --------------------------------------------------------------------------
// Optional learned segmenter (encoder-decoder, pixelwise softmax). Kept out
// of the acceptance path; the oracles above are the default CARL providers.

struct SegmenterConfig {
  int image_size = 64;
  int num_labels = 3;
  int base_channels = 8;
  int steps = 400;
  int batch = 8;
  float lr = 2e-3f;
  std::uint64_t seed = 31;
};

class LearnedSegmenter {
 public:
  explicit LearnedSegmenter(const SegmenterConfig& cfg);

  ad::Var logits_node(const ad::Var& x, bool training);
  MaskI segment(const ImageF& img);

  nn::ParamSet& params() { return params_; }
  const SegmenterConfig& config() const { return cfg_; }

  void save(const std::filesystem::path& p) const;
  static LearnedSegmenter load(const std::filesystem::path& p);

 private:
  SegmenterConfig cfg_;
  nn::ParamSet params_;
  nn::Conv2d c1_, c2_, c3_, c4_, c5_;
  nn::BatchNorm2d b1_, b2_, b3_, b4_;
};

struct SegmenterReport {
  std::vector<double> per_label_iou;
  double mean_iou = 0.0;
  double final_loss = 0.0;
};

// Multi-categorical cross-entropy over pixels. The label schema of `samples`
// must match cfg.num_labels.
SegmenterReport train_segmenter(LearnedSegmenter& seg, const std::vector<SyntheticSample>& samples,
                                const std::vector<int>& train_idx,
                                const std::vector<int>& eval_idx, const SegmenterConfig& cfg);

SegmenterReport evaluate_segmenter(LearnedSegmenter& seg,
                                   const std::vector<SyntheticSample>& samples,
                                   const std::vector<int>& eval_idx);

// pixelwise softmax cross-entropy; logits [N,L,H,W], labels row-major length N*H*W
ad::Var softmax_ce_pixelwise(const ad::Var& logits, const std::vector<int>& labels);

}  // namespace cfx
