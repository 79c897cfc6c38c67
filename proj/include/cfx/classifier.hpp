#pragma once

#include "cfx/nn.hpp"
#include "cfx/synthdata.hpp"

namespace cfx {

struct ClassifierConfig {
  int image_size = 64;
  int num_labels = 2;  // 0: disease, 1: foreign object present
  int base_channels = 8;
  int epochs = 15;
  int batch = 64;
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  // sharpness of the soft disease target sigma(s * (factor - 0.5)); keeps the
  // trained posterior spread over the whole unit interval
  double soft_label_sharpness = 12.0;
  std::uint64_t seed = 11;
};

inline constexpr int kLabelDisease = 0;
inline constexpr int kLabelForeignObject = 1;

// Small convolutional multi-label classifier: four stride-2 conv blocks,
// global average pooling, one logistic head per label. The pooled activations
// double as the feature embedding for FID/LSC.
class BlackBoxClassifier {
 public:
  explicit BlackBoxClassifier(const ClassifierConfig& cfg);

  int input_size() const { return cfg_.image_size; }
  int num_labels() const { return cfg_.num_labels; }
  int embedding_dim() const { return embedding_dim_; }
  bool trained() const { return trained_; }
  void mark_trained() { trained_ = true; }

  // graph-building forward; x: [N,1,S,S] in [0,1]
  ad::Var posterior_node(const ad::Var& x, bool training);
  ad::Var logits_node(const ad::Var& x, bool training);
  ad::Var embed_node(const ad::Var& x, bool training);

  Eigen::VectorXd posterior(const ImageF& img);
  std::vector<Eigen::VectorXd> posterior_batch(const std::vector<const ImageF*>& imgs);
  ImageF input_gradient(const ImageF& img, int label);
  Eigen::VectorXf embed(const ImageF& img);
  std::vector<Eigen::VectorXf> embed_batch(const std::vector<const ImageF*>& imgs);

  nn::ParamSet& params() { return params_; }
  const ClassifierConfig& config() const { return cfg_; }

  void save(const std::filesystem::path& p) const;
  static BlackBoxClassifier load(const std::filesystem::path& p);

  // zeroes the head so every posterior is exactly 0.5
  void zero_heads();

 private:
  ClassifierConfig cfg_;
  nn::ParamSet params_;
  nn::Conv2d c1_, c2_, c3_, c4_;
  nn::BatchNorm2d b1_, b2_, b3_, b4_;
  nn::Dense head_;
  int embedding_dim_ = 0;
  bool trained_ = false;
};

ad::Var images_to_node(const std::vector<const ImageF*>& imgs);

struct TrainLogRow {
  int step;
  double loss;
};

// BCE on soft disease targets and hard foreign-object targets.
std::vector<TrainLogRow> train_classifier(BlackBoxClassifier& clf,
                                          const std::vector<SyntheticSample>& samples,
                                          const std::vector<int>& train_idx,
                                          const ClassifierConfig& cfg);

double auroc(const std::vector<double>& scores, const std::vector<int>& labels);

}  // namespace cfx
