#pragma once

#include <optional>

#include "cfx/classifier.hpp"
#include "cfx/condition.hpp"
#include "cfx/context.hpp"

namespace cfx {

enum class IdentityLossKind { carl, l1, none };

struct ExplainerConfig {
  int image_size = 64;
  int num_bins = 10;
  int latent_dim = 128;
  int enc_base = 16;
  int gen_base = 8;
  int disc_base = 16;
  float lambda_adv = 1.0f;
  float lambda_kl = 1.0f;
  float lambda_identity = 0.5f;
  float lr = 2e-4f;
  float beta1 = 0.0f;
  float beta2 = 0.9f;
  int n_dis = 5;  // discriminator updates per generator update
  int steps = 1500;
  int batch = 32;
  bool spectral_norm = true;
  bool cyclic_through_encoder = true;
  IdentityLossKind identity = IdentityLossKind::carl;
  int target_label = kLabelDisease;
  float kl_eps = 1e-4f;
  float det_temperature = 0.05f;
  std::uint64_t seed = 21;
  int checkpoint_every = 250;
  int grid_every = 500;
};

struct ExplanationStep {
  double delta_shift = 0.0;
  ImageF counterfactual;
  double achieved_posterior = 0.0;
  BinIndex bin;
};

struct ExplanationSeries {
  ImageF input;
  double base_posterior = 0.0;
  std::vector<ExplanationStep> steps;
};

// x_delta = G(E(x), c_f(x, delta)): encoder, condition-modulated generator,
// and projection discriminator with the ordinal condition term.
class ExplainerModel {
 public:
  explicit ExplainerModel(const ExplainerConfig& cfg);

  const ExplainerConfig& config() const { return cfg_; }
  bool trained() const { return trained_; }
  void mark_trained() { trained_ = true; }

  // graph builders; images in [-1,1]
  ad::Var encode_node(const ad::Var& x_pm, bool training);
  ad::Var generate_node(const ad::Var& z, const std::vector<int>& bins, bool training);
  ad::Var disc_features_node(const ad::Var& x_pm, bool training);
  ad::Var disc_logit_node(const ad::Var& x_pm, const std::vector<int>& bins, bool training);

  // inference
  ImageF explain(BlackBoxClassifier& clf, const ImageF& x, double delta_shift);
  struct BatchExplainResult {
    std::vector<ImageF> counterfactuals;
    std::vector<double> achieved;
    std::vector<double> base;
    std::vector<int> bins;
  };
  BatchExplainResult explain_batch(BlackBoxClassifier& clf, const std::vector<const ImageF*>& xs,
                                   const std::vector<double>& deltas);
  ExplanationSeries generate_series(BlackBoxClassifier& clf, const ImageF& x,
                                    const std::vector<double>& delta_grid);

  // psi(phi(x)) + sum_{i<bin} v_i^T phi(x), evaluation mode
  double discriminator_logit(const ImageF& x01, int bin);
  Eigen::VectorXf disc_features(const ImageF& x01);
  // ordinal embedding rows as used by the logit (spectral scaling applied)
  Eigen::MatrixXf projection_matrix();

  nn::ParamSet& eg_params() { return eg_params_; }
  nn::ParamSet& d_params() { return d_params_; }

  void save(const std::filesystem::path& p) const;
  static ExplainerModel load(const std::filesystem::path& p);

 private:
  ExplainerConfig cfg_;
  nn::ParamSet eg_params_, d_params_;
  // encoder
  nn::Conv2d e1_, e2_, e3_;
  nn::BatchNorm2d eb1_, eb2_, eb3_;
  nn::Dense e_fc_;
  // generator
  nn::Dense g_fc_;
  nn::Conv2d g1_, g2_, g3_, g_out_;
  nn::CondBatchNorm2d gb1_, gb2_, gb3_;
  nn::BatchNorm2d gb_out_;
  // discriminator
  nn::Conv2d d1_, d2_, d3_, d4_;
  nn::Dense d_psi_;
  ad::Var d_embed_;
  std::vector<nn::SpectralNorm> sn_;
  bool trained_ = false;
};

// --- loss values (scalar forms shared by tests and evaluation) -------------

double loss_kl_condition(double achieved, double desired, double eps = 1e-4);

// CARL: per-segment normalized L1 over S_j(x) plus mean-pixel Bernoulli KL
// between the detection masks; segments without pixels are skipped.
double loss_carl(const ImageF& x, const ImageF& x_prime, const MaskI& seg,
                 const ImageF* det_x = nullptr, const ImageF* det_x_prime = nullptr,
                 double eps = 1e-4);

double loss_discriminator_value(const std::vector<double>& real_logits,
                                const std::vector<double>& fake_logits);
double loss_generator_adv_value(const std::vector<double>& fake_logits);

// CARL(x, I(x,0)) + CARL(x, I(I(x,delta), -delta)) with oracle context
double loss_identity_value(ExplainerModel& model, BlackBoxClassifier& clf,
                           const SyntheticSample& s, double delta_shift);

// --- training ---------------------------------------------------------------

struct ExplainerLogRow {
  int step = 0;
  double d_loss = 0.0, g_adv = 0.0, g_kl = 0.0, g_identity = 0.0, g_total = 0.0;
};

struct ExplainerTrainResult {
  std::vector<ExplainerLogRow> log;
};

// Alternates n_dis discriminator steps with one encoder+generator step on
// bin-balanced batches. Refuses to start on empty bins; a non-finite loss
// aborts after restoring the last good parameter snapshot.
ExplainerTrainResult train_explainer(ExplainerModel& model, BlackBoxClassifier& clf,
                                     const std::vector<SyntheticSample>& samples,
                                     const BinnedDataset& binned, const ExplainerConfig& cfg,
                                     const std::optional<std::filesystem::path>& out_dir);

}  // namespace cfx
