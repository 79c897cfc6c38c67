#pragma once

#include <Eigen/Dense>
#include <functional>

#include "cfx/classifier.hpp"
#include "cfx/stats.hpp"
#include "cfx/synthdata.hpp"

namespace cfx {

// Frechet distance between Gaussian fits of two feature sets; matrix square
// root by symmetric eigendecomposition with negative eigenvalues clipped at
// the -1e-6 tolerance.
double fid(const std::vector<Eigen::VectorXf>& real_features,
           const std::vector<Eigen::VectorXf>& fake_features);

// fraction of (f(x), f(x_cf)) pairs on opposite sides of the threshold
double cv_score(const std::vector<std::pair<double, double>>& pairs, double threshold = 0.5);

// "fires" = a 4-connected region of at least min_region pixels with
// probability >= prob_threshold
bool detector_fires(const ImageF& probs, double prob_threshold = 0.5, int min_region = 4);

// restricted to pairs whose real image fires; fraction whose counterfactual
// also fires
double fop_score(const std::vector<const ImageF*>& reals,
                 const std::vector<const ImageF*>& counterfactuals,
                 const std::function<ImageF(const ImageF&)>& detector);

// fraction of pairs where a's counterfactual embeds closer to the input than
// b's (euclidean); ties count 0.5
double lsc_score(const std::vector<Eigen::VectorXf>& emb_input,
                 const std::vector<Eigen::VectorXf>& emb_a,
                 const std::vector<Eigen::VectorXf>& emb_b);

struct ConsistencyGroup {
  double f_lo = 0.0, f_hi = 0.0;
  int count = 0;
  std::vector<double> desired_centers;
  std::vector<double> achieved_means;
  double slope = 0.0, intercept = 0.0;
};
struct ConsistencyResult {
  std::vector<ConsistencyGroup> groups;  // five initial-posterior ranges
  double mean_abs_error = 0.0;
};
// pairs[i] = (desired, achieved) samples for input i
ConsistencyResult consistency_curve(const std::vector<double>& base_posteriors,
                                    const std::vector<std::vector<std::pair<double, double>>>& pairs,
                                    int curve_bins = 10);

// |a - b|, min-max normalized to [0,1]
ImageF difference_map(const ImageF& a, const ImageF& b);

// iterative harmonic fill of masked pixels (4-neighbor mean) to max-change
// < 1e-4 or 500 iterations; unmasked pixels untouched
ImageF inpaint(const ImageF& x, const MaskI& mask);

struct DeletionCurve {
  std::vector<double> fractions;   // starts at 0
  std::vector<double> posteriors;  // f after each deletion step
  double audc = 0.0;               // trapezoidal integral over fractions
};
DeletionCurve deletion_curve(const ImageF& x, const ImageF& saliency, BlackBoxClassifier& clf,
                             int label, int steps = 20);

struct SaliencyMaps {
  ImageF gradient;
  ImageF gradient_x_input;
  ImageF integrated_gradients;
};
// absolute, min-max normalized maps
SaliencyMaps baseline_saliencies(const ImageF& x, BlackBoxClassifier& clf, int label);
// signed attributions (completeness: sum ~= f(x) - f(baseline))
ImageF integrated_gradients_raw(const ImageF& x, BlackBoxClassifier& clf, int label,
                                int steps = 32);

// entry (t, c) = fraction of counterfactuals from target-t explainer that
// flip label c; diagonal equals the CV score
Eigen::MatrixXd class_flip_matrix(const std::vector<Eigen::VectorXd>& posteriors_real,
                                  const std::vector<std::vector<Eigen::VectorXd>>& posteriors_cf,
                                  const std::vector<int>& target_labels, double threshold = 0.5);

// inpaints the detected region, returns f(before) - f(after) for the label
double ablate_object(const ImageF& x, const std::function<ImageF(const ImageF&)>& detector,
                     BlackBoxClassifier& clf, int label);

// ellipse width over thorax width from a segmentation mask
double ctr_analogue(const MaskI& seg);

}  // namespace cfx
