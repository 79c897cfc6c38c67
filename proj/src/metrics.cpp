#include "cfx/metrics.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <queue>

#include "cfx/explainer.hpp"

namespace cfx {

namespace {

void moments(const std::vector<Eigen::VectorXf>& feats, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
  const int n = int(feats.size());
  const int d = int(feats[0].size());
  mu = Eigen::VectorXd::Zero(d);
  for (const auto& f : feats) mu += f.cast<double>();
  mu /= double(n);
  cov = Eigen::MatrixXd::Zero(d, d);
  for (const auto& f : feats) {
    const Eigen::VectorXd c = f.cast<double>() - mu;
    cov.noalias() += c * c.transpose();
  }
  cov /= double(n - 1);
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, double clip_tol) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  Eigen::VectorXd ev = es.eigenvalues();
  for (int i = 0; i < ev.size(); ++i) {
    if (ev[i] < -clip_tol) throw DataError("fid: covariance eigenvalue below clipping tolerance");
    ev[i] = std::sqrt(std::max(0.0, ev[i]));
  }
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double fid(const std::vector<Eigen::VectorXf>& real_features,
           const std::vector<Eigen::VectorXf>& fake_features) {
  if (real_features.size() < 2 || fake_features.size() < 2)
    throw InputError("fid: each feature set needs at least 2 samples");
  if (real_features[0].size() != fake_features[0].size())
    throw InputError("fid: feature dimension mismatch");
  Eigen::VectorXd mu_r, mu_f;
  Eigen::MatrixXd cov_r, cov_f;
  moments(real_features, mu_r, cov_r);
  moments(fake_features, mu_f, cov_f);
  if (!cov_r.allFinite() || !cov_f.allFinite()) throw DataError("fid: non-finite covariances");

  const double kClip = 1e-6;
  const Eigen::MatrixXd sr = psd_sqrt(cov_r, kClip);
  // sqrt(Sr Sf) spectrum equals sqrt(sr Sf sr) spectrum
  const Eigen::MatrixXd inner = sr * cov_f * sr;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(inner);
  double trace_sqrt = 0.0;
  for (int i = 0; i < es.eigenvalues().size(); ++i) {
    const double ev = es.eigenvalues()[i];
    if (ev < -kClip) throw DataError("fid: product eigenvalue below clipping tolerance");
    trace_sqrt += std::sqrt(std::max(0.0, ev));
  }
  const double mean_term = (mu_r - mu_f).squaredNorm();
  return mean_term + cov_r.trace() + cov_f.trace() - 2.0 * trace_sqrt;
}

double cv_score(const std::vector<std::pair<double, double>>& pairs, double threshold) {
  if (pairs.empty()) throw InputError("cv_score: empty pairs");
  long flipped = 0;
  for (const auto& [a, b] : pairs) flipped += (a > threshold) != (b > threshold);
  return double(flipped) / double(pairs.size());
}

bool detector_fires(const ImageF& probs, double prob_threshold, int min_region) {
  const int h = int(probs.rows()), w = int(probs.cols());
  MaskI seen = MaskI::Zero(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (seen(y, x) || probs(y, x) < prob_threshold) continue;
      int size = 0;
      std::queue<std::pair<int, int>> q;
      q.emplace(y, x);
      seen(y, x) = 1;
      while (!q.empty()) {
        const auto [cy, cx] = q.front();
        q.pop();
        ++size;
        const int dy[4] = {-1, 1, 0, 0}, dx[4] = {0, 0, -1, 1};
        for (int k = 0; k < 4; ++k) {
          const int ny = cy + dy[k], nx = cx + dx[k];
          if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
          if (seen(ny, nx) || probs(ny, nx) < prob_threshold) continue;
          seen(ny, nx) = 1;
          q.emplace(ny, nx);
        }
      }
      if (size >= min_region) return true;
    }
  return false;
}

double fop_score(const std::vector<const ImageF*>& reals,
                 const std::vector<const ImageF*>& counterfactuals,
                 const std::function<ImageF(const ImageF&)>& detector) {
  if (reals.size() != counterfactuals.size()) throw InputError("fop_score: size mismatch");
  long eligible = 0, preserved = 0;
  for (std::size_t i = 0; i < reals.size(); ++i) {
    if (!detector_fires(detector(*reals[i]))) continue;
    ++eligible;
    preserved += detector_fires(detector(*counterfactuals[i]));
  }
  if (eligible == 0) throw DataError("fop_score: detector fired on no real image");
  return double(preserved) / double(eligible);
}

double lsc_score(const std::vector<Eigen::VectorXf>& emb_input,
                 const std::vector<Eigen::VectorXf>& emb_a,
                 const std::vector<Eigen::VectorXf>& emb_b) {
  if (emb_input.size() != emb_a.size() || emb_a.size() != emb_b.size() || emb_input.empty())
    throw InputError("lsc_score: size mismatch");
  double score = 0.0;
  for (std::size_t i = 0; i < emb_input.size(); ++i) {
    const double da = (emb_input[i] - emb_a[i]).norm();
    const double db = (emb_input[i] - emb_b[i]).norm();
    if (da < db)
      score += 1.0;
    else if (da == db)
      score += 0.5;
  }
  return score / double(emb_input.size());
}

ConsistencyResult consistency_curve(const std::vector<double>& base_posteriors,
                                    const std::vector<std::vector<std::pair<double, double>>>& pairs,
                                    int curve_bins) {
  if (base_posteriors.size() != pairs.size()) throw InputError("consistency_curve: size mismatch");
  ConsistencyResult res;
  double abs_err = 0.0;
  long abs_n = 0;
  for (int g = 0; g < 5; ++g) {
    ConsistencyGroup grp;
    grp.f_lo = g * 0.2;
    grp.f_hi = (g + 1) * 0.2;
    std::vector<double> sum(std::size_t(curve_bins), 0.0);
    std::vector<long> cnt(std::size_t(curve_bins), 0);
    double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
    long n = 0;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      const double f = base_posteriors[i];
      const bool in_group = g == 4 ? (f >= grp.f_lo && f <= grp.f_hi) : (f >= grp.f_lo && f < grp.f_hi);
      if (!in_group) continue;
      ++grp.count;
      for (const auto& [desired, achieved] : pairs[i]) {
        const int b = std::min(curve_bins - 1, int(desired * curve_bins));
        sum[std::size_t(b)] += achieved;
        ++cnt[std::size_t(b)];
        sx += desired;
        sy += achieved;
        sxx += desired * desired;
        sxy += desired * achieved;
        ++n;
        abs_err += std::fabs(achieved - desired);
        ++abs_n;
      }
    }
    for (int b = 0; b < curve_bins; ++b) {
      if (cnt[std::size_t(b)] == 0) continue;
      grp.desired_centers.push_back((b + 0.5) / curve_bins);
      grp.achieved_means.push_back(sum[std::size_t(b)] / double(cnt[std::size_t(b)]));
    }
    if (n >= 2) {
      const double denom = double(n) * sxx - sx * sx;
      if (denom != 0.0) {
        grp.slope = (double(n) * sxy - sx * sy) / denom;
        grp.intercept = (sy - grp.slope * sx) / double(n);
      }
    }
    res.groups.push_back(std::move(grp));
  }
  res.mean_abs_error = abs_n > 0 ? abs_err / double(abs_n) : 0.0;
  return res;
}

ImageF difference_map(const ImageF& a, const ImageF& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw InputError("difference_map: shape mismatch");
  ImageF d = (a - b).abs();
  const float lo = d.minCoeff(), hi = d.maxCoeff();
  if (hi > lo) d = (d - lo) / (hi - lo);
  else d.setZero();
  return d;
}

ImageF inpaint(const ImageF& x, const MaskI& mask) {
  if (x.rows() != mask.rows() || x.cols() != mask.cols()) throw InputError("inpaint: shape mismatch");
  const int h = int(x.rows()), w = int(x.cols());
  std::vector<std::pair<int, int>> holes;
  double mean_known = 0.0;
  long known = 0;
  for (int y = 0; y < h; ++y)
    for (int c = 0; c < w; ++c) {
      if (mask(y, c))
        holes.emplace_back(y, c);
      else {
        mean_known += x(y, c);
        ++known;
      }
    }
  if (holes.empty()) return x;
  ImageF cur = x;
  const float init = known > 0 ? float(mean_known / double(known)) : 0.5f;
  for (const auto& [y, c] : holes) cur(y, c) = init;
  ImageF next = cur;
  for (int iter = 0; iter < 500; ++iter) {
    float max_change = 0.0f;
    for (const auto& [y, c] : holes) {
      float sum = 0.0f;
      int cnt = 0;
      if (y > 0) { sum += cur(y - 1, c); ++cnt; }
      if (y + 1 < h) { sum += cur(y + 1, c); ++cnt; }
      if (c > 0) { sum += cur(y, c - 1); ++cnt; }
      if (c + 1 < w) { sum += cur(y, c + 1); ++cnt; }
      const float v = sum / float(cnt);
      max_change = std::max(max_change, std::fabs(v - cur(y, c)));
      next(y, c) = v;
    }
    std::swap(cur, next);
    if (max_change < 1e-4f) break;
  }
  return cur;
}

DeletionCurve deletion_curve(const ImageF& x, const ImageF& saliency, BlackBoxClassifier& clf,
                             int label, int steps) {
  if (x.rows() != saliency.rows() || x.cols() != saliency.cols())
    throw InputError("deletion_curve: shape mismatch");
  const int h = int(x.rows()), w = int(x.cols());
  const long npix = long(h) * w;
  std::vector<long> order(static_cast<std::size_t>(npix), 0);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](long a, long b) {
    return saliency(int(a / w), int(a % w)) > saliency(int(b / w), int(b % w));
  });

  DeletionCurve dc;
  dc.fractions.push_back(0.0);
  dc.posteriors.push_back(clf.posterior(x)[label]);
  MaskI mask = MaskI::Zero(h, w);
  for (int k = 1; k <= steps; ++k) {
    const long upto = std::lround(double(k) / steps * double(npix));
    for (long i = std::lround(double(k - 1) / steps * double(npix)); i < upto; ++i)
      mask(int(order[std::size_t(i)] / w), int(order[std::size_t(i)] % w)) = 1;
    const ImageF filled = inpaint(x, mask);
    dc.fractions.push_back(double(k) / steps);
    dc.posteriors.push_back(clf.posterior(filled)[label]);
  }
  for (std::size_t i = 1; i < dc.fractions.size(); ++i)
    dc.audc += 0.5 * (dc.posteriors[i] + dc.posteriors[i - 1]) *
               (dc.fractions[i] - dc.fractions[i - 1]);
  return dc;
}

namespace {
ImageF abs_minmax(const ImageF& m) {
  ImageF a = m.abs();
  const float lo = a.minCoeff(), hi = a.maxCoeff();
  if (hi > lo) a = (a - lo) / (hi - lo);
  else a.setZero();
  return a;
}
}  // namespace

ImageF integrated_gradients_raw(const ImageF& x, BlackBoxClassifier& clf, int label, int steps) {
  ImageF total = ImageF::Zero(x.rows(), x.cols());
  for (int i = 0; i < steps; ++i) {
    const float alpha = (float(i) + 0.5f) / float(steps);
    const ImageF point = alpha * x;  // black baseline
    total += clf.input_gradient(point, label);
  }
  return total * x / float(steps);  // (x - baseline) elementwise, baseline 0
}

SaliencyMaps baseline_saliencies(const ImageF& x, BlackBoxClassifier& clf, int label) {
  SaliencyMaps maps;
  const ImageF g = clf.input_gradient(x, label);
  maps.gradient = abs_minmax(g);
  maps.gradient_x_input = abs_minmax(g * x);
  maps.integrated_gradients = abs_minmax(integrated_gradients_raw(x, clf, label));
  return maps;
}

Eigen::MatrixXd class_flip_matrix(const std::vector<Eigen::VectorXd>& posteriors_real,
                                  const std::vector<std::vector<Eigen::VectorXd>>& posteriors_cf,
                                  const std::vector<int>& target_labels, double threshold) {
  if (posteriors_cf.size() != target_labels.size())
    throw InputError("class_flip_matrix: one counterfactual set per target label");
  const int num_labels = int(posteriors_real.empty() ? 0 : posteriors_real[0].size());
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(Eigen::Index(target_labels.size()), num_labels);
  for (std::size_t t = 0; t < posteriors_cf.size(); ++t) {
    const auto& cfs = posteriors_cf[t];
    if (cfs.size() != posteriors_real.size())
      throw InputError("class_flip_matrix: counterfactual count mismatch");
    for (int c = 0; c < num_labels; ++c) {
      long flips = 0;
      for (std::size_t i = 0; i < cfs.size(); ++i)
        flips += (posteriors_real[i][c] > threshold) != (cfs[i][c] > threshold);
      m(Eigen::Index(t), c) = double(flips) / double(cfs.size());
    }
  }
  return m;
}

double ablate_object(const ImageF& x, const std::function<ImageF(const ImageF&)>& detector,
                     BlackBoxClassifier& clf, int label) {
  const ImageF probs = detector(x);
  MaskI mask = MaskI::Zero(x.rows(), x.cols());
  long hits = 0;
  for (int y = 0; y < x.rows(); ++y)
    for (int c = 0; c < x.cols(); ++c)
      if (probs(y, c) >= 0.5f) {
        mask(y, c) = 1;
        ++hits;
      }
  if (hits == 0) return 0.0;
  const double before = clf.posterior(x)[label];
  const double after = clf.posterior(inpaint(x, mask))[label];
  return before - after;
}

double ctr_analogue(const MaskI& seg) { return width_ratio_from_mask(seg); }

}  // namespace cfx
