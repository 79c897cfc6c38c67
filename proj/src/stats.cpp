#include "cfx/stats.hpp"

#include <cmath>

namespace cfx {

namespace {

double betacf(double a, double b, double x) {
  // continued fraction for the incomplete beta function
  const int kMaxIter = 300;
  const double kEps = 3e-14, kFpMin = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0, d = 1.0 - qab * x / qap;
  if (std::fabs(d) < kFpMin) d = kFpMin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < kEps) break;
  }
  return h;
}

}  // namespace

double regularized_incomplete_beta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double ln_beta = std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
  const double front = std::exp(a * std::log(x) + b * std::log(1.0 - x) - ln_beta);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * betacf(a, b, x) / a;
  return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

double student_t_cdf(double t, double df) {
  if (!std::isfinite(t)) return t > 0 ? 1.0 : 0.0;
  const double x = df / (df + t * t);
  const double tail = 0.5 * regularized_incomplete_beta(df / 2.0, 0.5, x);
  return t >= 0.0 ? 1.0 - tail : tail;
}

double student_t_two_sided_p(double t, double df) {
  if (!std::isfinite(t)) return 0.0;
  return regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t));
}

double student_t_quantile975(double df) {
  double lo = 0.0, hi = 1e6;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (student_t_cdf(mid, df) < 0.975)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

TTestResult paired_ttest(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw InputError("paired_ttest: unequal lengths");
  if (a.size() < 2) throw InputError("paired_ttest: needs at least 2 pairs");
  const long n = long(a.size());
  TTestResult r;
  r.n_a = r.n_b = n;
  double mean = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) mean += a[i] - b[i];
  mean /= double(n);
  double ss = 0.0, ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i] - mean;
    ss += d * d;
    ma += a[i];
    mb += b[i];
  }
  r.mean_a = ma / double(n);
  r.mean_b = mb / double(n);
  r.mean_diff = mean;
  r.std_dev = std::sqrt(ss / double(n - 1));
  r.df = double(n - 1);
  if (r.std_dev == 0.0) {
    if (mean == 0.0) {
      r.t = 0.0;
      r.p = 1.0;
    } else {
      r.t = mean > 0 ? std::numeric_limits<double>::infinity()
                     : -std::numeric_limits<double>::infinity();
      r.p = 0.0;
      r.infinite_t = true;
    }
    r.ci95_lo = r.ci95_hi = mean;
    return r;
  }
  const double se = r.std_dev / std::sqrt(double(n));
  r.t = mean / se;
  r.p = student_t_two_sided_p(r.t, r.df);
  const double q = student_t_quantile975(r.df);
  r.ci95_lo = mean - q * se;
  r.ci95_hi = mean + q * se;
  return r;
}

TTestResult unpaired_ttest(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() < 2 || b.size() < 2) throw InputError("unpaired_ttest: needs at least 2 per group");
  TTestResult r;
  r.n_a = long(a.size());
  r.n_b = long(b.size());
  double ma = 0.0, mb = 0.0;
  for (double v : a) ma += v;
  for (double v : b) mb += v;
  ma /= double(r.n_a);
  mb /= double(r.n_b);
  double va = 0.0, vb = 0.0;
  for (double v : a) va += (v - ma) * (v - ma);
  for (double v : b) vb += (v - mb) * (v - mb);
  va /= double(r.n_a - 1);
  vb /= double(r.n_b - 1);
  r.mean_a = ma;
  r.mean_b = mb;
  r.mean_diff = ma - mb;
  const double sa = va / double(r.n_a), sb = vb / double(r.n_b);
  const double se2 = sa + sb;
  r.std_dev = std::sqrt(se2);
  if (se2 == 0.0) {
    r.df = double(r.n_a + r.n_b - 2);
    if (r.mean_diff == 0.0) {
      r.t = 0.0;
      r.p = 1.0;
    } else {
      r.t = r.mean_diff > 0 ? std::numeric_limits<double>::infinity()
                            : -std::numeric_limits<double>::infinity();
      r.p = 0.0;
      r.infinite_t = true;
    }
    r.ci95_lo = r.ci95_hi = r.mean_diff;
    return r;
  }
  // Welch-Satterthwaite
  r.df = se2 * se2 / (sa * sa / double(r.n_a - 1) + sb * sb / double(r.n_b - 1));
  r.t = r.mean_diff / std::sqrt(se2);
  r.p = student_t_two_sided_p(r.t, r.df);
  const double q = student_t_quantile975(r.df);
  r.ci95_lo = r.mean_diff - q * std::sqrt(se2);
  r.ci95_hi = r.mean_diff + q * std::sqrt(se2);
  return r;
}

}  // namespace cfx
