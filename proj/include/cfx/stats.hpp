#pragma once

#include <vector>

#include "cfx/util.hpp"

namespace cfx {

struct TTestResult {
  double mean_diff = 0.0;  // paired: mean of differences; unpaired: mean_a - mean_b
  double std_dev = 0.0;
  double ci95_lo = 0.0, ci95_hi = 0.0;
  double t = 0.0;
  double df = 0.0;
  double p = 1.0;  // two-sided
  bool infinite_t = false;
  long n_a = 0, n_b = 0;
  double mean_a = 0.0, mean_b = 0.0;
};

// Dependent t-test on equal-length paired samples. All-zero differences give
// p = 1; zero-variance nonzero differences are flagged with p -> 0.
TTestResult paired_ttest(const std::vector<double>& a, const std::vector<double>& b);

// Welch's independent two-sample t-test.
TTestResult unpaired_ttest(const std::vector<double>& a, const std::vector<double>& b);

double student_t_cdf(double t, double df);
double student_t_two_sided_p(double t, double df);
double student_t_quantile975(double df);

double regularized_incomplete_beta(double a, double b, double x);

}  // namespace cfx
