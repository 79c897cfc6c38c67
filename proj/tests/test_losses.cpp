#include <doctest.h>

#include "cfx/explainer.hpp"

using namespace cfx;

TEST_CASE("condition KL loss: worked values and shape") {
  CHECK(loss_kl_condition(0.3, 0.3) == doctest::Approx(0.0).epsilon(1e-12));
  // q ln(q/p) + (1-q) ln((1-q)/(1-p)) at desired 0.9, achieved 0.5
  const double expect = 0.9 * std::log(1.8) + 0.1 * std::log(0.2);
  CHECK(loss_kl_condition(0.5, 0.9) == doctest::Approx(expect).epsilon(1e-9));
  CHECK(loss_kl_condition(0.5, 0.9) == doctest::Approx(0.368).epsilon(2e-3));
  // strictly decreasing as achieved approaches desired from below
  double prev = loss_kl_condition(0.5, 0.9);
  for (double p = 0.55; p <= 0.9001; p += 0.05) {
    const double cur = loss_kl_condition(p, 0.9);
    CHECK(cur < prev);
    prev = cur;
  }
}

TEST_CASE("condition KL gradient matches central differences") {
  Rng rng(21);
  for (int probe = 0; probe < 12; ++probe) {
    const double q = 0.05 + 0.9 * rng.uniform();
    const double p = 0.05 + 0.9 * rng.uniform();
    const double h = 1e-6;
    const double fd = (loss_kl_condition(p + h, q) - loss_kl_condition(p - h, q)) / (2 * h);
    const double analytic = -q / p + (1.0 - q) / (1.0 - p);
    CHECK(std::fabs(analytic - fd) / (std::fabs(analytic) + 1e-6) <= 1e-3);
  }
}

TEST_CASE("CARL: zero at identity, collapses to MAE on one segment") {
  ImageF x(4, 4), xp(4, 4);
  Rng rng(3);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) {
      x(r, c) = float(rng.uniform());
      xp(r, c) = float(rng.uniform());
    }
  MaskI seg = MaskI::Zero(4, 4);  // single full-image segment
  CHECK(loss_carl(x, x, seg) == doctest::Approx(0.0));
  CHECK(loss_carl(x, xp, seg) == doctest::Approx(double((x - xp).abs().mean())).epsilon(1e-6));
}

TEST_CASE("CARL amplifies errors in small segments") {
  // segments of 10 and 1000 pixels, identical per-pixel error e
  const double e = 0.07;
  ImageF x = ImageF::Zero(10, 101), xp = ImageF::Constant(10, 101, float(e));
  MaskI seg = MaskI::Zero(10, 101);
  int placed = 0;
  for (int r = 0; r < 10 && placed < 10; ++r)
    for (int c = 0; c < 1 && placed < 10; ++c) {
      seg(r, c) = 1;
      ++placed;
    }
  // remaining 1000 pixels keep label 0
  const double carl = loss_carl(x, xp, seg);
  CHECK(carl == doctest::Approx(2.0 * e).epsilon(1e-5));
  CHECK(double((x - xp).abs().mean()) == doctest::Approx(e).epsilon(1e-6));
}

TEST_CASE("CARL skips empty segments and validates inputs") {
  ImageF x = ImageF::Zero(4, 4), xp = ImageF::Zero(4, 4);
  MaskI seg = MaskI::Zero(4, 4);
  seg(0, 0) = 2;  // labels {0, 2}; label 1 absent
  CHECK(loss_carl(x, xp, seg) == doctest::Approx(0.0));
  MaskI empty;
  CHECK_THROWS_AS(loss_carl(x, xp, empty), ConfigError);
  ImageF bad = ImageF::Zero(3, 4);
  CHECK_THROWS_AS(loss_carl(x, bad, seg), InputError);
}

TEST_CASE("CARL detector term is the mean-pixel Bernoulli KL") {
  ImageF x = ImageF::Zero(2, 2), xp = ImageF::Zero(2, 2);
  MaskI seg = MaskI::Zero(2, 2);
  ImageF det_x(2, 2), det_xp(2, 2);
  det_x << 1.0f, 0.0f, 0.0f, 0.0f;
  det_xp << 0.6f, 0.1f, 0.0f, 0.0f;
  const double eps = 1e-4;
  double expect = 0.0;
  for (int i = 0; i < 4; ++i) {
    const double q = std::clamp(double(det_x(i / 2, i % 2)), eps, 1 - eps);
    const double p = std::clamp(double(det_xp(i / 2, i % 2)), eps, 1 - eps);
    expect += q * std::log(q / p) + (1 - q) * std::log((1 - q) / (1 - p));
  }
  expect /= 4.0;
  CHECK(loss_carl(x, xp, seg, &det_x, &det_xp) == doctest::Approx(expect).epsilon(1e-6));
}

TEST_CASE("hinge losses: saturated and midpoint cases plus batch oracle") {
  CHECK(loss_discriminator_value({2.0}, {-2.0}) == doctest::Approx(0.0));
  CHECK(loss_discriminator_value({0.0}, {0.0}) == doctest::Approx(2.0));
  CHECK(loss_generator_adv_value({0.0}) == doctest::Approx(0.0));
  CHECK(loss_generator_adv_value({3.0}) == doctest::Approx(-3.0));
  Rng rng(31);
  std::vector<double> real, fake;
  for (int i = 0; i < 16; ++i) {
    real.push_back(rng.normal() * 2.0);
    fake.push_back(rng.normal() * 2.0);
  }
  double expect_d = 0.0, expect_g = 0.0;
  for (int i = 0; i < 16; ++i) {
    expect_d += std::max(0.0, 1.0 - real[std::size_t(i)]) / 16.0 +
                std::max(0.0, 1.0 + fake[std::size_t(i)]) / 16.0;
    expect_g += -fake[std::size_t(i)] / 16.0;
  }
  CHECK(loss_discriminator_value(real, fake) == doctest::Approx(expect_d).epsilon(1e-6));
  CHECK(loss_generator_adv_value(fake) == doctest::Approx(expect_g).epsilon(1e-6));
}

TEST_CASE("projection logit telescopes across bins") {
  ExplainerConfig cfg;
  cfg.image_size = 32;
  cfg.num_bins = 10;
  cfg.enc_base = 4;
  cfg.gen_base = 4;
  cfg.disc_base = 4;
  cfg.seed = 5;
  SUBCASE("raw embedding") { cfg.spectral_norm = false; }
  SUBCASE("spectrally normalized embedding") { cfg.spectral_norm = true; }
  ExplainerModel model(cfg);
  Rng rng(9);
  ImageF x(32, 32);
  for (int r = 0; r < 32; ++r)
    for (int c = 0; c < 32; ++c) x(r, c) = float(rng.uniform());

  const Eigen::VectorXf phi = model.disc_features(x);
  const Eigen::MatrixXf v = model.projection_matrix();
  std::vector<double> logits;
  for (int b = 0; b < cfg.num_bins; ++b) logits.push_back(model.discriminator_logit(x, b));
  // bin 0 is psi(phi(x)) exactly: projecting with an all-zero prefix
  // consecutive differences equal v_i . phi(x)
  for (int b = 0; b + 1 < cfg.num_bins; ++b) {
    const double expect = double(v.row(b).dot(phi));
    CHECK(logits[std::size_t(b + 1)] - logits[std::size_t(b)] ==
          doctest::Approx(expect).epsilon(1e-4).scale(1e-5));
  }
  // direct evaluation oracle: logit(b) = logit(0) + sum_{i<b} v_i . phi
  double acc = logits[0];
  for (int b = 1; b < cfg.num_bins; ++b) {
    acc += double(v.row(b - 1).dot(phi));
    CHECK(logits[std::size_t(b)] == doctest::Approx(acc).epsilon(1e-4).scale(1e-5));
  }
}

TEST_CASE("identity loss equals the sum of its two CARL terms") {
  ExplainerConfig cfg;
  cfg.image_size = 32;
  cfg.num_bins = 4;
  cfg.enc_base = 4;
  cfg.gen_base = 4;
  cfg.disc_base = 4;
  cfg.seed = 3;
  ExplainerModel model(cfg);
  model.mark_trained();  // random weights; the identity is definitional

  ClassifierConfig ccfg;
  ccfg.image_size = 32;
  ccfg.base_channels = 4;
  BlackBoxClassifier clf(ccfg);
  clf.mark_trained();

  SynthConfig scfg;
  scfg.count = 1;
  scfg.image_size = 32;
  scfg.seed = 2;
  const auto samples = generate_dataset(scfg);
  const auto& s = samples[0];

  const double delta = 0.25;
  const double total = loss_identity_value(model, clf, s, delta);
  const ImageF x0 = model.explain(clf, s.image, 0.0);
  const ImageF xd = model.explain(clf, s.image, delta);
  const ImageF xc = model.explain(clf, xd, -delta);
  const ImageF det = oracle_detect(s.image);
  const ImageF det0 = oracle_detect(x0);
  const ImageF detc = oracle_detect(xc);
  const double expect = loss_carl(s.image, x0, s.seg_mask, &det, &det0) +
                        loss_carl(s.image, xc, s.seg_mask, &det, &detc);
  CHECK(total == doctest::Approx(expect).epsilon(1e-9));
  CHECK(total > 0.0);
  CHECK(std::isfinite(total));
}
