#include <doctest.h>

#include <filesystem>

#include "cfx/synthdata.hpp"

namespace fs = std::filesystem;
using namespace cfx;

TEST_CASE("same seed reproduces samples byte-identically") {
  SynthConfig cfg;
  cfg.count = 3;
  cfg.seed = 7;
  const auto a = generate_dataset(cfg);
  const auto b = generate_dataset(cfg);
  for (int i = 0; i < cfg.count; ++i) {
    CHECK(((a[i].image - b[i].image).abs() == 0.0f).all());
    CHECK((a[i].seg_mask == b[i].seg_mask).all());
    CHECK((a[i].fo_mask == b[i].fo_mask).all());
    CHECK(a[i].disease_factor == b[i].disease_factor);
  }
}

TEST_CASE("fo_rate zero produces no foreign objects") {
  SynthConfig cfg;
  cfg.count = 50;
  cfg.fo_rate = 0.0;
  cfg.seed = 3;
  for (const auto& s : generate_dataset(cfg)) {
    CHECK_FALSE(s.fo_present);
    CHECK((s.fo_mask == 0).all());
  }
}

TEST_CASE("fo mask is nonzero exactly when fo_present") {
  SynthConfig cfg;
  cfg.count = 200;
  cfg.fo_rate = 0.5;
  cfg.seed = 5;
  for (const auto& s : generate_dataset(cfg)) {
    const bool any = (s.fo_mask != 0).any();
    CHECK(any == s.fo_present);
    if (s.fo_present) {
      CHECK(s.fo_mask.sum() == s.fo_side * s.fo_side);
    }
  }
}

TEST_CASE("foreign object fraction concentrates around fo_rate") {
  SynthConfig cfg;
  cfg.count = 4000;
  cfg.fo_rate = 0.3;
  cfg.seed = 1;
  const auto samples = generate_dataset(cfg);
  long with_fo = 0;
  for (const auto& s : samples) with_fo += s.fo_present;
  const double frac = double(with_fo) / cfg.count;
  // binomial: sd = sqrt(p(1-p)/n) ~ 0.0072, [0.27, 0.33] is a > 4-sigma band
  CHECK(frac >= 0.27);
  CHECK(frac <= 0.33);
}

TEST_CASE("segmentation labels partition the grid and ratio matches the stored factor") {
  SynthConfig cfg;
  cfg.count = 100;
  cfg.seed = 11;
  for (const auto& s : generate_dataset(cfg)) {
    int tx_min = 1 << 30, tx_max = -1;
    for (int y = 0; y < s.seg_mask.rows(); ++y)
      for (int x = 0; x < s.seg_mask.cols(); ++x) {
        const int v = s.seg_mask(y, x);
        CHECK(v >= 0);
        CHECK(v <= 2);
        if (v != kSegBackground) {
          tx_min = std::min(tx_min, x);
          tx_max = std::max(tx_max, x);
        }
      }
    const double measured = width_ratio_from_mask(s.seg_mask);
    const double tol = 1.0 / double(tx_max - tx_min + 1);  // one pixel of thorax width
    CHECK(std::fabs(measured - s.disease_factor) <= tol);
    CHECK(s.label == (s.disease_factor > 0.5 ? 1 : 0));
  }
}

TEST_CASE("dataset persists and reloads losslessly") {
  SynthConfig cfg;
  cfg.count = 5;
  cfg.seed = 13;
  const auto samples = generate_dataset(cfg);
  const fs::path dir = fs::temp_directory_path() / "cfx_test_dataset";
  fs::remove_all(dir);
  save_dataset(dir, samples, cfg);
  const auto loaded = load_dataset(dir);
  REQUIRE(loaded.size() == samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    CHECK(((samples[i].image - loaded[i].image).abs() == 0.0f).all());
    CHECK((samples[i].seg_mask == loaded[i].seg_mask).all());
    CHECK((samples[i].fo_mask == loaded[i].fo_mask).all());
    CHECK(samples[i].disease_factor == loaded[i].disease_factor);
    CHECK(samples[i].fo_present == loaded[i].fo_present);
  }
  const SynthConfig meta = load_dataset_config(dir);
  CHECK(meta.count == cfg.count);
  CHECK(meta.seed == cfg.seed);
  fs::remove_all(dir);
}

TEST_CASE("invalid configs name the offending field") {
  SynthConfig cfg;
  cfg.count = 0;
  CHECK_THROWS_WITH_AS(validate_config(cfg), doctest::Contains("count"), ConfigError);
  cfg.count = 10;
  cfg.image_size = 16;
  CHECK_THROWS_WITH_AS(validate_config(cfg), doctest::Contains("image_size"), ConfigError);
  cfg.image_size = 64;
  cfg.fo_rate = 1.5;
  CHECK_THROWS_WITH_AS(validate_config(cfg), doctest::Contains("fo_rate"), ConfigError);
}

TEST_CASE("bin_balanced_split reports empty bins under a constant posterior") {
  SynthConfig cfg;
  cfg.count = 30;
  cfg.seed = 17;
  const auto samples = generate_dataset(cfg);
  const auto binned =
      bin_balanced_split(samples, [](const ImageF&) { return 0.0; }, 10, 100);
  CHECK(binned.bins[0].size() == 30);
  REQUIRE(binned.empty.size() == 9);
  for (int b = 1; b <= 9; ++b) CHECK(binned.empty[std::size_t(b - 1)] == b);
}

TEST_CASE("bin_balanced_split caps bins and flags underfilled ones") {
  SynthConfig cfg;
  cfg.count = 60;
  cfg.seed = 19;
  const auto samples = generate_dataset(cfg);
  // factor in [0.25, 0.75] scaled to [0,1] spreads across bins
  const auto binned = bin_balanced_split(
      samples,
      [&](const ImageF& img) {
        for (const auto& s : samples)
          if ((s.image - img).abs().maxCoeff() == 0.0f) return (s.disease_factor - 0.25) * 2.0;
        return 0.5;
      },
      5, 8);
  std::size_t total = 0;
  for (const auto& b : binned.bins) {
    CHECK(b.size() <= 8);
    total += b.size();
  }
  CHECK(total <= 5 * 8);
  CHECK(binned.empty.empty());
}

TEST_CASE("split_indices is a deterministic partition") {
  const Split a = split_indices(100, 0.25, 9);
  const Split b = split_indices(100, 0.25, 9);
  CHECK(a.train == b.train);
  CHECK(a.test == b.test);
  CHECK(a.test.size() == 25);
  CHECK(a.train.size() == 75);
  std::vector<int> all = a.train;
  all.insert(all.end(), a.test.begin(), a.test.end());
  std::sort(all.begin(), all.end());
  for (int i = 0; i < 100; ++i) CHECK(all[std::size_t(i)] == i);
}
