#pragma once

#include <functional>
#include <optional>

#include "cfx/util.hpp"

namespace cfx {

struct SynthConfig {
  int count = 4000;
  int image_size = 64;
  double fo_rate = 0.3;
  double noise_level = 0.03;
  std::uint64_t seed = 1;
};

// Intensity schema of the synthetic images; oracles re-derive masks from
// these published levels.
struct SynthLevels {
  float background = 0.08f;
  float lung = 0.30f;
  float heart = 0.62f;
  float foreign_object = 0.96f;
  float thorax_threshold = 0.18f;
  float heart_threshold = 0.45f;
  float fo_threshold = 0.85f;
};

// Segments: 0 background, 1 thorax (lung field), 2 ellipse ("heart").
inline constexpr int kSegBackground = 0;
inline constexpr int kSegThorax = 1;
inline constexpr int kSegEllipse = 2;

struct SyntheticSample {
  ImageF image;
  double disease_factor = 0.0;  // ellipse width / thorax width
  int label = 0;                // 1 iff disease_factor > 0.5
  MaskI seg_mask;
  bool fo_present = false;
  MaskI fo_mask;
  int fo_x0 = -1, fo_y0 = -1, fo_side = 0;
  std::uint64_t seed = 0;
  int id = 0;
};

void validate_config(const SynthConfig& cfg);
std::vector<SyntheticSample> generate_dataset(const SynthConfig& cfg);

// Horizontal-extent ratio of ellipse vs thorax recomputed from a label mask;
// this is the measurement the stored disease_factor must agree with.
double width_ratio_from_mask(const MaskI& seg);

// Deterministic train/test split of [0, n).
struct Split {
  std::vector<int> train, test;
};
Split split_indices(int n, double test_fraction, std::uint64_t seed);

// Directory persistence: images + masks as PGM, metadata as JSON-lines.
void save_dataset(const std::filesystem::path& dir, const std::vector<SyntheticSample>& samples,
                  const SynthConfig& cfg);
std::vector<SyntheticSample> load_dataset(const std::filesystem::path& dir);
SynthConfig load_dataset_config(const std::filesystem::path& dir);

// Per-bin index lists produced by discretizing a posterior over the samples.
struct BinnedDataset {
  std::vector<std::vector<int>> bins;
  std::vector<int> underfilled;  // bins with fewer than per_bin_count
  std::vector<int> empty;
  int per_bin_count = 0;
};

BinnedDataset bin_balanced_split(const std::vector<SyntheticSample>& samples,
                                 const std::function<double(const ImageF&)>& posterior,
                                 int num_bins, int per_bin_count);

}  // namespace cfx
