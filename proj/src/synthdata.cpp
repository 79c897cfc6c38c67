#include "cfx/synthdata.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "cfx/condition.hpp"

namespace cfx {

using nlohmann::json;

void validate_config(const SynthConfig& cfg) {
  if (cfg.count < 1) throw ConfigError("SynthConfig.count must be >= 1");
  if (cfg.image_size < 32) throw ConfigError("SynthConfig.image_size must be >= 32");
  if (cfg.fo_rate < 0.0 || cfg.fo_rate > 1.0) throw ConfigError("SynthConfig.fo_rate must lie in [0,1]");
  if (cfg.noise_level < 0.0 || cfg.noise_level > 0.2)
    throw ConfigError("SynthConfig.noise_level must lie in [0,0.2]");
}

namespace {

struct Ellipse {
  double cx, cy, a, b;
  bool contains(int px, int py) const {
    const double dx = (px - cx) / a, dy = (py - cy) / b;
    return dx * dx + dy * dy <= 1.0;
  }
};

SyntheticSample make_sample(int id, const SynthConfig& cfg, const SynthLevels& lv, Rng rng) {
  const int S = cfg.image_size;
  SyntheticSample s;
  s.id = id;
  s.seed = cfg.seed;
  s.image = ImageF::Zero(S, S);
  s.seg_mask = MaskI::Zero(S, S);
  s.fo_mask = MaskI::Zero(S, S);

  // thorax: odd pixel extent so the widest row sits on an integer center
  const int wt_lo = int(std::round(0.72 * S)) | 1;
  const int wt_hi = int(std::round(0.84 * S)) | 1;
  const int wt = int(rng.uniform_int(0, (wt_hi - wt_lo) / 2)) * 2 + wt_lo;
  const int cx = S / 2 + int(rng.uniform_int(-1, 1));
  const int cy = S / 2 + int(rng.uniform_int(-1, 1));
  const Ellipse thorax{double(cx), double(cy), (wt - 1) / 2.0, 0.44 * S + rng.uniform(-1.0, 1.0)};

  // disease ellipse: exact horizontal pixel extent we = round(r * wt)
  s.disease_factor = rng.uniform(0.25, 0.75);
  s.label = s.disease_factor > 0.5 ? 1 : 0;
  const int we = std::max(3, int(std::round(s.disease_factor * wt)));
  const double ecx = cx + ((we % 2 == 0) ? 0.5 : 0.0);
  const double ecy = cy + std::round(0.10 * thorax.b);
  const Ellipse heart{ecx, ecy, (we - 1) / 2.0, std::max(2.0, 0.50 * thorax.b)};

  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      if (heart.contains(x, y))
        s.seg_mask(y, x) = kSegEllipse;
      else if (thorax.contains(x, y))
        s.seg_mask(y, x) = kSegThorax;
    }

  const float brightness = float(rng.uniform(-0.02, 0.02));
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      float v = lv.background;
      if (s.seg_mask(y, x) == kSegThorax)
        v = lv.lung + 0.03f * (float(y) / S - 0.5f);
      else if (s.seg_mask(y, x) == kSegEllipse)
        v = lv.heart;
      v += brightness + float(rng.uniform(-cfg.noise_level, cfg.noise_level));
      s.image(y, x) = v;
    }

  if (rng.uniform() < cfg.fo_rate) {
    const int side = int(rng.uniform_int(3, 5));
    // candidate top-left corners with the whole square on lung pixels
    std::vector<std::pair<int, int>> spots;
    for (int y = 0; y + side <= S; ++y)
      for (int x = 0; x + side <= S; ++x) {
        bool ok = true;
        for (int dy = 0; dy < side && ok; ++dy)
          for (int dx = 0; dx < side && ok; ++dx)
            ok = s.seg_mask(y + dy, x + dx) == kSegThorax;
        if (ok) spots.emplace_back(x, y);
      }
    if (!spots.empty()) {
      const auto [fx, fy] = spots[std::size_t(rng.uniform_int(0, std::int64_t(spots.size()) - 1))];
      s.fo_present = true;
      s.fo_x0 = fx;
      s.fo_y0 = fy;
      s.fo_side = side;
      for (int dy = 0; dy < side; ++dy)
        for (int dx = 0; dx < side; ++dx) {
          s.image(fy + dy, fx + dx) = lv.foreign_object;
          s.fo_mask(fy + dy, fx + dx) = 1;
        }
    }
  }

  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) s.image(y, x) = quantize8(s.image(y, x));
  return s;
}

}  // namespace

std::vector<SyntheticSample> generate_dataset(const SynthConfig& cfg) {
  validate_config(cfg);
  const SynthLevels lv;
  std::vector<SyntheticSample> out(static_cast<std::size_t>(cfg.count));
  const Rng root(cfg.seed);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < cfg.count; ++i)
    out[std::size_t(i)] = make_sample(i, cfg, lv, root.fork("sample" + std::to_string(i)));
  return out;
}

double width_ratio_from_mask(const MaskI& seg) {
  int tx_min = -1, tx_max = -1, ex_min = -1, ex_max = -1;
  for (int x = 0; x < seg.cols(); ++x)
    for (int y = 0; y < seg.rows(); ++y) {
      const int v = seg(y, x);
      if (v == kSegThorax || v == kSegEllipse) {
        if (tx_min < 0) tx_min = x;
        tx_max = x;
      }
      if (v == kSegEllipse) {
        if (ex_min < 0) ex_min = x;
        ex_max = x;
      }
    }
  if (tx_min < 0) throw DataError("width_ratio_from_mask: no thorax pixels");
  if (ex_min < 0) return 0.0;
  return double(ex_max - ex_min + 1) / double(tx_max - tx_min + 1);
}

Split split_indices(int n, double test_fraction, std::uint64_t seed) {
  std::vector<int> idx(static_cast<std::size_t>(n), 0);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  for (int i = n - 1; i > 0; --i) std::swap(idx[std::size_t(i)], idx[std::size_t(rng.uniform_int(0, i))]);
  const int n_test = int(std::lround(test_fraction * n));
  Split sp;
  sp.test.assign(idx.begin(), idx.begin() + n_test);
  sp.train.assign(idx.begin() + n_test, idx.end());
  std::sort(sp.test.begin(), sp.test.end());
  std::sort(sp.train.begin(), sp.train.end());
  return sp;
}

namespace {
std::string sample_name(int id) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%05d", id);
  return buf;
}
}  // namespace

void save_dataset(const std::filesystem::path& dir, const std::vector<SyntheticSample>& samples,
                  const SynthConfig& cfg) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  std::ostringstream index;
  for (const auto& s : samples) {
    const std::string name = sample_name(s.id);
    write_pgm(dir / "images" / (name + ".pgm"), s.image);
    write_pgm_labels(dir / "masks" / (name + "_seg.pgm"), s.seg_mask);
    write_pgm_labels(dir / "masks" / (name + "_fo.pgm"), s.fo_mask);
    json rec{{"id", s.id},
             {"image", "images/" + name + ".pgm"},
             {"seg", "masks/" + name + "_seg.pgm"},
             {"fo_mask", "masks/" + name + "_fo.pgm"},
             {"disease_factor", s.disease_factor},
             {"label", s.label},
             {"fo_present", s.fo_present},
             {"fo_box", {s.fo_x0, s.fo_y0, s.fo_side}},
             {"seed", s.seed}};
    index << rec.dump() << "\n";
  }
  write_text_file(dir / "index.jsonl", index.str());
  const SynthLevels lv;
  json meta{{"schema_version", 1},
            {"count", cfg.count},
            {"image_size", cfg.image_size},
            {"fo_rate", cfg.fo_rate},
            {"noise_level", cfg.noise_level},
            {"seed", cfg.seed},
            {"levels",
             {{"background", lv.background},
              {"lung", lv.lung},
              {"heart", lv.heart},
              {"foreign_object", lv.foreign_object},
              {"thorax_threshold", lv.thorax_threshold},
              {"heart_threshold", lv.heart_threshold},
              {"fo_threshold", lv.fo_threshold}}}};
  write_text_file(dir / "dataset.json", meta.dump(2) + "\n");
}

std::vector<SyntheticSample> load_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "index.jsonl");
  if (!in) throw InputError("dataset index not found: " + (dir / "index.jsonl").string());
  std::vector<SyntheticSample> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json rec = json::parse(line);
    SyntheticSample s;
    s.id = rec.at("id").get<int>();
    s.image = read_pgm(dir / rec.at("image").get<std::string>());
    s.seg_mask = read_pgm_labels(dir / rec.at("seg").get<std::string>());
    s.fo_mask = read_pgm_labels(dir / rec.at("fo_mask").get<std::string>());
    s.disease_factor = rec.at("disease_factor").get<double>();
    s.label = rec.at("label").get<int>();
    s.fo_present = rec.at("fo_present").get<bool>();
    const auto& box = rec.at("fo_box");
    s.fo_x0 = box[0].get<int>();
    s.fo_y0 = box[1].get<int>();
    s.fo_side = box[2].get<int>();
    s.seed = rec.at("seed").get<std::uint64_t>();
    out.push_back(std::move(s));
  }
  return out;
}

SynthConfig load_dataset_config(const std::filesystem::path& dir) {
  const json meta = json::parse(read_text_file(dir / "dataset.json"));
  SynthConfig cfg;
  cfg.count = meta.at("count").get<int>();
  cfg.image_size = meta.at("image_size").get<int>();
  cfg.fo_rate = meta.at("fo_rate").get<double>();
  cfg.noise_level = meta.at("noise_level").get<double>();
  cfg.seed = meta.at("seed").get<std::uint64_t>();
  return cfg;
}

BinnedDataset bin_balanced_split(const std::vector<SyntheticSample>& samples,
                                 const std::function<double(const ImageF&)>& posterior,
                                 int num_bins, int per_bin_count) {
  if (num_bins < 2) throw ConfigError("bin_balanced_split: num_bins must be >= 2");
  BinnedDataset out;
  out.per_bin_count = per_bin_count;
  out.bins.assign(std::size_t(num_bins), {});
  for (int i = 0; i < int(samples.size()); ++i) {
    const double p = posterior(samples[std::size_t(i)].image);
    const int b = discretize(p, 0.0, num_bins).value;
    auto& bin = out.bins[std::size_t(b)];
    if (int(bin.size()) < per_bin_count) bin.push_back(i);
  }
  for (int b = 0; b < num_bins; ++b) {
    if (out.bins[std::size_t(b)].empty())
      out.empty.push_back(b);
    else if (int(out.bins[std::size_t(b)].size()) < per_bin_count)
      out.underfilled.push_back(b);
  }
  return out;
}

}  // namespace cfx
