#pragma once

#include "cfx/explainer.hpp"
#include "cfx/metrics.hpp"

namespace cfx {

struct PipelineConfig {
  std::uint64_t seed = 1;
  std::string out_dir = "runs/default";
  bool strict_determinism = false;
  int threads = 2;

  SynthConfig dataset;
  double test_fraction = 0.25;
  ClassifierConfig classifier;
  ExplainerConfig explainer;
  int per_bin_cap = 400;

  std::string context_provider = "oracle";  // oracle | learned
  SegmenterConfig segmenter;

  // metrics
  int eval_count = 400;
  int lsc_count = 150;
  int deletion_images = 100;
  int deletion_steps = 20;
  std::vector<double> delta_grid = {-0.8, -0.6, -0.4, -0.2, 0.2, 0.4, 0.6, 0.8};

  std::string raw_json = "{}";
};

// Strict parsing: unknown or ill-typed fields raise a ConfigError naming the
// field. Sub-seeds and derived settings flow from the root seed.
PipelineConfig parse_config(const std::string& json_text);
PipelineConfig load_config_file(const std::filesystem::path& p);
std::string canonical_config_json(const PipelineConfig& cfg);
std::string config_hash(const PipelineConfig& cfg);

// honors CFX_OUT_ROOT
std::filesystem::path resolve_out_dir(const PipelineConfig& cfg);

void apply_threading(const PipelineConfig& cfg);

void stage_gen_data(const PipelineConfig& cfg);
void stage_train_classifier(const PipelineConfig& cfg);
void stage_train_explainer(const PipelineConfig& cfg, IdentityLossKind kind);
void stage_train_segmenter(const PipelineConfig& cfg);
void stage_evaluate(const PipelineConfig& cfg);
void stage_report(const PipelineConfig& cfg);
void run_all(const PipelineConfig& cfg);

struct ExplainOutput {
  ImageF counterfactual;
  double base_posterior = 0.0;
  double achieved_posterior = 0.0;
  int bin = 0;
};
ExplainOutput run_explain(const PipelineConfig& cfg, const std::filesystem::path& input_image,
                          double delta, const std::optional<std::filesystem::path>& out_image);

std::filesystem::path dataset_dir(const PipelineConfig& cfg);
std::filesystem::path classifier_ckpt(const PipelineConfig& cfg);
std::filesystem::path explainer_ckpt(const PipelineConfig& cfg, IdentityLossKind kind);
std::filesystem::path report_json_path(const PipelineConfig& cfg);

}  // namespace cfx
