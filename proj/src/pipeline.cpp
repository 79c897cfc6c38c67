#include "cfx/pipeline.hpp"

#include <json.hpp>

#include <Eigen/Core>
#include <algorithm>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "cfx/plot.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace cfx {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// config

namespace {

[[noreturn]] void field_error(const std::string& path, const std::string& what) {
  throw ConfigError("config field '" + path + "': " + what);
}

template <typename T>
T get_field(const json& obj, const std::string& scope, const std::string& key, T fallback) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    field_error(scope.empty() ? key : scope + "." + key, "wrong type");
  }
}

void check_known(const json& obj, const std::string& scope, const std::set<std::string>& known) {
  for (auto it = obj.begin(); it != obj.end(); ++it)
    if (!known.count(it.key()))
      field_error(scope.empty() ? it.key() : scope + "." + it.key(), "unknown field");
}

}  // namespace

PipelineConfig parse_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!root.is_object()) throw ConfigError("config root must be a JSON object");
  check_known(root, "",
              {"seed", "out_dir", "strict_determinism", "threads", "dataset", "test_fraction",
               "classifier", "explainer", "per_bin_cap", "context_provider", "segmenter",
               "metrics"});
  PipelineConfig cfg;
  cfg.seed = get_field<std::uint64_t>(root, "", "seed", cfg.seed);
  cfg.out_dir = get_field<std::string>(root, "", "out_dir", cfg.out_dir);
  cfg.strict_determinism = get_field<bool>(root, "", "strict_determinism", cfg.strict_determinism);
  cfg.threads = get_field<int>(root, "", "threads", cfg.threads);
  cfg.test_fraction = get_field<double>(root, "", "test_fraction", cfg.test_fraction);
  if (cfg.test_fraction <= 0.0 || cfg.test_fraction >= 1.0)
    field_error("test_fraction", "must lie strictly inside (0,1)");
  cfg.per_bin_cap = get_field<int>(root, "", "per_bin_cap", cfg.per_bin_cap);
  cfg.context_provider = get_field<std::string>(root, "", "context_provider", cfg.context_provider);
  if (cfg.context_provider != "oracle" && cfg.context_provider != "learned")
    field_error("context_provider", "must be 'oracle' or 'learned'");

  if (root.contains("dataset")) {
    const json& d = root["dataset"];
    check_known(d, "dataset", {"count", "image_size", "fo_rate", "noise_level"});
    cfg.dataset.count = get_field<int>(d, "dataset", "count", cfg.dataset.count);
    cfg.dataset.image_size = get_field<int>(d, "dataset", "image_size", cfg.dataset.image_size);
    cfg.dataset.fo_rate = get_field<double>(d, "dataset", "fo_rate", cfg.dataset.fo_rate);
    cfg.dataset.noise_level = get_field<double>(d, "dataset", "noise_level", cfg.dataset.noise_level);
  }
  if (root.contains("classifier")) {
    const json& c = root["classifier"];
    check_known(c, "classifier",
                {"epochs", "batch", "lr", "base_channels", "soft_label_sharpness"});
    cfg.classifier.epochs = get_field<int>(c, "classifier", "epochs", cfg.classifier.epochs);
    cfg.classifier.batch = get_field<int>(c, "classifier", "batch", cfg.classifier.batch);
    cfg.classifier.lr = get_field<float>(c, "classifier", "lr", cfg.classifier.lr);
    cfg.classifier.base_channels =
        get_field<int>(c, "classifier", "base_channels", cfg.classifier.base_channels);
    cfg.classifier.soft_label_sharpness = get_field<double>(
        c, "classifier", "soft_label_sharpness", cfg.classifier.soft_label_sharpness);
  }
  if (root.contains("explainer")) {
    const json& e = root["explainer"];
    check_known(e, "explainer",
                {"num_bins", "steps", "batch", "n_dis", "lambda_adv", "lambda_kl",
                 "lambda_identity", "lr", "beta1", "beta2", "latent_dim", "enc_base", "gen_base",
                 "disc_base", "spectral_norm", "cyclic_through_encoder", "det_temperature",
                 "checkpoint_every", "grid_every"});
    auto& x = cfg.explainer;
    x.num_bins = get_field<int>(e, "explainer", "num_bins", x.num_bins);
    if (x.num_bins < 2) field_error("explainer.num_bins", "must be >= 2");
    x.steps = get_field<int>(e, "explainer", "steps", x.steps);
    x.batch = get_field<int>(e, "explainer", "batch", x.batch);
    x.n_dis = get_field<int>(e, "explainer", "n_dis", x.n_dis);
    x.lambda_adv = get_field<float>(e, "explainer", "lambda_adv", x.lambda_adv);
    x.lambda_kl = get_field<float>(e, "explainer", "lambda_kl", x.lambda_kl);
    x.lambda_identity = get_field<float>(e, "explainer", "lambda_identity", x.lambda_identity);
    x.lr = get_field<float>(e, "explainer", "lr", x.lr);
    x.beta1 = get_field<float>(e, "explainer", "beta1", x.beta1);
    x.beta2 = get_field<float>(e, "explainer", "beta2", x.beta2);
    x.latent_dim = get_field<int>(e, "explainer", "latent_dim", x.latent_dim);
    x.enc_base = get_field<int>(e, "explainer", "enc_base", x.enc_base);
    x.gen_base = get_field<int>(e, "explainer", "gen_base", x.gen_base);
    x.disc_base = get_field<int>(e, "explainer", "disc_base", x.disc_base);
    x.spectral_norm = get_field<bool>(e, "explainer", "spectral_norm", x.spectral_norm);
    x.cyclic_through_encoder =
        get_field<bool>(e, "explainer", "cyclic_through_encoder", x.cyclic_through_encoder);
    x.det_temperature = get_field<float>(e, "explainer", "det_temperature", x.det_temperature);
    x.checkpoint_every = get_field<int>(e, "explainer", "checkpoint_every", x.checkpoint_every);
    x.grid_every = get_field<int>(e, "explainer", "grid_every", x.grid_every);
  }
  if (root.contains("segmenter")) {
    const json& s = root["segmenter"];
    check_known(s, "segmenter", {"steps", "batch", "base_channels", "lr"});
    cfg.segmenter.steps = get_field<int>(s, "segmenter", "steps", cfg.segmenter.steps);
    cfg.segmenter.batch = get_field<int>(s, "segmenter", "batch", cfg.segmenter.batch);
    cfg.segmenter.base_channels =
        get_field<int>(s, "segmenter", "base_channels", cfg.segmenter.base_channels);
    cfg.segmenter.lr = get_field<float>(s, "segmenter", "lr", cfg.segmenter.lr);
  }
  if (root.contains("metrics")) {
    const json& m = root["metrics"];
    check_known(m, "metrics",
                {"eval_count", "lsc_count", "deletion_images", "deletion_steps", "delta_grid"});
    cfg.eval_count = get_field<int>(m, "metrics", "eval_count", cfg.eval_count);
    cfg.lsc_count = get_field<int>(m, "metrics", "lsc_count", cfg.lsc_count);
    cfg.deletion_images = get_field<int>(m, "metrics", "deletion_images", cfg.deletion_images);
    cfg.deletion_steps = get_field<int>(m, "metrics", "deletion_steps", cfg.deletion_steps);
    cfg.delta_grid = get_field<std::vector<double>>(m, "metrics", "delta_grid", cfg.delta_grid);
  }

  // derived seeds and sizes
  cfg.dataset.seed = Rng(cfg.seed).fork("dataset").next_u64();
  cfg.classifier.seed = Rng(cfg.seed).fork("classifier").next_u64();
  cfg.classifier.image_size = cfg.dataset.image_size;
  cfg.explainer.seed = Rng(cfg.seed).fork("explainer").next_u64();
  cfg.explainer.image_size = cfg.dataset.image_size;
  cfg.segmenter.seed = Rng(cfg.seed).fork("segmenter").next_u64();
  cfg.segmenter.image_size = cfg.dataset.image_size;
  if (cfg.strict_determinism) cfg.threads = 1;
  cfg.raw_json = json::parse(json_text).dump();
  return cfg;
}

PipelineConfig load_config_file(const fs::path& p) { return parse_config(read_text_file(p)); }

std::string canonical_config_json(const PipelineConfig& cfg) {
  json j = json::parse(cfg.raw_json);
  j["seed"] = cfg.seed;
  return j.dump();
}

std::string config_hash(const PipelineConfig& cfg) { return sha256_hex(canonical_config_json(cfg)); }

fs::path resolve_out_dir(const PipelineConfig& cfg) {
  fs::path out(cfg.out_dir);
  if (const char* root = std::getenv("CFX_OUT_ROOT"); root && out.is_relative())
    out = fs::path(root) / out;
  return out;
}

void apply_threading(const PipelineConfig& cfg) {
  const int threads = cfg.strict_determinism ? 1 : std::max(1, cfg.threads);
#ifdef _OPENMP
  omp_set_num_threads(threads);
#endif
  Eigen::setNbThreads(threads);
}

fs::path dataset_dir(const PipelineConfig& cfg) { return resolve_out_dir(cfg) / "dataset"; }
fs::path classifier_ckpt(const PipelineConfig& cfg) {
  return resolve_out_dir(cfg) / "classifier.ckpt";
}
fs::path explainer_ckpt(const PipelineConfig& cfg, IdentityLossKind kind) {
  const char* name = kind == IdentityLossKind::carl  ? "explainer_carl.ckpt"
                     : kind == IdentityLossKind::l1 ? "explainer_l1.ckpt"
                                                    : "explainer_noid.ckpt";
  return resolve_out_dir(cfg) / name;
}
fs::path report_json_path(const PipelineConfig& cfg) {
  return resolve_out_dir(cfg) / "report" / "metrics.json";
}

// ---------------------------------------------------------------------------
// manifest

namespace {

void manifest_update(const PipelineConfig& cfg, const std::string& stage,
                     const std::vector<fs::path>& inputs, const std::vector<fs::path>& outputs) {
  const fs::path out = resolve_out_dir(cfg);
  const fs::path manifest_path = out / "manifest.json";
  json manifest = json::object();
  if (fs::exists(manifest_path)) manifest = json::parse(read_text_file(manifest_path));
  json entry;
  entry["config_hash"] = config_hash(cfg);
  json in = json::object(), outj = json::object();
  for (const auto& p : inputs)
    in[fs::relative(p, out).generic_string()] = sha256_file(p);
  for (const auto& p : outputs)
    outj[fs::relative(p, out).generic_string()] = sha256_file(p);
  entry["inputs"] = in;
  entry["outputs"] = outj;
  manifest[stage] = entry;
  write_text_file(manifest_path, manifest.dump(2) + "\n");
}

void require_artifact(const fs::path& p, const std::string& produced_by) {
  if (!fs::exists(p))
    throw InputError("missing artifact " + p.string() + "; run the '" + produced_by +
                     "' stage first");
}

std::string split_seed_tag = "split";

Split dataset_split(const PipelineConfig& cfg) {
  return split_indices(cfg.dataset.count, cfg.test_fraction,
                       Rng(cfg.seed).fork(split_seed_tag).next_u64());
}

}  // namespace

// ---------------------------------------------------------------------------
// stages

void stage_gen_data(const PipelineConfig& cfg) {
  apply_threading(cfg);
  const fs::path dir = dataset_dir(cfg);
  fs::create_directories(dir);
  const auto samples = generate_dataset(cfg.dataset);
  save_dataset(dir, samples, cfg.dataset);
  manifest_update(cfg, "gen-data", {}, {dir / "index.jsonl", dir / "dataset.json"});
}

void stage_train_classifier(const PipelineConfig& cfg) {
  apply_threading(cfg);
  require_artifact(dataset_dir(cfg) / "index.jsonl", "gen-data");
  const auto samples = load_dataset(dataset_dir(cfg));
  const Split split = dataset_split(cfg);
  BlackBoxClassifier clf(cfg.classifier);
  const auto log = train_classifier(clf, samples, split.train, cfg.classifier);
  clf.save(classifier_ckpt(cfg));
  std::ostringstream csv;
  csv << "step,loss\n";
  for (const auto& row : log) csv << row.step << "," << row.loss << "\n";
  write_text_file(resolve_out_dir(cfg) / "classifier_log.csv", csv.str());
  manifest_update(cfg, "train-classifier", {dataset_dir(cfg) / "index.jsonl"},
                  {classifier_ckpt(cfg), resolve_out_dir(cfg) / "classifier_log.csv"});
}

namespace {

BinnedDataset binned_train_set(const PipelineConfig& cfg,
                               const std::vector<SyntheticSample>& samples,
                               BlackBoxClassifier& clf, const Split& split) {
  std::vector<SyntheticSample> dummy;
  // bin over the train split only, keeping global indices
  std::vector<std::vector<int>> bins(std::size_t(cfg.explainer.num_bins));
  for (int idx : split.train) {
    const double p = clf.posterior(samples[std::size_t(idx)].image)[cfg.explainer.target_label];
    const int b = discretize(p, 0.0, cfg.explainer.num_bins).value;
    if (int(bins[std::size_t(b)].size()) < cfg.per_bin_cap) bins[std::size_t(b)].push_back(idx);
  }
  BinnedDataset binned;
  binned.per_bin_count = cfg.per_bin_cap;
  binned.bins = std::move(bins);
  for (int b = 0; b < cfg.explainer.num_bins; ++b) {
    if (binned.bins[std::size_t(b)].empty())
      binned.empty.push_back(b);
    else if (int(binned.bins[std::size_t(b)].size()) < cfg.per_bin_cap)
      binned.underfilled.push_back(b);
  }
  return binned;
}

}  // namespace

void stage_train_explainer(const PipelineConfig& cfg, IdentityLossKind kind) {
  apply_threading(cfg);
  require_artifact(dataset_dir(cfg) / "index.jsonl", "gen-data");
  require_artifact(classifier_ckpt(cfg), "train-classifier");
  const auto samples = load_dataset(dataset_dir(cfg));
  BlackBoxClassifier clf = BlackBoxClassifier::load(classifier_ckpt(cfg));
  const Split split = dataset_split(cfg);

  ExplainerConfig xcfg = cfg.explainer;
  xcfg.identity = kind;
  if (kind != IdentityLossKind::carl)
    xcfg.seed = Rng(xcfg.seed).fork(kind == IdentityLossKind::l1 ? "l1" : "noid").next_u64();

  const BinnedDataset binned = binned_train_set(cfg, samples, clf, split);
  {
    json bins_report;
    std::vector<int> counts;
    for (const auto& b : binned.bins) counts.push_back(int(b.size()));
    bins_report["counts"] = counts;
    bins_report["underfilled"] = binned.underfilled;
    bins_report["empty"] = binned.empty;
    bins_report["per_bin_cap"] = cfg.per_bin_cap;
    write_text_file(resolve_out_dir(cfg) / "bins.json", bins_report.dump(2) + "\n");
  }

  ExplainerModel model(xcfg);
  const fs::path work = resolve_out_dir(cfg) / (kind == IdentityLossKind::carl  ? "explainer_carl"
                                                : kind == IdentityLossKind::l1 ? "explainer_l1"
                                                                               : "explainer_noid");
  train_explainer(model, clf, samples, binned, xcfg, work);
  model.save(explainer_ckpt(cfg, kind));
  manifest_update(cfg, std::string("train-explainer-") + (kind == IdentityLossKind::carl ? "carl" : kind == IdentityLossKind::l1 ? "l1" : "noid"),
                  {dataset_dir(cfg) / "index.jsonl", classifier_ckpt(cfg)},
                  {explainer_ckpt(cfg, kind), work / "train_log.csv"});
}

void stage_train_segmenter(const PipelineConfig& cfg) {
  apply_threading(cfg);
  require_artifact(dataset_dir(cfg) / "index.jsonl", "gen-data");
  const auto samples = load_dataset(dataset_dir(cfg));
  const Split split = dataset_split(cfg);
  LearnedSegmenter seg(cfg.segmenter);
  std::vector<int> eval_idx(split.test.begin(),
                            split.test.begin() + std::min<std::size_t>(100, split.test.size()));
  const SegmenterReport rep = train_segmenter(seg, samples, split.train, eval_idx, cfg.segmenter);
  seg.save(resolve_out_dir(cfg) / "segmenter.ckpt");
  json j{{"per_label_iou", rep.per_label_iou}, {"mean_iou", rep.mean_iou},
         {"final_loss", rep.final_loss}};
  write_text_file(resolve_out_dir(cfg) / "segmenter_report.json", j.dump(2) + "\n");
  manifest_update(cfg, "train-segmenter", {dataset_dir(cfg) / "index.jsonl"},
                  {resolve_out_dir(cfg) / "segmenter.ckpt",
                   resolve_out_dir(cfg) / "segmenter_report.json"});
}

// ---------------------------------------------------------------------------
// evaluation

namespace {

json metric_entry(double value, long n, const char* better, const char* unit = "") {
  return json{{"value", value}, {"n", n}, {"better", better}, {"unit", unit}};
}

json ttest_entry(const TTestResult& t) {
  return json{{"mean_diff", t.mean_diff}, {"std", t.std_dev},  {"ci95_lo", t.ci95_lo},
              {"ci95_hi", t.ci95_hi},     {"t", t.infinite_t ? 1e308 * (t.mean_diff > 0 ? 1 : -1) : t.t},
              {"df", t.df},               {"p", t.p},
              {"infinite_t", t.infinite_t}, {"n", t.n_a},
              {"mean_a", t.mean_a},       {"mean_b", t.mean_b}};
}

struct EvalData {
  std::vector<SyntheticSample> samples;
  Split split;
  std::vector<int> eval_ids;  // subset of test used for counterfactual metrics
  std::vector<double> base;   // posterior of target label per eval id position
};

}  // namespace

void stage_evaluate(const PipelineConfig& cfg) {
  apply_threading(cfg);
  require_artifact(dataset_dir(cfg) / "index.jsonl", "gen-data");
  require_artifact(classifier_ckpt(cfg), "train-classifier");
  require_artifact(explainer_ckpt(cfg, IdentityLossKind::carl), "train-explainer");
  require_artifact(explainer_ckpt(cfg, IdentityLossKind::l1), "train-explainer (l1 ablation)");

  BlackBoxClassifier clf = BlackBoxClassifier::load(classifier_ckpt(cfg));
  ExplainerModel carl = ExplainerModel::load(explainer_ckpt(cfg, IdentityLossKind::carl));
  ExplainerModel l1 = ExplainerModel::load(explainer_ckpt(cfg, IdentityLossKind::l1));
  const int target = cfg.explainer.target_label;
  const int nb = cfg.explainer.num_bins;

  EvalData ev;
  ev.samples = load_dataset(dataset_dir(cfg));
  ev.split = dataset_split(cfg);
  for (int i = 0; i < int(ev.split.test.size()) && i < cfg.eval_count; ++i)
    ev.eval_ids.push_back(ev.split.test[std::size_t(i)]);

  const fs::path report_dir = resolve_out_dir(cfg) / "report";
  fs::create_directories(report_dir / "curves");

  // posteriors over the whole test split (both labels)
  std::vector<Eigen::VectorXd> test_posteriors;
  {
    std::vector<const ImageF*> ptrs;
    for (int id : ev.split.test) ptrs.push_back(&ev.samples[std::size_t(id)].image);
    test_posteriors = clf.posterior_batch(ptrs);
  }
  auto test_pos_of = [&](int id) {
    const auto it = std::lower_bound(ev.split.test.begin(), ev.split.test.end(), id);
    return test_posteriors[std::size_t(it - ev.split.test.begin())];
  };

  json metrics;

  // classifier quality
  {
    std::vector<double> scores;
    std::vector<int> labels;
    for (std::size_t i = 0; i < ev.split.test.size(); ++i) {
      scores.push_back(test_posteriors[i][target]);
      labels.push_back(ev.samples[std::size_t(ev.split.test[i])].label);
    }
    metrics["classifier_auroc_disease"] =
        metric_entry(auroc(scores, labels), long(scores.size()), "higher");
  }

  for (int i = 0; i < int(ev.eval_ids.size()); ++i)
    ev.base.push_back(test_pos_of(ev.eval_ids[std::size_t(i)])[target]);

  // consistency over bin-center targets; also collects the flip counterfactuals
  std::vector<std::vector<std::pair<double, double>>> consistency_pairs(ev.eval_ids.size());
  std::vector<ImageF> cf_flip(ev.eval_ids.size());        // toward the opposite extreme
  std::vector<double> cf_flip_achieved(ev.eval_ids.size());
  std::vector<ImageF> cf_low(ev.eval_ids.size()), cf_high(ev.eval_ids.size());
  std::vector<double> cf_low_achieved(ev.eval_ids.size()), cf_high_achieved(ev.eval_ids.size());
  {
    std::vector<const ImageF*> xs;
    std::vector<double> deltas;
    std::vector<int> owner, bin_of;
    for (int i = 0; i < int(ev.eval_ids.size()); ++i) {
      const double f = ev.base[std::size_t(i)];
      for (int b = 0; b < nb; ++b) {
        const double desired = (b + 0.5) / nb;
        xs.push_back(&ev.samples[std::size_t(ev.eval_ids[std::size_t(i)])].image);
        deltas.push_back(desired - f);
        owner.push_back(i);
        bin_of.push_back(b);
      }
    }
    auto res = carl.explain_batch(clf, xs, deltas);
    for (std::size_t k = 0; k < xs.size(); ++k) {
      const int i = owner[k];
      const double desired = (bin_of[k] + 0.5) / nb;
      consistency_pairs[std::size_t(i)].emplace_back(desired, res.achieved[k]);
      if (bin_of[k] == 0) {
        cf_low[std::size_t(i)] = res.counterfactuals[k];
        cf_low_achieved[std::size_t(i)] = res.achieved[k];
      }
      if (bin_of[k] == nb - 1) {
        cf_high[std::size_t(i)] = res.counterfactuals[k];
        cf_high_achieved[std::size_t(i)] = res.achieved[k];
      }
    }
    for (int i = 0; i < int(ev.eval_ids.size()); ++i) {
      const bool to_high = ev.base[std::size_t(i)] <= 0.5;
      cf_flip[std::size_t(i)] = to_high ? cf_high[std::size_t(i)] : cf_low[std::size_t(i)];
      cf_flip_achieved[std::size_t(i)] =
          to_high ? cf_high_achieved[std::size_t(i)] : cf_low_achieved[std::size_t(i)];
    }

    const ConsistencyResult cons = consistency_curve(ev.base, consistency_pairs, nb);
    json slopes = json::array();
    double min_slope = 1e300;
    std::ostringstream csv;
    csv << "group,f_lo,f_hi,desired,achieved\n";
    std::vector<plot::Series> series;
    for (std::size_t g = 0; g < cons.groups.size(); ++g) {
      const auto& grp = cons.groups[g];
      slopes.push_back(grp.slope);
      if (grp.count > 0) min_slope = std::min(min_slope, grp.slope);
      plot::Series s;
      s.gray = 0.15f * float(g);
      s.label = "f in " + std::to_string(g * 2) + "/10.." + std::to_string((g + 1) * 2) + "/10";
      for (std::size_t k = 0; k < grp.desired_centers.size(); ++k) {
        csv << g << "," << grp.f_lo << "," << grp.f_hi << "," << grp.desired_centers[k] << ","
            << grp.achieved_means[k] << "\n";
        s.x.push_back(grp.desired_centers[k]);
        s.y.push_back(grp.achieved_means[k]);
      }
      series.push_back(std::move(s));
    }
    write_text_file(report_dir / "curves" / "consistency.csv", csv.str());
    write_pgm(report_dir / "consistency_plot.pgm", plot::line_plot(series, 480, 360, true));
    metrics["consistency_slopes"] = slopes;
    metrics["consistency_slope_min"] =
        metric_entry(min_slope, long(ev.eval_ids.size()), "higher");
    metrics["consistency_mae"] =
        metric_entry(cons.mean_abs_error, long(ev.eval_ids.size()) * nb, "lower");
  }

  // counterfactual validity + class flips
  {
    std::vector<std::pair<double, double>> pairs;
    std::vector<Eigen::VectorXd> post_real, post_cf;
    std::vector<const ImageF*> cf_ptrs;
    for (std::size_t i = 0; i < ev.eval_ids.size(); ++i) cf_ptrs.push_back(&cf_flip[i]);
    const auto cf_posteriors = clf.posterior_batch(cf_ptrs);
    for (std::size_t i = 0; i < ev.eval_ids.size(); ++i) {
      pairs.emplace_back(ev.base[i], cf_posteriors[i][target]);
      post_real.push_back(test_pos_of(ev.eval_ids[i]));
      post_cf.push_back(cf_posteriors[i]);
    }
    metrics["cv_score"] = metric_entry(cv_score(pairs), long(pairs.size()), "higher");

    const Eigen::MatrixXd flips = class_flip_matrix(post_real, {post_cf}, {target});
    json fm = json::array();
    for (int c = 0; c < flips.cols(); ++c) fm.push_back(flips(0, c));
    metrics["flip_matrix"] = json::array({fm});
    double offdiag = 0.0;
    for (int c = 0; c < flips.cols(); ++c)
      if (c != target) offdiag = std::max(offdiag, flips(0, c));
    metrics["flip_offdiag_max"] = metric_entry(offdiag, long(pairs.size()), "lower");
    metrics["flip_diagonal"] = metric_entry(flips(0, target), long(pairs.size()), "higher");
  }

  // self and cyclic reconstruction
  {
    std::vector<const ImageF*> xs;
    std::vector<double> zeros_d;
    for (int id : ev.eval_ids) {
      xs.push_back(&ev.samples[std::size_t(id)].image);
      zeros_d.push_back(0.0);
    }
    auto self_res = carl.explain_batch(clf, xs, zeros_d);
    // cyclic: reverse the flip shift from the achieved posterior
    std::vector<const ImageF*> cf_ptrs;
    std::vector<double> back_deltas;
    for (std::size_t i = 0; i < ev.eval_ids.size(); ++i) {
      cf_ptrs.push_back(&cf_flip[i]);
      const double desired_flip = ev.base[i] <= 0.5 ? (nb - 0.5) / nb : 0.5 / nb;
      back_deltas.push_back(-(desired_flip - ev.base[i]));
    }
    auto cyc_res = carl.explain_batch(clf, cf_ptrs, back_deltas);
    double l1_sum = 0.0, carl_self_sum = 0.0, carl_cyc_sum = 0.0;
    for (std::size_t i = 0; i < ev.eval_ids.size(); ++i) {
      const auto& s = ev.samples[std::size_t(ev.eval_ids[i])];
      l1_sum += double((s.image - self_res.counterfactuals[i]).abs().mean());
      const ImageF det_x = oracle_detect(s.image);
      const ImageF det_self = oracle_detect(self_res.counterfactuals[i]);
      const ImageF det_cyc = oracle_detect(cyc_res.counterfactuals[i]);
      carl_self_sum += loss_carl(s.image, self_res.counterfactuals[i], s.seg_mask, &det_x, &det_self);
      carl_cyc_sum += loss_carl(s.image, cyc_res.counterfactuals[i], s.seg_mask, &det_x, &det_cyc);
    }
    const double n = double(ev.eval_ids.size());
    metrics["self_recon_l1"] = metric_entry(l1_sum / n, long(n), "lower");
    metrics["self_recon_carl"] = metric_entry(carl_self_sum / n, long(n), "lower");
    metrics["cyclic_carl"] = metric_entry(carl_cyc_sum / n, long(n), "lower");
    metrics["cyclic_carl_ratio"] =
        metric_entry(carl_cyc_sum / std::max(1e-12, carl_self_sum), long(n), "lower");
  }

  // FOP (carl vs l1) on foreign-object test samples
  {
    std::vector<const ImageF*> reals;
    std::vector<double> deltas;
    std::vector<int> ids;
    for (int id : ev.split.test) {
      const auto& s = ev.samples[std::size_t(id)];
      if (!s.fo_present) continue;
      reals.push_back(&s.image);
      const double f = test_pos_of(id)[target];
      const double desired = f <= 0.5 ? (nb - 0.5) / nb : 0.5 / nb;
      deltas.push_back(desired - f);
      ids.push_back(id);
      if (int(reals.size()) >= cfg.eval_count) break;
    }
    auto res_carl = carl.explain_batch(clf, reals, deltas);
    auto res_l1 = l1.explain_batch(clf, reals, deltas);
    std::vector<const ImageF*> cf_carl, cf_l1;
    for (auto& im : res_carl.counterfactuals) cf_carl.push_back(&im);
    for (auto& im : res_l1.counterfactuals) cf_l1.push_back(&im);
    auto detector = [](const ImageF& im) { return oracle_detect(im); };
    metrics["fop_carl"] = metric_entry(fop_score(reals, cf_carl, detector), long(reals.size()), "higher");
    metrics["fop_l1"] = metric_entry(fop_score(reals, cf_l1, detector), long(reals.size()), "higher");
  }

  // LSC: carl vs l1 across the delta grid
  {
    std::vector<const ImageF*> xs;
    std::vector<double> deltas;
    for (int i = 0; i < int(ev.eval_ids.size()) && i < cfg.lsc_count; ++i) {
      const double f = ev.base[std::size_t(i)];
      for (double d : cfg.delta_grid) {
        if (f + d < 0.0 || f + d > 1.0) continue;
        xs.push_back(&ev.samples[std::size_t(ev.eval_ids[std::size_t(i)])].image);
        deltas.push_back(d);
      }
    }
    auto res_a = carl.explain_batch(clf, xs, deltas);
    auto res_b = l1.explain_batch(clf, xs, deltas);
    std::vector<const ImageF*> pa, pb;
    for (auto& im : res_a.counterfactuals) pa.push_back(&im);
    for (auto& im : res_b.counterfactuals) pb.push_back(&im);
    const auto emb_x = clf.embed_batch(xs);
    const auto emb_a = clf.embed_batch(pa);
    const auto emb_b = clf.embed_batch(pb);
    metrics["lsc_carl_vs_l1"] = metric_entry(lsc_score(emb_x, emb_a, emb_b), long(xs.size()), "higher");
  }

  // FID: relative comparisons with the classifier-feature extractor
  {
    std::vector<const ImageF*> real_norm, real_ab;
    std::vector<const ImageF*> cf_ab, cf_norm;
    for (std::size_t i = 0; i < ev.eval_ids.size(); ++i) {
      const auto& s = ev.samples[std::size_t(ev.eval_ids[i])];
      const double f = ev.base[i];
      if (f < 0.2) {
        real_norm.push_back(&s.image);
        if (cf_high_achieved[i] > 0.8) cf_ab.push_back(&cf_high[i]);
      } else if (f > 0.8) {
        real_ab.push_back(&s.image);
        if (cf_low_achieved[i] < 0.2) cf_norm.push_back(&cf_low[i]);
      }
    }
    if (real_norm.size() >= 2 && real_ab.size() >= 2 && cf_ab.size() >= 2 && cf_norm.size() >= 2) {
      const auto er_norm = clf.embed_batch(real_norm);
      const auto er_ab = clf.embed_batch(real_ab);
      const auto ec_ab = clf.embed_batch(cf_ab);
      const auto ec_norm = clf.embed_batch(cf_norm);
      metrics["fid_real_ab_vs_real_norm"] =
          metric_entry(fid(er_ab, er_norm), long(real_ab.size()), "higher", "feature-fid");
      metrics["fid_real_ab_vs_cf_ab"] =
          metric_entry(fid(er_ab, ec_ab), long(cf_ab.size()), "lower", "feature-fid");
      metrics["fid_real_norm_vs_cf_norm"] =
          metric_entry(fid(er_norm, ec_norm), long(cf_norm.size()), "lower", "feature-fid");
    }
  }

  // clinical surrogate: CTR-analogue with paired and unpaired t-tests
  {
    std::vector<double> ctr_norm, ctr_cfab, ctr_ab, ctr_cfnorm;
    for (std::size_t i = 0; i < ev.eval_ids.size(); ++i) {
      const auto& s = ev.samples[std::size_t(ev.eval_ids[i])];
      const double f = ev.base[i];
      if (f < 0.2 && cf_high_achieved[i] > 0.8) {
        ctr_norm.push_back(ctr_analogue(s.seg_mask));
        ctr_cfab.push_back(ctr_analogue(oracle_segment(cf_high[i])));
      } else if (f > 0.8 && cf_low_achieved[i] < 0.2) {
        ctr_ab.push_back(ctr_analogue(s.seg_mask));
        ctr_cfnorm.push_back(ctr_analogue(oracle_segment(cf_low[i])));
      }
    }
    if (ctr_norm.size() >= 2) {
      metrics["ctr_paired_norm_vs_cfab"] = ttest_entry(paired_ttest(ctr_norm, ctr_cfab));
      std::vector<std::vector<double>> groups{ctr_norm, ctr_cfab};
      std::vector<std::string> labels{"real n", "cf a"};
      if (ctr_ab.size() >= 2) {
        metrics["ctr_paired_ab_vs_cfnorm"] = ttest_entry(paired_ttest(ctr_ab, ctr_cfnorm));
        metrics["ctr_unpaired_norm_real_vs_cfnorm"] = ttest_entry(unpaired_ttest(ctr_norm, ctr_cfnorm));
        metrics["ctr_unpaired_ab_real_vs_cfab"] = ttest_entry(unpaired_ttest(ctr_ab, ctr_cfab));
        groups.push_back(ctr_ab);
        groups.push_back(ctr_cfnorm);
        labels.push_back("real a");
        labels.push_back("cf n");
      }
      write_pgm(report_dir / "ctr_box_plot.pgm", plot::box_plot(groups, labels));
      // paired differences box plot
      std::vector<double> dn, da;
      for (std::size_t i = 0; i < ctr_norm.size(); ++i) dn.push_back(ctr_norm[i] - ctr_cfab[i]);
      for (std::size_t i = 0; i < ctr_ab.size(); ++i) da.push_back(ctr_ab[i] - ctr_cfnorm[i]);
      write_pgm(report_dir / "ctr_paired_diff_box_plot.pgm",
                plot::box_plot({dn, da}, {"n-cfa", "a-cfn"}));
    }
  }

  // object ablation with the oracle detector
  {
    double abs_delta = 0.0;
    long n = 0;
    for (int id : ev.split.test) {
      const auto& s = ev.samples[std::size_t(id)];
      if (!s.fo_present) continue;
      abs_delta += std::fabs(
          ablate_object(s.image, [](const ImageF& im) { return oracle_detect(im); }, clf, target));
      if (++n >= cfg.eval_count) break;
    }
    if (n > 0) metrics["ablation_mean_abs_delta"] = metric_entry(abs_delta / double(n), n, "lower");
  }

  // saliency localization: difference-map AUDC vs baselines and random order
  {
    std::vector<int> ids;
    for (std::size_t i = 0; i < ev.eval_ids.size() && int(ids.size()) < cfg.deletion_images; ++i)
      if (ev.base[i] > 0.7) ids.push_back(int(i));
    for (std::size_t i = 0; i < ev.eval_ids.size() && int(ids.size()) < cfg.deletion_images; ++i)
      if (ev.base[i] > 0.5 && ev.base[i] <= 0.7) ids.push_back(int(i));
    double audc_diff = 0.0, audc_rand = 0.0, audc_grad = 0.0, audc_gxi = 0.0, audc_ig = 0.0;
    double mass_in_box = 0.0;
    long wins = 0;
    Rng rng(Rng(cfg.seed).fork("deletion").next_u64());
    std::ostringstream dcsv;
    dcsv << "image,method,fraction,posterior\n";
    for (std::size_t k = 0; k < ids.size(); ++k) {
      const int i = ids[k];
      const auto& s = ev.samples[std::size_t(ev.eval_ids[std::size_t(i)])];
      const ImageF diff = difference_map(cf_low[std::size_t(i)], cf_high[std::size_t(i)]);
      // saliency mass inside union box of the counterfactual ellipses
      {
        int x0 = s.image.cols(), x1 = -1, y0 = s.image.rows(), y1 = -1;
        auto grow = [&](const MaskI& m) {
          for (int y = 0; y < m.rows(); ++y)
            for (int x = 0; x < m.cols(); ++x)
              if (m(y, x) == kSegEllipse) {
                x0 = std::min(x0, x); x1 = std::max(x1, x);
                y0 = std::min(y0, y); y1 = std::max(y1, y);
              }
        };
        grow(oracle_segment(cf_low[std::size_t(i)]));
        grow(oracle_segment(cf_high[std::size_t(i)]));
        grow(s.seg_mask);
        double inside = 0.0, total = 0.0;
        for (int y = 0; y < diff.rows(); ++y)
          for (int x = 0; x < diff.cols(); ++x) {
            total += diff(y, x);
            if (x >= x0 && x <= x1 && y >= y0 && y <= y1) inside += diff(y, x);
          }
        if (total > 0) mass_in_box += inside / total;
      }
      const SaliencyMaps base_maps = baseline_saliencies(s.image, clf, target);
      ImageF random_map(s.image.rows(), s.image.cols());
      for (int y = 0; y < random_map.rows(); ++y)
        for (int x = 0; x < random_map.cols(); ++x) random_map(y, x) = float(rng.uniform());
      const DeletionCurve c_diff = deletion_curve(s.image, diff, clf, target, cfg.deletion_steps);
      const DeletionCurve c_rand =
          deletion_curve(s.image, random_map, clf, target, cfg.deletion_steps);
      const DeletionCurve c_grad =
          deletion_curve(s.image, base_maps.gradient, clf, target, cfg.deletion_steps);
      const DeletionCurve c_gxi =
          deletion_curve(s.image, base_maps.gradient_x_input, clf, target, cfg.deletion_steps);
      const DeletionCurve c_ig =
          deletion_curve(s.image, base_maps.integrated_gradients, clf, target, cfg.deletion_steps);
      audc_diff += c_diff.audc;
      audc_rand += c_rand.audc;
      audc_grad += c_grad.audc;
      audc_gxi += c_gxi.audc;
      audc_ig += c_ig.audc;
      wins += c_diff.audc <= c_rand.audc;
      auto dump = [&](const char* name, const DeletionCurve& c) {
        for (std::size_t j = 0; j < c.fractions.size(); ++j)
          dcsv << k << "," << name << "," << c.fractions[j] << "," << c.posteriors[j] << "\n";
      };
      dump("difference_map", c_diff);
      dump("random", c_rand);
      dump("gradient", c_grad);
      dump("gradient_x_input", c_gxi);
      dump("integrated_gradients", c_ig);
    }
    const double n = double(ids.size());
    if (!ids.empty()) {
      metrics["deletion_audc_diffmap"] = metric_entry(audc_diff / n, long(n), "lower");
      metrics["deletion_audc_random"] = metric_entry(audc_rand / n, long(n), "lower");
      metrics["deletion_audc_gradient"] = metric_entry(audc_grad / n, long(n), "lower");
      metrics["deletion_audc_gradient_x_input"] = metric_entry(audc_gxi / n, long(n), "lower");
      metrics["deletion_audc_integrated_gradients"] = metric_entry(audc_ig / n, long(n), "lower");
      metrics["deletion_win_vs_random"] = metric_entry(double(wins) / n, long(n), "higher");
      metrics["difference_map_ellipse_mass"] = metric_entry(mass_in_box / n, long(n), "higher");
      write_text_file(report_dir / "curves" / "deletion.csv", dcsv.str());
    }
  }

  json report;
  report["schema_version"] = 1;
  report["seed"] = cfg.seed;
  report["config_hash"] = config_hash(cfg);
  report["split"] = json{{"id", "test"},
                         {"train_count", ev.split.train.size()},
                         {"test_count", ev.split.test.size()},
                         {"eval_count", ev.eval_ids.size()}};
  report["checkpoints"] =
      json{{"classifier", sha256_file(classifier_ckpt(cfg))},
           {"explainer_carl", sha256_file(explainer_ckpt(cfg, IdentityLossKind::carl))},
           {"explainer_l1", sha256_file(explainer_ckpt(cfg, IdentityLossKind::l1))}};
  report["metrics"] = metrics;
  write_text_file(report_json_path(cfg), report.dump(2) + "\n");
  manifest_update(cfg, "evaluate",
                  {dataset_dir(cfg) / "index.jsonl", classifier_ckpt(cfg),
                   explainer_ckpt(cfg, IdentityLossKind::carl),
                   explainer_ckpt(cfg, IdentityLossKind::l1)},
                  {report_json_path(cfg)});
}

// ---------------------------------------------------------------------------
// report

void stage_report(const PipelineConfig& cfg) {
  apply_threading(cfg);
  require_artifact(report_json_path(cfg), "evaluate");
  require_artifact(classifier_ckpt(cfg), "train-classifier");
  require_artifact(explainer_ckpt(cfg, IdentityLossKind::carl), "train-explainer");
  const fs::path report_dir = resolve_out_dir(cfg) / "report";
  fs::create_directories(report_dir / "figures");

  BlackBoxClassifier clf = BlackBoxClassifier::load(classifier_ckpt(cfg));
  ExplainerModel carl = ExplainerModel::load(explainer_ckpt(cfg, IdentityLossKind::carl));
  const auto samples = load_dataset(dataset_dir(cfg));
  const Split split = dataset_split(cfg);
  const int nb = cfg.explainer.num_bins;

  // delta-series grids and difference maps for a few test inputs
  std::vector<int> picks;
  for (int id : split.test) {
    picks.push_back(id);
    if (picks.size() >= 4) break;
  }
  for (std::size_t k = 0; k < picks.size(); ++k) {
    const auto& s = samples[std::size_t(picks[k])];
    const double f = clf.posterior(s.image)[cfg.explainer.target_label];
    std::vector<double> grid;
    for (int b = 0; b < nb; ++b) grid.push_back((b + 0.5) / nb - f);
    const ExplanationSeries series = carl.generate_series(clf, s.image, grid);
    std::vector<const ImageF*> tiles{&s.image};
    for (const auto& st : series.steps) tiles.push_back(&st.counterfactual);
    write_pgm(report_dir / "figures" / ("series_" + std::to_string(k) + ".pgm"),
              plot::montage(tiles, int(tiles.size())));
    const ImageF diff =
        difference_map(series.steps.front().counterfactual, series.steps.back().counterfactual);
    std::vector<const ImageF*> dm{&s.image, &series.steps.front().counterfactual,
                                  &series.steps.back().counterfactual, &diff};
    write_pgm(report_dir / "figures" / ("difference_map_" + std::to_string(k) + ".pgm"),
              plot::montage(dm, 4));
  }

  const json report = json::parse(read_text_file(report_json_path(cfg)));
  std::ostringstream md;
  md << "# Evaluation report\n\n";
  md << "- config hash: `" << report.at("config_hash").get<std::string>() << "`\n";
  md << "- seed: " << report.at("seed") << "\n";
  md << "- split: " << report.at("split").dump() << "\n\n";
  md << "## Metrics\n\n";
  md << "| metric | value | n | better |\n|---|---|---|---|\n";
  for (auto it = report.at("metrics").begin(); it != report.at("metrics").end(); ++it) {
    if (!it.value().is_object() || !it.value().contains("value")) continue;
    md << "| " << it.key() << " | " << it.value().at("value").dump() << " | "
       << it.value().value("n", 0) << " | " << it.value().value("better", "") << " |\n";
  }
  md << "\n## T-tests\n\n";
  for (auto it = report.at("metrics").begin(); it != report.at("metrics").end(); ++it) {
    if (!it.value().is_object() || !it.value().contains("p")) continue;
    md << "- " << it.key() << ": mean_diff=" << it.value().at("mean_diff").dump()
       << ", t=" << it.value().at("t").dump() << ", df=" << it.value().at("df").dump()
       << ", p=" << it.value().at("p").dump() << "\n";
  }
  md << "\n## Figures\n\n";
  md << "- consistency_plot.pgm: desired vs achieved posterior per initial-posterior group\n";
  md << "- ctr_box_plot.pgm, ctr_paired_diff_box_plot.pgm: clinical-surrogate distributions\n";
  md << "- figures/series_*.pgm: input and counterfactual sweep across condition bins\n";
  md << "- figures/difference_map_*.pgm: input, both extremes, and their difference map\n";
  md << "- curves/consistency.csv, curves/deletion.csv: raw curve data\n";
  write_text_file(report_dir / "report.md", md.str());

  std::vector<fs::path> outputs{report_dir / "report.md"};
  for (std::size_t k = 0; k < picks.size(); ++k) {
    outputs.push_back(report_dir / "figures" / ("series_" + std::to_string(k) + ".pgm"));
    outputs.push_back(report_dir / "figures" / ("difference_map_" + std::to_string(k) + ".pgm"));
  }
  manifest_update(cfg, "report", {report_json_path(cfg)}, outputs);
}

void run_all(const PipelineConfig& cfg) {
  stage_gen_data(cfg);
  stage_train_classifier(cfg);
  stage_train_explainer(cfg, IdentityLossKind::carl);
  stage_train_explainer(cfg, IdentityLossKind::l1);
  stage_evaluate(cfg);
  stage_report(cfg);
}

ExplainOutput run_explain(const PipelineConfig& cfg, const fs::path& input_image, double delta,
                          const std::optional<fs::path>& out_image) {
  apply_threading(cfg);
  require_artifact(classifier_ckpt(cfg), "train-classifier");
  require_artifact(explainer_ckpt(cfg, IdentityLossKind::carl), "train-explainer");
  BlackBoxClassifier clf = BlackBoxClassifier::load(classifier_ckpt(cfg));
  ExplainerModel model = ExplainerModel::load(explainer_ckpt(cfg, IdentityLossKind::carl));
  const ImageF x = read_pgm(input_image);
  auto res = model.explain_batch(clf, {&x}, {delta});
  ExplainOutput out;
  out.counterfactual = res.counterfactuals[0];
  out.base_posterior = res.base[0];
  out.achieved_posterior = res.achieved[0];
  out.bin = res.bins[0];
  if (out_image) write_pgm(*out_image, out.counterfactual);
  return out;
}

}  // namespace cfx
