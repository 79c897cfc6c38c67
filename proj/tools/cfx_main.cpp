#include <CLI11.hpp>
#include <json.hpp>

#include <iostream>

#include "cfx/pipeline.hpp"

namespace {

struct CommonOpts {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<int> steps;
  bool strict = false;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--config", o.config_path, "pipeline config JSON")->required();
  cmd->add_option("--seed", o.seed, "override root seed");
  cmd->add_option("--out-dir", o.out_dir, "override output directory");
  cmd->add_option("--steps", o.steps, "override explainer training steps");
  cmd->add_flag("--strict", o.strict, "strict determinism (single thread)");
}

cfx::PipelineConfig make_config(const CommonOpts& o) {
  nlohmann::json j = nlohmann::json::parse(cfx::read_text_file(o.config_path));
  if (o.seed) j["seed"] = *o.seed;
  if (o.out_dir) j["out_dir"] = *o.out_dir;
  if (o.steps) j["explainer"]["steps"] = *o.steps;
  if (o.strict) j["strict_determinism"] = true;
  return cfx::parse_config(j.dump());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"counterfactual explainer pipeline"};
  app.require_subcommand(1);

  CommonOpts gen, clf, exp, seg, eval, rep, run, xpl;
  std::string xpl_input, xpl_output;
  double xpl_delta = 0.0;
  std::string exp_identity = "carl";

  add_common(app.add_subcommand("gen-data", "generate the synthetic dataset"), gen);
  add_common(app.add_subcommand("train-classifier", "train the black-box classifier"), clf);
  auto* exp_cmd = app.add_subcommand("train-explainer", "train the explanation model");
  add_common(exp_cmd, exp);
  exp_cmd->add_option("--identity-loss", exp_identity, "carl | l1 | none")
      ->check(CLI::IsMember({"carl", "l1", "none"}));
  add_common(app.add_subcommand("train-segmenter", "train the optional learned segmenter"), seg);
  auto* xpl_cmd = app.add_subcommand("explain", "counterfactual for one image");
  add_common(xpl_cmd, xpl);
  xpl_cmd->add_option("--input", xpl_input, "input PGM image")->required();
  xpl_cmd->add_option("--delta", xpl_delta, "desired posterior shift")->required();
  xpl_cmd->add_option("--out", xpl_output, "output PGM path");
  add_common(app.add_subcommand("evaluate", "run the metric battery"), eval);
  add_common(app.add_subcommand("report", "render report markdown and figures"), rep);
  add_common(app.add_subcommand("run", "run the full pipeline"), run);

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand("gen-data")) {
      cfx::stage_gen_data(make_config(gen));
    } else if (app.got_subcommand("train-classifier")) {
      cfx::stage_train_classifier(make_config(clf));
    } else if (app.got_subcommand("train-explainer")) {
      const auto kind = exp_identity == "carl"  ? cfx::IdentityLossKind::carl
                        : exp_identity == "l1" ? cfx::IdentityLossKind::l1
                                               : cfx::IdentityLossKind::none;
      cfx::stage_train_explainer(make_config(exp), kind);
    } else if (app.got_subcommand("train-segmenter")) {
      cfx::stage_train_segmenter(make_config(seg));
    } else if (app.got_subcommand("explain")) {
      const auto cfg = make_config(xpl);
      std::optional<std::filesystem::path> out;
      if (!xpl_output.empty()) out = xpl_output;
      const auto res = cfx::run_explain(cfg, xpl_input, xpl_delta, out);
      std::cout << "base_posterior=" << res.base_posterior
                << " achieved_posterior=" << res.achieved_posterior << " bin=" << res.bin
                << "\n";
    } else if (app.got_subcommand("evaluate")) {
      cfx::stage_evaluate(make_config(eval));
    } else if (app.got_subcommand("report")) {
      cfx::stage_report(make_config(rep));
    } else if (app.got_subcommand("run")) {
      cfx::run_all(make_config(run));
    }
  } catch (const cfx::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const cfx::InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const cfx::StateError& e) {
    std::cerr << "state error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
