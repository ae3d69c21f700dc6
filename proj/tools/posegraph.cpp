// posegraph: generate synthetic data, train, evaluate, infer, self-test.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "posegraph/app.hpp"
#include "posegraph/tensor.hpp"

namespace {

struct Common {
  std::string config;
  std::string out = "out";
  std::optional<std::uint64_t> seed;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, Common& c, bool with_out = true) {
  cmd->add_option("--config", c.config, "INI configuration file")->check(CLI::ExistingFile);
  if (with_out) cmd->add_option("--out", c.out, "output directory")->capture_default_str();
  cmd->add_option("--seed", c.seed, "seed for data generation and training");
  cmd->add_option("--set", c.sets, "override section.key=value (repeatable)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Joint detector plus spatial model for articulated pose estimation"};
  app.require_subcommand(1);

  Common common;
  bool resume = false;
  bool sabotage = false;
  std::string dataset, image, torso;
  std::vector<std::string> models;

  auto* gen = app.add_subcommand("gen", "write a synthetic dataset");
  add_common(gen, common);

  auto* train = app.add_subcommand("train", "staged training on a dataset");
  add_common(train, common);
  train->add_option("--dataset", dataset, "dataset directory (train.dataset)");
  train->add_flag("--resume", resume, "reuse completed stages from a previous run in --out");

  auto* eval = app.add_subcommand("eval", "detection-rate curves");
  add_common(eval, common);
  eval->add_option("--dataset", dataset, "dataset directory (eval.dataset)");
  eval->add_option("--model", models, "model file (repeatable; eval.models)");

  auto* infer = app.add_subcommand("infer", "predict joints for one image");
  add_common(infer, common);
  infer->add_option("--model", models, "model file (infer.model)")->expected(1);
  infer->add_option("--image", image, "PGM image (infer.image)");
  infer->add_option("--torso", torso, "torso box u,v,w,h for models with a torso map");

  auto* selftest = app.add_subcommand("selftest", "oracle-equivalence and gradient checks");
  selftest->add_flag("--sabotage-fft", sabotage, "perturb the FFT path (test hook)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (selftest->parsed()) return posegraph::cmd_selftest(std::cout, sabotage) ? 0 : 1;

    posegraph::RunOptions opts;
    opts.config_path = common.config;
    opts.seed = common.seed;
    const std::string prefix = train->parsed() ? "train." : eval->parsed() ? "eval." : "infer.";
    if (!dataset.empty()) opts.overrides.push_back(prefix + "dataset=" + dataset);
    if (resume) opts.overrides.push_back("train.resume=true");
    if (!models.empty()) {
      std::string joined;
      for (const auto& m : models) joined += (joined.empty() ? "" : ",") + m;
      opts.overrides.push_back(prefix + (eval->parsed() ? "models=" : "model=") + joined);
    }
    if (!image.empty()) opts.overrides.push_back("infer.image=" + image);
    if (!torso.empty()) opts.overrides.push_back("infer.torso=" + torso);
    // Explicit --set flags win over the convenience options above.
    opts.overrides.insert(opts.overrides.end(), common.sets.begin(), common.sets.end());
    const posegraph::ConfigMap config = posegraph::resolve_config(opts);

    if (gen->parsed()) posegraph::cmd_gen(config, common.out);
    if (train->parsed()) posegraph::cmd_train(config, common.out);
    if (eval->parsed()) posegraph::cmd_eval(config, common.out, std::cout);
    if (infer->parsed()) posegraph::cmd_infer(config, common.out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
