// bvit: train / eval / diagnose / sweep entry point.

#include "bvit/run.hpp"

#include <CLI11.hpp>

#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace {

bvit::RunConfig resolve(const std::string& config_path, std::vector<std::string> overrides,
                        const std::string& out, long long seed, bool seed_set) {
  if (seed_set) overrides.push_back("train.seed=" + std::to_string(seed));
  auto cfg = bvit::load_run_config(config_path, overrides);
  if (!out.empty()) cfg.out_dir = out;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"BViT broad-attention vision transformer"};
  app.require_subcommand(1);

  std::string config_path, out, checkpoint, dataset, which = "cka,distance,rollout,profile";
  std::string sweep_key;
  std::vector<std::string> overrides, sweep_values;
  long long seed = 0;
  bool seed_set = false;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON config file");
    cmd->add_option("--set", overrides, "dotted-key override, key=value (repeatable)");
    cmd->add_option("--out", out, "output directory");
    cmd->add_option("--seed", seed, "training seed override")->each([&](const std::string&) {
      seed_set = true;
    });
  };

  auto* train_cmd = app.add_subcommand("train", "train a model");
  add_common(train_cmd);

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval_cmd->add_option("--dataset", dataset, "dataset file")->required();
  eval_cmd->add_option("--config", config_path, "JSON config file (for normalization constants)");
  eval_cmd->add_option("--set", overrides, "dotted-key override (repeatable)");
  eval_cmd->add_option("--out", out, "output directory");

  auto* diag_cmd = app.add_subcommand("diagnose", "emit diagnostics reports");
  add_common(diag_cmd);
  diag_cmd->add_option("--checkpoint", checkpoint, "checkpoint file (optional; otherwise init from config)");
  diag_cmd->add_option("--dataset", dataset, "dataset file");
  diag_cmd->add_option("--which", which, "comma-separated subset of cka,distance,rollout,profile");

  auto* sweep_cmd = app.add_subcommand("sweep", "run an ablation sweep");
  add_common(sweep_cmd);
  sweep_cmd->add_option("--key", sweep_key, "model.gamma or model.variant")->required();
  sweep_cmd->add_option("--values", sweep_values, "sweep values (comma-separated or repeated)")
      ->required()
      ->delimiter(',');

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand(train_cmd)) {
      return bvit::cmd_train(resolve(config_path, overrides, out, seed, seed_set));
    }
    if (app.got_subcommand(eval_cmd)) {
      bvit::TrainConfig tc;
      if (!config_path.empty())
        tc = bvit::load_run_config(config_path, overrides).train;
      return bvit::cmd_eval(checkpoint, dataset, out.empty() ? "out" : out, tc);
    }
    if (app.got_subcommand(diag_cmd)) {
      auto cfg = resolve(config_path, overrides, out, seed, seed_set);
      if (!checkpoint.empty()) cfg.checkpoint = checkpoint;
      if (!dataset.empty()) cfg.dataset = dataset;
      std::set<std::string> parts;
      std::stringstream ss(which);
      for (std::string item; std::getline(ss, item, ',');)
        if (!item.empty()) parts.insert(item);
      return bvit::cmd_diagnose(cfg, parts);
    }
    if (app.got_subcommand(sweep_cmd)) {
      return bvit::cmd_sweep(resolve(config_path, overrides, out, seed, seed_set), sweep_key,
                             sweep_values);
    }
  } catch (const bvit::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
