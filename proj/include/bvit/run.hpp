#pragma once

// Run configuration (JSON file + dotted-key overrides) and the command
// implementations behind the CLI. Exit codes: 0 success, 2 config error,
// 3 data error, 4 divergence.

#include "bvit/checkpoint.hpp"
#include "bvit/data.hpp"
#include "bvit/diagnostics.hpp"

#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <set>
#include <string>
#include <vector>

namespace bvit {

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::string dataset;
  std::string checkpoint;
  std::string out_dir = "out";
};

inline int env_threads() {
  const char* v = std::getenv("BVIT_THREADS");
  if (!v) return 1;
  const int n = std::atoi(v);
  if (n < 1) throw ConfigError("BVIT_THREADS must be a positive integer, got '" + std::string(v) + "'");
  return n;
}

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& obj, const std::set<std::string>& allowed,
                                const std::string& where) {
  for (auto it = obj.begin(); it != obj.end(); ++it)
    if (!allowed.count(it.key()))
      throw ConfigError("unknown config key '" + where + it.key() + "'");
}

}  // namespace detail

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown_keys(j,
                              {"preset", "image_h", "image_w", "channels", "patch", "dim", "depth",
                               "heads", "mlp_ratio", "num_classes", "gamma", "variant"},
                              "model.");
  ModelConfig c;
  if (j.contains("preset")) {
    const std::string p = j.at("preset").get<std::string>();
    if (p == "bvit-5m")
      c = ModelConfig::bvit_5m();
    else if (p == "bvit-22m")
      c = ModelConfig::bvit_22m();
    else
      throw ConfigError("unknown model preset '" + p + "'");
  }
  if (j.contains("image_h")) c.image_h = j.at("image_h").get<int>();
  if (j.contains("image_w")) c.image_w = j.at("image_w").get<int>();
  if (j.contains("channels")) c.channels = j.at("channels").get<int>();
  if (j.contains("patch")) c.patch = j.at("patch").get<int>();
  if (j.contains("dim")) c.dim = j.at("dim").get<int>();
  if (j.contains("depth")) c.depth = j.at("depth").get<int>();
  if (j.contains("heads")) c.heads = j.at("heads").get<int>();
  if (j.contains("mlp_ratio")) c.mlp_ratio = j.at("mlp_ratio").get<int>();
  if (j.contains("num_classes")) c.num_classes = j.at("num_classes").get<int>();
  if (j.contains("gamma")) c.gamma = j.at("gamma").get<double>();
  if (j.contains("variant")) c.variant = variant_from_name(j.at("variant").get<std::string>());
  c.validate();
  return c;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown_keys(j,
                              {"steps", "batch_size", "base_lr", "warmup_steps", "weight_decay",
                               "seed", "eval_every", "norm_mean", "norm_std"},
                              "train.");
  TrainConfig c;
  if (j.contains("steps")) c.steps = j.at("steps").get<std::int64_t>();
  if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<std::int64_t>();
  if (j.contains("base_lr")) c.base_lr = j.at("base_lr").get<double>();
  if (j.contains("warmup_steps")) c.warmup_steps = j.at("warmup_steps").get<std::int64_t>();
  if (j.contains("weight_decay")) c.weight_decay = j.at("weight_decay").get<double>();
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("eval_every")) c.eval_every = j.at("eval_every").get<std::int64_t>();
  if (j.contains("norm_mean")) c.norm_mean = j.at("norm_mean").get<std::vector<double>>();
  if (j.contains("norm_std")) c.norm_std = j.at("norm_std").get<std::vector<double>>();
  if (c.norm_mean.empty() || c.norm_std.empty())
    throw ConfigError("train.norm_mean/norm_std must be non-empty");
  c.validate();
  return c;
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config root must be a JSON object");
  detail::reject_unknown_keys(j, {"model", "train", "dataset", "checkpoint", "out_dir"}, "");
  RunConfig c;
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
  if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
  if (j.contains("dataset")) c.dataset = j.at("dataset").get<std::string>();
  if (j.contains("checkpoint")) c.checkpoint = j.at("checkpoint").get<std::string>();
  if (j.contains("out_dir")) c.out_dir = j.at("out_dir").get<std::string>();
  return c;
}

inline nlohmann::json run_config_to_json(const RunConfig& c) {
  nlohmann::json j;
  j["model"] = config_to_json(c.model);
  j["train"] = {{"steps", c.train.steps},
                {"batch_size", c.train.batch_size},
                {"base_lr", c.train.base_lr},
                {"warmup_steps", c.train.warmup_steps},
                {"weight_decay", c.train.weight_decay},
                {"seed", c.train.seed},
                {"eval_every", c.train.eval_every},
                {"norm_mean", c.train.norm_mean},
                {"norm_std", c.train.norm_std}};
  j["dataset"] = c.dataset;
  j["checkpoint"] = c.checkpoint;
  j["out_dir"] = c.out_dir;
  return j;
}

// Applies a dotted-key override ("model.gamma=0.6") onto raw config JSON.
// Values parse as JSON when possible, otherwise as strings.
inline void apply_override(nlohmann::json& j, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override must be key=value, got '" + kv + "'");
  const std::string key = kv.substr(0, eq);
  const std::string raw = kv.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::exception&) {
    value = raw;
  }
  nlohmann::json* node = &j;
  std::size_t pos = 0;
  while (true) {
    const auto dot = key.find('.', pos);
    const std::string part = key.substr(pos, dot == std::string::npos ? dot : dot - pos);
    if (part.empty()) throw ConfigError("bad override key '" + key + "'");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    pos = dot + 1;
  }
}

inline RunConfig load_run_config(const std::string& config_path,
                                 const std::vector<std::string>& overrides) {
  nlohmann::json j = nlohmann::json::object();
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw ConfigError("cannot open config file: " + config_path);
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("cannot parse config file " + config_path + ": " + e.what());
    }
  }
  for (const auto& kv : overrides) apply_override(j, kv);
  return run_config_from_json(j);
}

inline void check_dataset_compat(const ModelConfig& m, const Dataset& ds) {
  if (int(ds.h) != m.image_h || int(ds.w) != m.image_w || int(ds.c) != m.channels)
    throw ConfigError("dataset images " + std::to_string(ds.h) + "x" + std::to_string(ds.w) + "x" +
                      std::to_string(ds.c) + " do not match model input " +
                      std::to_string(m.image_h) + "x" + std::to_string(m.image_w) + "x" +
                      std::to_string(m.channels));
  if (int(ds.num_classes) != m.num_classes)
    throw ConfigError("dataset has " + std::to_string(ds.num_classes) + " classes, model head has " +
                      std::to_string(m.num_classes));
}

// ---------------------------------------------------------------------------
// commands

inline int cmd_train(const RunConfig& cfg) {
  try {
    env_threads();
    if (cfg.dataset.empty()) throw DataError("no dataset path configured");
    const Dataset ds = load_dataset(cfg.dataset);
    check_dataset_compat(cfg.model, ds);
    std::filesystem::create_directories(cfg.out_dir);
    {
      std::ofstream out(cfg.out_dir + "/resolved_config.json");
      out << run_config_to_json(cfg).dump(2) << "\n";
    }
    auto model = BVit<float>::init(cfg.model, cfg.train.seed);
    const auto log = train(model, ds, cfg.train);
    write_metrics_csv(log, cfg.out_dir + "/metrics.csv");
    save_checkpoint(model, cfg.out_dir + "/final.ckpt", cfg.train.steps);
    if (!log.empty())
      std::cout << "final step " << log.back().step << " loss " << log.back().loss << " eval_acc "
                << log.back().eval_acc << "\n";
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return 4;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  }
}

inline int cmd_eval(const std::string& checkpoint_path, const std::string& dataset_path,
                    const std::string& out_dir, const TrainConfig& train_cfg = {}) {
  try {
    auto loaded = load_checkpoint(checkpoint_path);
    const Dataset ds = load_dataset(dataset_path);
    check_dataset_compat(loaded.model.cfg, ds);
    const EvalResult ev = evaluate(loaded.model, ds, train_cfg);
    std::filesystem::create_directories(out_dir);
    std::ofstream out(out_dir + "/eval.csv");
    out << "top1,mean_loss\n" << std::setprecision(10) << ev.top1 << "," << ev.mean_loss << "\n";
    std::cout << "top1 " << ev.top1 << " mean_loss " << ev.mean_loss << "\n";
    return 0;
  } catch (const CheckpointError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  }
}

inline int cmd_diagnose(const RunConfig& cfg, const std::set<std::string>& which) {
  try {
    for (const auto& w : which)
      if (w != "cka" && w != "distance" && w != "rollout" && w != "profile")
        throw ConfigError("unknown diagnostic '" + w + "'");
    BVit<float> model = cfg.checkpoint.empty()
                            ? BVit<float>::init(cfg.model, cfg.train.seed)
                            : load_checkpoint(cfg.checkpoint).model;
    std::filesystem::create_directories(cfg.out_dir);
    if (which.count("profile")) {
      write_profile_txt(model, cfg.out_dir + "/profile.txt");
      auto deep = model.cfg;
      deep.variant = Variant::deep_only;
      auto deep_model = BVit<float>::init(deep, 0);
      const std::int64_t total = count_params(model);
      std::cout << "params_total " << total << " broad_param_increment "
                << total - count_params(deep_model) << "\n";
    }
    const bool needs_data = which.count("cka") || which.count("distance") || which.count("rollout");
    if (needs_data) {
      if (cfg.dataset.empty()) throw DataError("no dataset path configured");
      const Dataset ds = load_dataset(cfg.dataset);
      check_dataset_compat(model.cfg, ds);
      const TrainConfig& tc = cfg.train;
      const std::uint32_t sample = std::min<std::uint32_t>(ds.count, 64);
      if (which.count("cka")) {
        if (sample < 8) throw DataError("cka needs at least 8 images, dataset has " +
                                        std::to_string(ds.count));
        std::vector<Tensor<float>> images;
        for (std::uint32_t i = 0; i < sample; ++i) images.push_back(standardize_image(ds, i, tc));
        write_cka_csv(cka_layer_matrix(model, images), cfg.out_dir + "/cka.csv");
      }
      if (which.count("distance") || which.count("rollout")) {
        NoGradGuard ng;
        std::vector<AttentionTrace<float>> traces;
        const std::uint32_t n = std::min<std::uint32_t>(ds.count, which.count("distance") ? 16 : 4);
        for (std::uint32_t i = 0; i < n; ++i) {
          auto [out, trace] = forward_deep(model, standardize_image(ds, i, tc));
          traces.push_back(std::move(trace));
        }
        if (which.count("distance"))
          write_attn_distance_csv(mean_attention_distance(traces, model.cfg),
                                  cfg.out_dir + "/attn_distance.csv");
        if (which.count("rollout")) {
          const std::uint32_t imgs = std::min<std::uint32_t>(n, 4);
          for (std::uint32_t i = 0; i < imgs; ++i)
            write_rollout_pgm(attention_rollout(traces[i]), model.cfg,
                              cfg.out_dir + "/rollout_" + std::to_string(i) + ".pgm");
        }
      }
    }
    return 0;
  } catch (const CheckpointError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  }
}

// Sequential sweep over model.gamma or model.variant with a shared seed.
inline int cmd_sweep(const RunConfig& base, const std::string& key,
                     const std::vector<std::string>& values) {
  try {
    if (key != "model.gamma" && key != "model.variant")
      throw ConfigError("sweep key must be model.gamma or model.variant, got '" + key + "'");
    if (values.empty()) throw ConfigError("sweep needs at least one value");
    if (base.dataset.empty()) throw DataError("no dataset path configured");
    const Dataset ds = load_dataset(base.dataset);
    check_dataset_compat(base.model, ds);
    std::filesystem::create_directories(base.out_dir);
    std::ofstream out(base.out_dir + "/sweep.csv");
    out << "value,final_eval_acc,params\n" << std::setprecision(10);
    for (const auto& value : values) {
      RunConfig cfg = base;
      if (key == "model.gamma")
        cfg.model.gamma = std::stod(value);
      else
        cfg.model.variant = variant_from_name(value);
      auto model = BVit<float>::init(cfg.model, cfg.train.seed);
      const auto log = train(model, ds, cfg.train);
      const double acc = log.empty() ? 0.0 : log.back().eval_acc;
      out << value << "," << acc << "," << count_params(model) << "\n";
      std::cout << "sweep " << key << "=" << value << " eval_acc " << acc << "\n";
    }
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return 4;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace bvit
