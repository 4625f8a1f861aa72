// Acceptance suite: prints one PASS/FAIL line per criterion.

#include "bvit/broad.hpp"
#include "bvit/checkpoint.hpp"
#include "bvit/data.hpp"
#include "bvit/diagnostics.hpp"
#include "bvit/run.hpp"

#include "gradcheck.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

using namespace bvit;
using bvit::testing::finite_diff_check;
using bvit::testing::random_tensor;

namespace {

int failures = 0;

void criterion(const std::string& name, bool ok, const std::string& detail = "") {
  std::cout << (ok ? "PASS " : "FAIL ") << name;
  if (!ok && !detail.empty()) std::cout << "  (" << detail << ")";
  std::cout << std::endl;
  if (!ok) ++failures;
}

ModelConfig smoke_config() {
  ModelConfig cfg;
  cfg.image_h = cfg.image_w = 32;
  cfg.channels = 3;
  cfg.patch = 8;
  cfg.dim = 32;
  cfg.depth = 4;
  cfg.heads = 2;
  cfg.mlp_ratio = 4;
  cfg.num_classes = 4;
  cfg.variant = Variant::broad_full;
  return cfg;
}

template <typename S>
AttentionTrace<S> random_trace(int depth, Index n1, Index h, Index dh, std::uint64_t seed) {
  Rng rng(seed);
  AttentionTrace<S> trace(depth);
  for (auto& layer : trace) {
    auto fill = [&] {
      std::vector<S> d(static_cast<std::size_t>(n1 * h * dh));
      for (auto& v : d) v = static_cast<S>(rng.uniform(-1, 1));
      return Tensor<S>::from_data({n1, h, dh}, std::move(d));
    };
    layer.q = fill();
    layer.k = fill();
    layer.v = fill();
  }
  return trace;
}

// Block-sum route of the parameter-free attention identity, built from
// per-layer matmuls instead of the concatenated matrices.
template <typename S>
Tensor<S> block_sum_route(const AttentionTrace<S>& trace, double d_scale) {
  const Index n1 = trace[0].q.dim(0);
  Tensor<S> logits;
  std::vector<Tensor<S>> values;
  for (const auto& layer : trace) {
    auto qh = transpose01(layer.q);
    auto kh = transpose01(layer.k);
    auto term = matmul(qh, transpose_last2(kh));
    logits = logits.defined() ? add(logits, term) : term;
    values.push_back(transpose01(layer.v));
  }
  auto weights = softmax_lastdim(scale(logits, S(1.0 / std::sqrt(d_scale))));
  auto attended = matmul(weights, concat_lastdim(values));
  return reshape(transpose01(attended), {n1, attended.dim(0) * attended.dim(2)});
}

void check_param_parity() {
  bool ok = true;
  std::string detail;
  for (auto preset : {ModelConfig::bvit_5m(), ModelConfig::bvit_22m()}) {
    auto broad_cfg = preset;
    broad_cfg.variant = Variant::broad_full;
    auto deep_cfg = preset;
    deep_cfg.variant = Variant::deep_only;
    auto broad = BVit<float>::init(broad_cfg, 0);
    auto deep = BVit<float>::init(deep_cfg, 0);
    if (count_params(broad) != count_params(deep)) {
      ok = false;
      detail = "variant param counts differ";
    }
  }
  auto m5 = BVit<float>::init(ModelConfig::bvit_5m(), 0);
  if (count_params(m5) != 5717416) {
    ok = false;
    detail = "bvit-5m params " + std::to_string(count_params(m5));
  }
  auto m22 = BVit<float>::init(ModelConfig::bvit_22m(), 0);
  const std::int64_t c22 = count_params(m22);
  if (c22 != 22050664) {
    ok = false;
    detail = "bvit-22m params " + std::to_string(c22);
  }
  criterion("param-parity", ok, detail);
}

void check_eq6_identity() {
  double worst = 0;
  for (int depth : {1, 2, 12}) {
    for (Index n1 : {5, 17, 197}) {
      auto trace = random_trace<float>(depth, n1, 3, 16, 1000 + depth * 100 + n1);
      auto concat_path = atten_pf(broad_connect(trace), 48.0);
      auto sum_path = block_sum_route(trace, 48.0);
      for (std::size_t i = 0; i < concat_path.data().size(); ++i)
        worst = std::max(worst,
                         std::abs(double(concat_path.data()[i]) - double(sum_path.data()[i])));
    }
  }
  criterion("eq6-identity", worst < 1e-6, "max abs diff " + std::to_string(worst));
}

void check_depth1_degeneracy() {
  ModelConfig cfg = smoke_config();
  cfg.depth = 1;
  auto m = BVit<double>::init(cfg, 2);
  Rng rng(3);
  auto x = random_tensor({cfg.seq_len(), cfg.dim}, rng);
  LayerTrace<double> trace;
  (void)mhsa(x, m.layers[0], cfg, trace);
  auto qh = transpose01(trace.q);
  auto kh = transpose01(trace.k);
  auto vh = transpose01(trace.v);
  auto logits = scale(matmul(qh, transpose_last2(kh)), 1.0 / std::sqrt(double(cfg.head_dim())));
  auto pre_proj =
      reshape(transpose01(matmul(softmax_lastdim(logits), vh)), {cfg.seq_len(), cfg.dim});
  AttentionTrace<double> full{trace};
  auto broad = atten_pf(broad_connect(full), double(cfg.head_dim()));
  const bool bits = broad.data() == pre_proj.data();
  const bool pool_id = bpool(broad, broad.dim(1)).data() == broad.data();
  criterion("depth1-degeneracy", bits && pool_id,
            bits ? "bpool not identity" : "atten_pf differs from mhsa pre-projection");
}

void check_gradient_suite() {
  double worst = 0;
  auto run = [&](const std::vector<Tensor<double>*>& leaves,
                 const std::function<Tensor<double>()>& loss) {
    worst = std::max(worst, finite_diff_check(leaves, loss).max_rel_err);
  };
  for (int t = 0; t < 20; ++t) {
    Rng rng(2000 + t);
    {
      auto a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
      run({&a, &b}, [&] { return sum(mul(matmul(a, b), matmul(a, b))); });
    }
    {
      auto x = random_tensor({3, 5}, rng, 2.0);
      auto w = random_tensor({3, 5}, rng);
      run({&x}, [&] { return sum(mul(softmax_lastdim(x), w)); });
    }
    {
      auto x = random_tensor({2, 6}, rng);
      auto g = random_tensor({6}, rng);
      auto b = random_tensor({6}, rng);
      auto w = random_tensor({2, 6}, rng);
      run({&x, &g, &b}, [&] { return sum(mul(layernorm(x, g, b, 1e-6), w)); });
    }
    {
      auto x = random_tensor({3, 3}, rng, 3.0);
      run({&x}, [&] { return mean(mul(gelu(x), gelu(x))); });
    }
    {
      auto a = random_tensor({2, 3}, rng), b = random_tensor({2, 2}, rng);
      run({&a, &b}, [&] {
        auto cat = concat_lastdim<double>({a, b});
        return sum(mul(cat, cat));
      });
    }
    {
      auto x = random_tensor({2, 7}, rng);
      auto w = random_tensor({2, 3}, rng);
      run({&x}, [&] { return sum(mul(adaptive_avg_pool_lastdim(x, 3), w)); });
    }
    {
      auto x = random_tensor({3, 4}, rng), y = random_tensor({3, 4}, rng);
      auto b = random_tensor({4}, rng);
      run({&x, &y, &b}, [&] {
        auto m = add_rowvec(add(scale(x, 0.5), mul(x, y)), b);
        return mean(mul(transpose_last2(m), transpose_last2(m)));
      });
    }
    {
      auto logits = random_tensor({3, 4}, rng, 2.0);
      run({&logits}, [&] { return cross_entropy(logits, {0, 2, 3}); });
    }
  }
  const bool ops_ok = worst < 1e-4;
  const double ops_worst = worst;

  // composed forward: depth 2, D = 16, N = 4
  ModelConfig cfg;
  cfg.image_h = cfg.image_w = 16;
  cfg.channels = 3;
  cfg.patch = 8;
  cfg.dim = 16;
  cfg.depth = 2;
  cfg.heads = 2;
  cfg.mlp_ratio = 2;
  cfg.num_classes = 3;
  cfg.variant = Variant::broad_full;
  cfg.gamma = 1.0;
  auto model = BVit<double>::init(cfg, 5);
  Rng rng(6);
  std::vector<double> img(static_cast<std::size_t>(16 * 16 * 3));
  for (auto& v : img) v = rng.uniform(-1, 1);
  auto image = Tensord::from_data({16, 16, 3}, img);
  std::vector<Tensor<double>*> leaves;
  for (auto& [name, t] : model.named_params()) leaves.push_back(t);
  auto result = finite_diff_check(
      leaves, [&] { return cross_entropy(forward_logits(model, image), {1}); });
  const bool model_ok = result.max_rel_err < 1e-4;
  criterion("gradient-suite", ops_ok && model_ok,
            "op max rel err " + std::to_string(ops_worst) + ", composed " +
                std::to_string(result.max_rel_err));
}

void check_broad_gradient_reach() {
  auto cfg = smoke_config();
  auto ds = synth_dataset(11, 16, 32, 32, 3, 4, 0.1);
  TrainConfig tc;
  tc.steps = 5;
  tc.batch_size = 4;
  tc.base_lr = 0.01;
  tc.warmup_steps = 1;
  tc.eval_every = 5;
  tc.seed = 9;
  std::vector<std::string> freeze;
  for (int i = 1; i < cfg.depth; ++i) freeze.push_back("layers." + std::to_string(i) + ".");

  auto delta_after_training = [&](Variant variant) {
    auto c = cfg;
    c.variant = variant;
    auto model = BVit<float>::init(c, tc.seed);
    const auto before = model.layers[0].qkv_w.data();
    train(model, ds, tc, freeze);
    double norm = 0;
    for (std::size_t i = 0; i < before.size(); ++i) {
      const double d = double(model.layers[0].qkv_w.data()[i]) - double(before[i]);
      norm += d * d;
    }
    return std::sqrt(norm);
  };
  const double broad_delta = delta_after_training(Variant::broad_full);
  const double deep_delta = delta_after_training(Variant::deep_only);

  // with gamma = 0 the broad contribution to layer-1 grads is exactly zero:
  // gradients match the deep-only model bit for bit
  auto grads_of = [&](Variant variant, double gamma) {
    auto c = cfg;
    c.variant = variant;
    c.gamma = gamma;
    auto model = BVit<float>::init(c, tc.seed);
    auto loss = cross_entropy(forward_logits(model, standardize_image(ds, 0, tc)),
                              {Index(ds.labels[0])});
    backward(loss);
    return model.layers[0].qkv_w.grad();
  };
  const bool zero_broad = grads_of(Variant::broad_full, 0.0) == grads_of(Variant::deep_only, 1.0);
  criterion("broad-gradient-reach", broad_delta > 0 && deep_delta > 0 && zero_broad,
            "broad_delta " + std::to_string(broad_delta) + " deep_delta " +
                std::to_string(deep_delta) + (zero_broad ? "" : " gamma0 grads differ"));
}

void check_training_smoke() {
  auto cfg = smoke_config();
  auto ds = synth_dataset(42, 128, 32, 32, 3, 4, 0.1);
  TrainConfig tc;
  tc.steps = 400;
  tc.batch_size = 16;
  tc.base_lr = 0.05;
  tc.warmup_steps = 50;
  tc.weight_decay = 1e-4;
  tc.eval_every = 100;
  tc.seed = 7;

  const auto dir = std::filesystem::temp_directory_path() / "bvit_acceptance_smoke";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  auto run_csv = [&](const std::string& name) {
    auto model = BVit<float>::init(cfg, tc.seed);
    auto log = train(model, ds, tc);
    const auto path = (dir / name).string();
    write_metrics_csv(log, path);
    std::ifstream in(path);
    std::stringstream ss;
    ss << in.rdbuf();
    return std::make_pair(log.back().eval_acc, ss.str());
  };
  auto [acc1, csv1] = run_csv("metrics_a.csv");
  auto [acc2, csv2] = run_csv("metrics_b.csv");
  std::filesystem::remove_all(dir);
  criterion("training-smoke", acc1 >= 0.95 && csv1 == csv2,
            "final acc " + std::to_string(acc1) +
                (csv1 == csv2 ? "" : ", metrics not reproducible"));
}

void check_ablation_harness() {
  const auto dir = std::filesystem::temp_directory_path() / "bvit_acceptance_sweep";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  const auto ds_path = (dir / "ds.bvds").string();
  save_dataset(synth_dataset(13, 8, 32, 32, 3, 4, 0.1), ds_path);

  RunConfig base;
  base.model = smoke_config();
  base.train.steps = 2;
  base.train.batch_size = 4;
  base.train.warmup_steps = 1;
  base.train.eval_every = 2;
  base.train.base_lr = 0.01;
  base.train.seed = 1;
  base.dataset = ds_path;
  base.out_dir = (dir / "out").string();

  bool ok = cmd_sweep(base, "model.gamma", {"0", "0.2", "0.4", "0.6", "0.8", "1.0"}) == 0;
  auto count_rows_and_params = [&](std::set<std::string>& params) {
    std::ifstream in(dir / "out/sweep.csv");
    std::string line;
    std::getline(in, line);  // header
    int rows = 0;
    while (std::getline(in, line)) {
      ++rows;
      params.insert(line.substr(line.find_last_of(',') + 1));
    }
    return rows;
  };
  std::set<std::string> params1;
  ok = ok && count_rows_and_params(params1) == 6 && params1.size() == 1;

  ok = ok && cmd_sweep(base, "model.variant",
                       {"deep_only", "broad_full", "broad_with_V_only", "broad_without_V"}) == 0;
  std::set<std::string> params2;
  ok = ok && count_rows_and_params(params2) == 4 && params2.size() == 1;
  std::filesystem::remove_all(dir);
  criterion("ablation-harness", ok);
}

void check_diagnostics_properties() {
  bool ok = true;
  std::string detail;

  Rng rng(21);
  Eigen::MatrixXd X(24, 6);
  for (Eigen::Index r = 0; r < X.rows(); ++r)
    for (Eigen::Index c = 0; c < X.cols(); ++c) X(r, c) = rng.uniform(-1, 1);
  if (std::abs(cka(X, X) - 1.0) > 1e-6) {
    ok = false;
    detail = "cka diagonal";
  }
  Eigen::MatrixXd Y(24, 6);
  for (Eigen::Index r = 0; r < Y.rows(); ++r)
    for (Eigen::Index c = 0; c < Y.cols(); ++c) Y(r, c) = rng.uniform(-1, 1);
  if (std::abs(cka(X, Y) - cka(Y, X)) > 1e-10) {
    ok = false;
    detail = "cka symmetry";
  }
  Eigen::VectorXd u(6);
  for (Eigen::Index i = 0; i < 6; ++i) u(i) = rng.uniform(-1, 1);
  u.normalize();
  Eigen::MatrixXd R = Eigen::MatrixXd::Identity(6, 6) - 2.0 * u * u.transpose();
  if (std::abs(cka(X, 3.0 * X * R) - 1.0) > 1e-6) {
    ok = false;
    detail = "cka orthogonal invariance";
  }

  auto cfg = smoke_config();
  const Index n1 = cfg.seq_len(), h = cfg.heads;
  auto make_trace = [&](const std::function<double(Index, Index)>& weight, int depth) {
    AttentionTrace<float> trace(depth);
    for (auto& layer : trace) {
      std::vector<float> attn(static_cast<std::size_t>(h * n1 * n1));
      for (Index hi = 0; hi < h; ++hi)
        for (Index r = 0; r < n1; ++r)
          for (Index c = 0; c < n1; ++c)
            attn[(hi * n1 + r) * n1 + c] = static_cast<float>(weight(r, c));
      layer.attn = Tensorf::from_data({h, n1, n1}, attn);
    }
    return trace;
  };
  auto identity = make_trace([](Index r, Index c) { return r == c ? 1.0 : 0.0; }, 3);
  if (!attention_rollout(identity).isApprox(Eigen::MatrixXd::Identity(n1, n1), 1e-9)) {
    ok = false;
    detail = "rollout identity";
  }
  auto model = BVit<float>::init(cfg, 23);
  {
    NoGradGuard ng;
    std::vector<float> img(static_cast<std::size_t>(32 * 32 * 3));
    for (auto& v : img) v = static_cast<float>(rng.uniform(-1, 1));
    auto [out, trace] = forward_deep(model, Tensorf::from_data({32, 32, 3}, img));
    auto roll = attention_rollout(trace);
    for (Index r = 0; r < n1; ++r) {
      if (std::abs(roll.row(r).sum() - 1.0) > 1e-6) ok = false;
      for (Index c = 0; c < n1; ++c)
        if (roll(r, c) < 0) ok = false;
    }
    if (!ok && detail.empty()) detail = "rollout stochasticity";
  }

  if (mean_attention_distance(std::vector<AttentionTrace<float>>{identity}, cfg)[0][0] != 0.0) {
    ok = false;
    detail = "distance self-attention";
  }
  {
    // 2x2 patch grid exhaustive enumeration
    ModelConfig grid = cfg;
    grid.patch = 16;
    const Index gn1 = grid.seq_len();
    AttentionTrace<float> uniform(1);
    std::vector<float> attn(static_cast<std::size_t>(h * gn1 * gn1),
                            static_cast<float>(1.0 / gn1));
    uniform[0].attn = Tensorf::from_data({h, gn1, gn1}, attn);
    const double got =
        mean_attention_distance(std::vector<AttentionTrace<float>>{uniform}, grid)[0][0];
    double expect = 0;
    const double centers[4][2] = {{8, 8}, {24, 8}, {8, 24}, {24, 24}};
    for (int a = 0; a < 4; ++a)
      for (int b = 0; b < 4; ++b)
        expect += std::hypot(centers[a][0] - centers[b][0], centers[a][1] - centers[b][1]);
    expect /= 16.0;
    if (std::abs(got - expect) > 1e-10) {
      ok = false;
      detail = "distance enumeration oracle: got " + std::to_string(got);
    }
  }
  criterion("diagnostics-properties", ok, detail);
}

void check_flops_profile() {
  auto cfg = ModelConfig::bvit_5m();
  auto p = estimate_flops(cfg);
  const double gmacs = double(p.deep_macs);
  const bool in_band = gmacs > 1.2e9 * 0.85 && gmacs < 1.2e9 * 1.15;

  const auto dir = std::filesystem::temp_directory_path() / "bvit_acceptance_profile";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  auto model = BVit<float>::init(cfg, 0);
  write_profile_txt(model, (dir / "profile.txt").string());
  std::ifstream in(dir / "profile.txt");
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  const bool documented = text.find("broad_macs " + std::to_string(p.broad_macs)) !=
                              std::string::npos &&
                          text.find("1e-5") != std::string::npos;
  std::filesystem::remove_all(dir);
  criterion("flops-profile", in_band && p.broad_macs > 0 && documented,
            "deep macs " + std::to_string(p.deep_macs) + ", broad macs " +
                std::to_string(p.broad_macs));
}

}  // namespace

int main() {
  check_param_parity();
  check_eq6_identity();
  check_depth1_degeneracy();
  check_gradient_suite();
  check_broad_gradient_reach();
  check_training_smoke();
  check_ablation_harness();
  check_diagnostics_properties();
  check_flops_profile();
  std::cout << (failures == 0 ? "ALL CRITERIA PASSED" : "FAILURES: " + std::to_string(failures))
            << std::endl;
  return failures == 0 ? 0 : 1;
}
