#pragma once

// Desk-scale data pipeline and optimizer: synthetic separable datasets, the
// on-disk dataset format, cosine schedule, SGD+momentum training loop.

#include "bvit/broad.hpp"
#include "bvit/model.hpp"
#include "bvit/rng.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <string>
#include <vector>

namespace bvit {

struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DivergenceError : std::runtime_error {
  explicit DivergenceError(const std::string& msg) : std::runtime_error(msg) {}
};

inline constexpr char kDatasetMagic[8] = {'B', 'V', 'D', 'S', '0', '0', '0', '1'};

struct Dataset {
  std::uint32_t count = 0, h = 0, w = 0, c = 0, num_classes = 0;
  std::vector<std::uint8_t> pixels;   // count * h * w * c, row-major, c innermost
  std::vector<std::uint16_t> labels;  // count

  std::size_t image_bytes() const { return std::size_t(h) * w * c; }
};

// Prototype-plus-bounded-noise task, linearly separable by construction.
// noise in [0,1] scales a per-pixel uniform jitter of up to +-noise*127.
inline Dataset synth_dataset(std::uint64_t seed, std::uint32_t count, std::uint32_t h,
                             std::uint32_t w, std::uint32_t c, std::uint32_t num_classes,
                             double noise) {
  Rng rng(seed);
  Dataset ds{count, h, w, c, num_classes, {}, {}};
  const std::size_t n = ds.image_bytes();
  std::vector<std::uint8_t> prototypes(std::size_t(num_classes) * n);
  for (auto& p : prototypes) p = static_cast<std::uint8_t>(rng.below(256));
  ds.pixels.resize(std::size_t(count) * n);
  ds.labels.resize(count);
  const double amp = noise * 127.0;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t label = static_cast<std::uint16_t>(i % num_classes);
    ds.labels[i] = label;
    const std::uint8_t* proto = prototypes.data() + std::size_t(label) * n;
    std::uint8_t* img = ds.pixels.data() + std::size_t(i) * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double jitter = amp > 0 ? rng.uniform(-amp, amp) : 0.0;
      const double v = std::clamp(double(proto[j]) + jitter, 0.0, 255.0);
      img[j] = static_cast<std::uint8_t>(std::lround(v));
    }
  }
  return ds;
}

inline void save_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open dataset for writing: " + path);
  out.write(kDatasetMagic, 8);
  const std::uint32_t header[5] = {ds.count, ds.h, ds.w, ds.c, ds.num_classes};
  out.write(reinterpret_cast<const char*>(header), sizeof(header));
  out.write(reinterpret_cast<const char*>(ds.pixels.data()),
            static_cast<std::streamsize>(ds.pixels.size()));
  out.write(reinterpret_cast<const char*>(ds.labels.data()),
            static_cast<std::streamsize>(ds.labels.size() * 2));
  if (!out) throw DataError("short write to dataset: " + path);
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open dataset: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kDatasetMagic, 8) != 0)
    throw DataError("bad dataset magic in " + path);
  std::uint32_t header[5];
  in.read(reinterpret_cast<char*>(header), sizeof(header));
  if (!in) throw DataError("truncated dataset header in " + path);
  Dataset ds{header[0], header[1], header[2], header[3], header[4], {}, {}};
  if (ds.count < 1) throw DataError("dataset has no images: " + path);
  ds.pixels.resize(std::size_t(ds.count) * ds.image_bytes());
  in.read(reinterpret_cast<char*>(ds.pixels.data()),
          static_cast<std::streamsize>(ds.pixels.size()));
  if (static_cast<std::size_t>(in.gcount()) != ds.pixels.size())
    throw DataError("truncated dataset " + path + ": expected " + std::to_string(ds.pixels.size()) +
                    " image bytes, got " + std::to_string(in.gcount()));
  ds.labels.resize(ds.count);
  in.read(reinterpret_cast<char*>(ds.labels.data()),
          static_cast<std::streamsize>(ds.labels.size() * 2));
  if (static_cast<std::size_t>(in.gcount()) != ds.labels.size() * 2)
    throw DataError("truncated dataset " + path + ": expected " +
                    std::to_string(ds.labels.size() * 2) + " label bytes, got " +
                    std::to_string(in.gcount()));
  for (std::uint32_t i = 0; i < ds.count; ++i)
    if (ds.labels[i] >= ds.num_classes)
      throw DataError("dataset label " + std::to_string(ds.labels[i]) + " at index " +
                      std::to_string(i) + " out of range (num_classes=" +
                      std::to_string(ds.num_classes) + ")");
  return ds;
}

struct TrainConfig {
  std::int64_t steps = 2000;
  std::int64_t batch_size = 16;
  double base_lr = 0.05;
  std::int64_t warmup_steps = 100;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
  std::int64_t eval_every = 100;
  std::vector<double> norm_mean{0.5};
  std::vector<double> norm_std{0.5};

  void validate() const {
    if (steps < 1 || batch_size < 1 || eval_every < 1)
      throw std::runtime_error("train config: steps/batch_size/eval_every must be positive");
    if (warmup_steps < 0 || warmup_steps >= steps)
      throw std::runtime_error("train config: warmup_steps must be in [0, steps)");
    if (base_lr < 0) throw std::runtime_error("train config: base_lr must be nonnegative");
  }
};

// Linear warmup to base_lr, then cosine decay to zero at `steps`.
inline double lr_at(std::int64_t step, const TrainConfig& cfg) {
  if (step <= 0) return 0.0;
  if (step < cfg.warmup_steps)
    return cfg.base_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  const double phase = static_cast<double>(step - cfg.warmup_steps) /
                       static_cast<double>(cfg.steps - cfg.warmup_steps);
  return cfg.base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * phase));
}

// Pixel scaling to [0,1] then per-channel standardization.
inline Tensor<float> standardize_image(const Dataset& ds, std::uint32_t index,
                                       const TrainConfig& cfg) {
  const std::size_t n = ds.image_bytes();
  const std::uint8_t* img = ds.pixels.data() + std::size_t(index) * n;
  std::vector<float> data(n);
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t ch = j % ds.c;
    const double mean = cfg.norm_mean[ch % cfg.norm_mean.size()];
    const double std_ = cfg.norm_std[ch % cfg.norm_std.size()];
    data[j] = static_cast<float>((double(img[j]) / 255.0 - mean) / std_);
  }
  return Tensor<float>::from_data({Index(ds.h), Index(ds.w), Index(ds.c)}, std::move(data));
}

struct EvalResult {
  double top1 = 0.0;
  double mean_loss = 0.0;
};

// Argmax ties break to the lowest class index.
inline EvalResult evaluate(const BVit<float>& model, const Dataset& ds, const TrainConfig& cfg) {
  NoGradGuard ng;
  std::size_t correct = 0;
  double loss = 0.0;
  for (std::uint32_t i = 0; i < ds.count; ++i) {
    auto logits = forward_logits(model, standardize_image(ds, i, cfg));
    Index best = 0;
    for (Index c = 1; c < logits.numel(); ++c)
      if (logits.data()[c] > logits.data()[best]) best = c;
    if (best == Index(ds.labels[i])) ++correct;
    loss += static_cast<double>(cross_entropy(logits, {Index(ds.labels[i])}).item());
  }
  return {double(correct) / double(ds.count), loss / double(ds.count)};
}

struct MetricsRow {
  std::int64_t step;
  double loss;
  double lr;
  double eval_acc;
};

inline void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::string& path) {
  std::ofstream out(path);
  out << "step,loss,lr,eval_acc\n";
  out << std::setprecision(10);
  for (const auto& r : rows) out << r.step << "," << r.loss << "," << r.lr << "," << r.eval_acc << "\n";
}

// Cross-entropy training with SGD momentum 0.9 and decoupled weight decay.
// Deterministic: seeded epoch shuffles, sequential batches. Parameters whose
// names start with any prefix in `freeze` are left untouched.
inline std::vector<MetricsRow> train(BVit<float>& model, const Dataset& ds, const TrainConfig& cfg,
                                     const std::vector<std::string>& freeze = {}) {
  cfg.validate();
  if (std::int64_t(ds.count) < cfg.batch_size)
    throw DataError("batch_size " + std::to_string(cfg.batch_size) + " exceeds dataset count " +
                    std::to_string(ds.count));
  auto params = model.named_params();
  std::vector<bool> frozen(params.size(), false);
  for (std::size_t i = 0; i < params.size(); ++i)
    for (const auto& prefix : freeze)
      if (params[i].first.rfind(prefix, 0) == 0) frozen[i] = true;
  std::vector<std::vector<float>> velocity(params.size());
  for (std::size_t i = 0; i < params.size(); ++i)
    velocity[i].assign(params[i].second->data().size(), 0.0f);

  Rng shuffle_rng(cfg.seed);
  std::vector<std::uint32_t> order(ds.count);
  for (std::uint32_t i = 0; i < ds.count; ++i) order[i] = i;
  std::size_t cursor = ds.count;  // forces a shuffle before the first batch

  std::vector<MetricsRow> log;
  for (std::int64_t step = 1; step <= cfg.steps; ++step) {
    std::vector<Tensor<float>> sample_logits;
    std::vector<Index> labels;
    for (std::int64_t b = 0; b < cfg.batch_size; ++b) {
      if (cursor >= order.size()) {
        shuffle_rng.shuffle(order);
        cursor = 0;
      }
      const std::uint32_t idx = order[cursor++];
      sample_logits.push_back(forward_logits(model, standardize_image(ds, idx, cfg)));
      labels.push_back(Index(ds.labels[idx]));
    }
    auto logits = concat_rows(sample_logits);
    auto loss = cross_entropy(logits, labels);
    const double loss_val = static_cast<double>(loss.item());
    if (!std::isfinite(loss_val))
      throw DivergenceError("training diverged: loss is not finite at step " +
                            std::to_string(step));
    backward(loss);
    const double lr = lr_at(step, cfg);
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (frozen[i]) continue;
      auto& w = params[i].second->mutable_data();
      const auto& g = params[i].second->grad();
      auto& v = velocity[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        v[j] = 0.9f * v[j] + (g.empty() ? 0.0f : g[j]);
        w[j] -= static_cast<float>(lr) * (v[j] + static_cast<float>(cfg.weight_decay) * w[j]);
      }
    }
    if (step % cfg.eval_every == 0 || step == cfg.steps) {
      const EvalResult ev = evaluate(model, ds, cfg);
      log.push_back({step, loss_val, lr, ev.top1});
    }
  }
  return log;
}

}  // namespace bvit
