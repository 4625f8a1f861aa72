#pragma once

// Analysis suite: CKA representation similarity, mean attention distance,
// attention rollout, exact parameter counting and FLOPs estimation.

#include "bvit/broad.hpp"
#include "bvit/model.hpp"

#include <Eigen/Dense>

#include <fstream>
#include <iomanip>
#include <string>
#include <vector>

namespace bvit {

// Biased HSIC estimator tr(K H L H) / (n-1)^2 with H = I - (1/n) 1 1^T.
inline double hsic(const Eigen::MatrixXd& Kg, const Eigen::MatrixXd& Lg) {
  const Eigen::Index n = Kg.rows();
  if (Kg.cols() != n || Lg.rows() != n || Lg.cols() != n)
    throw std::runtime_error("hsic: inputs must be square Gram matrices of equal size");
  Eigen::MatrixXd H = Eigen::MatrixXd::Identity(n, n) -
                      Eigen::MatrixXd::Constant(n, n, 1.0 / static_cast<double>(n));
  return ((Kg * H) * (Lg * H)).trace() / static_cast<double>((n - 1) * (n - 1));
}

// Linear-kernel CKA between two feature matrices with matching row counts.
inline double cka(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y) {
  if (X.rows() != Y.rows()) throw std::runtime_error("cka: row counts differ");
  if (X.rows() < 3) throw std::runtime_error("cka: need at least 3 rows");
  Eigen::MatrixXd Kg = X * X.transpose();
  Eigen::MatrixXd Lg = Y * Y.transpose();
  const double kk = hsic(Kg, Kg), ll = hsic(Lg, Lg);
  if (kk <= 0.0 || ll <= 0.0)
    throw std::runtime_error("cka: degenerate (zero-variance) features");
  return hsic(Kg, Lg) / std::sqrt(kk * ll);
}

// CKA over token-flattened layer outputs across an image sample.
inline Eigen::MatrixXd cka_layer_matrix(const BVit<float>& model,
                                        const std::vector<Tensor<float>>& images) {
  if (model.cfg.depth < 2) throw std::runtime_error("cka_layer_matrix: need at least 2 layers");
  if (images.size() < 8) throw std::runtime_error("cka_layer_matrix: need at least 8 images");
  NoGradGuard ng;
  const int l = model.cfg.depth;
  const Eigen::Index rows = static_cast<Eigen::Index>(images.size()) * model.cfg.seq_len();
  std::vector<Eigen::MatrixXd> feats(l, Eigen::MatrixXd(rows, model.cfg.dim));
  Eigen::Index row = 0;
  for (const auto& img : images) {
    auto [out, trace] = forward_deep(model, img);
    for (int i = 0; i < l; ++i) {
      const auto& z = trace[i].z;
      for (Index t = 0; t < z.dim(0); ++t)
        for (Index c = 0; c < z.dim(1); ++c)
          feats[i](row + t, c) = static_cast<double>(z.data()[t * z.dim(1) + c]);
    }
    row += model.cfg.seq_len();
  }
  Eigen::MatrixXd out(l, l);
  for (int i = 0; i < l; ++i)
    for (int j = i; j < l; ++j) {
      const double v = cka(feats[i], feats[j]);
      out(i, j) = v;
      out(j, i) = v;
    }
  return out;
}

// Attention-weighted mean Euclidean distance between patch centers, in
// pixels. Class-token row and column are excluded and the remaining row
// weights renormalized. One value per (layer, head), heads sorted ascending
// within each layer; averaged over query tokens and traces.
template <typename S>
std::vector<std::vector<double>> mean_attention_distance(
    const std::vector<AttentionTrace<S>>& traces, const ModelConfig& cfg) {
  if (traces.empty() || traces[0].empty())
    throw std::runtime_error("mean_attention_distance: empty trace");
  const int l = static_cast<int>(traces[0].size());
  const Index h = traces[0][0].attn.dim(0);
  const Index gh = cfg.image_h / cfg.patch, gw = cfg.image_w / cfg.patch;
  const Index n = gh * gw, n1 = n + 1;
  if (traces[0][0].attn.dim(1) != n1)
    throw ShapeError("mean_attention_distance: trace tokens " +
                     std::to_string(traces[0][0].attn.dim(1)) + " vs grid " +
                     std::to_string(n1));
  // pairwise patch-center distances
  std::vector<double> dist(static_cast<std::size_t>(n * n));
  for (Index a = 0; a < n; ++a)
    for (Index b = 0; b < n; ++b) {
      const double dy = static_cast<double>((a / gw) - (b / gw)) * cfg.patch;
      const double dx = static_cast<double>((a % gw) - (b % gw)) * cfg.patch;
      dist[a * n + b] = std::sqrt(dy * dy + dx * dx);
    }
  std::vector<std::vector<double>> out(l, std::vector<double>(h, 0.0));
  for (int li = 0; li < l; ++li) {
    for (int hi = 0; hi < h; ++hi) {
      double acc = 0.0;
      std::size_t count = 0;
      for (const auto& trace : traces) {
        const auto& attn = trace[li].attn;  // (h, N+1, N+1)
        for (Index q = 0; q < n; ++q) {
          const S* row = attn.data().data() + (hi * n1 + (q + 1)) * n1;
          double wsum = 0.0, wdist = 0.0;
          for (Index kidx = 0; kidx < n; ++kidx) {
            const double w = static_cast<double>(row[kidx + 1]);
            wsum += w;
            wdist += w * dist[q * n + kidx];
          }
          if (wsum > 0.0) acc += wdist / wsum;
          ++count;
        }
      }
      out[li][hi] = count ? acc / static_cast<double>(count) : 0.0;
    }
    std::sort(out[li].begin(), out[li].end());
  }
  return out;
}

// Head-averaged, residual-adjusted attention rollout:
// A_hat_i = renorm(0.5 * mean_heads(attn_i) + 0.5 * I); R = A_hat_l ... A_hat_1.
template <typename S>
Eigen::MatrixXd attention_rollout(const AttentionTrace<S>& trace) {
  if (trace.empty()) throw std::runtime_error("attention_rollout: empty trace");
  const Index h = trace[0].attn.dim(0), n1 = trace[0].attn.dim(1);
  Eigen::MatrixXd rollout = Eigen::MatrixXd::Identity(n1, n1);
  for (const auto& layer : trace) {
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(n1, n1);
    for (Index hi = 0; hi < h; ++hi)
      for (Index r = 0; r < n1; ++r)
        for (Index c = 0; c < n1; ++c)
          A(r, c) += static_cast<double>(layer.attn.data()[(hi * n1 + r) * n1 + c]);
    A /= static_cast<double>(h);
    Eigen::MatrixXd adj = 0.5 * A + 0.5 * Eigen::MatrixXd::Identity(n1, n1);
    for (Index r = 0; r < n1; ++r) adj.row(r) /= adj.row(r).sum();
    rollout = adj * rollout;
  }
  return rollout;
}

// ---------------------------------------------------------------------------
// profiling

template <typename S>
std::int64_t count_params(BVit<S>& model) {
  std::int64_t total = 0;
  for (auto& [name, t] : model.named_params()) total += t->numel();
  return total;
}

struct FlopsProfile {
  std::int64_t deep_macs = 0;
  std::int64_t broad_macs = 0;
  std::int64_t deep_flops() const { return 2 * deep_macs; }
  std::int64_t broad_flops() const { return 2 * broad_macs; }
  std::int64_t total_flops() const { return deep_flops() + broad_flops(); }
};

// Multiply-accumulate counts for one forward pass; matmuls and linears only
// (softmax/LN/GELU excluded). The broad term covers Eq.-style logit
// accumulation plus value application for every layer and head.
inline FlopsProfile estimate_flops(const ModelConfig& cfg) {
  const std::int64_t n = cfg.tokens(), n1 = cfg.seq_len(), d = cfg.dim, l = cfg.depth;
  const std::int64_t dh = cfg.head_dim(), h = cfg.heads, mlp = std::int64_t(cfg.mlp_ratio) * d;
  FlopsProfile p;
  p.deep_macs += n * std::int64_t(cfg.patch_features()) * d;  // patch projection
  std::int64_t per_layer = 0;
  per_layer += n1 * d * 3 * d;        // qkv projection
  per_layer += h * n1 * n1 * dh;      // attention logits
  per_layer += h * n1 * n1 * dh;      // attention-weighted values
  per_layer += n1 * d * d;            // output projection
  per_layer += 2 * n1 * d * mlp;      // MLP
  p.deep_macs += l * per_layer;
  p.deep_macs += std::int64_t(d) * cfg.num_classes;  // head, class token only
  if (cfg.variant != Variant::deep_only)
    p.broad_macs = 2 * n1 * n1 * h * l * dh;  // broad logits + value application
  return p;
}

// ---------------------------------------------------------------------------
// report emission

inline void write_cka_csv(const Eigen::MatrixXd& m, const std::string& path) {
  std::ofstream out(path);
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      out << (c ? "," : "") << std::setprecision(10) << m(r, c);
    out << "\n";
  }
}

inline void write_attn_distance_csv(const std::vector<std::vector<double>>& d,
                                    const std::string& path) {
  std::ofstream out(path);
  out << "layer,head,value\n";
  for (std::size_t l = 0; l < d.size(); ++l)
    for (std::size_t h = 0; h < d[l].size(); ++h)
      out << l << "," << h << "," << std::setprecision(10) << d[l][h] << "\n";
}

// P2 ASCII graymap of rollout row 0 (class token attention over patches),
// reshaped to the patch grid and scaled to 0..255.
inline void write_rollout_pgm(const Eigen::MatrixXd& rollout, const ModelConfig& cfg,
                              const std::string& path) {
  const Index gh = cfg.image_h / cfg.patch, gw = cfg.image_w / cfg.patch;
  double mx = 0.0;
  for (Index i = 0; i < gh * gw; ++i) mx = std::max(mx, rollout(0, i + 1));
  std::ofstream out(path);
  out << "P2\n" << gw << " " << gh << "\n255\n";
  for (Index y = 0; y < gh; ++y) {
    for (Index x = 0; x < gw; ++x) {
      const double v = rollout(0, y * gw + x + 1);
      out << (x ? " " : "") << static_cast<int>(mx > 0 ? 255.0 * v / mx : 0.0);
    }
    out << "\n";
  }
}

inline void write_profile_txt(BVit<float>& model, const std::string& path) {
  const FlopsProfile p = estimate_flops(model.cfg);
  std::ofstream out(path);
  out << "params_total " << count_params(model) << "\n";
  out << "deep_macs " << p.deep_macs << "\n";
  out << "deep_flops " << p.deep_flops() << "\n";
  out << "broad_macs " << p.broad_macs << "\n";
  out << "broad_flops " << p.broad_flops() << "\n";
  out << "total_flops " << p.total_flops() << "\n";
  out << "# The broad attention block adds zero trainable parameters.\n";
  out << "# Measured broad-attention cost is the analytic 2*(N+1)^2*h*l*d_head MAC\n";
  out << "# term above; it is orders of magnitude larger than the 1e-5 GFLOPs\n";
  out << "# figure quoted elsewhere for this block, so we report the analytic\n";
  out << "# value and do not assert that figure.\n";
}

}  // namespace bvit
