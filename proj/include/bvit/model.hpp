#pragma once

// BViT backbone: patch embedding, pre-norm transformer layers, per-layer
// q/k/v and attention capture, classification head.

#include "bvit/rng.hpp"
#include "bvit/tensor.hpp"

#include <array>
#include <string>
#include <utility>
#include <vector>

namespace bvit {

enum class Variant { deep_only, broad_full, broad_with_V_only, broad_without_V };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::deep_only: return "deep_only";
    case Variant::broad_full: return "broad_full";
    case Variant::broad_with_V_only: return "broad_with_V_only";
    case Variant::broad_without_V: return "broad_without_V";
  }
  return "?";
}

inline Variant variant_from_name(const std::string& s) {
  if (s == "deep_only") return Variant::deep_only;
  if (s == "broad_full") return Variant::broad_full;
  if (s == "broad_with_V_only") return Variant::broad_with_V_only;
  if (s == "broad_without_V") return Variant::broad_without_V;
  throw std::runtime_error("unknown variant '" + s + "'");
}

struct ModelConfig {
  int image_h = 224;
  int image_w = 224;
  int channels = 3;
  int patch = 16;
  int dim = 192;
  int depth = 12;
  int heads = 3;
  int mlp_ratio = 4;
  int num_classes = 1000;
  double gamma = 1.0;
  Variant variant = Variant::broad_full;

  int head_dim() const { return dim / heads; }
  int tokens() const { return (image_h / patch) * (image_w / patch); }
  int seq_len() const { return tokens() + 1; }
  int patch_features() const { return patch * patch * channels; }

  void validate() const {
    if (image_h <= 0 || image_w <= 0 || channels <= 0 || patch <= 0 || dim <= 0 || depth <= 0 ||
        heads <= 0 || mlp_ratio <= 0 || num_classes <= 0)
      throw std::runtime_error("model config: all extents must be positive");
    if (image_h % patch != 0 || image_w % patch != 0)
      throw std::runtime_error("model config: image " + std::to_string(image_h) + "x" +
                               std::to_string(image_w) + " not divisible by patch " +
                               std::to_string(patch));
    if (dim % heads != 0)
      throw std::runtime_error("model config: dim " + std::to_string(dim) +
                               " not divisible by heads " + std::to_string(heads));
  }

  static ModelConfig bvit_5m() { return ModelConfig{}; }

  static ModelConfig bvit_22m() {
    ModelConfig c;
    c.dim = 384;
    c.heads = 6;
    return c;
  }

  bool operator==(const ModelConfig&) const = default;
};

template <typename S>
struct LayerWeights {
  Tensor<S> ln1_gain, ln1_bias;
  Tensor<S> qkv_w, qkv_b;  // (D, 3D), (3D)
  Tensor<S> out_w, out_b;  // (D, D), (D)
  Tensor<S> ln2_gain, ln2_bias;
  Tensor<S> fc1_w, fc1_b;  // (D, mlp*D)
  Tensor<S> fc2_w, fc2_b;  // (mlp*D, D)
};

template <typename S>
struct LayerTrace {
  Tensor<S> q, k, v;  // (N+1, h, d_head)
  Tensor<S> attn;     // (h, N+1, N+1)
  Tensor<S> z;        // (N+1, D), layer output
};

template <typename S>
using AttentionTrace = std::vector<LayerTrace<S>>;

template <typename S>
struct BVit {
  ModelConfig cfg;
  Tensor<S> patch_w, patch_b;  // (P*P*C, D), (D)
  Tensor<S> cls_token;         // (1, D)
  Tensor<S> pos_embed;         // (N+1, D)
  std::vector<LayerWeights<S>> layers;
  Tensor<S> lnf_gain, lnf_bias;
  Tensor<S> head_w, head_b;  // (D, K), (K)

  static BVit init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    auto tn = [&](Shape shape) {
      std::vector<S> data(static_cast<std::size_t>(numel_of(shape)));
      for (auto& v : data) v = static_cast<S>(rng.trunc_normal(0.02));
      auto t = Tensor<S>::from_data(std::move(shape), std::move(data));
      return t.set_requires_grad(true);
    };
    auto zeros = [](Shape shape) { return Tensor<S>::zeros(std::move(shape)).set_requires_grad(true); };
    auto ones = [](Shape shape) {
      return Tensor<S>::full(std::move(shape), S(1)).set_requires_grad(true);
    };
    const Index d = cfg.dim, n1 = cfg.seq_len(), mlp = cfg.mlp_ratio * cfg.dim;
    BVit m;
    m.cfg = cfg;
    m.patch_w = tn({cfg.patch_features(), d});
    m.patch_b = zeros({d});
    m.cls_token = tn({1, d});
    m.pos_embed = tn({n1, d});
    m.layers.resize(cfg.depth);
    for (auto& l : m.layers) {
      l.ln1_gain = ones({d});
      l.ln1_bias = zeros({d});
      l.qkv_w = tn({d, 3 * d});
      l.qkv_b = zeros({3 * d});
      l.out_w = tn({d, d});
      l.out_b = zeros({d});
      l.ln2_gain = ones({d});
      l.ln2_bias = zeros({d});
      l.fc1_w = tn({d, mlp});
      l.fc1_b = zeros({mlp});
      l.fc2_w = tn({mlp, d});
      l.fc2_b = zeros({d});
    }
    m.lnf_gain = ones({d});
    m.lnf_bias = zeros({d});
    m.head_w = tn({d, cfg.num_classes});
    m.head_b = zeros({cfg.num_classes});
    return m;
  }

  std::vector<std::pair<std::string, Tensor<S>*>> named_params() {
    std::vector<std::pair<std::string, Tensor<S>*>> out;
    out.emplace_back("patch_embed.weight", &patch_w);
    out.emplace_back("patch_embed.bias", &patch_b);
    out.emplace_back("cls_token", &cls_token);
    out.emplace_back("pos_embed", &pos_embed);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string p = "layers." + std::to_string(i) + ".";
      auto& l = layers[i];
      out.emplace_back(p + "ln1.gain", &l.ln1_gain);
      out.emplace_back(p + "ln1.bias", &l.ln1_bias);
      out.emplace_back(p + "attn.qkv.weight", &l.qkv_w);
      out.emplace_back(p + "attn.qkv.bias", &l.qkv_b);
      out.emplace_back(p + "attn.out.weight", &l.out_w);
      out.emplace_back(p + "attn.out.bias", &l.out_b);
      out.emplace_back(p + "ln2.gain", &l.ln2_gain);
      out.emplace_back(p + "ln2.bias", &l.ln2_bias);
      out.emplace_back(p + "mlp.fc1.weight", &l.fc1_w);
      out.emplace_back(p + "mlp.fc1.bias", &l.fc1_b);
      out.emplace_back(p + "mlp.fc2.weight", &l.fc2_w);
      out.emplace_back(p + "mlp.fc2.bias", &l.fc2_b);
    }
    out.emplace_back("ln_final.gain", &lnf_gain);
    out.emplace_back("ln_final.bias", &lnf_bias);
    out.emplace_back("head.weight", &head_w);
    out.emplace_back("head.bias", &head_b);
    return out;
  }
};

inline constexpr double kLayerNormEps = 1e-6;

// Extracts the N patches of an HxWxC image (C innermost) as a constant
// (N, P*P*C) tensor, patches in row-major grid order.
template <typename S>
Tensor<S> patchify(const Tensor<S>& image, const ModelConfig& cfg) {
  if (image.rank() != 3 || image.dim(0) != cfg.image_h || image.dim(1) != cfg.image_w ||
      image.dim(2) != cfg.channels)
    throw ShapeError("patchify: image " + shape_str(image.shape()) + " does not match config " +
                     std::to_string(cfg.image_h) + "x" + std::to_string(cfg.image_w) + "x" +
                     std::to_string(cfg.channels));
  const Index P = cfg.patch, C = cfg.channels, W = cfg.image_w;
  const Index gh = cfg.image_h / P, gw = cfg.image_w / P;
  std::vector<S> out;
  out.reserve(static_cast<std::size_t>(gh * gw * P * P * C));
  for (Index gy = 0; gy < gh; ++gy)
    for (Index gx = 0; gx < gw; ++gx)
      for (Index y = 0; y < P; ++y)
        for (Index x = 0; x < P; ++x)
          for (Index c = 0; c < C; ++c)
            out.push_back(image.data()[((gy * P + y) * W + gx * P + x) * C + c]);
  return Tensor<S>::from_data({gh * gw, P * P * C}, std::move(out));
}

template <typename S>
Tensor<S> patch_embed(const BVit<S>& m, const Tensor<S>& image) {
  auto patches = patchify(image, m.cfg);
  auto projected = add_rowvec(matmul(patches, m.patch_w), m.patch_b);
  auto seq = concat_rows<S>({m.cls_token, projected});
  return add(seq, m.pos_embed);
}

// Multi-head self-attention. Captures q/k/v and attention weights into the
// trace entry; scaling is 1/sqrt(d_head).
template <typename S>
Tensor<S> mhsa(const Tensor<S>& x, const LayerWeights<S>& w, const ModelConfig& cfg,
               LayerTrace<S>& trace) {
  const Index n1 = x.dim(0), d = cfg.dim, h = cfg.heads, dh = cfg.head_dim();
  auto qkv = add_rowvec(matmul(x, w.qkv_w), w.qkv_b);  // (N+1, 3D)
  trace.q = reshape(slice_lastdim(qkv, 0, d), {n1, h, dh});
  trace.k = reshape(slice_lastdim(qkv, d, d), {n1, h, dh});
  trace.v = reshape(slice_lastdim(qkv, 2 * d, d), {n1, h, dh});
  auto qh = transpose01(trace.q);  // (h, N+1, dh)
  auto kh = transpose01(trace.k);
  auto vh = transpose01(trace.v);
  auto logits = scale(matmul(qh, transpose_last2(kh)), S(1.0 / std::sqrt(double(dh))));
  trace.attn = softmax_lastdim(logits);  // (h, N+1, N+1)
  auto heads_out = matmul(trace.attn, vh);               // (h, N+1, dh)
  auto merged = reshape(transpose01(heads_out), {n1, d});
  return add_rowvec(matmul(merged, w.out_w), w.out_b);
}

template <typename S>
Tensor<S> transformer_layer(const Tensor<S>& x, const LayerWeights<S>& w, const ModelConfig& cfg,
                            LayerTrace<S>& trace) {
  auto attended = mhsa(layernorm(x, w.ln1_gain, w.ln1_bias, S(kLayerNormEps)), w, cfg, trace);
  auto z_hat = add(x, attended);
  auto normed = layernorm(z_hat, w.ln2_gain, w.ln2_bias, S(kLayerNormEps));
  auto hidden = gelu(add_rowvec(matmul(normed, w.fc1_w), w.fc1_b));
  auto mlp_out = add_rowvec(matmul(hidden, w.fc2_w), w.fc2_b);
  trace.z = add(z_hat, mlp_out);
  return trace.z;
}

// Runs the deep path; returns z_l and the full per-layer trace.
template <typename S>
std::pair<Tensor<S>, AttentionTrace<S>> forward_deep(const BVit<S>& m, const Tensor<S>& image) {
  AttentionTrace<S> trace(m.cfg.depth);
  auto x = patch_embed(m, image);
  for (int i = 0; i < m.cfg.depth; ++i) x = transformer_layer(x, m.layers[i], m.cfg, trace[i]);
  return {x, std::move(trace)};
}

// Final LayerNorm then linear head over the class token only.
template <typename S>
Tensor<S> classify(const BVit<S>& m, const Tensor<S>& out) {
  auto normed = layernorm(out, m.lnf_gain, m.lnf_bias, S(kLayerNormEps));
  auto cls = select_rows(normed, 0, 1);  // (1, D)
  return add_rowvec(matmul(cls, m.head_w), m.head_b);
}

}  // namespace bvit
