#pragma once

// Broad attention: concatenation of every layer's q/k/v, parameter-free
// attention over the concatenation, adaptive pooling back to the deep
// feature width, and the gamma-weighted combination with the deep output.

#include "bvit/model.hpp"
#include "bvit/tensor.hpp"

namespace bvit {

template <typename S>
struct BroadQKV {
  Tensor<S> Q, K, V;  // each (N+1, h, l*d_head)
};

// Layer-order concatenation along the feature axis; no parameters.
template <typename S>
BroadQKV<S> broad_connect(const AttentionTrace<S>& trace) {
  if (trace.empty()) throw ShapeError("broad_connect: empty trace");
  const Shape& ref = trace[0].q.shape();
  std::vector<Tensor<S>> qs, ks, vs;
  for (const auto& layer : trace) {
    if (layer.q.shape() != ref || layer.k.shape() != ref || layer.v.shape() != ref)
      throw ShapeError("broad_connect: heterogeneous layer shapes " + shape_str(layer.q.shape()) +
                       " vs " + shape_str(ref));
    qs.push_back(layer.q);
    ks.push_back(layer.k);
    vs.push_back(layer.v);
  }
  return {concat_lastdim(qs), concat_lastdim(ks), concat_lastdim(vs)};
}

// Parameter-free attention over the broad Q/K/V. Per head the logits are
// Q_h K_h^T / sqrt(d_scale) (equal to the layer-sum of q_i k_i^T), softmaxed
// and applied to the concatenated values; heads are merged by concatenation.
// Output is (N+1, h * l * d_v), head-major.
template <typename S>
Tensor<S> atten_pf(const BroadQKV<S>& bqkv, double d_scale) {
  if (d_scale <= 0) throw ShapeError("atten_pf: scaling dimension must be positive");
  const Index n1 = bqkv.Q.dim(0), h = bqkv.Q.dim(1);
  auto qh = transpose01(bqkv.Q);  // (h, N+1, l*d)
  auto kh = transpose01(bqkv.K);
  auto vh = transpose01(bqkv.V);
  auto logits = scale(matmul(qh, transpose_last2(kh)), S(1.0 / std::sqrt(d_scale)));
  auto weights = softmax_lastdim(logits);         // (h, N+1, N+1)
  auto attended = matmul(weights, vh);            // (h, N+1, l*d_v)
  return reshape(transpose01(attended), {n1, h * vh.dim(2)});
}

template <typename S>
Tensor<S> bpool(const Tensor<S>& attended, Index d_p) {
  return adaptive_avg_pool_lastdim(attended, d_p);
}

template <typename S>
Tensor<S> combine(const Tensor<S>& out_deep, const Tensor<S>& out_broad, double gamma) {
  if (out_deep.shape() != out_broad.shape())
    throw ShapeError("combine: shape mismatch " + shape_str(out_deep.shape()) + " vs " +
                     shape_str(out_broad.shape()));
  return add(out_deep, scale(out_broad, S(gamma)));
}

// Variant dispatch over the broad path. All broad variants scale logits by
// 1/sqrt(D), D the transformer hidden dimension.
template <typename S>
Tensor<S> broad_forward(const AttentionTrace<S>& trace, const Tensor<S>& out_deep,
                        const ModelConfig& cfg) {
  switch (cfg.variant) {
    case Variant::deep_only:
      return out_deep;
    case Variant::broad_full: {
      auto bqkv = broad_connect(trace);
      auto attended = atten_pf(bqkv, double(cfg.dim));
      return combine(out_deep, bpool(attended, cfg.dim), cfg.gamma);
    }
    case Variant::broad_with_V_only: {
      // logits from the last layer only, values from every layer
      auto bqkv = broad_connect(trace);
      BroadQKV<S> last_logits{trace.back().q, trace.back().k, bqkv.V};
      auto attended = atten_pf(last_logits, double(cfg.dim));
      return combine(out_deep, bpool(attended, cfg.dim), cfg.gamma);
    }
    case Variant::broad_without_V: {
      // layer-summed logits, values from the last layer only; output width is
      // already D so pooling is the identity
      auto bqkv = broad_connect(trace);
      BroadQKV<S> last_values{bqkv.Q, bqkv.K, trace.back().v};
      auto attended = atten_pf(last_values, double(cfg.dim));
      return combine(out_deep, bpool(attended, cfg.dim), cfg.gamma);
    }
  }
  throw std::runtime_error("broad_forward: unknown variant");
}

// Full model forward: deep path, broad path per variant, classification head.
template <typename S>
Tensor<S> forward_logits(const BVit<S>& m, const Tensor<S>& image,
                         AttentionTrace<S>* trace_out = nullptr) {
  auto [out_deep, trace] = forward_deep(m, image);
  auto combined = broad_forward(trace, out_deep, m.cfg);
  if (trace_out) *trace_out = std::move(trace);
  return classify(m, combined);
}

}  // namespace bvit
