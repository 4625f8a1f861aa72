#pragma once

// Dense row-major tensors with a reverse-mode gradient tape.
// Scalar type is a template parameter: float for training, double for
// finite-difference gradient checks.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace bvit {

using Index = std::int64_t;
using Shape = std::vector<Index>;

inline Index numel_of(const Shape& s) {
  Index n = 1;
  for (Index e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev; }
};

namespace detail {

inline std::uint64_t next_node_id() {
  static std::uint64_t counter = 0;
  return ++counter;
}

template <typename S>
struct TensorImpl {
  Shape shape;
  std::vector<S> data;
  bool requires_grad = false;
  std::vector<S> grad;  // empty until backward touches this node
  std::uint64_t id = next_node_id();
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(const TensorImpl&)> backprop;  // null for leaves

  Index numel() const { return numel_of(shape); }

  std::vector<S>& grad_buf() {
    if (grad.empty()) grad.assign(data.size(), S(0));
    return grad;
  }
};

}  // namespace detail

template <typename S>
class Tensor {
 public:
  using Impl = detail::TensorImpl<S>;

  Tensor() = default;

  static Tensor zeros(Shape shape) {
    return from_data(shape, std::vector<S>(static_cast<std::size_t>(numel_of(shape)), S(0)));
  }

  static Tensor full(Shape shape, S value) {
    return from_data(shape, std::vector<S>(static_cast<std::size_t>(numel_of(shape)), value));
  }

  static Tensor from_data(Shape shape, std::vector<S> data) {
    if (numel_of(shape) != static_cast<Index>(data.size()))
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    auto impl = std::make_shared<Impl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    return Tensor(std::move(impl));
  }

  static Tensor scalar(S value) { return from_data({1}, {value}); }

  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  Index numel() const { return impl_->numel(); }
  Index dim(std::size_t i) const { return impl_->shape[i]; }
  std::size_t rank() const { return impl_->shape.size(); }

  const std::vector<S>& data() const { return impl_->data; }
  std::vector<S>& mutable_data() { return impl_->data; }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  const std::vector<S>& grad() const { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  S item() const {
    if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
    return impl_->data[0];
  }

  std::shared_ptr<Impl> impl() const { return impl_; }

 private:
  std::shared_ptr<Impl> impl_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

namespace detail {

template <typename S>
Tensor<S> make_op(Shape shape, std::vector<S> data, const std::vector<Tensor<S>>& inputs,
                  std::function<void(const TensorImpl<S>&)> backprop) {
  auto out = Tensor<S>::from_data(std::move(shape), std::move(data));
  if (!grad_mode()) return out;
  bool needs = false;
  for (const auto& t : inputs) needs = needs || t.requires_grad();
  if (!needs) return out;
  auto impl = out.impl();
  impl->requires_grad = true;
  impl->parents.reserve(inputs.size());
  for (const auto& t : inputs) impl->parents.push_back(t.impl());
  impl->backprop = std::move(backprop);
  return out;
}

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapMat = Eigen::Map<RowMat<S>>;
template <typename S>
using CMapMat = Eigen::Map<const RowMat<S>>;

}  // namespace detail

// ---------------------------------------------------------------------------
// backward

template <typename S>
void backward(const Tensor<S>& root) {
  using Impl = detail::TensorImpl<S>;
  if (root.numel() != 1)
    throw ShapeError("backward requires a scalar root, got shape " + shape_str(root.shape()));
  // Reachable grad-requiring nodes, visited in reverse construction order.
  std::vector<std::shared_ptr<Impl>> nodes;
  std::unordered_set<const Impl*> seen;
  std::vector<std::shared_ptr<Impl>> stack{root.impl()};
  while (!stack.empty()) {
    auto n = stack.back();
    stack.pop_back();
    if (!n->requires_grad) continue;
    if (!seen.insert(n.get()).second) continue;
    nodes.push_back(n);
    for (const auto& p : n->parents) stack.push_back(p);
  }
  std::sort(nodes.begin(), nodes.end(),
            [](const auto& a, const auto& b) { return a->id > b->id; });
  for (auto& n : nodes) n->grad.assign(n->data.size(), S(0));
  if (!root.impl()->requires_grad) return;
  root.impl()->grad_buf()[0] = S(1);
  for (auto& n : nodes)
    if (n->backprop) n->backprop(*n);
}

// ---------------------------------------------------------------------------
// elementwise and shape ops

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<S> out(a.data());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.data()[i];
  auto pa = a.impl(), pb = b.impl();
  return detail::make_op<S>(a.shape(), std::move(out), {a, b},
                            [pa, pb](const detail::TensorImpl<S>& self) {
                              if (pa->requires_grad) {
                                auto& g = pa->grad_buf();
                                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                              }
                              if (pb->requires_grad) {
                                auto& g = pb->grad_buf();
                                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                              }
                            });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<S> out(a.data());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.data()[i];
  auto pa = a.impl(), pb = b.impl();
  return detail::make_op<S>(a.shape(), std::move(out), {a, b},
                            [pa, pb](const detail::TensorImpl<S>& self) {
                              if (pa->requires_grad) {
                                auto& g = pa->grad_buf();
                                for (std::size_t i = 0; i < g.size(); ++i)
                                  g[i] += self.grad[i] * pb->data[i];
                              }
                              if (pb->requires_grad) {
                                auto& g = pb->grad_buf();
                                for (std::size_t i = 0; i < g.size(); ++i)
                                  g[i] += self.grad[i] * pa->data[i];
                              }
                            });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  std::vector<S> out(a.data());
  for (auto& v : out) v *= c;
  auto pa = a.impl();
  return detail::make_op<S>(a.shape(), std::move(out), {a},
                            [pa, c](const detail::TensorImpl<S>& self) {
                              if (!pa->requires_grad) return;
                              auto& g = pa->grad_buf();
                              for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * self.grad[i];
                            });
}

// Adds a row vector to every row of a 2-D tensor (bias addition).
template <typename S>
Tensor<S> add_rowvec(const Tensor<S>& x, const Tensor<S>& b) {
  if (x.rank() != 2 || b.rank() != 1 || x.dim(1) != b.dim(0))
    throw ShapeError("add_rowvec: shape mismatch " + shape_str(x.shape()) + " vs " +
                     shape_str(b.shape()));
  const Index rows = x.dim(0), cols = x.dim(1);
  std::vector<S> out(x.data());
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) out[r * cols + c] += b.data()[c];
  auto px = x.impl(), pb = b.impl();
  return detail::make_op<S>(x.shape(), std::move(out), {x, b},
                            [px, pb, rows, cols](const detail::TensorImpl<S>& self) {
                              if (px->requires_grad) {
                                auto& g = px->grad_buf();
                                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                              }
                              if (pb->requires_grad) {
                                auto& g = pb->grad_buf();
                                for (Index r = 0; r < rows; ++r)
                                  for (Index c = 0; c < cols; ++c)
                                    g[c] += self.grad[r * cols + c];
                              }
                            });
}

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
  S s = std::accumulate(a.data().begin(), a.data().end(), S(0));
  auto pa = a.impl();
  return detail::make_op<S>({1}, std::vector<S>{s}, {a},
                            [pa](const detail::TensorImpl<S>& self) {
                              if (!pa->requires_grad) return;
                              auto& g = pa->grad_buf();
                              for (auto& v : g) v += self.grad[0];
                            });
}

template <typename S>
Tensor<S> mean(const Tensor<S>& a) {
  const S inv = S(1) / static_cast<S>(a.numel());
  S s = std::accumulate(a.data().begin(), a.data().end(), S(0)) * inv;
  auto pa = a.impl();
  return detail::make_op<S>({1}, std::vector<S>{s}, {a},
                            [pa, inv](const detail::TensorImpl<S>& self) {
                              if (!pa->requires_grad) return;
                              auto& g = pa->grad_buf();
                              for (auto& v : g) v += self.grad[0] * inv;
                            });
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  if (numel_of(shape) != a.numel())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  auto pa = a.impl();
  return detail::make_op<S>(std::move(shape), std::vector<S>(a.data()), {a},
                            [pa](const detail::TensorImpl<S>& self) {
                              if (!pa->requires_grad) return;
                              auto& g = pa->grad_buf();
                              for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                            });
}

template <typename S>
Tensor<S> transpose_last2(const Tensor<S>& a) {
  if (a.rank() < 2) throw ShapeError("transpose_last2 needs rank >= 2, got " + shape_str(a.shape()));
  Shape shape = a.shape();
  const Index m = shape[shape.size() - 2], n = shape[shape.size() - 1];
  std::swap(shape[shape.size() - 2], shape[shape.size() - 1]);
  const Index batches = a.numel() / (m * n);
  std::vector<S> out(static_cast<std::size_t>(a.numel()));
  for (Index b = 0; b < batches; ++b)
    for (Index i = 0; i < m; ++i)
      for (Index j = 0; j < n; ++j) out[b * m * n + j * m + i] = a.data()[b * m * n + i * n + j];
  auto pa = a.impl();
  return detail::make_op<S>(std::move(shape), std::move(out), {a},
                            [pa, batches, m, n](const detail::TensorImpl<S>& self) {
                              if (!pa->requires_grad) return;
                              auto& g = pa->grad_buf();
                              for (Index b = 0; b < batches; ++b)
                                for (Index i = 0; i < m; ++i)
                                  for (Index j = 0; j < n; ++j)
                                    g[b * m * n + i * n + j] += self.grad[b * m * n + j * m + i];
                            });
}

// Swaps the first two axes of a rank-3 tensor: (a,b,c) -> (b,a,c).
template <typename S>
Tensor<S> transpose01(const Tensor<S>& x) {
  if (x.rank() != 3) throw ShapeError("transpose01 needs rank 3, got " + shape_str(x.shape()));
  const Index a = x.dim(0), b = x.dim(1), c = x.dim(2);
  std::vector<S> out(static_cast<std::size_t>(x.numel()));
  for (Index i = 0; i < a; ++i)
    for (Index j = 0; j < b; ++j)
      for (Index k = 0; k < c; ++k)
        out[(j * a + i) * c + k] = x.data()[(i * b + j) * c + k];
  auto px = x.impl();
  return detail::make_op<S>({b, a, c}, std::move(out), {x},
                            [px, a, b, c](const detail::TensorImpl<S>& self) {
                              if (!px->requires_grad) return;
                              auto& g = px->grad_buf();
                              for (Index i = 0; i < a; ++i)
                                for (Index j = 0; j < b; ++j)
                                  for (Index k = 0; k < c; ++k)
                                    g[(i * b + j) * c + k] += self.grad[(j * a + i) * c + k];
                            });
}

// ---------------------------------------------------------------------------
// matmul (batched over leading axes)

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() < 2 || b.rank() < 2 || a.rank() != b.rank())
    throw ShapeError("matmul: rank mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  const std::size_t r = a.rank();
  for (std::size_t i = 0; i + 2 < r; ++i)
    if (a.dim(i) != b.dim(i))
      throw ShapeError("matmul: batch mismatch " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
  const Index m = a.dim(r - 2), k = a.dim(r - 1), k2 = b.dim(r - 2), n = b.dim(r - 1);
  if (k != k2)
    throw ShapeError("matmul: inner extents disagree " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  const Index batches = a.numel() / (m * k);
  Shape shape(a.shape().begin(), a.shape().end() - 2);
  shape.push_back(m);
  shape.push_back(n);
  std::vector<S> out(static_cast<std::size_t>(batches * m * n));
  for (Index t = 0; t < batches; ++t) {
    detail::CMapMat<S> ma(a.data().data() + t * m * k, m, k);
    detail::CMapMat<S> mb(b.data().data() + t * k * n, k, n);
    detail::MapMat<S> mo(out.data() + t * m * n, m, n);
    mo.noalias() = ma * mb;
  }
  auto pa = a.impl(), pb = b.impl();
  return detail::make_op<S>(
      std::move(shape), std::move(out), {a, b},
      [pa, pb, batches, m, k, n](const detail::TensorImpl<S>& self) {
        for (Index t = 0; t < batches; ++t) {
          detail::CMapMat<S> g(self.grad.data() + t * m * n, m, n);
          if (pa->requires_grad) {
            detail::CMapMat<S> mb(pb->data.data() + t * k * n, k, n);
            detail::MapMat<S> ga(pa->grad_buf().data() + t * m * k, m, k);
            ga.noalias() += g * mb.transpose();
          }
          if (pb->requires_grad) {
            detail::CMapMat<S> ma(pa->data.data() + t * m * k, m, k);
            detail::MapMat<S> gb(pb->grad_buf().data() + t * k * n, k, n);
            gb.noalias() += ma.transpose() * g;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// nonlinearities

template <typename S>
Tensor<S> softmax_lastdim(const Tensor<S>& x) {
  if (x.rank() < 1 || x.dim(x.rank() - 1) < 1)
    throw ShapeError("softmax_lastdim: empty last extent in " + shape_str(x.shape()));
  const Index cols = x.dim(x.rank() - 1);
  const Index rows = x.numel() / cols;
  std::vector<S> out(static_cast<std::size_t>(x.numel()));
  for (Index r = 0; r < rows; ++r) {
    const S* in = x.data().data() + r * cols;
    S* o = out.data() + r * cols;
    S mx = in[0];
    for (Index c = 1; c < cols; ++c) mx = std::max(mx, in[c]);
    S denom = S(0);
    for (Index c = 0; c < cols; ++c) {
      o[c] = std::exp(in[c] - mx);
      denom += o[c];
    }
    for (Index c = 0; c < cols; ++c) o[c] /= denom;
  }
  auto px = x.impl();
  auto saved = out;  // y needed for backward
  return detail::make_op<S>(
      x.shape(), std::move(out), {x},
      [px, saved = std::move(saved), rows, cols](const detail::TensorImpl<S>& self) {
        if (!px->requires_grad) return;
        auto& g = px->grad_buf();
        for (Index r = 0; r < rows; ++r) {
          const S* y = saved.data() + r * cols;
          const S* go = self.grad.data() + r * cols;
          S dot = S(0);
          for (Index c = 0; c < cols; ++c) dot += go[c] * y[c];
          for (Index c = 0; c < cols; ++c) g[r * cols + c] += y[c] * (go[c] - dot);
        }
      });
}

template <typename S>
Tensor<S> layernorm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias, S eps) {
  const Index cols = x.dim(x.rank() - 1);
  if (gain.numel() != cols || bias.numel() != cols)
    throw ShapeError("layernorm: gain/bias " + shape_str(gain.shape()) + "/" +
                     shape_str(bias.shape()) + " do not match last extent of " +
                     shape_str(x.shape()));
  const Index rows = x.numel() / cols;
  std::vector<S> out(static_cast<std::size_t>(x.numel()));
  std::vector<S> xhat(static_cast<std::size_t>(x.numel()));
  std::vector<S> inv_std(static_cast<std::size_t>(rows));
  for (Index r = 0; r < rows; ++r) {
    const S* in = x.data().data() + r * cols;
    S mu = S(0);
    for (Index c = 0; c < cols; ++c) mu += in[c];
    mu /= static_cast<S>(cols);
    S var = S(0);
    for (Index c = 0; c < cols; ++c) var += (in[c] - mu) * (in[c] - mu);
    var /= static_cast<S>(cols);
    const S is = S(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (Index c = 0; c < cols; ++c) {
      xhat[r * cols + c] = (in[c] - mu) * is;
      out[r * cols + c] = gain.data()[c] * xhat[r * cols + c] + bias.data()[c];
    }
  }
  auto px = x.impl(), pg = gain.impl(), pb = bias.impl();
  return detail::make_op<S>(
      x.shape(), std::move(out), {x, gain, bias},
      [px, pg, pb, xhat = std::move(xhat), inv_std = std::move(inv_std), rows,
       cols](const detail::TensorImpl<S>& self) {
        for (Index r = 0; r < rows; ++r) {
          const S* go = self.grad.data() + r * cols;
          const S* xh = xhat.data() + r * cols;
          if (pg->requires_grad) {
            auto& gg = pg->grad_buf();
            for (Index c = 0; c < cols; ++c) gg[c] += go[c] * xh[c];
          }
          if (pb->requires_grad) {
            auto& gb = pb->grad_buf();
            for (Index c = 0; c < cols; ++c) gb[c] += go[c];
          }
          if (px->requires_grad) {
            auto& gx = px->grad_buf();
            S m1 = S(0), m2 = S(0);
            for (Index c = 0; c < cols; ++c) {
              const S dxh = go[c] * pg->data[c];
              m1 += dxh;
              m2 += dxh * xh[c];
            }
            m1 /= static_cast<S>(cols);
            m2 /= static_cast<S>(cols);
            for (Index c = 0; c < cols; ++c) {
              const S dxh = go[c] * pg->data[c];
              gx[r * cols + c] += inv_std[r] * (dxh - m1 - xh[c] * m2);
            }
          }
        }
      });
}

// Exact-erf GELU.
template <typename S>
Tensor<S> gelu(const Tensor<S>& x) {
  static constexpr double inv_sqrt2 = 0.7071067811865475244;
  std::vector<S> out(static_cast<std::size_t>(x.numel()));
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = static_cast<double>(x.data()[i]);
    out[i] = static_cast<S>(0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
  }
  auto px = x.impl();
  return detail::make_op<S>(x.shape(), std::move(out), {x},
                            [px](const detail::TensorImpl<S>& self) {
                              if (!px->requires_grad) return;
                              auto& g = px->grad_buf();
                              for (std::size_t i = 0; i < g.size(); ++i) {
                                const double v = static_cast<double>(px->data[i]);
                                const double cdf = 0.5 * (1.0 + std::erf(v * 0.7071067811865475244));
                                const double pdf = 0.3989422804014326779 * std::exp(-0.5 * v * v);
                                g[i] += self.grad[i] * static_cast<S>(cdf + v * pdf);
                              }
                            });
}

// ---------------------------------------------------------------------------
// concat / slice

template <typename S>
Tensor<S> concat_lastdim(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat_lastdim: no parts");
  const std::size_t r = parts[0].rank();
  Shape lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
  Index total = 0;
  for (const auto& p : parts) {
    if (p.rank() != r || !std::equal(lead.begin(), lead.end(), p.shape().begin()))
      throw ShapeError("concat_lastdim: part shape " + shape_str(p.shape()) +
                       " incompatible with " + shape_str(parts[0].shape()));
    total += p.dim(r - 1);
  }
  const Index rows = numel_of(lead);
  Shape shape = lead;
  shape.push_back(total);
  std::vector<S> out(static_cast<std::size_t>(rows * total));
  std::vector<Index> widths, offsets;
  Index off = 0;
  for (const auto& p : parts) {
    const Index w = p.dim(r - 1);
    widths.push_back(w);
    offsets.push_back(off);
    for (Index row = 0; row < rows; ++row)
      std::copy_n(p.data().data() + row * w, w, out.data() + row * total + off);
    off += w;
  }
  std::vector<std::shared_ptr<detail::TensorImpl<S>>> impls;
  for (const auto& p : parts) impls.push_back(p.impl());
  return detail::make_op<S>(
      std::move(shape), std::move(out), parts,
      [impls, widths, offsets, rows, total](const detail::TensorImpl<S>& self) {
        for (std::size_t i = 0; i < impls.size(); ++i) {
          if (!impls[i]->requires_grad) continue;
          auto& g = impls[i]->grad_buf();
          const Index w = widths[i], o = offsets[i];
          for (Index row = 0; row < rows; ++row)
            for (Index c = 0; c < w; ++c)
              g[row * w + c] += self.grad[row * total + o + c];
        }
      });
}

template <typename S>
Tensor<S> slice_lastdim(const Tensor<S>& x, Index start, Index len) {
  const Index cols = x.dim(x.rank() - 1);
  if (start < 0 || len < 1 || start + len > cols)
    throw ShapeError("slice_lastdim: range [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") out of " + shape_str(x.shape()));
  const Index rows = x.numel() / cols;
  Shape shape = x.shape();
  shape.back() = len;
  std::vector<S> out(static_cast<std::size_t>(rows * len));
  for (Index r = 0; r < rows; ++r)
    std::copy_n(x.data().data() + r * cols + start, len, out.data() + r * len);
  auto px = x.impl();
  return detail::make_op<S>(std::move(shape), std::move(out), {x},
                            [px, start, len, rows, cols](const detail::TensorImpl<S>& self) {
                              if (!px->requires_grad) return;
                              auto& g = px->grad_buf();
                              for (Index r = 0; r < rows; ++r)
                                for (Index c = 0; c < len; ++c)
                                  g[r * cols + start + c] += self.grad[r * len + c];
                            });
}

// Row range of a 2-D tensor.
template <typename S>
Tensor<S> select_rows(const Tensor<S>& x, Index start, Index len) {
  if (x.rank() != 2) throw ShapeError("select_rows needs rank 2, got " + shape_str(x.shape()));
  const Index rows = x.dim(0), cols = x.dim(1);
  if (start < 0 || len < 1 || start + len > rows)
    throw ShapeError("select_rows: range out of " + shape_str(x.shape()));
  std::vector<S> out(x.data().begin() + start * cols, x.data().begin() + (start + len) * cols);
  auto px = x.impl();
  return detail::make_op<S>({len, cols}, std::move(out), {x},
                            [px, start, len, cols](const detail::TensorImpl<S>& self) {
                              if (!px->requires_grad) return;
                              auto& g = px->grad_buf();
                              for (Index i = 0; i < len * cols; ++i)
                                g[start * cols + i] += self.grad[i];
                            });
}

// Vertical concatenation of 2-D tensors.
template <typename S>
Tensor<S> concat_rows(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  const Index cols = parts[0].dim(1);
  Index rows = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(1) != cols)
      throw ShapeError("concat_rows: part " + shape_str(p.shape()) + " incompatible with " +
                       shape_str(parts[0].shape()));
    rows += p.dim(0);
  }
  std::vector<S> out;
  out.reserve(static_cast<std::size_t>(rows * cols));
  std::vector<Index> starts;
  for (const auto& p : parts) {
    starts.push_back(static_cast<Index>(out.size()));
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  std::vector<std::shared_ptr<detail::TensorImpl<S>>> impls;
  for (const auto& p : parts) impls.push_back(p.impl());
  return detail::make_op<S>({rows, cols}, std::move(out), parts,
                            [impls, starts](const detail::TensorImpl<S>& self) {
                              for (std::size_t i = 0; i < impls.size(); ++i) {
                                if (!impls[i]->requires_grad) continue;
                                auto& g = impls[i]->grad_buf();
                                for (std::size_t j = 0; j < g.size(); ++j)
                                  g[j] += self.grad[starts[i] + j];
                              }
                            });
}

// ---------------------------------------------------------------------------
// adaptive average pooling over the last axis
//
// Output element t averages the window [floor(t*L/T), ceil((t+1)*L/T)).

template <typename S>
Tensor<S> adaptive_avg_pool_lastdim(const Tensor<S>& x, Index target) {
  const Index cols = x.dim(x.rank() - 1);
  if (target < 1 || target > cols)
    throw ShapeError("adaptive_avg_pool_lastdim: target " + std::to_string(target) +
                     " exceeds input extent of " + shape_str(x.shape()));
  const Index rows = x.numel() / cols;
  Shape shape = x.shape();
  shape.back() = target;
  std::vector<Index> lo(static_cast<std::size_t>(target)), hi(static_cast<std::size_t>(target));
  for (Index t = 0; t < target; ++t) {
    lo[t] = (t * cols) / target;
    hi[t] = ((t + 1) * cols + target - 1) / target;
  }
  std::vector<S> out(static_cast<std::size_t>(rows * target));
  for (Index r = 0; r < rows; ++r)
    for (Index t = 0; t < target; ++t) {
      S acc = S(0);
      for (Index c = lo[t]; c < hi[t]; ++c) acc += x.data()[r * cols + c];
      out[r * target + t] = acc / static_cast<S>(hi[t] - lo[t]);
    }
  auto px = x.impl();
  return detail::make_op<S>(
      std::move(shape), std::move(out), {x},
      [px, lo = std::move(lo), hi = std::move(hi), rows, cols, target](
          const detail::TensorImpl<S>& self) {
        if (!px->requires_grad) return;
        auto& g = px->grad_buf();
        for (Index r = 0; r < rows; ++r)
          for (Index t = 0; t < target; ++t) {
            const S share = self.grad[r * target + t] / static_cast<S>(hi[t] - lo[t]);
            for (Index c = lo[t]; c < hi[t]; ++c) g[r * cols + c] += share;
          }
      });
}

// ---------------------------------------------------------------------------
// cross entropy (mean over batch, fused log-softmax)

template <typename S>
Tensor<S> cross_entropy(const Tensor<S>& logits, const std::vector<Index>& labels) {
  if (logits.rank() != 2 || static_cast<std::size_t>(logits.dim(0)) != labels.size())
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  const Index batch = logits.dim(0), classes = logits.dim(1);
  std::vector<S> probs(static_cast<std::size_t>(logits.numel()));
  S loss = S(0);
  for (Index r = 0; r < batch; ++r) {
    const S* in = logits.data().data() + r * classes;
    S mx = in[0];
    for (Index c = 1; c < classes; ++c) mx = std::max(mx, in[c]);
    S denom = S(0);
    for (Index c = 0; c < classes; ++c) {
      probs[r * classes + c] = std::exp(in[c] - mx);
      denom += probs[r * classes + c];
    }
    for (Index c = 0; c < classes; ++c) probs[r * classes + c] /= denom;
    loss -= std::log(probs[r * classes + labels[r]]);
  }
  loss /= static_cast<S>(batch);
  auto pl = logits.impl();
  return detail::make_op<S>(
      {1}, std::vector<S>{loss}, {logits},
      [pl, probs = std::move(probs), labels, batch, classes](const detail::TensorImpl<S>& self) {
        if (!pl->requires_grad) return;
        auto& g = pl->grad_buf();
        const S go = self.grad[0] / static_cast<S>(batch);
        for (Index r = 0; r < batch; ++r)
          for (Index c = 0; c < classes; ++c) {
            S p = probs[r * classes + c];
            if (c == labels[r]) p -= S(1);
            g[r * classes + c] += go * p;
          }
      });
}

}  // namespace bvit
