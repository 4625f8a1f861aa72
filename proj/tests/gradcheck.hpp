#pragma once

// Central finite-difference oracle for gradient checks, independent of the
// backward pass it verifies.

#include "bvit/rng.hpp"
#include "bvit/tensor.hpp"

#include <cmath>
#include <functional>
#include <vector>

namespace bvit::testing {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
};

// `loss` must rebuild the graph from the current leaf values on every call.
// h = 1e-5 at f64 per the oracle contract.
inline GradCheckResult finite_diff_check(const std::vector<Tensor<double>*>& leaves,
                                         const std::function<Tensor<double>()>& loss,
                                         double h = 1e-5) {
  for (auto* leaf : leaves) leaf->set_requires_grad(true);
  auto root = loss();
  backward(root);
  std::vector<std::vector<double>> analytic;
  for (auto* leaf : leaves)
    analytic.push_back(leaf->has_grad() ? leaf->grad()
                                        : std::vector<double>(leaf->data().size(), 0.0));
  GradCheckResult result;
  NoGradGuard ng;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto& data = leaves[li]->mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + h;
      const double fp = loss().item();
      data[i] = orig - h;
      const double fm = loss().item();
      data[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[li][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
      result.max_rel_err = std::max(result.max_rel_err, std::abs(a - numeric) / denom);
      ++result.checked;
    }
  }
  return result;
}

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  std::vector<double> data(static_cast<std::size_t>(numel_of(shape)));
  for (auto& v : data) v = rng.uniform(-scale, scale);
  return Tensor<double>::from_data(std::move(shape), std::move(data));
}

}  // namespace bvit::testing
