#include "bvit/tensor.hpp"

#include "gradcheck.hpp"

#include <doctest.h>

using namespace bvit;
using bvit::testing::finite_diff_check;
using bvit::testing::random_tensor;

namespace {
constexpr int kCases = 20;
constexpr double kTol = 1e-4;
}  // namespace

TEST_CASE("matmul gradients") {
  for (int t = 0; t < kCases; ++t) {
    Rng rng(100 + t);
    auto a = random_tensor({3, 4}, rng);
    auto b = random_tensor({4, 2}, rng);
    auto r = finite_diff_check({&a, &b}, [&] { return sum(mul(matmul(a, b), matmul(a, b))); });
    CHECK(r.max_rel_err < kTol);
  }
}

TEST_CASE("batched matmul gradients") {
  for (int t = 0; t < kCases; ++t) {
    Rng rng(200 + t);
    auto a = random_tensor({2, 3, 4}, rng);
    auto b = random_tensor({2, 4, 3}, rng);
    auto r = finite_diff_check({&a, &b}, [&] { return mean(matmul(a, b)); });
    CHECK(r.max_rel_err < kTol);
  }
}

TEST_CASE("softmax gradients") {
  for (int t = 0; t < kCases; ++t) {
    Rng rng(300 + t);
    auto x = random_tensor({3, 5}, rng, 2.0);
    auto w = random_tensor({3, 5}, rng);
    auto r = finite_diff_check({&x}, [&] { return sum(mul(softmax_lastdim(x), w)); });
    CHECK(r.max_rel_err < kTol);
  }
}

TEST_CASE("layernorm gradients") {
  for (int t = 0; t < kCases; ++t) {
    Rng rng(400 + t);
    auto x = random_tensor({3, 6}, rng);
    auto g = random_tensor({6}, rng);
    auto b = random_tensor({6}, rng);
    auto w = random_tensor({3, 6}, rng);
    auto r = finite_diff_check(
        {&x, &g, &b}, [&] { return sum(mul(layernorm(x, g, b, 1e-6), w)); });
    CHECK(r.max_rel_err < kTol);
  }
}

TEST_CASE("gelu gradients") {
  for (int t = 0; t < kCases; ++t) {
    Rng rng(500 + t);
    auto x = random_tensor({4, 4}, rng, 3.0);
    auto r = finite_diff_check({&x}, [&] { return sum(mul(gelu(x), gelu(x))); });
    CHECK(r.max_rel_err < kTol);
  }
}

TEST_CASE("concat and slice gradients") {
  for (int t = 0; t < kCases; ++t) {
    Rng rng(600 + t);
    auto a = random_tensor({2, 3}, rng);
    auto b = random_tensor({2, 2}, rng);
    auto r = finite_diff_check({&a, &b}, [&] {
      auto cat = concat_lastdim<double>({a, b});
      return sum(mul(slice_lastdim(cat, 1, 3), slice_lastdim(cat, 1, 3)));
    });
    CHECK(r.max_rel_err < kTol);
  }
}

TEST_CASE("adaptive pool gradients") {
  for (int t = 0; t < kCases; ++t) {
    Rng rng(700 + t);
    auto x = random_tensor({3, 7}, rng);
    auto w = random_tensor({3, 3}, rng);
    auto r = finite_diff_check(
        {&x}, [&] { return sum(mul(adaptive_avg_pool_lastdim(x, 3), w)); });
    CHECK(r.max_rel_err < kTol);
  }
}

TEST_CASE("elementwise, transpose, rowvec, select gradients") {
  for (int t = 0; t < kCases; ++t) {
    Rng rng(800 + t);
    auto x = random_tensor({3, 4}, rng);
    auto y = random_tensor({3, 4}, rng);
    auto b = random_tensor({4}, rng);
    auto r = finite_diff_check({&x, &y, &b}, [&] {
      auto mixed = add_rowvec(add(scale(x, 0.7), mul(x, y)), b);
      auto tr = transpose_last2(mixed);
      return add(mean(select_rows(mixed, 1, 2)), mean(mul(tr, tr)));
    });
    CHECK(r.max_rel_err < kTol);
  }
}

TEST_CASE("cross entropy gradients") {
  for (int t = 0; t < kCases; ++t) {
    Rng rng(900 + t);
    auto logits = random_tensor({4, 5}, rng, 2.0);
    std::vector<Index> labels{0, 3, 1, 4};
    auto r = finite_diff_check({&logits}, [&] { return cross_entropy(logits, labels); });
    CHECK(r.max_rel_err < kTol);
  }
}

TEST_CASE("reshape, transpose01, concat_rows gradients") {
  for (int t = 0; t < kCases; ++t) {
    Rng rng(1000 + t);
    auto x = random_tensor({2, 3, 4}, rng);
    auto y = random_tensor({1, 12}, rng);
    auto r = finite_diff_check({&x, &y}, [&] {
      auto flat = reshape(transpose01(x), {6, 4});
      auto stacked = concat_rows<double>({reshape(y, {3, 4}), flat});
      return sum(mul(stacked, stacked));
    });
    CHECK(r.max_rel_err < kTol);
  }
}
