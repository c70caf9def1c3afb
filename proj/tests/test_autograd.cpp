#include <cmath>
#include <cstring>
#include <functional>
#include <vector>

#include "doctest.h"
#include "grunlab/gradcheck.hpp"
#include "grunlab/ops.hpp"

using namespace grunlab;

namespace {

Tensor<double> randn_d(std::vector<size_t> shape, Rng& rng,
                       bool requires_grad = true) {
  return Tensor<double>::randn(std::move(shape), rng, 1.0, requires_grad);
}

// Generic per-op gradient check: loss = sum(out * fixed_weights), checked
// against central finite differences at `points` random points.
struct OpCase {
  std::vector<std::pair<std::string, Tensor<double>>> params;
  std::function<Tensor<double>()> fn;
};

void check_op(const char* name, int points,
              const std::function<OpCase(Rng&)>& make) {
  Rng rng(fnv1a64(std::string(name)));
  double worst = 0;
  for (int p = 0; p < points; ++p) {
    OpCase c = make(rng);
    auto report = check_gradients<double>(c.fn, c.params, 1e-4);
    for (const auto& e : report.params) CHECK(e.finite);
    worst = std::max(worst, report.max_rel_err());
  }
  INFO(name << " worst rel err " << worst);
  CHECK(worst < 1e-4);
}

Tensor<double> weighted_sum(const Tensor<double>& out, Rng& rng) {
  Tensor<double> w = Tensor<double>::randn(out.shape(), rng, 1.0, false);
  return ops::sum(ops::mul(out, w));
}

}  // namespace

TEST_CASE("evaluate: spec examples") {
  auto a = Tensor<float>::from_data({2, 2}, {1, 2, 3, 4});
  auto b = Tensor<float>::from_data({2, 1}, {1, 1});
  auto c = ops::matmul(a, b);
  CHECK(c.value()[0] == doctest::Approx(3));
  CHECK(c.value()[1] == doctest::Approx(7));

  auto s = ops::softmax(Tensor<float>::from_data({4}, {0, 0, 0, 0}));
  for (float v : s.value()) CHECK(v == doctest::Approx(0.25));

  // layernorm oracle: direct mean/variance computation
  std::vector<double> x = {2, 4, 6};
  const double mean = (2 + 4 + 6) / 3.0;
  double var = 0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= 3.0;
  const double inv = 1.0 / std::sqrt(var + 1e-5);
  auto ln = ops::layer_norm(Tensor<double>::from_data({3}, x),
                            Tensor<double>::filled({3}, 1.0),
                            Tensor<double>::zeros({3}), 1e-5);
  for (size_t i = 0; i < 3; ++i)
    CHECK(ln.value()[i] == doctest::Approx((x[i] - mean) * inv).epsilon(1e-9));
  CHECK(ln.value()[0] == doctest::Approx(-1.2247).epsilon(1e-3));
  CHECK(ln.value()[1] == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(ln.value()[2] == doctest::Approx(1.2247).epsilon(1e-3));
}

TEST_CASE("evaluate: errors name the op and shapes") {
  auto a = Tensor<float>::from_data({2, 3}, std::vector<float>(6, 1));
  auto b = Tensor<float>::from_data({2, 3}, std::vector<float>(6, 1));
  CHECK_THROWS_WITH_AS(ops::matmul(a, b),
                       doctest::Contains("matmul"), std::invalid_argument);
  try {
    ops::matmul(a, b);
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("[2,3]") != std::string::npos);
  }
  CHECK_THROWS_AS(ops::log(Tensor<float>::from_data({1}, {-1.0f})),
                  std::domain_error);
  CHECK_THROWS_AS(ops::log(Tensor<float>::from_data({1}, {0.0f})),
                  std::domain_error);
}

TEST_CASE("backward: quadratic and sigmoid hand gradients") {
  auto x = Tensor<float>::from_data({3}, {1, 2, 3}, true);
  x.zero_grad();
  ops::sum(ops::mul(x, x)).backward();
  CHECK(x.grad()[0] == doctest::Approx(2));
  CHECK(x.grad()[1] == doctest::Approx(4));
  CHECK(x.grad()[2] == doctest::Approx(6));

  // sigmoid(w . x) at w = 0: grad_w = 0.25 * x
  auto w = Tensor<float>::zeros({3, 1}, true);
  auto xv = Tensor<float>::from_data({1, 3}, {0.5f, -1.0f, 2.0f});
  w.zero_grad();
  ops::sum(ops::sigmoid(ops::matmul(xv, w))).backward();
  CHECK(w.grad()[0] == doctest::Approx(0.25 * 0.5));
  CHECK(w.grad()[1] == doctest::Approx(0.25 * -1.0));
  CHECK(w.grad()[2] == doctest::Approx(0.25 * 2.0));
}

TEST_CASE("backward: cross-entropy gradient is softmax minus one-hot") {
  Rng rng(0);
  auto z = randn_d({1, 5}, rng);
  z.zero_grad();
  ops::cross_entropy_logits(z, {3}).backward();
  std::vector<double> probs(5);
  kernels::serial::softmax_rows(z.value().data(), probs.data(), 1, 5);
  for (size_t i = 0; i < 5; ++i) {
    const double want = probs[i] - (i == 3 ? 1.0 : 0.0);
    CHECK(z.grad()[i] == doctest::Approx(want).epsilon(1e-9));
  }
}

TEST_CASE("backward: non-scalar root is a contract error") {
  auto x = Tensor<float>::from_data({2}, {1, 2}, true);
  CHECK_THROWS_AS(ops::mul(x, x).backward(), std::invalid_argument);
}

TEST_CASE("backward: non-participating leaves keep zero gradients") {
  auto x = Tensor<float>::from_data({2}, {1, 2}, true);
  auto unused = Tensor<float>::from_data({2}, {5, 5}, true);
  x.zero_grad();
  unused.zero_grad();
  ops::sum(ops::mul(x, x)).backward();
  CHECK(unused.grad()[0] == 0.0f);
  CHECK(unused.grad()[1] == 0.0f);
}

TEST_CASE("evaluate is deterministic") {
  Rng rng(11);
  auto a = Tensor<float>::randn({8, 8}, rng, 1.0f);
  auto b = Tensor<float>::randn({8, 8}, rng, 1.0f);
  auto run = [&] {
    return ops::softmax(ops::matmul(ops::gelu(a), ops::tanh(b))).value();
  };
  auto r1 = run(), r2 = run();
  CHECK(std::memcmp(r1.data(), r2.data(), r1.size() * sizeof(float)) == 0);
}

TEST_CASE("softmax rows sum to one; layernorm is standardized") {
  Rng rng(5);
  auto x = Tensor<float>::randn({10, 17}, rng, 2.0f);
  auto s = ops::softmax(x);
  for (size_t r = 0; r < 10; ++r) {
    double sum = 0;
    for (size_t c = 0; c < 17; ++c) sum += s.value()[r * 17 + c];
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  }
  auto ln = ops::layer_norm(x, Tensor<float>::filled({17}, 1.0f),
                            Tensor<float>::zeros({17}));
  for (size_t r = 0; r < 10; ++r) {
    double mean = 0, var = 0;
    for (size_t c = 0; c < 17; ++c) mean += ln.value()[r * 17 + c];
    mean /= 17;
    for (size_t c = 0; c < 17; ++c) {
      const double d = ln.value()[r * 17 + c] - mean;
      var += d * d;
    }
    var /= 17;
    CHECK(std::abs(mean) < 1e-5);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
  }
}

TEST_CASE("degenerate layernorm input normalizes to the bias") {
  auto x = Tensor<float>::filled({4}, 3.0f);
  auto ln = ops::layer_norm(x, Tensor<float>::filled({4}, 1.0f),
                            Tensor<float>::filled({4}, 0.5f));
  for (float v : ln.value()) CHECK(v == doctest::Approx(0.5f));
}

// Every registered op against central finite differences, 100 random
// points each, 64-bit, step 1e-4, relative error below 1e-4.
TEST_CASE("per-op gradient checks") {
  constexpr int kPoints = 100;

  check_op("add", kPoints, [](Rng& rng) {
    OpCase c;
    auto a = randn_d({3, 4}, rng), b = randn_d({3, 4}, rng);
    c.params = {{"a", a}, {"b", b}};
    c.fn = [a, b, &rng] { return ops::sum(ops::mul(ops::add(a, b), b)); };
    return c;
  });

  check_op("sub_scale_neg", kPoints, [](Rng& rng) {
    OpCase c;
    auto a = randn_d({3, 4}, rng), b = randn_d({3, 4}, rng);
    c.params = {{"a", a}, {"b", b}};
    c.fn = [a, b] {
      return ops::sum(ops::scale(ops::sub(a, ops::neg(b)), 0.7));
    };
    return c;
  });

  check_op("mul", kPoints, [](Rng& rng) {
    OpCase c;
    auto a = randn_d({2, 5}, rng), b = randn_d({2, 5}, rng);
    c.params = {{"a", a}, {"b", b}};
    c.fn = [a, b] { return ops::sum(ops::mul(a, b)); };
    return c;
  });

  check_op("smul", kPoints, [](Rng& rng) {
    OpCase c;
    auto s = randn_d({1}, rng);
    auto x = randn_d({3, 3}, rng);
    c.params = {{"s", s}, {"x", x}};
    c.fn = [s, x] { return ops::sum(ops::smul(s, x)); };
    return c;
  });

  check_op("add_rowvec", kPoints, [](Rng& rng) {
    OpCase c;
    auto x = randn_d({4, 3}, rng);
    auto b = randn_d({3}, rng);
    c.params = {{"x", x}, {"b", b}};
    c.fn = [x, b] { return ops::sum(ops::tanh(ops::add_rowvec(x, b))); };
    return c;
  });

  check_op("matmul", kPoints, [](Rng& rng) {
    OpCase c;
    auto a = randn_d({3, 4}, rng), b = randn_d({4, 2}, rng);
    c.params = {{"a", a}, {"b", b}};
    auto fn = [a, b, &rng]() { return ops::matmul(a, b); };
    Tensor<double> w = Tensor<double>::randn({3, 2}, rng, 1.0, false);
    c.fn = [a, b, w] { return ops::sum(ops::mul(ops::matmul(a, b), w)); };
    return c;
  });

  check_op("transpose_reshape", kPoints, [](Rng& rng) {
    OpCase c;
    auto a = randn_d({3, 4}, rng);
    Tensor<double> w = Tensor<double>::randn({12}, rng, 1.0, false);
    c.params = {{"a", a}};
    c.fn = [a, w] {
      return ops::sum(ops::mul(ops::reshape(ops::transpose(a), {12}), w));
    };
    return c;
  });

  for (const char* name : {"exp", "log", "tanh", "sigmoid", "gelu",
                           "softplus"}) {
    std::string op_name = name;
    check_op(name, kPoints, [op_name](Rng& rng) {
      OpCase c;
      auto raw = randn_d({2, 4}, rng);
      if (op_name == "log")
        for (auto& v : raw.value()) v = std::abs(v) + 0.1;
      Tensor<double> w = Tensor<double>::randn({2, 4}, rng, 1.0, false);
      c.params = {{"x", raw}};
      c.fn = [raw, w, op_name] {
        Tensor<double> y;
        if (op_name == "exp") y = ops::exp(raw);
        else if (op_name == "log") y = ops::log(raw);
        else if (op_name == "tanh") y = ops::tanh(raw);
        else if (op_name == "sigmoid") y = ops::sigmoid(raw);
        else if (op_name == "gelu") y = ops::gelu(raw);
        else y = ops::softplus(raw);
        return ops::sum(ops::mul(y, w));
      };
      return c;
    });
  }

  check_op("clamp", kPoints, [](Rng& rng) {
    OpCase c;
    auto x = randn_d({8}, rng);
    // keep points away from the clamp boundaries so central differences
    // stay one-sided-free
    for (auto& v : x.value())
      if (std::abs(std::abs(v) - 0.8) < 1e-3) v += 2e-3;
    Tensor<double> w = Tensor<double>::randn({8}, rng, 1.0, false);
    c.params = {{"x", x}};
    c.fn = [x, w] { return ops::sum(ops::mul(ops::clamp(x, -0.8, 0.8), w)); };
    return c;
  });

  check_op("mean", kPoints, [](Rng& rng) {
    OpCase c;
    auto x = randn_d({3, 5}, rng);
    c.params = {{"x", x}};
    c.fn = [x] { return ops::mean(ops::mul(x, x)); };
    return c;
  });

  check_op("slice_concat_replace_row", kPoints, [](Rng& rng) {
    OpCase c;
    auto x = randn_d({4, 3}, rng);
    auto v = randn_d({3}, rng);
    Tensor<double> w = Tensor<double>::randn({4, 4}, rng, 1.0, false);
    c.params = {{"x", x}, {"v", v}};
    c.fn = [x, v, w] {
      auto left = ops::slice(x, 1, 0, 2);
      auto right = ops::slice(x, 1, 1, 3);
      auto joined = ops::concat<double>({left, right}, 1);
      auto replaced = ops::replace_row(joined, 2, ops::concat<double>(
          {ops::slice(v, 0, 0, 2), ops::slice(v, 0, 1, 3)}, 0));
      return ops::sum(ops::mul(replaced, w));
    };
    return c;
  });

  check_op("softmax", kPoints, [](Rng& rng) {
    OpCase c;
    auto x = randn_d({3, 6}, rng);
    Tensor<double> w = Tensor<double>::randn({3, 6}, rng, 1.0, false);
    c.params = {{"x", x}};
    c.fn = [x, w] { return ops::sum(ops::mul(ops::softmax(x), w)); };
    return c;
  });

  check_op("layer_norm", kPoints, [](Rng& rng) {
    OpCase c;
    auto x = randn_d({3, 6}, rng);
    auto g = randn_d({6}, rng);
    auto b = randn_d({6}, rng);
    Tensor<double> w = Tensor<double>::randn({3, 6}, rng, 1.0, false);
    c.params = {{"x", x}, {"g", g}, {"b", b}};
    c.fn = [x, g, b, w] {
      return ops::sum(ops::mul(ops::layer_norm(x, g, b), w));
    };
    return c;
  });

  check_op("embedding", kPoints, [](Rng& rng) {
    OpCase c;
    auto table = randn_d({6, 4}, rng);
    std::vector<int> ids = {static_cast<int>(rng.below(6)),
                            static_cast<int>(rng.below(6)),
                            static_cast<int>(rng.below(6))};
    Tensor<double> w = Tensor<double>::randn({3, 4}, rng, 1.0, false);
    c.params = {{"table", table}};
    c.fn = [table, ids, w] {
      return ops::sum(ops::mul(ops::embedding(table, ids), w));
    };
    return c;
  });

  check_op("causal_mask_softmax", kPoints, [](Rng& rng) {
    OpCase c;
    auto x = randn_d({4, 4}, rng);
    Tensor<double> w = Tensor<double>::randn({4, 4}, rng, 1.0, false);
    c.params = {{"x", x}};
    c.fn = [x, w] {
      return ops::sum(ops::mul(ops::softmax(ops::causal_mask(x)), w));
    };
    return c;
  });

  check_op("cross_entropy", kPoints, [](Rng& rng) {
    OpCase c;
    auto z = randn_d({4, 6}, rng);
    std::vector<int> targets = {-1, static_cast<int>(rng.below(6)),
                                static_cast<int>(rng.below(6)), -1};
    c.params = {{"z", z}};
    c.fn = [z, targets] { return ops::cross_entropy_logits(z, targets); };
    return c;
  });

  check_op("cross_entropy_sum", kPoints, [](Rng& rng) {
    OpCase c;
    auto z = randn_d({3, 5}, rng);
    std::vector<int> targets = {static_cast<int>(rng.below(5)),
                                static_cast<int>(rng.below(5)), -1};
    c.params = {{"z", z}};
    c.fn = [z, targets] {
      return ops::cross_entropy_logits(z, targets, ops::Reduction::kSum);
    };
    return c;
  });
}

TEST_CASE("cross-entropy contract errors") {
  auto z = Tensor<float>::from_data({2, 3}, {0, 0, 0, 0, 0, 0});
  CHECK_THROWS_AS(ops::cross_entropy_logits(z, {-1, -1}),
                  std::invalid_argument);
  CHECK_THROWS_AS(ops::cross_entropy_logits(z, {0}), std::invalid_argument);
  CHECK_THROWS_AS(ops::cross_entropy_logits(z, {0, 5}),
                  std::invalid_argument);
}

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(Tensor<float>::from_data({2, 2}, {1, 2, 3}),
                  std::invalid_argument);
  CHECK_THROWS_AS(
      Tensor<float>::from_data({1}, {std::numeric_limits<float>::infinity()}),
      std::domain_error);
  auto t = Tensor<float>::zeros({2, 3});
  CHECK(t.numel() == 6);
  t.zero_grad();
  CHECK(t.grad().size() == 6);
}
