#include <cmath>

#include "doctest.h"
#include "grunlab/analysis.hpp"
#include "grunlab/common.hpp"

using namespace grunlab;

namespace {

// Brute-force LCS oracle: enumerate every subsequence of the shorter side
// and test it against the longer side.
bool is_subsequence(const std::vector<std::string>& needle,
                    const std::vector<std::string>& hay) {
  size_t i = 0;
  for (const auto& w : hay) {
    if (i < needle.size() && w == needle[i]) ++i;
  }
  return i == needle.size();
}

size_t brute_lcs(const std::vector<std::string>& a,
                 const std::vector<std::string>& b) {
  const auto& small = a.size() <= b.size() ? a : b;
  const auto& big = a.size() <= b.size() ? b : a;
  size_t best = 0;
  for (size_t mask = 0; mask < (size_t(1) << small.size()); ++mask) {
    std::vector<std::string> sub;
    for (size_t i = 0; i < small.size(); ++i)
      if (mask & (size_t(1) << i)) sub.push_back(small[i]);
    if (sub.size() > best && is_subsequence(sub, big)) best = sub.size();
  }
  return best;
}

// Jacobi eigenvalue oracle for small symmetric matrices.
void jacobi_eigen(std::vector<double> a, size_t n,
                  std::vector<double>& values,
                  std::vector<double>& vectors /* row i = eigvec i */) {
  std::vector<double> v(n * n, 0.0);
  for (size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  for (int sweep = 0; sweep < 200; ++sweep) {
    double off = 0;
    for (size_t p = 0; p < n; ++p)
      for (size_t q = p + 1; q < n; ++q) off += a[p * n + q] * a[p * n + q];
    if (off < 1e-22) break;
    for (size_t p = 0; p < n; ++p) {
      for (size_t q = p + 1; q < n; ++q) {
        if (std::abs(a[p * n + q]) < 1e-18) continue;
        const double theta =
            (a[q * n + q] - a[p * n + p]) / (2 * a[p * n + q]);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1));
        const double c = 1 / std::sqrt(t * t + 1), s = t * c;
        for (size_t k = 0; k < n; ++k) {
          const double akp = a[k * n + p], akq = a[k * n + q];
          a[k * n + p] = c * akp - s * akq;
          a[k * n + q] = s * akp + c * akq;
        }
        for (size_t k = 0; k < n; ++k) {
          const double apk = a[p * n + k], aqk = a[q * n + k];
          a[p * n + k] = c * apk - s * aqk;
          a[q * n + k] = s * apk + c * aqk;
        }
        for (size_t k = 0; k < n; ++k) {
          const double vkp = v[k * n + p], vkq = v[k * n + q];
          v[k * n + p] = c * vkp - s * vkq;
          v[k * n + q] = s * vkp + c * vkq;
        }
      }
    }
  }
  values.assign(n, 0.0);
  vectors.assign(n * n, 0.0);
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  std::vector<double> diag(n);
  for (size_t i = 0; i < n; ++i) diag[i] = a[i * n + i];
  std::sort(order.begin(), order.end(),
            [&](size_t x, size_t y) { return diag[x] > diag[y]; });
  for (size_t r = 0; r < n; ++r) {
    values[r] = diag[order[r]];
    for (size_t k = 0; k < n; ++k) vectors[r * n + k] = v[k * n + order[r]];
  }
}

EmbeddingSet set_of(std::vector<std::vector<double>> vs,
                    const std::string& label = "x") {
  EmbeddingSet s;
  s.class_label = label;
  s.vectors = std::move(vs);
  return s;
}

}  // namespace

TEST_CASE("rouge_l_recall: spec cases") {
  CHECK(rouge_l_recall("a b c d", "a b c d") == doctest::Approx(1.0));
  CHECK(rouge_l_recall("a b c d", "a c d") == doctest::Approx(0.75));
  CHECK(rouge_l_recall("a b c", "x y z") == doctest::Approx(0.0));
  // lowercasing and punctuation stripping
  CHECK(rouge_l_recall("The Moon, was bright.", "the moon was bright") ==
        doctest::Approx(1.0));
  CHECK_THROWS_AS(rouge_l_recall("", "a"), std::invalid_argument);
  CHECK_THROWS_AS(rouge_l_recall("?!", "a"), std::invalid_argument);
}

TEST_CASE("rouge_l_recall: brute-force oracle on 200 random pairs") {
  Rng rng(17);
  const std::vector<std::string> words = {"a", "b", "c", "d", "e"};
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::string> ref, hyp;
    const size_t rl = 1 + rng.below(8), hl = rng.below(9);
    for (size_t i = 0; i < rl; ++i) ref.push_back(words[rng.below(5)]);
    for (size_t i = 0; i < hl; ++i) hyp.push_back(words[rng.below(5)]);
    CHECK(lcs_length(ref, hyp) == brute_lcs(ref, hyp));
  }
}

TEST_CASE("csd: collapsed clusters, hand case, scale invariance") {
  auto a = set_of({{0, 0}, {0, 0}});
  auto b = set_of({{3, 4}, {3, 4}});
  CHECK(csd(a, b) == doctest::Approx(0.0));

  auto a2 = set_of({{0, 0}, {2, 0}});
  auto b2 = set_of({{10, 0}, {12, 0}});
  CHECK(csd(a2, b2) == doctest::Approx(0.2));

  auto a3 = set_of({{0, 0}, {20, 0}});
  auto b3 = set_of({{100, 0}, {120, 0}});
  CHECK(csd(a3, b3) == doctest::Approx(0.2));

  // coinciding centroids: +inf sentinel
  auto c1 = set_of({{-1, 0}, {1, 0}});
  auto c2 = set_of({{0, -1}, {0, 1}});
  CHECK(std::isinf(csd(c1, c2)));

  CHECK_THROWS_AS(csd(set_of({{1, 1}}), b2), std::invalid_argument);
}

TEST_CASE("csd: symmetric and invariant under isometries") {
  Rng rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::vector<double>> av, bv;
    for (int i = 0; i < 5; ++i) {
      av.push_back({rng.gaussian(), rng.gaussian(), rng.gaussian()});
      bv.push_back({rng.gaussian() + 3, rng.gaussian(), rng.gaussian()});
    }
    auto a = set_of(av), b = set_of(bv);
    const double base = csd(a, b);
    CHECK(csd(b, a) == doctest::Approx(base).epsilon(1e-12));

    // random rotation (Gram-Schmidt of a random matrix), translation, scale
    double q[3][3];
    for (auto& row : q)
      for (auto& x : row) x = rng.gaussian();
    // orthonormalize rows
    for (int i = 0; i < 3; ++i) {
      for (int p = 0; p < i; ++p) {
        double dot = 0;
        for (int j = 0; j < 3; ++j) dot += q[i][j] * q[p][j];
        for (int j = 0; j < 3; ++j) q[i][j] -= dot * q[p][j];
      }
      double norm = 0;
      for (int j = 0; j < 3; ++j) norm += q[i][j] * q[i][j];
      norm = std::sqrt(norm);
      for (int j = 0; j < 3; ++j) q[i][j] /= norm;
    }
    const double scale = 0.5 + rng.uniform() * 10;
    const double shift[3] = {rng.gaussian(), rng.gaussian(), rng.gaussian()};
    auto transform = [&](const std::vector<std::vector<double>>& vs) {
      std::vector<std::vector<double>> out;
      for (const auto& x : vs) {
        std::vector<double> y(3, 0.0);
        for (int i = 0; i < 3; ++i) {
          for (int j = 0; j < 3; ++j) y[i] += q[i][j] * x[j];
          y[i] = y[i] * scale + shift[i];
        }
        out.push_back(y);
      }
      return out;
    };
    auto at = set_of(transform(av)), bt = set_of(transform(bv));
    CHECK(csd(at, bt) == doctest::Approx(base).epsilon(1e-9));
  }
}

TEST_CASE("pca_2d: planar data is fully explained and reconstructed") {
  Rng rng(29);
  // data in a 2-plane through its mean inside R^5
  std::vector<double> u(5), w(5);
  for (auto& x : u) x = rng.gaussian();
  for (auto& x : w) x = rng.gaussian();
  std::vector<std::vector<double>> data;
  for (int i = 0; i < 12; ++i) {
    const double a = rng.gaussian(), b = rng.gaussian();
    std::vector<double> v(5);
    for (int j = 0; j < 5; ++j) v[j] = 1.5 + a * u[j] + b * w[j];
    data.push_back(v);
  }
  Pca2d pca = pca_2d(data);
  CHECK(pca.explained1 + pca.explained2 == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(pca.explained1 >= pca.explained2);

  // reconstruction from 2 components recovers the centered data
  std::vector<double> mean(5, 0.0);
  for (const auto& v : data)
    for (int j = 0; j < 5; ++j) mean[j] += v[j] / data.size();
  for (size_t r = 0; r < data.size(); ++r) {
    for (int j = 0; j < 5; ++j) {
      const double recon = pca.projections[r][0] * pca.component1[j] +
                           pca.projections[r][1] * pca.component2[j];
      CHECK(std::abs(recon - (data[r][j] - mean[j])) < 1e-5);
    }
  }
}

TEST_CASE("pca_2d: matches a dense Jacobi eigendecomposition up to sign") {
  Rng rng(31);
  std::vector<std::vector<double>> data;
  for (int i = 0; i < 9; ++i)
    data.push_back({rng.gaussian() * 3, rng.gaussian() * 2, rng.gaussian(),
                    rng.gaussian() * 0.5});
  Pca2d pca = pca_2d(data);

  const size_t n = data.size(), d = 4;
  std::vector<double> mean(d, 0.0);
  for (const auto& v : data)
    for (size_t j = 0; j < d; ++j) mean[j] += v[j] / double(n);
  std::vector<double> cov(d * d, 0.0);
  for (const auto& v : data)
    for (size_t i = 0; i < d; ++i)
      for (size_t j = 0; j < d; ++j)
        cov[i * d + j] += (v[i] - mean[i]) * (v[j] - mean[j]) / double(n - 1);
  std::vector<double> values, vectors;
  jacobi_eigen(cov, d, values, vectors);

  double trace = 0;
  for (size_t i = 0; i < d; ++i) trace += cov[i * d + i];
  CHECK(pca.explained1 == doctest::Approx(values[0] / trace).epsilon(1e-6));
  CHECK(pca.explained2 == doctest::Approx(values[1] / trace).epsilon(1e-6));

  auto check_component = [&](const std::vector<double>& got,
                             const double* want) {
    double dot = 0;
    for (size_t j = 0; j < d; ++j) dot += got[j] * want[j];
    const double sign = dot >= 0 ? 1.0 : -1.0;
    for (size_t j = 0; j < d; ++j)
      CHECK(std::abs(got[j] - sign * want[j]) < 1e-5);
  };
  check_component(pca.component1, vectors.data());
  check_component(pca.component2, vectors.data() + d);
}

TEST_CASE("pca_2d: duplication invariance, orthonormality, degenerate data") {
  Rng rng(37);
  std::vector<std::vector<double>> data;
  for (int i = 0; i < 6; ++i)
    data.push_back({rng.gaussian(), rng.gaussian(), rng.gaussian()});
  Pca2d base = pca_2d(data);
  std::vector<std::vector<double>> doubled = data;
  doubled.insert(doubled.end(), data.begin(), data.end());
  Pca2d dup = pca_2d(doubled);
  for (int j = 0; j < 3; ++j) {
    CHECK(dup.component1[j] == doctest::Approx(base.component1[j])
                                   .epsilon(1e-5));
    CHECK(dup.component2[j] == doctest::Approx(base.component2[j])
                                   .epsilon(1e-5));
  }

  double d11 = 0, d22 = 0, d12 = 0;
  for (int j = 0; j < 3; ++j) {
    d11 += base.component1[j] * base.component1[j];
    d22 += base.component2[j] * base.component2[j];
    d12 += base.component1[j] * base.component2[j];
  }
  CHECK(d11 == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(d22 == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(std::abs(d12) < 1e-6);

  CHECK_THROWS_AS(pca_2d({{1, 1}, {1, 1}, {1, 1}}), DataError);
  CHECK_THROWS_AS(pca_2d({{1, 1}, {1, 2}}), std::invalid_argument);
}

TEST_CASE("normalized_probability: identities") {
  ModelConfig cfg;
  cfg.vocab_size = 19;
  cfg.d_model = 8;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.max_seq_len = 16;
  cfg.ff_mult = 2;
  Model<float> model(cfg, 3);

  // uniform model: prob = 1/vocab regardless of answer length
  Model<float> zero(cfg, 0);
  for (auto& [name, p] : zero.named_parameters())
    std::fill(p.value().begin(), p.value().end(), 0.0f);
  CHECK(normalized_probability<float>(zero, nullptr, {1, 2}, {3}) ==
        doctest::Approx(1.0 / 19).epsilon(1e-5));
  CHECK(normalized_probability<float>(zero, nullptr, {1, 2}, {3, 4, 5, 6}) ==
        doctest::Approx(1.0 / 19).epsilon(1e-5));

  // exp(-nll) identity on a trained-ish model
  const double nll = sequence_nll<float>(model, {1, 2, 3}, {4, 5});
  CHECK(normalized_probability<float>(model, nullptr, {1, 2, 3}, {4, 5}) ==
        doctest::Approx(std::exp(-nll)).epsilon(1e-6));
}

TEST_CASE("extract_embeddings: stages and contract") {
  ModelConfig cfg;
  cfg.vocab_size = 17;
  cfg.d_model = 8;
  cfg.n_layers = 3;
  cfg.n_heads = 2;
  cfg.max_seq_len = 12;
  cfg.ff_mult = 2;
  Model<float> model(cfg, 4);
  Rng rng(5);
  GrunStack<float> stack;
  stack.push_request(GrunStack<float>::make_request({2, 3}, cfg.d_model, 2,
                                                    GateKind::kLinear, 8,
                                                    rng));
  std::vector<std::vector<int>> prompts = {{1, 2, 3}, {4, 5}};

  // identity init: pre == post
  auto pre = extract_embeddings(model, &stack, prompts, 3,
                                EmbedStage::kPreIntervention);
  auto post = extract_embeddings(model, &stack, prompts, 3,
                                 EmbedStage::kPostIntervention);
  REQUIRE(pre.vectors.size() == 2);
  REQUIRE(post.vectors.size() == 2);
  CHECK(pre.vectors[0].size() == cfg.d_model);
  for (size_t i = 0; i < 2; ++i)
    for (size_t j = 0; j < cfg.d_model; ++j)
      CHECK(pre.vectors[i][j] == doctest::Approx(post.vectors[i][j]));

  // post without a hook at the layer is a contract error
  CHECK_THROWS_AS(extract_embeddings(model, &stack, prompts, 1,
                                     EmbedStage::kPostIntervention),
                  std::invalid_argument);
  CHECK_THROWS_AS(extract_embeddings<float>(model, nullptr, prompts, 3,
                                            EmbedStage::kPostIntervention),
                  std::invalid_argument);
  // single prompt -> one vector of width d
  auto single = extract_embeddings<float>(model, nullptr, {{7}}, 2,
                                          EmbedStage::kPreIntervention);
  CHECK(single.vectors.size() == 1);
  CHECK(single.vectors[0].size() == cfg.d_model);
}

TEST_CASE("gate_report: untrained gates read one half everywhere") {
  ModelConfig cfg;
  cfg.vocab_size = 17;
  cfg.d_model = 8;
  cfg.n_layers = 3;
  cfg.n_heads = 2;
  cfg.max_seq_len = 12;
  cfg.ff_mult = 2;
  Model<float> model(cfg, 6);
  Rng rng(7);
  GrunStack<float> stack;
  stack.push_request(GrunStack<float>::make_request({1, 3}, cfg.d_model, 2,
                                                    GateKind::kLinear, 8,
                                                    rng));
  stack.push_request(GrunStack<float>::make_request({1, 3}, cfg.d_model, 2,
                                                    GateKind::kLinear, 8,
                                                    rng));
  auto rows = gate_report(stack, model, {{1, 2}, {3}}, {{4, 5}});
  CHECK(rows.size() == 4);  // 2 requests x 2 layers
  for (const auto& r : rows) {
    CHECK(r.target_mean == doctest::Approx(0.5).epsilon(1e-5));
    CHECK(r.retain_mean == doctest::Approx(0.5).epsilon(1e-5));
  }
}
