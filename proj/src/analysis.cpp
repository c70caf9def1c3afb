#include "grunlab/analysis.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>

#include "grunlab/common.hpp"

namespace grunlab {

std::vector<std::string> rouge_tokens(const std::string& text) {
  std::vector<std::string> out;
  std::string word;
  for (char c : text) {
    if (std::isalnum(static_cast<unsigned char>(c)) || c == '\'') {
      word.push_back(
          static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    } else if (!word.empty()) {
      out.push_back(word);
      word.clear();
    }
  }
  if (!word.empty()) out.push_back(word);
  return out;
}

size_t lcs_length(const std::vector<std::string>& a,
                  const std::vector<std::string>& b) {
  if (a.empty() || b.empty()) return 0;
  std::vector<size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (size_t i = 1; i <= a.size(); ++i) {
    for (size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1
                                    : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l_recall(const std::string& reference,
                      const std::string& hypothesis) {
  const auto ref = rouge_tokens(reference);
  if (ref.empty())
    throw std::invalid_argument("rouge_l_recall: empty reference");
  const auto hyp = rouge_tokens(hypothesis);
  return static_cast<double>(lcs_length(ref, hyp)) /
         static_cast<double>(ref.size());
}

namespace {

double euclidean(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

double mean_pairwise(const std::vector<std::vector<double>>& v) {
  double s = 0;
  size_t n = 0;
  for (size_t i = 0; i < v.size(); ++i)
    for (size_t j = i + 1; j < v.size(); ++j) {
      s += euclidean(v[i], v[j]);
      ++n;
    }
  return s / double(n);
}

std::vector<double> centroid(const std::vector<std::vector<double>>& v) {
  std::vector<double> c(v[0].size(), 0.0);
  for (const auto& x : v)
    for (size_t i = 0; i < c.size(); ++i) c[i] += x[i];
  for (auto& e : c) e /= double(v.size());
  return c;
}

}  // namespace

double csd(const EmbeddingSet& a, const EmbeddingSet& b) {
  if (a.vectors.size() < 2 || b.vectors.size() < 2)
    throw std::invalid_argument("csd: each set needs at least 2 vectors");
  const size_t d = a.vectors[0].size();
  for (const auto& v : a.vectors)
    if (v.size() != d) throw std::invalid_argument("csd: ragged vectors");
  for (const auto& v : b.vectors)
    if (v.size() != d) throw std::invalid_argument("csd: ragged vectors");
  const double intra = 0.5 * (mean_pairwise(a.vectors) +
                              mean_pairwise(b.vectors));
  const double inter = euclidean(centroid(a.vectors), centroid(b.vectors));
  if (inter == 0.0) return std::numeric_limits<double>::infinity();
  return intra / inter;
}

namespace {

// Power iteration for the dominant eigenpair of a symmetric PSD matrix,
// with optional re-orthogonalization against an earlier component.
struct EigenPair {
  std::vector<double> vec;
  double value = 0.0;
};

EigenPair dominant_eigenpair(const std::vector<double>& mat, size_t d,
                             const std::vector<double>* orthogonal_to) {
  Rng rng(0x9ca2d17ull);
  std::vector<double> v(d);
  for (auto& x : v) x = rng.gaussian();
  auto normalize = [&](std::vector<double>& x) {
    double n = 0;
    for (double e : x) n += e * e;
    n = std::sqrt(n);
    if (n > 0)
      for (double& e : x) e /= n;
    return n;
  };
  auto project_out = [&](std::vector<double>& x) {
    if (!orthogonal_to) return;
    double dot = 0;
    for (size_t i = 0; i < d; ++i) dot += x[i] * (*orthogonal_to)[i];
    for (size_t i = 0; i < d; ++i) x[i] -= dot * (*orthogonal_to)[i];
  };
  project_out(v);
  if (normalize(v) == 0) {
    // Degenerate start; fall back to a basis vector orthogonal to v1.
    v.assign(d, 0.0);
    v[0] = 1.0;
    project_out(v);
    normalize(v);
  }
  std::vector<double> next(d);
  double lambda = 0.0;
  for (int iter = 0; iter < 1000; ++iter) {
    for (size_t i = 0; i < d; ++i) {
      double s = 0;
      for (size_t j = 0; j < d; ++j) s += mat[i * d + j] * v[j];
      next[i] = s;
    }
    project_out(next);
    lambda = normalize(next);
    if (lambda == 0.0) {
      // Null space: any orthogonal unit vector is a valid component.
      break;
    }
    double diff = 0;
    for (size_t i = 0; i < d; ++i) diff += std::abs(next[i] - v[i]);
    v = next;
    if (diff < 1e-8) break;
  }
  return {v, lambda};
}

void fix_sign(std::vector<double>& v) {
  for (double e : v) {
    if (std::abs(e) > 1e-12) {
      if (e < 0)
        for (double& x : v) x = -x;
      return;
    }
  }
}

}  // namespace

Pca2d pca_2d(const std::vector<std::vector<double>>& vectors) {
  if (vectors.size() < 3)
    throw std::invalid_argument("pca_2d: need at least 3 vectors");
  const size_t d = vectors[0].size();
  if (d < 2) throw std::invalid_argument("pca_2d: dimension must be >= 2");
  for (const auto& v : vectors)
    if (v.size() != d) throw std::invalid_argument("pca_2d: ragged vectors");

  const size_t n = vectors.size();
  std::vector<double> mean(d, 0.0);
  for (const auto& v : vectors)
    for (size_t i = 0; i < d; ++i) mean[i] += v[i];
  for (auto& m : mean) m /= double(n);

  std::vector<std::vector<double>> centered(n, std::vector<double>(d));
  for (size_t r = 0; r < n; ++r)
    for (size_t i = 0; i < d; ++i) centered[r][i] = vectors[r][i] - mean[i];

  std::vector<double> cov(d * d, 0.0);
  for (size_t r = 0; r < n; ++r)
    for (size_t i = 0; i < d; ++i)
      for (size_t j = 0; j < d; ++j)
        cov[i * d + j] += centered[r][i] * centered[r][j];
  const double denom = double(n - 1);
  for (auto& c : cov) c /= denom;

  double trace = 0;
  for (size_t i = 0; i < d; ++i) trace += cov[i * d + i];
  if (trace <= 0)
    throw DataError("pca_2d: zero-variance data");

  EigenPair e1 = dominant_eigenpair(cov, d, nullptr);
  // Deflate and pull the second component.
  std::vector<double> cov2 = cov;
  for (size_t i = 0; i < d; ++i)
    for (size_t j = 0; j < d; ++j)
      cov2[i * d + j] -= e1.value * e1.vec[i] * e1.vec[j];
  EigenPair e2 = dominant_eigenpair(cov2, d, &e1.vec);

  fix_sign(e1.vec);
  fix_sign(e2.vec);

  Pca2d out;
  out.component1 = e1.vec;
  out.component2 = e2.vec;
  out.explained1 = e1.value / trace;
  out.explained2 = e2.value / trace;
  out.projections.resize(n);
  for (size_t r = 0; r < n; ++r) {
    double x = 0, y = 0;
    for (size_t i = 0; i < d; ++i) {
      x += centered[r][i] * e1.vec[i];
      y += centered[r][i] * e2.vec[i];
    }
    out.projections[r] = {x, y};
  }
  return out;
}

}  // namespace grunlab
