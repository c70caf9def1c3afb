#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "grunlab/kernels.hpp"
#include "grunlab/tensor.hpp"

// Differentiable tensor ops. Each op evaluates eagerly and, when gradient
// mode is on and an input requires grad, records a closure that pulls the
// output gradient back onto its parents.
namespace grunlab::ops {

template <class S>
using Node = TensorNode<S>;

namespace detail {

template <class S>
Tensor<S> make_result(const char* op, std::vector<size_t> shape,
                      std::vector<S> value,
                      const std::vector<Tensor<S>>& parents,
                      std::function<void(Node<S>&)> bw) {
  auto node = std::make_shared<Node<S>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool rg = false;
  if (grad_mode()) {
    for (const auto& p : parents) rg = rg || p.requires_grad();
  }
  if (rg) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (const auto& p : parents) node->parents.push_back(p.node());
    node->backward_fn = std::move(bw);
  }
  return Tensor<S>(std::move(node));
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

template <class S>
std::string shapes2(const Tensor<S>& a, const Tensor<S>& b) {
  return shape_str(a.shape()) + " and " + shape_str(b.shape());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// arithmetic

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require(a.shape() == b.shape(),
                  "add: shape mismatch " + detail::shapes2(a, b));
  std::vector<S> out(a.numel());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return detail::make_result<S>(
      "add", a.shape(), std::move(out), {a, b}, [](Node<S>& o) {
        for (int p = 0; p < 2; ++p) {
          auto& par = *o.parents[p];
          if (!par.requires_grad) continue;
          par.ensure_grad();
          for (size_t i = 0; i < o.grad.size(); ++i) par.grad[i] += o.grad[i];
        }
      });
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require(a.shape() == b.shape(),
                  "sub: shape mismatch " + detail::shapes2(a, b));
  std::vector<S> out(a.numel());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  return detail::make_result<S>(
      "sub", a.shape(), std::move(out), {a, b}, [](Node<S>& o) {
        auto& pa = *o.parents[0];
        auto& pb = *o.parents[1];
        if (pa.requires_grad) {
          pa.ensure_grad();
          for (size_t i = 0; i < o.grad.size(); ++i) pa.grad[i] += o.grad[i];
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          for (size_t i = 0; i < o.grad.size(); ++i) pb.grad[i] -= o.grad[i];
        }
      });
}

// Elementwise (Hadamard) product.
template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require(a.shape() == b.shape(),
                  "mul: shape mismatch " + detail::shapes2(a, b));
  std::vector<S> out(a.numel());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return detail::make_result<S>(
      "mul", a.shape(), std::move(out), {a, b}, [](Node<S>& o) {
        auto& pa = *o.parents[0];
        auto& pb = *o.parents[1];
        if (pa.requires_grad) {
          pa.ensure_grad();
          for (size_t i = 0; i < o.grad.size(); ++i)
            pa.grad[i] += o.grad[i] * pb.value[i];
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          for (size_t i = 0; i < o.grad.size(); ++i)
            pb.grad[i] += o.grad[i] * pa.value[i];
        }
      });
}

// Multiply by a compile-time constant.
template <class S>
Tensor<S> scale(const Tensor<S>& x, S c) {
  std::vector<S> out(x.numel());
  for (size_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] * c;
  return detail::make_result<S>(
      "scale", x.shape(), std::move(out), {x}, [c](Node<S>& o) {
        auto& px = *o.parents[0];
        if (!px.requires_grad) return;
        px.ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i)
          px.grad[i] += o.grad[i] * c;
      });
}

template <class S>
Tensor<S> neg(const Tensor<S>& x) {
  return scale(x, S(-1));
}

// Broadcast-multiply a scalar node across a tensor; gradient flows to both.
template <class S>
Tensor<S> smul(const Tensor<S>& s, const Tensor<S>& x) {
  detail::require(s.numel() == 1, "smul: first argument must be scalar, got " +
                                      shape_str(s.shape()));
  const S sv = s.value()[0];
  std::vector<S> out(x.numel());
  for (size_t i = 0; i < out.size(); ++i) out[i] = sv * x.value()[i];
  return detail::make_result<S>(
      "smul", x.shape(), std::move(out), {s, x}, [sv](Node<S>& o) {
        auto& ps = *o.parents[0];
        auto& px = *o.parents[1];
        if (ps.requires_grad) {
          ps.ensure_grad();
          S acc = S(0);
          for (size_t i = 0; i < o.grad.size(); ++i)
            acc += o.grad[i] * px.value[i];
          ps.grad[0] += acc;
        }
        if (px.requires_grad) {
          px.ensure_grad();
          for (size_t i = 0; i < o.grad.size(); ++i)
            px.grad[i] += o.grad[i] * sv;
        }
      });
}

// X[m,n] + row vector b[n], broadcast over rows.
template <class S>
Tensor<S> add_rowvec(const Tensor<S>& x, const Tensor<S>& b) {
  detail::require(x.rank() == 2, "add_rowvec: x must be 2-D, got " +
                                     shape_str(x.shape()));
  const size_t m = x.dim(0), n = x.dim(1);
  detail::require(b.numel() == n,
                  "add_rowvec: bias length " + std::to_string(b.numel()) +
                      " does not match row width " + std::to_string(n));
  std::vector<S> out(x.numel());
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j)
      out[i * n + j] = x.value()[i * n + j] + b.value()[j];
  return detail::make_result<S>(
      "add_rowvec", x.shape(), std::move(out), {x, b}, [m, n](Node<S>& o) {
        auto& px = *o.parents[0];
        auto& pb = *o.parents[1];
        if (px.requires_grad) {
          px.ensure_grad();
          for (size_t i = 0; i < o.grad.size(); ++i) px.grad[i] += o.grad[i];
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < n; ++j) pb.grad[j] += o.grad[i * n + j];
        }
      });
}

// ---------------------------------------------------------------------------
// linear algebra

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
                  "matmul: incompatible shapes " + detail::shapes2(a, b));
  const size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<S> out(m * n);
  kernels::matmul(a.value().data(), b.value().data(), out.data(), m, k, n);
  return detail::make_result<S>(
      "matmul", {m, n}, std::move(out), {a, b}, [m, k, n](Node<S>& o) {
        auto& pa = *o.parents[0];
        auto& pb = *o.parents[1];
        if (pa.requires_grad) {
          pa.ensure_grad();
          // dA[m,k] += G[m,n] * B^T
          kernels::matmul_nt(o.grad.data(), pb.value.data(), pa.grad.data(), m,
                             n, k, true);
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          // dB[k,n] += A^T * G[m,n]
          kernels::matmul_tn(pa.value.data(), o.grad.data(), pb.grad.data(), k,
                             m, n, true);
        }
      });
}

template <class S>
Tensor<S> transpose(const Tensor<S>& x) {
  detail::require(x.rank() == 2,
                  "transpose: x must be 2-D, got " + shape_str(x.shape()));
  const size_t m = x.dim(0), n = x.dim(1);
  std::vector<S> out(m * n);
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) out[j * m + i] = x.value()[i * n + j];
  return detail::make_result<S>(
      "transpose", {n, m}, std::move(out), {x}, [m, n](Node<S>& o) {
        auto& px = *o.parents[0];
        if (!px.requires_grad) return;
        px.ensure_grad();
        for (size_t i = 0; i < m; ++i)
          for (size_t j = 0; j < n; ++j)
            px.grad[i * n + j] += o.grad[j * m + i];
      });
}

template <class S>
Tensor<S> reshape(const Tensor<S>& x, std::vector<size_t> shape) {
  size_t n = 1;
  for (size_t d : shape) n *= d;
  detail::require(n == x.numel(), "reshape: cannot view " +
                                      shape_str(x.shape()) + " as " +
                                      shape_str(shape));
  return detail::make_result<S>(
      "reshape", std::move(shape), x.value(), {x}, [](Node<S>& o) {
        auto& px = *o.parents[0];
        if (!px.requires_grad) return;
        px.ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) px.grad[i] += o.grad[i];
      });
}

// ---------------------------------------------------------------------------
// elementwise nonlinearities

template <class S>
Tensor<S> exp(const Tensor<S>& x) {
  std::vector<S> out(x.numel());
  for (size_t i = 0; i < out.size(); ++i) {
    out[i] = std::exp(x.value()[i]);
    if (!std::isfinite(static_cast<double>(out[i])))
      throw std::domain_error("exp: overflow at input " +
                              std::to_string(static_cast<double>(x.value()[i])));
  }
  return detail::make_result<S>(
      "exp", x.shape(), std::move(out), {x}, [](Node<S>& o) {
        auto& px = *o.parents[0];
        if (!px.requires_grad) return;
        px.ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i)
          px.grad[i] += o.grad[i] * o.value[i];
      });
}

template <class S>
Tensor<S> log(const Tensor<S>& x) {
  std::vector<S> out(x.numel());
  for (size_t i = 0; i < out.size(); ++i) {
    if (!(x.value()[i] > S(0)))
      throw std::domain_error(
          "log: non-positive value " +
          std::to_string(static_cast<double>(x.value()[i])));
    out[i] = std::log(x.value()[i]);
  }
  return detail::make_result<S>(
      "log", x.shape(), std::move(out), {x}, [](Node<S>& o) {
        auto& px = *o.parents[0];
        if (!px.requires_grad) return;
        px.ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i)
          px.grad[i] += o.grad[i] / px.value[i];
      });
}

template <class S>
Tensor<S> tanh(const Tensor<S>& x) {
  std::vector<S> out(x.numel());
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x.value()[i]);
  return detail::make_result<S>(
      "tanh", x.shape(), std::move(out), {x}, [](Node<S>& o) {
        auto& px = *o.parents[0];
        if (!px.requires_grad) return;
        px.ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i)
          px.grad[i] += o.grad[i] * (S(1) - o.value[i] * o.value[i]);
      });
}

template <class S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  std::vector<S> out(x.numel());
  for (size_t i = 0; i < out.size(); ++i) {
    const S v = x.value()[i];
    out[i] = v >= S(0) ? S(1) / (S(1) + std::exp(-v))
                       : std::exp(v) / (S(1) + std::exp(v));
  }
  return detail::make_result<S>(
      "sigmoid", x.shape(), std::move(out), {x}, [](Node<S>& o) {
        auto& px = *o.parents[0];
        if (!px.requires_grad) return;
        px.ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i)
          px.grad[i] += o.grad[i] * o.value[i] * (S(1) - o.value[i]);
      });
}

// Exact GELU, 0.5 x (1 + erf(x / sqrt(2))).
template <class S>
Tensor<S> gelu(const Tensor<S>& x) {
  std::vector<S> out(x.numel());
  for (size_t i = 0; i < out.size(); ++i) {
    const S v = x.value()[i];
    out[i] = S(0.5) * v * (S(1) + std::erf(v * S(0.7071067811865476)));
  }
  return detail::make_result<S>(
      "gelu", x.shape(), std::move(out), {x}, [](Node<S>& o) {
        auto& px = *o.parents[0];
        if (!px.requires_grad) return;
        px.ensure_grad();
        constexpr S inv_sqrt2 = S(0.7071067811865476);
        constexpr S inv_sqrt2pi = S(0.3989422804014327);
        for (size_t i = 0; i < o.grad.size(); ++i) {
          const S v = px.value[i];
          const S cdf = S(0.5) * (S(1) + std::erf(v * inv_sqrt2));
          const S pdf = inv_sqrt2pi * std::exp(S(-0.5) * v * v);
          px.grad[i] += o.grad[i] * (cdf + v * pdf);
        }
      });
}

// Numerically stable log(1 + e^x).
template <class S>
Tensor<S> softplus(const Tensor<S>& x) {
  std::vector<S> out(x.numel());
  for (size_t i = 0; i < out.size(); ++i) {
    const S v = x.value()[i];
    out[i] = std::max(v, S(0)) + std::log1p(std::exp(-std::abs(v)));
  }
  return detail::make_result<S>(
      "softplus", x.shape(), std::move(out), {x}, [](Node<S>& o) {
        auto& px = *o.parents[0];
        if (!px.requires_grad) return;
        px.ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) {
          const S v = px.value[i];
          const S sig = v >= S(0) ? S(1) / (S(1) + std::exp(-v))
                                  : std::exp(v) / (S(1) + std::exp(v));
          px.grad[i] += o.grad[i] * sig;
        }
      });
}

template <class S>
Tensor<S> clamp(const Tensor<S>& x, S lo, S hi) {
  detail::require(lo < hi, "clamp: lo must be below hi");
  std::vector<S> out(x.numel());
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = std::min(std::max(x.value()[i], lo), hi);
  return detail::make_result<S>(
      "clamp", x.shape(), std::move(out), {x}, [lo, hi](Node<S>& o) {
        auto& px = *o.parents[0];
        if (!px.requires_grad) return;
        px.ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i)
          if (px.value[i] >= lo && px.value[i] <= hi)
            px.grad[i] += o.grad[i];
      });
}

// ---------------------------------------------------------------------------
// reductions

template <class S>
Tensor<S> sum(const Tensor<S>& x) {
  S acc = S(0);
  for (S v : x.value()) acc += v;
  return detail::make_result<S>(
      "sum", {1}, {acc}, {x}, [](Node<S>& o) {
        auto& px = *o.parents[0];
        if (!px.requires_grad) return;
        px.ensure_grad();
        for (size_t i = 0; i < px.grad.size(); ++i) px.grad[i] += o.grad[0];
      });
}

template <class S>
Tensor<S> mean(const Tensor<S>& x) {
  const S inv = S(1) / static_cast<S>(x.numel());
  S acc = S(0);
  for (S v : x.value()) acc += v;
  acc *= inv;
  return detail::make_result<S>(
      "mean", {1}, {acc}, {x}, [inv](Node<S>& o) {
        auto& px = *o.parents[0];
        if (!px.requires_grad) return;
        px.ensure_grad();
        for (size_t i = 0; i < px.grad.size(); ++i)
          px.grad[i] += o.grad[0] * inv;
      });
}

// Fold a list of same-shape tensors into their elementwise sum.
template <class S>
Tensor<S> sum_list(const std::vector<Tensor<S>>& xs) {
  detail::require(!xs.empty(), "sum_list: empty list");
  Tensor<S> acc = xs[0];
  for (size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
  return acc;
}

template <class S>
Tensor<S> mean_list(const std::vector<Tensor<S>>& xs) {
  return scale(sum_list(xs), S(1) / static_cast<S>(xs.size()));
}

// ---------------------------------------------------------------------------
// shape surgery

template <class S>
Tensor<S> slice(const Tensor<S>& x, size_t axis, size_t begin, size_t end) {
  detail::require(x.rank() >= 1 && x.rank() <= 2 && axis < x.rank(),
                  "slice: unsupported rank/axis for " + shape_str(x.shape()));
  detail::require(begin < end && end <= x.dim(axis),
                  "slice: range [" + std::to_string(begin) + "," +
                      std::to_string(end) + ") out of bounds for " +
                      shape_str(x.shape()));
  const size_t rows = x.rank() == 2 ? x.dim(0) : 1;
  const size_t cols = x.rank() == 2 ? x.dim(1) : x.dim(0);
  size_t r0 = 0, r1 = rows, c0 = 0, c1 = cols;
  if (axis == 0 && x.rank() == 2) {
    r0 = begin, r1 = end;
  } else {
    c0 = begin, c1 = end;
  }
  std::vector<size_t> oshape =
      x.rank() == 2 ? std::vector<size_t>{r1 - r0, c1 - c0}
                    : std::vector<size_t>{c1 - c0};
  std::vector<S> out;
  out.reserve((r1 - r0) * (c1 - c0));
  for (size_t i = r0; i < r1; ++i)
    for (size_t j = c0; j < c1; ++j) out.push_back(x.value()[i * cols + j]);
  return detail::make_result<S>(
      "slice", std::move(oshape), std::move(out), {x},
      [r0, r1, c0, c1, cols](Node<S>& o) {
        auto& px = *o.parents[0];
        if (!px.requires_grad) return;
        px.ensure_grad();
        size_t idx = 0;
        for (size_t i = r0; i < r1; ++i)
          for (size_t j = c0; j < c1; ++j)
            px.grad[i * cols + j] += o.grad[idx++];
      });
}

template <class S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, size_t axis) {
  detail::require(!parts.empty(), "concat: empty part list");
  const size_t rank = parts[0].rank();
  detail::require(rank >= 1 && rank <= 2 && axis < rank,
                  "concat: unsupported rank/axis");
  for (const auto& p : parts)
    detail::require(p.rank() == rank, "concat: mixed ranks");

  if (rank == 1 || axis == 0) {
    const size_t cols = rank == 2 ? parts[0].dim(1) : 1;
    size_t total_rows = 0;
    for (const auto& p : parts) {
      if (rank == 2)
        detail::require(p.dim(1) == cols, "concat: column mismatch " +
                                              shape_str(p.shape()));
      total_rows += p.dim(0);
    }
    std::vector<S> out;
    out.reserve(total_rows * cols);
    for (const auto& p : parts)
      out.insert(out.end(), p.value().begin(), p.value().end());
    std::vector<size_t> oshape = rank == 2
                                     ? std::vector<size_t>{total_rows, cols}
                                     : std::vector<size_t>{total_rows};
    return detail::make_result<S>(
        "concat", std::move(oshape), std::move(out), parts, [](Node<S>& o) {
          size_t offset = 0;
          for (auto& pp : o.parents) {
            if (pp->requires_grad) {
              pp->ensure_grad();
              for (size_t i = 0; i < pp->grad.size(); ++i)
                pp->grad[i] += o.grad[offset + i];
            }
            offset += pp->numel();
          }
        });
  }

  // axis == 1, 2-D column concat
  const size_t rows = parts[0].dim(0);
  size_t total_cols = 0;
  std::vector<size_t> widths;
  for (const auto& p : parts) {
    detail::require(p.dim(0) == rows,
                    "concat: row mismatch " + shape_str(p.shape()));
    widths.push_back(p.dim(1));
    total_cols += p.dim(1);
  }
  std::vector<S> out(rows * total_cols);
  size_t col0 = 0;
  for (size_t pi = 0; pi < parts.size(); ++pi) {
    const auto& v = parts[pi].value();
    const size_t w = widths[pi];
    for (size_t i = 0; i < rows; ++i)
      for (size_t j = 0; j < w; ++j)
        out[i * total_cols + col0 + j] = v[i * w + j];
    col0 += w;
  }
  return detail::make_result<S>(
      "concat", {rows, total_cols}, std::move(out), parts,
      [rows, total_cols, widths](Node<S>& o) {
        size_t col0 = 0;
        for (size_t pi = 0; pi < o.parents.size(); ++pi) {
          auto& pp = *o.parents[pi];
          const size_t w = widths[pi];
          if (pp.requires_grad) {
            pp.ensure_grad();
            for (size_t i = 0; i < rows; ++i)
              for (size_t j = 0; j < w; ++j)
                pp.grad[i * w + j] += o.grad[i * total_cols + col0 + j];
          }
          col0 += w;
        }
      });
}

// Copy of X with row i replaced by v ([1,n] or [n]).
template <class S>
Tensor<S> replace_row(const Tensor<S>& x, size_t row, const Tensor<S>& v) {
  detail::require(x.rank() == 2,
                  "replace_row: x must be 2-D, got " + shape_str(x.shape()));
  const size_t m = x.dim(0), n = x.dim(1);
  detail::require(row < m, "replace_row: row " + std::to_string(row) +
                               " out of bounds for " + shape_str(x.shape()));
  detail::require(v.numel() == n,
                  "replace_row: value length " + std::to_string(v.numel()) +
                      " does not match row width " + std::to_string(n));
  std::vector<S> out = x.value();
  for (size_t j = 0; j < n; ++j) out[row * n + j] = v.value()[j];
  return detail::make_result<S>(
      "replace_row", x.shape(), std::move(out), {x, v}, [row, n](Node<S>& o) {
        auto& px = *o.parents[0];
        auto& pv = *o.parents[1];
        if (px.requires_grad) {
          px.ensure_grad();
          for (size_t i = 0; i < o.grad.size(); ++i)
            if (i / n != row) px.grad[i] += o.grad[i];
        }
        if (pv.requires_grad) {
          pv.ensure_grad();
          for (size_t j = 0; j < n; ++j) pv.grad[j] += o.grad[row * n + j];
        }
      });
}

// ---------------------------------------------------------------------------
// rows ops used by the transformer

// Softmax over the last axis. -inf inputs produce exact zeros.
template <class S>
Tensor<S> softmax(const Tensor<S>& x) {
  detail::require(x.rank() >= 1 && x.rank() <= 2,
                  "softmax: unsupported rank for " + shape_str(x.shape()));
  const size_t cols = x.dim(x.rank() - 1);
  const size_t rows = x.numel() / cols;
  std::vector<S> out(x.numel());
  kernels::softmax_rows(x.value().data(), out.data(), rows, cols);
  return detail::make_result<S>(
      "softmax", x.shape(), std::move(out), {x}, [rows, cols](Node<S>& o) {
        auto& px = *o.parents[0];
        if (!px.requires_grad) return;
        px.ensure_grad();
        for (size_t i = 0; i < rows; ++i) {
          const S* p = o.value.data() + i * cols;
          const S* g = o.grad.data() + i * cols;
          S dot = S(0);
          for (size_t j = 0; j < cols; ++j) dot += p[j] * g[j];
          S* gx = px.grad.data() + i * cols;
          for (size_t j = 0; j < cols; ++j) gx[j] += p[j] * (g[j] - dot);
        }
      });
}

// Layer normalization over the last axis with per-feature gain and bias.
template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain,
                     const Tensor<S>& bias, S eps = S(1e-5)) {
  detail::require(x.rank() >= 1 && x.rank() <= 2,
                  "layer_norm: unsupported rank for " + shape_str(x.shape()));
  const size_t cols = x.dim(x.rank() - 1);
  const size_t rows = x.numel() / cols;
  detail::require(gain.numel() == cols && bias.numel() == cols,
                  "layer_norm: gain/bias length must be " +
                      std::to_string(cols));
  std::vector<S> out(x.numel());
  kernels::layernorm_rows(x.value().data(), gain.value().data(),
                          bias.value().data(), out.data(), rows, cols, eps);
  return detail::make_result<S>(
      "layer_norm", x.shape(), std::move(out), {x, gain, bias},
      [rows, cols, eps](Node<S>& o) {
        auto& px = *o.parents[0];
        auto& pg = *o.parents[1];
        auto& pb = *o.parents[2];
        if (px.requires_grad) px.ensure_grad();
        if (pg.requires_grad) pg.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        const S inv_cols = S(1) / static_cast<S>(cols);
        for (size_t i = 0; i < rows; ++i) {
          const S* xr = px.value.data() + i * cols;
          const S* g = o.grad.data() + i * cols;
          S mean = S(0);
          for (size_t j = 0; j < cols; ++j) mean += xr[j];
          mean *= inv_cols;
          S var = S(0);
          for (size_t j = 0; j < cols; ++j) {
            const S d = xr[j] - mean;
            var += d * d;
          }
          var *= inv_cols;
          const S inv_std = S(1) / std::sqrt(var + eps);
          // xhat_j = (x_j - mean) * inv_std
          S gdot = S(0), gxdot = S(0);
          for (size_t j = 0; j < cols; ++j) {
            const S xhat = (xr[j] - mean) * inv_std;
            const S gh = g[j] * pg.value[j];  // d y / d xhat
            gdot += gh;
            gxdot += gh * xhat;
            if (pg.requires_grad) pg.grad[j] += g[j] * xhat;
            if (pb.requires_grad) pb.grad[j] += g[j];
          }
          if (px.requires_grad) {
            gdot *= inv_cols;
            gxdot *= inv_cols;
            S* gx = px.grad.data() + i * cols;
            for (size_t j = 0; j < cols; ++j) {
              const S xhat = (xr[j] - mean) * inv_std;
              gx[j] += inv_std * (g[j] * pg.value[j] - gdot - xhat * gxdot);
            }
          }
        }
      });
}

// Gather rows of an embedding table; backward scatter-adds.
template <class S>
Tensor<S> embedding(const Tensor<S>& table, const std::vector<int>& ids) {
  detail::require(table.rank() == 2, "embedding: table must be 2-D, got " +
                                         shape_str(table.shape()));
  detail::require(!ids.empty(), "embedding: empty id sequence");
  const size_t v = table.dim(0), d = table.dim(1);
  for (int id : ids)
    detail::require(id >= 0 && static_cast<size_t>(id) < v,
                    "embedding: id " + std::to_string(id) +
                        " out of range for table " + shape_str(table.shape()));
  std::vector<S> out(ids.size() * d);
  for (size_t t = 0; t < ids.size(); ++t)
    std::copy_n(table.value().data() + static_cast<size_t>(ids[t]) * d, d,
                out.data() + t * d);
  return detail::make_result<S>(
      "embedding", {ids.size(), d}, std::move(out), {table},
      [ids, d](Node<S>& o) {
        auto& pt = *o.parents[0];
        if (!pt.requires_grad) return;
        pt.ensure_grad();
        for (size_t t = 0; t < ids.size(); ++t) {
          S* dst = pt.grad.data() + static_cast<size_t>(ids[t]) * d;
          const S* src = o.grad.data() + t * d;
          for (size_t j = 0; j < d; ++j) dst[j] += src[j];
        }
      });
}

// Mask strictly-upper entries of a square score matrix to -inf.
template <class S>
Tensor<S> causal_mask(const Tensor<S>& x) {
  detail::require(x.rank() == 2 && x.dim(0) == x.dim(1),
                  "causal_mask: x must be square, got " +
                      shape_str(x.shape()));
  const size_t t = x.dim(0);
  std::vector<S> out = x.value();
  for (size_t i = 0; i < t; ++i)
    for (size_t j = i + 1; j < t; ++j)
      out[i * t + j] = -std::numeric_limits<S>::infinity();
  return detail::make_result<S>(
      "causal_mask", x.shape(), std::move(out), {x}, [t](Node<S>& o) {
        auto& px = *o.parents[0];
        if (!px.requires_grad) return;
        px.ensure_grad();
        for (size_t i = 0; i < t; ++i)
          for (size_t j = 0; j <= i; ++j)
            px.grad[i * t + j] += o.grad[i * t + j];
      });
}

// Summary bottleneck on a square score matrix: rows past the summary
// position lose sight of everything before it, so generation can reach the
// prompt only through the summary token's hidden state.
template <class S>
Tensor<S> summary_mask(const Tensor<S>& x, size_t summary_pos) {
  detail::require(x.rank() == 2 && x.dim(0) == x.dim(1),
                  "summary_mask: x must be square, got " +
                      shape_str(x.shape()));
  const size_t t = x.dim(0);
  detail::require(summary_pos < t, "summary_mask: position " +
                                       std::to_string(summary_pos) +
                                       " outside " + shape_str(x.shape()));
  std::vector<S> out = x.value();
  for (size_t i = summary_pos + 1; i < t; ++i)
    for (size_t j = 0; j < summary_pos; ++j)
      out[i * t + j] = -std::numeric_limits<S>::infinity();
  return detail::make_result<S>(
      "summary_mask", x.shape(), std::move(out), {x},
      [t, summary_pos](Node<S>& o) {
        auto& px = *o.parents[0];
        if (!px.requires_grad) return;
        px.ensure_grad();
        for (size_t i = 0; i < t; ++i) {
          const size_t j0 = i > summary_pos ? summary_pos : 0;
          for (size_t j = j0; j < t; ++j)
            px.grad[i * t + j] += o.grad[i * t + j];
        }
      });
}

enum class Reduction { kMean, kSum };

// Token-level cross entropy from logits. Rows whose target id is negative
// are excluded from the loss (prompt masking).
template <class S>
Tensor<S> cross_entropy_logits(const Tensor<S>& logits,
                               const std::vector<int>& targets,
                               Reduction reduction = Reduction::kMean) {
  detail::require(logits.rank() == 2, "cross_entropy: logits must be 2-D, got " +
                                          shape_str(logits.shape()));
  const size_t rows = logits.dim(0), cols = logits.dim(1);
  detail::require(targets.size() == rows,
                  "cross_entropy: target count " +
                      std::to_string(targets.size()) +
                      " does not match logit rows " + std::to_string(rows));
  size_t selected = 0;
  for (int t : targets) {
    detail::require(t < static_cast<int>(cols),
                    "cross_entropy: target id " + std::to_string(t) +
                        " out of range for " + std::to_string(cols) +
                        " classes");
    if (t >= 0) ++selected;
  }
  detail::require(selected > 0, "cross_entropy: no unmasked target rows");

  // Cache softmax probabilities of selected rows for the backward pass.
  std::vector<S> probs(rows * cols, S(0));
  S total = S(0);
  for (size_t i = 0; i < rows; ++i) {
    if (targets[i] < 0) continue;
    const S* z = logits.value().data() + i * cols;
    S* p = probs.data() + i * cols;
    kernels::serial::softmax_rows(z, p, 1, cols);
    S mx = -std::numeric_limits<S>::infinity();
    for (size_t j = 0; j < cols; ++j) mx = std::max(mx, z[j]);
    S lse = S(0);
    for (size_t j = 0; j < cols; ++j) lse += std::exp(z[j] - mx);
    lse = std::log(lse) + mx;
    total += lse - z[targets[i]];
  }
  const S norm =
      reduction == Reduction::kMean ? S(1) / static_cast<S>(selected) : S(1);
  total *= norm;
  return detail::make_result<S>(
      "cross_entropy", {1}, {total}, {logits},
      [targets, rows, cols, norm, probs](Node<S>& o) {
        auto& pl = *o.parents[0];
        if (!pl.requires_grad) return;
        pl.ensure_grad();
        const S w = o.grad[0] * norm;
        for (size_t i = 0; i < rows; ++i) {
          if (targets[i] < 0) continue;
          const S* p = probs.data() + i * cols;
          S* g = pl.grad.data() + i * cols;
          for (size_t j = 0; j < cols; ++j) g[j] += w * p[j];
          g[targets[i]] -= w;
        }
      });
}

}  // namespace grunlab::ops
