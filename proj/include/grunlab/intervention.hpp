#pragma once

#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "grunlab/common.hpp"
#include "grunlab/ops.hpp"
#include "grunlab/tensor.hpp"

namespace grunlab {

// Low-rank representation edit. Applied to a hidden state h (a [1,d] row),
// the update is h + R^T(Wh + b - Rh): Wh + b is the representation to move
// toward, and the shift happens inside the rank-r subspace spanned by R.
template <class S>
struct ReftParams {
  Tensor<S> R;  // [r, d]
  Tensor<S> W;  // [r, d]
  Tensor<S> b;  // [1, r]

  size_t rank() const { return R.dim(0); }
  size_t width() const { return R.dim(1); }

  // Identity start: R with orthonormal rows (Gram-Schmidt over Gaussian
  // draws), W a copy of R, b zero. The edit is exactly zero until trained.
  static ReftParams identity_init(size_t d, size_t r, Rng& rng) {
    if (r < 1) throw std::invalid_argument("reft: rank must be at least 1");
    if (r > d)
      throw std::invalid_argument("reft: rank " + std::to_string(r) +
                                  " exceeds width " + std::to_string(d));
    std::vector<S> rows(r * d);
    for (size_t i = 0; i < r; ++i) {
      for (size_t attempt = 0;; ++attempt) {
        for (size_t j = 0; j < d; ++j)
          rows[i * d + j] = static_cast<S>(rng.gaussian());
        for (size_t p = 0; p < i; ++p) {
          S dot = S(0);
          for (size_t j = 0; j < d; ++j)
            dot += rows[i * d + j] * rows[p * d + j];
          for (size_t j = 0; j < d; ++j)
            rows[i * d + j] -= dot * rows[p * d + j];
        }
        S norm = S(0);
        for (size_t j = 0; j < d; ++j)
          norm += rows[i * d + j] * rows[i * d + j];
        norm = std::sqrt(norm);
        if (norm > S(1e-6)) {
          for (size_t j = 0; j < d; ++j) rows[i * d + j] /= norm;
          break;
        }
        if (attempt > 8)
          throw std::runtime_error("reft: failed to orthonormalize rows");
      }
    }
    ReftParams p;
    p.R = Tensor<S>::from_data({r, d}, rows, true);
    p.W = Tensor<S>::from_data({r, d}, rows, true);
    p.b = Tensor<S>::zeros({1, r}, true);
    return p;
  }

  std::vector<Tensor<S>> parameters() const { return {R, W, b}; }
  size_t param_count() const { return R.numel() + W.numel() + b.numel(); }
};

namespace detail {
template <class S>
void check_row(const Tensor<S>& h, size_t d, const char* op) {
  if (!(h.rank() == 2 && h.dim(0) == 1 && h.dim(1) == d))
    throw std::invalid_argument(std::string(op) + ": expected [1," +
                                std::to_string(d) + "] state, got " +
                                shape_str(h.shape()));
}
}  // namespace detail

// phi(h) = R^T (W h + b - R h), as a [1,d] row expression.
template <class S>
Tensor<S> reft_delta(const ReftParams<S>& p, const Tensor<S>& h) {
  detail::check_row(h, p.width(), "reft");
  Tensor<S> wh = ops::add(ops::matmul(h, ops::transpose(p.W)), p.b);
  Tensor<S> rh = ops::matmul(h, ops::transpose(p.R));
  return ops::matmul(ops::sub(wh, rh), p.R);
}

template <class S>
Tensor<S> reft_apply(const ReftParams<S>& p, const Tensor<S>& h) {
  return ops::add(h, reft_delta(p, h));
}

enum class GateKind { kLinear, kMlp };

// Soft gate: a single-output regressor (linear or 3-layer tanh MLP) with a
// sigmoid on the output, so its value lies in (0,1).
template <class S>
struct GateParams {
  GateKind kind = GateKind::kLinear;
  Tensor<S> w, b;                      // linear: [d,1], [1,1]
  Tensor<S> w1, b1, w2, b2, w3, b3;    // mlp: d->h->h->1

  static GateParams linear_init(size_t d) {
    GateParams g;
    g.kind = GateKind::kLinear;
    g.w = Tensor<S>::zeros({d, 1}, true);
    g.b = Tensor<S>::zeros({1, 1}, true);
    return g;
  }

  // Hidden layers get small random weights so the output layer has a
  // nonzero gradient path; the zeroed output layer keeps g exactly 0.5.
  static GateParams mlp_init(size_t d, size_t hidden, Rng& rng) {
    GateParams g;
    g.kind = GateKind::kMlp;
    g.w1 = Tensor<S>::randn({d, hidden}, rng, S(0.02), true);
    g.b1 = Tensor<S>::zeros({1, hidden}, true);
    g.w2 = Tensor<S>::randn({hidden, hidden}, rng, S(0.02), true);
    g.b2 = Tensor<S>::zeros({1, hidden}, true);
    g.w3 = Tensor<S>::zeros({hidden, 1}, true);
    g.b3 = Tensor<S>::zeros({1, 1}, true);
    return g;
  }

  size_t width() const {
    return kind == GateKind::kLinear ? w.dim(0) : w1.dim(0);
  }

  std::vector<Tensor<S>> parameters() const {
    if (kind == GateKind::kLinear) return {w, b};
    return {w1, b1, w2, b2, w3, b3};
  }

  size_t param_count() const {
    size_t n = 0;
    for (const auto& p : parameters()) n += p.numel();
    return n;
  }
};

template <class S>
Tensor<S> gate_eval(const GateParams<S>& g, const Tensor<S>& h) {
  detail::check_row(h, g.width(), "gate");
  if (g.kind == GateKind::kLinear)
    return ops::sigmoid(ops::add(ops::matmul(h, g.w), g.b));
  Tensor<S> t1 = ops::tanh(ops::add_rowvec(ops::matmul(h, g.w1), g.b1));
  Tensor<S> t2 = ops::tanh(ops::add_rowvec(ops::matmul(t1, g.w2), g.b2));
  return ops::sigmoid(ops::add(ops::matmul(t2, g.w3), g.b3));
}

// One gated intervention at one layer.
template <class S>
struct GrunModule {
  ReftParams<S> reft;
  GateParams<S> gate;
  size_t layer = 0;  // 1-based transformer layer

  std::vector<Tensor<S>> parameters() const {
    std::vector<Tensor<S>> ps = reft.parameters();
    for (const auto& g : gate.parameters()) ps.push_back(g);
    return ps;
  }

  size_t param_count() const {
    return reft.param_count() + gate.param_count();
  }
};

// h + g(h) * phi(h)
template <class S>
Tensor<S> grun_apply(const GrunModule<S>& m, const Tensor<S>& h) {
  return ops::add(h, ops::smul(gate_eval(m.gate, h), reft_delta(m.reft, h)));
}

enum class GateOverride {
  kNone,
  kFullyOpen,  // ReFT-only ablation: gate treated as constant 1
};

template <class S>
struct GateReading {
  size_t request = 0;
  size_t layer = 0;
  Tensor<S> value;  // [1,1] graph node in (0,1)
};

// Ordered unlearning requests sharing one layer set, combined as
// h + c * sum_j g_j(h) phi_j(h). Earlier requests stay frozen; only the
// newest request trains.
template <class S>
struct GrunStack {
  struct Request {
    std::vector<GrunModule<S>> modules;  // ascending layer order
  };

  std::vector<Request> requests;
  S coeff = S(1);

  bool empty() const { return requests.empty(); }
  size_t size() const { return requests.size(); }

  static GrunStack single(std::vector<GrunModule<S>> modules) {
    GrunStack s;
    s.requests.push_back(Request{std::move(modules)});
    return s;
  }

  // Fresh identity-initialized request over the given layers.
  static std::vector<GrunModule<S>> make_request(
      const std::vector<size_t>& layers, size_t d, size_t rank, GateKind kind,
      size_t gate_hidden, Rng& rng) {
    std::vector<GrunModule<S>> mods;
    for (size_t l : layers) {
      GrunModule<S> m;
      m.layer = l;
      m.reft = ReftParams<S>::identity_init(d, rank, rng);
      m.gate = kind == GateKind::kLinear
                   ? GateParams<S>::linear_init(d)
                   : GateParams<S>::mlp_init(d, gate_hidden, rng);
      mods.push_back(std::move(m));
    }
    return mods;
  }

  void push_request(std::vector<GrunModule<S>> modules) {
    if (!requests.empty()) {
      auto prev = layer_set();
      std::set<size_t> now;
      for (const auto& m : modules) now.insert(m.layer);
      if (prev != now)
        throw std::invalid_argument(
            "grun stack: all requests must share the same layer set");
    }
    requests.push_back(Request{std::move(modules)});
  }

  std::set<size_t> layer_set() const {
    std::set<size_t> layers;
    if (!requests.empty())
      for (const auto& m : requests.front().modules) layers.insert(m.layer);
    return layers;
  }

  bool has_layer(size_t layer) const {
    if (requests.empty()) return false;
    for (const auto& m : requests.front().modules)
      if (m.layer == layer) return true;
    return false;
  }

  // Graph application at one layer: h [1,d] -> [1,d]. Gate readings are
  // appended to `trace` per request.
  Tensor<S> apply(size_t layer, const Tensor<S>& h, GateOverride ov,
                  std::vector<GateReading<S>>* trace) const {
    if (requests.empty())
      throw std::invalid_argument("grun stack: empty stack");
    std::vector<Tensor<S>> terms;
    for (size_t j = 0; j < requests.size(); ++j) {
      const GrunModule<S>* mod = nullptr;
      for (const auto& m : requests[j].modules)
        if (m.layer == layer) mod = &m;
      if (!mod) continue;
      Tensor<S> delta = reft_delta(mod->reft, h);
      if (ov == GateOverride::kFullyOpen) {
        terms.push_back(delta);
      } else {
        Tensor<S> g = gate_eval(mod->gate, h);
        if (trace) trace->push_back({j, layer, g});
        terms.push_back(ops::smul(g, delta));
      }
    }
    if (terms.empty())
      throw std::invalid_argument("grun stack: no module at layer " +
                                  std::to_string(layer));
    return ops::add(h, ops::scale(ops::sum_list(terms), coeff));
  }

  // Value-level application for the decode path; mirrors apply() term for
  // term so cached decoding matches graph re-forwarding bit for bit.
  std::vector<S> apply_value(size_t layer, const std::vector<S>& h,
                             GateOverride ov) const {
    NoGradGuard ng;
    Tensor<S> hrow = Tensor<S>::from_data({1, h.size()}, h);
    return apply(layer, hrow, ov, nullptr).value();
  }

  std::vector<Tensor<S>> request_parameters(size_t request,
                                            bool reft_only = false) const {
    const auto& req = requests.at(request);
    std::vector<Tensor<S>> ps;
    for (const auto& m : req.modules) {
      for (const auto& p : m.reft.parameters()) ps.push_back(p);
      if (!reft_only)
        for (const auto& p : m.gate.parameters()) ps.push_back(p);
    }
    return ps;
  }

  void set_request_trainable(size_t request, bool trainable) const {
    for (const auto& p : request_parameters(request))
      p.set_requires_grad(trainable);
  }

  std::vector<std::pair<std::string, Tensor<S>>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor<S>>> out;
    for (size_t j = 0; j < requests.size(); ++j) {
      for (const auto& m : requests[j].modules) {
        const std::string base = "grun/" + std::to_string(j) + "/" +
                                 std::to_string(m.layer) + "/";
        out.emplace_back(base + "R", m.reft.R);
        out.emplace_back(base + "W", m.reft.W);
        out.emplace_back(base + "b", m.reft.b);
        if (m.gate.kind == GateKind::kLinear) {
          out.emplace_back(base + "gate.w", m.gate.w);
          out.emplace_back(base + "gate.b", m.gate.b);
        } else {
          out.emplace_back(base + "gate.w1", m.gate.w1);
          out.emplace_back(base + "gate.b1", m.gate.b1);
          out.emplace_back(base + "gate.w2", m.gate.w2);
          out.emplace_back(base + "gate.b2", m.gate.b2);
          out.emplace_back(base + "gate.w3", m.gate.w3);
          out.emplace_back(base + "gate.b3", m.gate.b3);
        }
      }
    }
    return out;
  }
};

// h + c * sum over all requests at the module's layer; the M=1, c=1 case
// reduces to grun_apply bit for bit.
template <class S>
Tensor<S> compose_sequential(const GrunStack<S>& stack, size_t layer,
                             const Tensor<S>& h) {
  return stack.apply(layer, h, GateOverride::kNone, nullptr);
}

struct ParamCount {
  size_t count = 0;
  double ratio = 0.0;  // relative to the model parameter count
};

template <class S>
ParamCount param_count(const std::vector<GrunModule<S>>& modules,
                       size_t model_param_count) {
  ParamCount pc;
  for (const auto& m : modules) {
    if (m.reft.rank() < 1)
      throw std::invalid_argument("param_count: rank must be at least 1");
    pc.count += m.param_count();
  }
  pc.ratio = model_param_count == 0
                 ? 0.0
                 : static_cast<double>(pc.count) /
                       static_cast<double>(model_param_count);
  return pc;
}

// Closed form per gated layer: 2rd + r for the edit plus the gate head
// (linear: d+1; mlp with hidden width h: (d+1)h + (h+1)h + (h+1)).
inline size_t grun_param_count_formula(size_t d, size_t rank, size_t n_layers,
                                       GateKind kind, size_t gate_hidden) {
  if (rank < 1)
    throw std::invalid_argument("param_count: rank must be at least 1");
  const size_t gate = kind == GateKind::kLinear
                          ? d + 1
                          : (d + 1) * gate_hidden +
                                (gate_hidden + 1) * gate_hidden +
                                (gate_hidden + 1);
  return n_layers * (2 * rank * d + rank + gate);
}

// Gated layer placement. Deep models follow the last / last-7th / last-12th
// rule; shallow ones fall back to spacing-2 steps from the top.
std::vector<size_t> select_layers(size_t n_layers);
std::vector<size_t> select_layers(size_t n_layers,
                                  const std::vector<size_t>& explicit_layers);

}  // namespace grunlab
