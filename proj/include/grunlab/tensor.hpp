#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "grunlab/common.hpp"

namespace grunlab {

// Thread-local gradient mode. Ops record backward closures only while
// enabled; inference paths disable it to skip tape construction.
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  NoGradGuard() : prev_(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <class S>
struct TensorNode {
  std::vector<size_t> shape;
  std::vector<S> value;
  std::vector<S> grad;  // sized on demand during backward / by zero_grad
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode<S>>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(TensorNode<S>&)> backward_fn;

  size_t numel() const {
    size_t n = 1;
    for (size_t d : shape) n *= d;
    return n;
  }

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), S(0));
  }
};

inline std::string shape_str(const std::vector<size_t>& shape) {
  std::ostringstream ss;
  ss << "[";
  for (size_t i = 0; i < shape.size(); ++i) ss << (i ? "," : "") << shape[i];
  ss << "]";
  return ss.str();
}

// Value-semantic handle onto a shared autograd node. Ops evaluate eagerly;
// the DAG of parent links is the compute graph and every intermediate
// stays cached on its node for the backward pass.
template <class S>
class Tensor {
 public:
  using Node = TensorNode<S>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Tensor zeros(std::vector<size_t> shape, bool requires_grad = false) {
    return filled(std::move(shape), S(0), requires_grad);
  }

  static Tensor filled(std::vector<size_t> shape, S v,
                       bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value.assign(n->numel(), v);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor from_data(std::vector<size_t> shape, std::vector<S> data,
                          bool requires_grad = false) {
    size_t n = 1;
    for (size_t d : shape) {
      if (d == 0) throw std::invalid_argument("tensor: zero extent in shape");
      n *= d;
    }
    if (n != data.size())
      throw std::invalid_argument("tensor: shape " + shape_str(shape) +
                                  " does not match data length " +
                                  std::to_string(data.size()));
    for (S v : data)
      if (!std::isfinite(static_cast<double>(v)))
        throw std::domain_error("tensor: non-finite value in leaf data");
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor scalar(S v, bool requires_grad = false) {
    return from_data({1}, {v}, requires_grad);
  }

  // Gaussian init, std 0.02 unless stated otherwise.
  static Tensor randn(std::vector<size_t> shape, Rng& rng, S stddev,
                      bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value.resize(n->numel());
    for (S& v : n->value) v = static_cast<S>(rng.gaussian()) * stddev;
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  bool defined() const { return node_ != nullptr; }
  const std::vector<size_t>& shape() const { return node_->shape; }
  size_t numel() const { return node_->numel(); }
  size_t dim(size_t i) const { return node_->shape[i]; }
  size_t rank() const { return node_->shape.size(); }

  // The handle is shared; value and grad stay mutable through const
  // handles, mirroring how backward writes through the graph.
  std::vector<S>& value() const { return node_->value; }
  std::vector<S>& grad() const { return node_->grad; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) const { node_->requires_grad = rg; }

  S item() const {
    if (numel() != 1)
      throw std::invalid_argument("item: tensor " + shape_str(shape()) +
                                  " is not a scalar");
    return node_->value[0];
  }

  void zero_grad() const { node_->grad.assign(node_->value.size(), S(0)); }

  std::shared_ptr<Node> node() const { return node_; }

  // Reverse-mode sweep from a scalar root. Every requires_grad leaf in the
  // graph receives dRoot/dLeaf; leaves outside the graph are untouched
  // (their zeroed grads read as zero).
  void backward() const {
    if (numel() != 1)
      throw std::invalid_argument("backward: root must be scalar, got " +
                                  shape_str(shape()));
    std::vector<Node*> topo = topo_order();
    node_->ensure_grad();
    node_->grad[0] = S(1);
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
      Node* n = *it;
      if (n->backward_fn) {
        n->ensure_grad();
        n->backward_fn(*n);
      }
    }
  }

 private:
  std::vector<Node*> topo_order() const {
    std::vector<Node*> topo;
    std::unordered_set<Node*> visited;
    // Iterative post-order DFS.
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        Node* p = n->parents[next++].get();
        if (visited.insert(p).second) stack.emplace_back(p, 0);
      } else {
        topo.push_back(n);
        stack.pop_back();
      }
    }
    return topo;
  }

  std::shared_ptr<Node> node_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace grunlab
