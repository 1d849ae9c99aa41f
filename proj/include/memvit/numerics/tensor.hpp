#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "memvit/errors.hpp"

namespace memvit {

using Index = Eigen::Index;

/// Dense row-major matrix; every tensor in the engine is a 2-D matrix whose
/// rows are tokens and whose columns are channels.
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic, Eigen::RowMajor>;

inline std::string shape_string(Index rows, Index cols) {
  return "[" + std::to_string(rows) + "," + std::to_string(cols) + "]";
}

// ---------------------------------------------------------------------------
// Runtime operation counter. Ops add to the active counter (if any); the
// analysis module's closed-form model is validated against these tallies.
// ---------------------------------------------------------------------------

struct OpCounts {
  std::int64_t macs = 0;         // matmul, rel-pos dot, depthwise conv taps
  std::int64_t elementwise = 0;  // softmax, layer norm, gelu, mean pooling

  std::int64_t flops() const { return macs + elementwise; }
};

namespace detail {
inline OpCounts*& active_counter() {
  thread_local OpCounts* counter = nullptr;
  return counter;
}
}  // namespace detail

/// Counts ops issued on this thread while alive. Scopes nest; the innermost
/// receives the counts.
class ScopedOpCounter {
 public:
  ScopedOpCounter() : previous_(detail::active_counter()) { detail::active_counter() = &counts_; }
  ~ScopedOpCounter() { detail::active_counter() = previous_; }
  ScopedOpCounter(const ScopedOpCounter&) = delete;
  ScopedOpCounter& operator=(const ScopedOpCounter&) = delete;

  const OpCounts& counts() const { return counts_; }

 private:
  OpCounts counts_;
  OpCounts* previous_;
};

inline void count_macs(std::int64_t n) {
  if (auto* c = detail::active_counter()) c->macs += n;
}
inline void count_elementwise(std::int64_t n) {
  if (auto* c = detail::active_counter()) c->elementwise += n;
}

// ---------------------------------------------------------------------------
// Reverse-mode graph
// ---------------------------------------------------------------------------

template <typename Scalar>
struct Node {
  Matrix<Scalar> value;
  Matrix<Scalar> grad;  // empty until something flows in
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad and accumulates into parents' grads.
  std::function<void(Node&)> backward;

  void accumulate(const Matrix<Scalar>& g) {
    if (!requires_grad) return;
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
  Matrix<Scalar>& grad_buffer() {
    if (grad.size() == 0) grad = Matrix<Scalar>::Zero(value.rows(), value.cols());
    return grad;
  }
};

/// Shared handle to a graph node. Copies alias the same node.
template <typename Scalar>
class Tensor {
 public:
  using NodePtr = std::shared_ptr<Node<Scalar>>;

  Tensor() : node_(std::make_shared<Node<Scalar>>()) {}

  explicit Tensor(Matrix<Scalar> value, bool requires_grad = false)
      : node_(std::make_shared<Node<Scalar>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Index rows, Index cols, bool requires_grad = false) {
    return Tensor(Matrix<Scalar>::Zero(rows, cols), requires_grad);
  }
  static Tensor scalar(Scalar v) {
    Matrix<Scalar> m(1, 1);
    m(0, 0) = v;
    return Tensor(std::move(m));
  }

  /// Builds an op result. Parents are retained only when some parent needs a
  /// gradient; otherwise the result is a constant.
  static Tensor from_op(Matrix<Scalar> value, std::vector<Tensor> parents,
                        std::function<void(Node<Scalar>&)> backward) {
    Tensor out(std::move(value));
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (any) {
      out.node_->requires_grad = true;
      out.node_->parents.reserve(parents.size());
      for (auto& p : parents) out.node_->parents.push_back(p.node_);
      out.node_->backward = std::move(backward);
    }
    return out;
  }

  const Matrix<Scalar>& value() const { return node_->value; }
  /// Direct mutable access; only for leaves (parameters, optimizer updates).
  Matrix<Scalar>& mutable_value() { return node_->value; }

  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  std::array<Index, 2> shape() const { return {rows(), cols()}; }
  Index size() const { return node_->value.size(); }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->parents.empty(); }
  void set_requires_grad(bool v) {
    if (!is_leaf()) throw ContractError("requires_grad can only be changed on leaf tensors");
    node_->requires_grad = v;
  }

  bool has_grad() const { return node_->grad.size() != 0; }
  /// Gradient, or zeros of the value's shape when nothing has flowed in.
  Matrix<Scalar> grad() const {
    if (has_grad()) return node_->grad;
    return Matrix<Scalar>::Zero(rows(), cols());
  }
  void zero_grad() { node_->grad.resize(0, 0); }

  Scalar item() const {
    if (size() != 1) throw ContractError("item() on non-scalar tensor " + shape_string(rows(), cols()));
    return node_->value(0, 0);
  }

  /// Reverse sweep from this scalar. Gradients accumulate into every reachable
  /// node that requires them.
  void backward() const {
    if (size() != 1) {
      throw ContractError("backward() requires a scalar output, got " + shape_string(rows(), cols()));
    }
    if (!requires_grad()) return;

    std::vector<Node<Scalar>*> order;
    std::unordered_set<Node<Scalar>*> seen;
    std::vector<std::pair<Node<Scalar>*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        Node<Scalar>* p = n->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }

    node_->grad_buffer().setOnes();
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<Scalar>* n = *it;
      if (n->backward && n->grad.size() != 0) n->backward(*n);
    }
    // Interior grads are scratch; drop them so repeated backward calls on
    // shared subgraphs accumulate only into leaves.
    for (Node<Scalar>* n : order) {
      if (!n->parents.empty()) n->grad.resize(0, 0);
    }
  }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

/// A named trainable leaf.
template <typename Scalar>
struct Parameter {
  std::string name;
  Tensor<Scalar> tensor;

  Parameter() = default;
  Parameter(std::string n, Matrix<Scalar> init)
      : name(std::move(n)), tensor(std::move(init), /*requires_grad=*/true) {}
};

}  // namespace memvit
