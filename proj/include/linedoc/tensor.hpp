#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "linedoc/rng.hpp"

namespace linedoc {

using Shape = std::vector<int>;

inline size_t shape_numel(const Shape& s) {
  size_t n = 1;
  for (int d : s) {
    if (d < 0) throw std::invalid_argument("negative dimension");
    n *= static_cast<size_t>(d);
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// One node of the reverse-mode graph. Values are written once by the
// producing op; backward closures accumulate into parent grads.
struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  size_t numel() const { return value.size(); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

  static Tensor zeros(const Shape& shape, bool requires_grad = false) {
    auto n = std::make_shared<TensorNode>();
    n->shape = shape;
    n->value.assign(shape_numel(shape), 0.0);
    n->requires_grad = requires_grad;
    return Tensor(n);
  }

  static Tensor full(const Shape& shape, double v, bool requires_grad = false) {
    Tensor t = zeros(shape, requires_grad);
    std::fill(t.data().begin(), t.data().end(), v);
    return t;
  }

  static Tensor from(const Shape& shape, std::vector<double> values,
                     bool requires_grad = false) {
    if (values.size() != shape_numel(shape))
      throw std::invalid_argument("value count does not match shape");
    auto n = std::make_shared<TensorNode>();
    n->shape = shape;
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(n);
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from({}, {v}, requires_grad);
  }

  static Tensor randn(const Shape& shape, Rng& rng, double stddev,
                      bool requires_grad = false) {
    Tensor t = zeros(shape, requires_grad);
    for (double& x : t.data()) x = rng.next_normal() * stddev;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  size_t numel() const { return node_->numel(); }
  std::vector<double>& data() { return node_->value; }
  const std::vector<double>& data() const { return node_->value; }
  std::vector<double>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  const std::vector<double>& grad() const { return node_->grad; }
  bool requires_grad() const { return node_->requires_grad; }
  void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }
  std::shared_ptr<TensorNode> node() const { return node_; }

  double item() const {
    if (numel() != 1) throw std::logic_error("item() on non-scalar tensor");
    return node_->value[0];
  }

  // Reverse pass from a scalar output. Seeds d(out)/d(out) = 1, then runs
  // backward closures in reverse topological order.
  void backward() const {
    if (numel() != 1) throw std::logic_error("backward() needs a scalar");
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> seen;
    std::vector<std::pair<TensorNode*, size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, idx] = stack.back();
      if (idx < n->parents.size()) {
        TensorNode* p = n->parents[idx++].get();
        if (p->requires_grad && !seen.count(p)) {
          seen.insert(p);
          stack.emplace_back(p, 0);
        }
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    for (TensorNode* n : order) n->ensure_grad();
    node_->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      if ((*it)->backward_fn) (*it)->backward_fn(**it);
    }
  }

 private:
  std::shared_ptr<TensorNode> node_;
};

// Helper for op implementations: result node wired to its parents.
inline Tensor make_op_result(const Shape& shape,
                             std::vector<std::shared_ptr<TensorNode>> parents,
                             std::function<void(TensorNode&)> backward_fn) {
  auto n = std::make_shared<TensorNode>();
  n->shape = shape;
  n->value.assign(shape_numel(shape), 0.0);
  for (auto& p : parents) n->requires_grad = n->requires_grad || p->requires_grad;
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor(n);
}

}  // namespace linedoc
