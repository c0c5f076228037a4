#pragma once

#include <cstdint>
#include <cstdlib>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace ressformer {

using Shape = std::vector<long>;

inline long shape_numel(const Shape& s) {
  long n = 1;
  for (long e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Data and grad share one control block so every handle to the same tensor
// sees a grad allocated after the handle was copied.
struct TensorStorage {
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
};

struct TapeNode {
  std::vector<std::shared_ptr<TapeNode>> parents;
  std::function<void()> backward;  // accumulates into input grads
};

class Tensor {
 public:
  Shape shape;
  std::shared_ptr<TensorStorage> st;
  std::shared_ptr<TapeNode> node;  // null for leaves and detached tensors

  Tensor() = default;

  static Tensor zeros(Shape s) {
    Tensor t;
    t.shape = std::move(s);
    t.st = std::make_shared<TensorStorage>();
    t.st->data.assign(shape_numel(t.shape), 0.0);
    return t;
  }

  static Tensor full(Shape s, double v) {
    Tensor t = zeros(std::move(s));
    for (double& x : t.st->data) x = v;
    return t;
  }

  static Tensor from(Shape s, std::vector<double> values) {
    if (shape_numel(s) != (long)values.size())
      throw std::invalid_argument("Tensor::from: " + shape_str(s) + " does not hold " +
                                  std::to_string(values.size()) + " values");
    Tensor t;
    t.shape = std::move(s);
    t.st = std::make_shared<TensorStorage>();
    t.st->data = std::move(values);
    return t;
  }

  static Tensor scalar(double v) { return from({1}, {v}); }

  bool defined() const { return st != nullptr; }
  long size() const { return st ? (long)st->data.size() : 0; }
  long ndim() const { return (long)shape.size(); }
  long dim(long i) const { return shape.at(i); }

  double* data() { return st->data.data(); }
  const double* data() const { return st->data.data(); }

  double& at(long i) { return st->data.at(i); }
  double at(long i) const { return st->data.at(i); }
  double& at(long i, long j) { return st->data.at(i * shape.at(1) + j); }
  double at(long i, long j) const { return st->data.at(i * shape.at(1) + j); }

  bool requires_grad() const { return st && st->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    st->requires_grad = b;
    return *this;
  }

  void ensure_grad() {
    if (st->grad.empty()) st->grad.assign(st->data.size(), 0.0);
  }
  void zero_grad() { st->grad.assign(st->data.size(), 0.0); }
  bool has_grad() const { return st && !st->grad.empty(); }
  double* grad() { return st->grad.data(); }
  const double* grad() const { return st->grad.data(); }

  // Fresh storage, cut from the tape; never receives gradient.
  Tensor detach() const {
    Tensor t;
    t.shape = shape;
    t.st = std::make_shared<TensorStorage>();
    t.st->data = st->data;
    return t;
  }
};

// Output of a recorded op. Creates a node only when gradient can flow.
inline Tensor mark_op(Tensor out, std::initializer_list<const Tensor*> inputs,
                      std::function<void()> backward) {
  bool needs = false;
  for (const Tensor* in : inputs)
    if (in && in->defined() && (in->requires_grad() || in->node)) needs = true;
  if (!needs) return out;
  out.st->requires_grad = true;
  auto node = std::make_shared<TapeNode>();
  for (const Tensor* in : inputs)
    if (in && in->defined() && in->node) node->parents.push_back(in->node);
  node->backward = std::move(backward);
  out.node = node;
  return out;
}

// Whether a backward closure should accumulate into this input.
inline bool wants_grad(const Tensor& t) { return t.defined() && (t.requires_grad() || t.node); }

// Reverse-mode sweep. Visits every recorded ancestor exactly once, in reverse
// topological order; gradients accumulate, so callers reset between passes.
inline void backward(Tensor& loss) {
  if (!loss.node)
    throw std::invalid_argument("backward: tensor is detached from the tape");
  if (loss.size() != 1)
    throw std::invalid_argument("backward: loss must be a scalar, got " + shape_str(loss.shape));

  std::vector<TapeNode*> order;
  std::unordered_set<TapeNode*> seen;
  std::vector<std::pair<TapeNode*, size_t>> stack;
  stack.push_back({loss.node.get(), 0});
  seen.insert(loss.node.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      TapeNode* p = node->parents[idx++].get();
      if (seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.ensure_grad();
  loss.st->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) (*it)->backward();
}

}  // namespace ressformer
