// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "kdq/common.hpp"

namespace kdq {

/**
 * Dense n-dimensional float32 tensor with an optional gradient buffer.
 *
 * Plain value storage; autodiff bookkeeping lives in Graph. `grad` stays
 * empty until something accumulates into it (an empty grad reads as zero).
 */
struct Tensor {
  std::vector<int> shape;
  std::vector<float> data;
  std::vector<float> grad;
  bool requires_grad = false;
  std::string name;  // non-empty for named parameters (checkpoints)

  Tensor() = default;
  Tensor(std::vector<int> s, float fill = 0.0f)
      : shape(std::move(s)), data(static_cast<size_t>(numel_of(shape)), fill) {}
  Tensor(std::vector<int> s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
    if (numel_of(shape) != static_cast<int64_t>(data.size()))
      throw ShapeError("tensor: " + shape_str(shape) + " does not hold " +
                       std::to_string(data.size()) + " elements");
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int dim(size_t i) const { return shape[i]; }
  bool is_scalar() const { return numel() == 1; }

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0f);
  }
  void zero_grad() {
    if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0f);
  }
  bool has_grad() const { return !grad.empty(); }

  bool all_finite() const {
    for (float v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
  bool grad_finite() const {
    for (float v : grad)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

using TensorPtr = std::shared_ptr<Tensor>;

inline TensorPtr make_tensor(std::vector<int> shape, float fill = 0.0f) {
  return std::make_shared<Tensor>(std::move(shape), fill);
}
inline TensorPtr make_tensor(std::vector<int> shape, std::vector<float> data) {
  return std::make_shared<Tensor>(std::move(shape), std::move(data));
}
inline TensorPtr make_scalar(float v) { return make_tensor({1}, std::vector<float>{v}); }

inline TensorPtr make_param(std::string name, std::vector<int> shape, float fill = 0.0f) {
  auto t = make_tensor(std::move(shape), fill);
  t->name = std::move(name);
  t->requires_grad = true;
  return t;
}

/**
 * Reverse-mode tape. Primitives append one backward closure per recorded
 * application; recording order is a topological order of the data flow, so
 * the backward sweep is a single reverse pass that visits every node once.
 */
class Graph {
 public:
  void record(const TensorPtr& out, std::function<void()> backward) {
    nodes_.push_back(std::move(backward));
    outputs_.push_back(out);
  }

  /// Register a trainable leaf the first time it feeds a recorded primitive.
  void note_leaf(const TensorPtr& t) {
    for (const auto& l : leaves_)
      if (l.get() == t.get()) return;
    leaves_.push_back(t);
  }

  size_t size() const { return nodes_.size(); }
  const std::vector<TensorPtr>& leaves() const { return leaves_; }

  /// Seed d(loss)/d(loss)=1 and run all recorded closures in reverse order.
  void backward(const TensorPtr& loss) {
    if (!loss || !loss->is_scalar())
      throw ContractError("backward requires a scalar loss tensor");
    loss->ensure_grad();
    loss->grad[0] = 1.0f;
    for (size_t i = nodes_.size(); i-- > 0;) nodes_[i]();
  }

  void clear() {
    nodes_.clear();
    outputs_.clear();
    leaves_.clear();
  }

 private:
  std::vector<std::function<void()>> nodes_;
  std::vector<TensorPtr> outputs_;  // keeps intermediates alive for the sweep
  std::vector<TensorPtr> leaves_;
};

/// True when ops should record onto the tape for `g`.
inline bool recording(const Graph* g) { return g != nullptr; }

// Helper used by every primitive: mark the output differentiable and register
// any leaf inputs.
inline bool wants_grad(Graph* g, std::initializer_list<const TensorPtr*> inputs) {
  if (!recording(g)) return false;
  bool any = false;
  for (const TensorPtr* t : inputs) {
    if (*t && (*t)->requires_grad) {
      any = true;
      if ((*t)->name.size()) g->note_leaf(*t);
    }
  }
  return any;
}

}  // namespace kdq
