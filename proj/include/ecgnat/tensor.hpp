#pragma once

#include <algorithm>
#include <cstring>
#include <functional>
#include <memory>
#include <vector>

#include "ecgnat/common.hpp"
#include "ecgnat/rng.hpp"

namespace ecgnat {

// Dense contiguous row-major tensor. The scalar type is a template
// parameter: float for training runs, double for the verification and
// gradient-check paths.
template <typename T>
struct TensorData {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated lazily, same length as value
  bool requires_grad = false;
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : d_(std::make_shared<TensorData<T>>()) {
    d_->shape = std::move(shape);
    const int64_t n = shape_numel(d_->shape);
    check_shape(n >= 0, "Tensor: negative extent in " + shape_str(d_->shape));
    for (int64_t e : d_->shape) check_shape(e > 0, "Tensor: non-positive extent in " + shape_str(d_->shape));
    d_->value.assign(size_t(n), fill);
  }

  static Tensor from(Shape shape, std::vector<T> values) {
    Tensor t;
    t.d_ = std::make_shared<TensorData<T>>();
    const int64_t n = shape_numel(shape);
    check_shape(int64_t(values.size()) == n,
                "Tensor::from: " + std::to_string(values.size()) + " values for shape " + shape_str(shape));
    t.d_->shape = std::move(shape);
    t.d_->value = std::move(values);
    return t;
  }

  static Tensor scalar(T v) { return from({1}, {v}); }

  static Tensor zeros_like(const Tensor& o) { return Tensor(o.shape()); }

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const { return d_->shape; }
  int64_t numel() const { return int64_t(d_->value.size()); }
  int64_t dim(size_t i) const { return d_->shape[i]; }
  size_t ndim() const { return d_->shape.size(); }

  T* data() { return d_->value.data(); }
  const T* data() const { return d_->value.data(); }
  std::vector<T>& values() { return d_->value; }
  const std::vector<T>& values() const { return d_->value; }

  bool requires_grad() const { return d_ && d_->requires_grad; }
  Tensor& set_requires_grad(bool rg) {
    d_->requires_grad = rg;
    return *this;
  }

  // grad buffer, allocated to zeros on first touch
  std::vector<T>& grad() {
    ensure_grad();
    return d_->grad;
  }
  const std::vector<T>& grad() const {
    const_cast<Tensor*>(this)->ensure_grad();
    return d_->grad;
  }
  bool has_grad() const { return d_ && !d_->grad.empty(); }
  void ensure_grad() {
    check(d_->requires_grad, "Tensor::grad: tensor does not require grad");
    if (d_->grad.empty()) d_->grad.assign(d_->value.size(), T(0));
  }
  void zero_grad() {
    if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), T(0));
  }

  T item() const {
    check(numel() == 1, "Tensor::item: tensor has " + std::to_string(numel()) + " elements");
    return d_->value[0];
  }

  // value copy that is cut off from the graph
  Tensor detach() const {
    Tensor t;
    t.d_ = std::make_shared<TensorData<T>>();
    t.d_->shape = d_->shape;
    t.d_->value = d_->value;
    return t;
  }

  void fill_uniform(Rng& rng, T lo, T hi) {
    for (auto& v : d_->value) v = T(rng.uniform(double(lo), double(hi)));
  }
  void fill_gaussian(Rng& rng, T mean, T std) {
    for (auto& v : d_->value) v = T(rng.gaussian(double(mean), double(std)));
  }
  void fill_trunc_gaussian(Rng& rng, T std) {
    for (auto& v : d_->value) v = T(rng.trunc_gaussian(double(std)));
  }

  std::shared_ptr<TensorData<T>> ptr() const { return d_; }

 private:
  std::shared_ptr<TensorData<T>> d_;
};

// Tape of executed ops. Ops append a backward closure as they run; backward
// replays the closures in exact reverse execution order. A graph is owned by
// one thread while recording; independent graphs may live on separate
// threads (the active slot is thread-local).
template <typename T>
class Graph {
 public:
  void record(std::function<void()> backward_fn) { nodes_.push_back(std::move(backward_fn)); }

  size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  // Populates grads of every requires_grad leaf reachable from `loss`.
  void backward(Tensor<T>& loss) {
    check(loss.defined() && loss.numel() == 1, "backward: loss must be a scalar tensor");
    check(loss.requires_grad(), "backward: loss does not require grad (no recorded ops reach it)");
    loss.grad()[0] = T(1);
    run_reverse();
  }

  // Backward from explicit output seeds: each (tensor, seed) pair adds seed
  // into the tensor's grad before replay. Used by tests probing non-scalar
  // outputs.
  void backward_seeded(std::vector<std::pair<Tensor<T>, std::vector<T>>> seeds) {
    for (auto& [t, seed] : seeds) {
      check(t.requires_grad(), "backward_seeded: output does not require grad");
      check(int64_t(seed.size()) == t.numel(), "backward_seeded: seed size mismatch");
      auto& g = t.grad();
      for (size_t i = 0; i < seed.size(); ++i) g[i] += seed[i];
    }
    run_reverse();
  }

  static Graph*& active_slot() {
    thread_local Graph* g = nullptr;
    return g;
  }
  static Graph* active() { return active_slot(); }

 private:
  void run_reverse() {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }
  std::vector<std::function<void()>> nodes_;
};

// RAII activation of a graph on the current thread.
template <typename T>
class GraphScope {
 public:
  explicit GraphScope(Graph<T>& g) : prev_(Graph<T>::active_slot()) { Graph<T>::active_slot() = &g; }
  ~GraphScope() { Graph<T>::active_slot() = prev_; }
  GraphScope(const GraphScope&) = delete;
  GraphScope& operator=(const GraphScope&) = delete;

 private:
  Graph<T>* prev_;
};

// helpers shared by op implementations

template <typename T>
inline bool tape_wants(const Tensor<T>& a) {
  return Graph<T>::active() != nullptr && a.requires_grad();
}

template <typename T>
inline void accumulate(std::vector<T>& dst, const std::vector<T>& src) {
  for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

// skip backward work when the output never received any gradient
template <typename T>
inline bool has_out_grad(const std::shared_ptr<TensorData<T>>& od) {
  return !od->grad.empty();
}

}  // namespace ecgnat
