#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "bmoe/errors.hpp"
#include "bmoe/rng.hpp"

namespace bmoe {

inline std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

/// Dense row-major tensor. Training uses T = float, the test suite uses
/// T = double so finite-difference checks are meaningful.
template <typename T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> data;
  std::vector<T> grad;  // allocated iff requires_grad
  bool requires_grad = false;

  Tensor() = default;

  explicit Tensor(std::vector<int> s, bool rg = false)
      : shape(std::move(s)), requires_grad(rg) {
    data.assign(static_cast<size_t>(numel_of(shape)), T(0));
    if (requires_grad) grad.assign(data.size(), T(0));
  }

  static int64_t numel_of(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) {
      if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(s));
      n *= d;
    }
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int ndim() const { return static_cast<int>(shape.size()); }

  int dim(int i) const {
    const int n = ndim();
    if (i < 0) i += n;
    if (i < 0 || i >= n)
      throw ShapeError("axis " + std::to_string(i) + " out of range for " +
                       shape_str(shape));
    return shape[static_cast<size_t>(i)];
  }

  T& at(int i, int j) { return data[static_cast<size_t>(i) * dim(1) + j]; }
  const T& at(int i, int j) const {
    return data[static_cast<size_t>(i) * dim(1) + j];
  }

  void ensure_grad() {
    if (requires_grad && grad.size() != data.size())
      grad.assign(data.size(), T(0));
  }

  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }
};

template <typename T>
using TensorPtr = std::shared_ptr<Tensor<T>>;

template <typename T>
TensorPtr<T> make_tensor(std::vector<int> shape, bool requires_grad = false) {
  return std::make_shared<Tensor<T>>(std::move(shape), requires_grad);
}

template <typename T>
TensorPtr<T> tensor_from(std::vector<int> shape, const std::vector<T>& values,
                         bool requires_grad = false) {
  auto t = make_tensor<T>(std::move(shape), requires_grad);
  if (static_cast<int64_t>(values.size()) != t->numel())
    throw ShapeError("value count " + std::to_string(values.size()) +
                     " does not fill shape " + shape_str(t->shape));
  t->data = values;
  return t;
}

template <typename T>
TensorPtr<T> randn_tensor(std::vector<int> shape, Rng& rng, double stddev,
                          bool requires_grad = false) {
  auto t = make_tensor<T>(std::move(shape), requires_grad);
  for (auto& v : t->data) v = static_cast<T>(rng.normal(0.0, stddev));
  return t;
}

/// Reverse-mode tape. Operations append a backward closure during the forward
/// pass (define-by-run); a single sweep in reverse order propagates gradients
/// to every tensor recorded with requires_grad. Rebuilt per forward pass.
/// Single writer: one model records and backpropagates on one tape at a time.
template <typename T>
class Tape {
 public:
  bool recording() const { return recording_; }
  void set_recording(bool on) { recording_ = on; }

  void record(std::function<void()> backward) {
    if (recording_) nodes_.push_back(std::move(backward));
  }

  size_t size() const { return nodes_.size(); }

  void backward(const TensorPtr<T>& loss) {
    if (!loss || loss->numel() != 1)
      throw ShapeError("backward expects a scalar loss tensor");
    loss->ensure_grad();
    if (loss->requires_grad) loss->grad[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  void clear() { nodes_.clear(); }

  /// Scoped guard that disables recording (inference / evaluation).
  class NoGrad {
   public:
    explicit NoGrad(Tape& tape) : tape_(tape), prev_(tape.recording_) {
      tape_.recording_ = false;
    }
    ~NoGrad() { tape_.recording_ = prev_; }
    NoGrad(const NoGrad&) = delete;
    NoGrad& operator=(const NoGrad&) = delete;

   private:
    Tape& tape_;
    bool prev_;
  };

 private:
  std::vector<std::function<void()>> nodes_;
  bool recording_ = true;
};

}  // namespace bmoe
