#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace edmips {

/// Scalar type used by every tensor. Gradient checks need the headroom of
/// 64-bit floats, and the desk-scale experiments are fast enough with it.
using Real = double;

using Shape = std::vector<std::size_t>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Raised when a training loop produces a non-finite value.
class NumericalError : public Error {
 public:
  using Error::Error;
};

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

struct TensorStorage {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;
  bool requires_grad = false;
};

}  // namespace detail

/// Dense row-major array with an optional gradient buffer.
///
/// A Tensor is a shared handle: copies alias the same storage, which is what
/// the tape relies on to route gradients back to parameters. Use clone() for
/// a detached deep copy. The shape is fixed at construction.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, Real fill = 0) {
    check_extents(shape);
    s_ = std::make_shared<detail::TensorStorage>();
    s_->data.assign(shape_numel(shape), fill);
    s_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<Real> values) {
    check_extents(shape);
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor data length " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape));
    }
    s_ = std::make_shared<detail::TensorStorage>();
    s_->shape = std::move(shape);
    s_->data = std::move(values);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1); }
  static Tensor scalar(Real v) { return Tensor(Shape{1}, v); }
  static Tensor vector(std::vector<Real> values) {
    Shape s{values.size()};
    return Tensor(std::move(s), std::move(values));
  }

  explicit operator bool() const { return static_cast<bool>(s_); }
  bool same_storage(const Tensor& other) const { return s_ == other.s_; }

  const Shape& shape() const { return storage().shape; }
  std::size_t rank() const { return storage().shape.size(); }
  std::size_t dim(std::size_t i) const { return storage().shape.at(i); }
  std::size_t numel() const { return storage().data.size(); }

  std::span<Real> data() { return storage().data; }
  std::span<const Real> data() const { return storage().data; }
  Real* ptr() { return storage().data.data(); }
  const Real* ptr() const { return storage().data.data(); }
  Real& operator[](std::size_t i) { return storage().data[i]; }
  Real operator[](std::size_t i) const { return storage().data[i]; }

  Real item() const {
    if (numel() != 1) {
      throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    }
    return storage().data[0];
  }

  bool requires_grad() const { return s_ && s_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    storage().requires_grad = on;
    return *this;
  }

  bool has_grad() const { return s_ && !s_->grad.empty(); }
  std::span<Real> grad() { return storage().grad; }
  std::span<const Real> grad() const { return storage().grad; }

  /// Allocates a zero gradient buffer if none exists; returns it. The
  /// gradient is a side buffer, so this works through a const handle.
  std::span<Real> ensure_grad() const {
    auto& st = shared_storage();
    if (st.grad.empty()) st.grad.assign(st.data.size(), 0);
    return st.grad;
  }

  void zero_grad() {
    auto& st = storage();
    std::fill(st.grad.begin(), st.grad.end(), Real{0});
  }

  void drop_grad() { storage().grad.clear(); }

  Tensor clone() const {
    Tensor t(shape());
    std::copy(data().begin(), data().end(), t.data().begin());
    return t;
  }

 private:
  static void check_extents(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor shape must have rank >= 1");
    for (auto e : shape) {
      if (e == 0) {
        throw ShapeError("tensor extents must be positive, got " +
                         shape_str(shape));
      }
    }
  }

  detail::TensorStorage& shared_storage() const {
    if (!s_) throw Error("use of an empty tensor handle");
    return *s_;
  }
  detail::TensorStorage& storage() {
    if (!s_) throw Error("use of an empty tensor handle");
    return *s_;
  }
  const detail::TensorStorage& storage() const {
    if (!s_) throw Error("use of an empty tensor handle");
    return *s_;
  }

  std::shared_ptr<detail::TensorStorage> s_;
};

/// Ordered record of differentiable operations.
///
/// Operations append a node when the tape is recording and at least one input
/// requires gradients. backward() seeds the scalar loss with 1 and replays the
/// nodes in reverse order, each exactly once.
class Tape {
 public:
  struct Node {
    std::string op;
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void()> backward;
  };

  explicit Tape(bool recording = true) : recording_(recording) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  bool recording() const { return recording_; }

  bool wants(std::initializer_list<const Tensor*> inputs) const {
    if (!recording_) return false;
    for (auto* t : inputs) {
      if (t && *t && t->requires_grad()) return true;
    }
    return false;
  }

  bool wants(std::span<const Tensor> inputs) const {
    if (!recording_) return false;
    for (const auto& t : inputs) {
      if (t && t.requires_grad()) return true;
    }
    return false;
  }

  void record(std::string op, std::vector<Tensor> inputs, Tensor output,
              std::function<void()> backward) {
    output.set_requires_grad(true);
    nodes_.push_back(Node{std::move(op), std::move(inputs), std::move(output),
                          std::move(backward)});
  }

  void backward(Tensor loss) {
    if (loss.numel() != 1) {
      throw ShapeError("backward() needs a scalar loss, got shape " +
                       shape_str(loss.shape()));
    }
    loss.ensure_grad()[0] += 1;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      // Nodes whose output never reached the loss contribute nothing.
      if (!it->output.has_grad()) continue;
      it->backward();
    }
    for (auto& node : nodes_) {
      for (auto& in : node.inputs) {
        if (in.requires_grad()) in.ensure_grad();
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }
  void clear() { nodes_.clear(); }

 private:
  bool recording_;
  std::vector<Node> nodes_;
};

inline bool all_finite(std::span<const Real> v) {
  for (Real x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

}  // namespace edmips
