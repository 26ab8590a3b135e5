#pragma once
// Immutable row-major f64 tensors. A tensor may carry an optional node handle
// into an autodiff graph (see autodiff.hpp); the handle is plain metadata and
// does not affect the stored values.

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "scalemix/common.hpp"

namespace scalemix {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) n *= e;
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

class Tensor {
 public:
  Tensor() = default;

  // Values are validated finite unless allow_nonfinite is set (debugging and
  // op-internal construction from already-checked inputs).
  Tensor(Shape shape, std::vector<double> values, bool allow_nonfinite = false)
      : shape_(std::move(shape)) {
    for (int64_t e : shape_)
      if (e <= 0)
        throw ShapeError("tensor extents must be positive, got " +
                         shape_str(shape_));
    if (shape_numel(shape_) != static_cast<int64_t>(values.size()))
      throw ShapeError("tensor shape " + shape_str(shape_) + " wants " +
                       std::to_string(shape_numel(shape_)) + " values, got " +
                       std::to_string(values.size()));
    if (!allow_nonfinite)
      for (double v : values)
        if (!std::isfinite(v))
          throw ContractError("non-finite value in tensor construction");
    data_ = std::make_shared<const std::vector<double>>(std::move(values));
  }

  static Tensor zeros(const Shape& shape) {
    return Tensor(shape, std::vector<double>(
                             static_cast<size_t>(shape_numel(shape)), 0.0));
  }

  static Tensor full(const Shape& shape, double v) {
    return Tensor(shape,
                  std::vector<double>(static_cast<size_t>(shape_numel(shape)), v));
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  bool valid() const { return data_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int64_t numel() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }

  // Extent along axis i; negative i counts from the end.
  int64_t dim(int i) const {
    const int n = ndim();
    if (i < 0) i += n;
    if (i < 0 || i >= n)
      throw ShapeError("axis " + std::to_string(i) + " out of range for " +
                       shape_str(shape_));
    return shape_[static_cast<size_t>(i)];
  }

  const std::vector<double>& data() const { return *data_; }

  double operator[](int64_t flat) const { return (*data_)[static_cast<size_t>(flat)]; }

  double at(std::initializer_list<int64_t> idx) const {
    if (static_cast<int>(idx.size()) != ndim())
      throw ShapeError("index rank mismatch for " + shape_str(shape_));
    int64_t flat = 0;
    int axis = 0;
    for (int64_t i : idx) {
      if (i < 0 || i >= shape_[static_cast<size_t>(axis)])
        throw ShapeError("index out of range on axis " + std::to_string(axis));
      flat = flat * shape_[static_cast<size_t>(axis)] + i;
      ++axis;
    }
    return (*data_)[static_cast<size_t>(flat)];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool bit_equal(const Tensor& o) const {
    if (shape_ != o.shape_) return false;
    const auto& a = *data_;
    const auto& b = *o.data_;
    for (size_t i = 0; i < a.size(); ++i)
      if (a[i] != b[i]) return false;
    return true;
  }

  bool all_finite() const {
    for (double v : *data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  // A copy of this tensor reshaped to `shape` (same element count, shared
  // storage). Node handle is dropped; graph-aware reshape lives on Graph.
  Tensor reshaped(const Shape& shape) const {
    if (shape_numel(shape) != numel())
      throw ShapeError("reshape " + shape_str(shape_) + " -> " +
                       shape_str(shape) + " changes element count");
    Tensor t;
    t.shape_ = shape;
    t.data_ = data_;
    return t;
  }

  // Autodiff handle plumbing.
  int64_t node() const { return node_; }
  bool has_node() const { return node_ >= 0; }
  Tensor with_node(int64_t id) const {
    Tensor t = *this;
    t.node_ = id;
    return t;
  }

 private:
  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  int64_t node_ = -1;
};

}  // namespace scalemix
