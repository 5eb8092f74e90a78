#pragma once

#include <Eigen/Core>

#include <concepts>
#include <cstdint>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "tsdpo/error.hpp"

namespace tsdpo {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

inline void check_shape(const Shape& shape) {
  for (Index d : shape)
    if (d <= 0) throw ShapeError("non-positive extent in shape " + shape_string(shape));
}

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Dense row-major tensor of rank <= 2 (rank 0 is a scalar).
///
/// Row-wise primitives treat any tensor as a matrix of shape
/// [size / last_extent, last_extent]; a rank-0 or rank-1 tensor is a single row.
template <std::floating_point Scalar>
class Tensor {
 public:
  using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

  Tensor() : data_(Vector<Scalar>::Zero(1)) {}

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_ = Vector<Scalar>::Zero(shape_size(shape_));
  }

  Tensor(Shape shape, Vector<Scalar> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (data_.size() != shape_size(shape_))
      throw ShapeError("data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
  }

  Tensor(Shape shape, std::initializer_list<Scalar> values)
      : Tensor(std::move(shape),
               Eigen::Map<const Vector<Scalar>>(values.begin(),
                                                static_cast<Index>(values.size()))) {}

  static Tensor scalar(Scalar v) {
    Tensor t;
    t.data_[0] = v;
    return t;
  }

  static Tensor from_matrix(const RowMatrix<Scalar>& m) {
    Tensor t(Shape{m.rows(), m.cols()});
    t.matrix() = m;
    return t;
  }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index size() const { return data_.size(); }

  /// Extent of the last axis (1 for scalars).
  Index cols() const { return shape_.empty() ? 1 : shape_.back(); }
  Index rows() const { return size() / cols(); }

  Vector<Scalar>& data() { return data_; }
  const Vector<Scalar>& data() const { return data_; }

  MatrixMap matrix() { return MatrixMap(data_.data(), rows(), cols()); }
  ConstMatrixMap matrix() const { return ConstMatrixMap(data_.data(), rows(), cols()); }

  Scalar item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape_));
    return data_[0];
  }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }
  Scalar& operator()(Index r, Index c) { return data_[r * cols() + c]; }
  Scalar operator()(Index r, Index c) const { return data_[r * cols() + c]; }

  bool all_finite() const { return data_.allFinite(); }

  Tensor zeros_like() const { return Tensor(shape_); }

  template <std::floating_point Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

  /// Exact (bitwise for non-NaN values) equality of shape and contents.
  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  Vector<Scalar> data_;
};

/// Ordered name -> tensor map; iteration order is lexicographic by name.
template <std::floating_point Scalar>
using NamedTensors = std::map<std::string, Tensor<Scalar>>;

/// Largest |a-b| / max(|b|, floor) over all entries.
template <std::floating_point Scalar>
double max_relative_error(const Tensor<Scalar>& a, const Tensor<Scalar>& b,
                          double floor = 1e-8) {
  if (a.shape() != b.shape()) throw ShapeError("max_relative_error: shape mismatch");
  double worst = 0.0;
  for (Index i = 0; i < a.size(); ++i) {
    const double x = a[i], y = b[i];
    worst = std::max(worst, std::abs(x - y) / std::max(std::abs(y), floor));
  }
  return worst;
}

}  // namespace tsdpo
