#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "deepobf/errors.hpp"

namespace deepobf {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Dense row-major array in NCHW (images) or NF (classifier activations) order.
///
/// The gradient buffer is optional and only materialised for tensors that act
/// as trainable parameters.
template <typename Scalar>
class Tensor {
 public:
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

  Tensor() = default;

  explicit Tensor(Shape shape, Scalar fill = Scalar(0))
      : shape_(std::move(shape)), data_(Vector::Constant(numel(shape_), fill)) {
    check_extents();
  }

  Tensor(Shape shape, std::initializer_list<Scalar> values) : shape_(std::move(shape)) {
    check_extents();
    if (static_cast<Index>(values.size()) != numel(shape_)) {
      throw ShapeError("tensor " + shape_string(shape_) + " expects " +
                       std::to_string(numel(shape_)) + " values, got " +
                       std::to_string(values.size()));
    }
    data_.resize(numel(shape_));
    Index i = 0;
    for (Scalar v : values) data_[i++] = v;
  }

  Tensor(Shape shape, Vector values) : shape_(std::move(shape)), data_(std::move(values)) {
    check_extents();
    if (data_.size() != numel(shape_)) {
      throw ShapeError("tensor " + shape_string(shape_) + " given " +
                       std::to_string(data_.size()) + " values");
    }
  }

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index i) const { return shape_[static_cast<std::size_t>(i)]; }
  Index size() const { return data_.size(); }

  Vector& values() { return data_; }
  const Vector& values() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  Scalar& at(Index n, Index c, Index h, Index w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  Scalar at(Index n, Index c, Index h, Index w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  Scalar& at(Index row, Index col) { return data_[row * shape_[1] + col]; }
  Scalar at(Index row, Index col) const { return data_[row * shape_[1] + col]; }

  /// Row-major matrix view over the contiguous storage.
  MatrixMap matrix(Index rows, Index cols) {
    check_view(rows, cols);
    return MatrixMap(data_.data(), rows, cols);
  }
  ConstMatrixMap matrix(Index rows, Index cols) const {
    check_view(rows, cols);
    return ConstMatrixMap(data_.data(), rows, cols);
  }

  Tensor reshaped(Shape shape) const {
    if (numel(shape) != size()) {
      throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

  bool all_finite() const { return data_.allFinite(); }

  bool has_grad() const { return grad_.has_value(); }
  Vector& grad() {
    if (!grad_) grad_ = Vector::Zero(data_.size());
    return *grad_;
  }
  const Vector& grad() const {
    if (!grad_) throw ShapeError("tensor has no gradient buffer");
    return *grad_;
  }
  void zero_grad() {
    if (grad_) grad_->setZero();
  }
  void drop_grad() { grad_.reset(); }

  /// Value equality (shape and data, bitwise for finite values); gradients ignored.
  bool operator==(const Tensor& other) const {
    return shape_ == other.shape_ && data_ == other.data_;
  }

 private:
  void check_extents() const {
    for (Index d : shape_) {
      if (d < 0) throw ShapeError("negative extent in " + shape_string(shape_));
    }
  }
  void check_view(Index rows, Index cols) const {
    if (rows * cols != data_.size()) {
      throw ShapeError("matrix view " + std::to_string(rows) + "x" + std::to_string(cols) +
                       " over tensor " + shape_string(shape_));
    }
  }

  Shape shape_;
  Vector data_;
  std::optional<Vector> grad_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace deepobf
