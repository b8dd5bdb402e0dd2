#pragma once

#include "deepobf/tensor.hpp"

namespace deepobf {

template <typename Scalar>
struct LinearParams {
  Tensor<Scalar> weight;  // [classes, features]
  Tensor<Scalar> bias;    // [classes]

  Index classes() const { return weight.dim(0); }
  Index features() const { return weight.dim(1); }
};

template <typename Scalar>
struct LinearGrads {
  Tensor<Scalar> weight;
  Tensor<Scalar> bias;
};

namespace detail {
template <typename Scalar>
void check_linear(const Tensor<Scalar>& x, const LinearParams<Scalar>& p) {
  if (p.weight.rank() != 2 || p.bias.rank() != 1 || p.bias.dim(0) != p.weight.dim(0)) {
    throw ShapeError("linear: weight " + shape_string(p.weight.shape()) + " / bias " +
                     shape_string(p.bias.shape()) + " are not [classes,features] / [classes]");
  }
  if (x.rank() != 2 || x.dim(1) != p.features()) {
    throw ShapeError("linear: input " + shape_string(x.shape()) + " does not have " +
                     std::to_string(p.features()) + " features");
  }
}
}  // namespace detail

/// y[n, i] = sum_j x[n, j] * w[i, j] + bias[i]
template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const LinearParams<Scalar>& p) {
  detail::check_linear(x, p);
  Tensor<Scalar> y({x.dim(0), p.classes()});
  auto out = y.matrix(x.dim(0), p.classes());
  out.noalias() = x.matrix(x.dim(0), p.features()) *
                  p.weight.matrix(p.classes(), p.features()).transpose();
  out.rowwise() += p.bias.values().transpose();
  return y;
}

template <typename Scalar>
Tensor<Scalar> linear_backward(const Tensor<Scalar>& x, const LinearParams<Scalar>& p,
                               const Tensor<Scalar>& dy, LinearGrads<Scalar>* grads) {
  detail::check_linear(x, p);
  const Index batch = x.dim(0);
  const auto g = dy.matrix(batch, p.classes());
  if (grads) {
    if (grads->weight.shape() != p.weight.shape()) grads->weight = Tensor<Scalar>(p.weight.shape());
    if (grads->bias.shape() != p.bias.shape()) grads->bias = Tensor<Scalar>(p.bias.shape());
    grads->weight.matrix(p.classes(), p.features()).noalias() +=
        g.transpose() * x.matrix(batch, p.features());
    grads->bias.values() += g.colwise().sum().transpose();
  }
  Tensor<Scalar> dx(x.shape());
  dx.matrix(batch, p.features()).noalias() = g * p.weight.matrix(p.classes(), p.features());
  return dx;
}

}  // namespace deepobf
