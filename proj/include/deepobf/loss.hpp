#pragma once

#include <cmath>
#include <span>
#include <string>

#include "deepobf/tensor.hpp"

namespace deepobf {

/// Scalar loss (accumulated in double) and its gradient w.r.t. the prediction.
template <typename Scalar>
struct LossResult {
  double value = 0.0;
  Tensor<Scalar> grad;
};

namespace detail {
template <typename Scalar>
void check_labels(const Tensor<Scalar>& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw ShapeError("loss: logits must be 2-D, got " + shape_string(logits.shape()));
  if (static_cast<Index>(labels.size()) != logits.dim(0)) {
    throw ShapeError("loss: " + std::to_string(labels.size()) + " labels for batch of " +
                     std::to_string(logits.dim(0)));
  }
  for (int l : labels) {
    if (l < 0 || l >= logits.dim(1)) {
      throw ShapeError("loss: label " + std::to_string(l) + " outside [0, " +
                       std::to_string(logits.dim(1)) + ")");
    }
  }
}
}  // namespace detail

/// Row-wise softmax of [b, classes] logits.
template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& logits) {
  const Index batch = logits.dim(0), classes = logits.dim(1);
  Tensor<Scalar> p(logits.shape());
  for (Index n = 0; n < batch; ++n) {
    auto row = logits.values().segment(n * classes, classes);
    auto out = p.values().segment(n * classes, classes);
    out = (row.array() - row.maxCoeff()).exp().matrix();
    out /= out.sum();
  }
  return p;
}

/// Mean over the batch of -log softmax(logits)[label].
template <typename Scalar>
LossResult<Scalar> softmax_cross_entropy(const Tensor<Scalar>& logits, std::span<const int> labels) {
  detail::check_labels(logits, labels);
  const Index batch = logits.dim(0), classes = logits.dim(1);
  LossResult<Scalar> r{0.0, softmax(logits)};
  for (Index n = 0; n < batch; ++n) {
    auto row = logits.values().segment(n * classes, classes).template cast<double>();
    const double m = row.maxCoeff();
    const double lse = m + std::log((row.array() - m).exp().sum());
    r.value += lse - row[labels[static_cast<std::size_t>(n)]];
    r.grad.at(n, labels[static_cast<std::size_t>(n)]) -= Scalar(1);
  }
  if (batch > 0) {
    r.value /= static_cast<double>(batch);
    r.grad.values() /= static_cast<Scalar>(batch);
  }
  return r;
}

/// Mean absolute difference over all elements. Subgradient 0 at equality.
template <typename Scalar>
LossResult<Scalar> l1_loss(const Tensor<Scalar>& pred, const Tensor<Scalar>& target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("l1_loss: extents differ, " + shape_string(pred.shape()) + " vs " +
                     shape_string(target.shape()));
  }
  LossResult<Scalar> r{0.0, Tensor<Scalar>(pred.shape())};
  if (pred.size() == 0) return r;
  const auto diff = (pred.values() - target.values()).eval();
  r.value = diff.template cast<double>().cwiseAbs().sum() / static_cast<double>(pred.size());
  r.grad.values() = diff.unaryExpr([](Scalar d) {
    return d > Scalar(0) ? Scalar(1) : (d < Scalar(0) ? Scalar(-1) : Scalar(0));
  }) / static_cast<Scalar>(pred.size());
  return r;
}

/// Mean absolute difference between softmax(logits) and the one-hot labels,
/// over all b*classes entries. Gradient is w.r.t. the logits.
template <typename Scalar>
LossResult<Scalar> l1_onehot_loss(const Tensor<Scalar>& logits, std::span<const int> labels) {
  detail::check_labels(logits, labels);
  const Index batch = logits.dim(0), classes = logits.dim(1);
  const Tensor<Scalar> prob = softmax(logits);
  Tensor<Scalar> onehot(logits.shape());
  for (Index n = 0; n < batch; ++n) onehot.at(n, labels[static_cast<std::size_t>(n)]) = Scalar(1);
  LossResult<Scalar> dprob = l1_loss(prob, onehot);
  LossResult<Scalar> r{dprob.value, Tensor<Scalar>(logits.shape())};
  for (Index n = 0; n < batch; ++n) {
    auto p = prob.values().segment(n * classes, classes);
    auto g = dprob.grad.values().segment(n * classes, classes);
    const Scalar dot = p.dot(g);
    r.grad.values().segment(n * classes, classes) = (p.array() * (g.array() - dot)).matrix();
  }
  return r;
}

}  // namespace deepobf
