#pragma once

#include <span>
#include <vector>

#include "deepobf/tensor.hpp"

namespace deepobf {

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) {
  Tensor<Scalar> y(x.shape());
  y.values() = x.values().cwiseMax(Scalar(0));
  return y;
}

template <typename Scalar>
Tensor<Scalar> relu_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& dy) {
  Tensor<Scalar> dx(x.shape());
  dx.values() = (x.values().array() > Scalar(0)).select(dy.values(), Scalar(0));
  return dx;
}

template <typename Scalar>
Tensor<Scalar> add_elementwise(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: extents differ, " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  Tensor<Scalar> y(a.shape());
  y.values() = a.values() + b.values();
  return y;
}

/// Concatenates along dimension 1 (channels for images, features for 2-D).
template <typename Scalar>
Tensor<Scalar> concat_channels(std::span<const Tensor<Scalar>* const> xs) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = xs.front()->shape();
  if (first.size() < 2) throw ShapeError("concat: inputs need a channel dimension");
  Index channels = 0;
  for (const Tensor<Scalar>* x : xs) {
    const Shape& s = x->shape();
    bool ok = s.size() == first.size() && s[0] == first[0];
    for (std::size_t d = 2; ok && d < s.size(); ++d) ok = s[d] == first[d];
    if (!ok) {
      throw ShapeError("concat: extents differ outside the channel axis, " + shape_string(first) +
                       " vs " + shape_string(s));
    }
    channels += s[1];
  }
  Shape out_shape = first;
  out_shape[1] = channels;
  Tensor<Scalar> y(out_shape);
  const Index inner = numel(first) / (first[0] * first[1]);
  Index offset = 0;
  for (const Tensor<Scalar>* x : xs) {
    const Index block = x->dim(1) * inner;
    for (Index n = 0; n < first[0]; ++n) {
      y.values().segment(n * channels * inner + offset, block) = x->values().segment(n * block, block);
    }
    offset += block;
  }
  return y;
}

template <typename Scalar>
Tensor<Scalar> concat_channels(const std::vector<Tensor<Scalar>>& xs) {
  std::vector<const Tensor<Scalar>*> ptrs;
  for (const auto& x : xs) ptrs.push_back(&x);
  return concat_channels<Scalar>(std::span<const Tensor<Scalar>* const>(ptrs));
}

/// Splits dL/dy of a channel concatenation back into per-input gradients.
template <typename Scalar>
std::vector<Tensor<Scalar>> concat_channels_backward(const Tensor<Scalar>& dy,
                                                     std::span<const Index> channel_counts) {
  const Index batch = dy.dim(0), channels = dy.dim(1);
  const Index inner = dy.size() / (batch * channels);
  std::vector<Tensor<Scalar>> out;
  Index offset = 0;
  for (Index c : channel_counts) {
    Shape s = dy.shape();
    s[1] = c;
    Tensor<Scalar> dx(s);
    for (Index n = 0; n < batch; ++n) {
      dx.values().segment(n * c * inner, c * inner) =
          dy.values().segment(n * channels * inner + offset, c * inner);
    }
    offset += c * inner;
    out.push_back(std::move(dx));
  }
  return out;
}

/// [b, ...] -> [b, prod(...)].
template <typename Scalar>
Tensor<Scalar> flatten(const Tensor<Scalar>& x) {
  if (x.rank() < 1) throw ShapeError("flatten: scalar input");
  return x.reshaped({x.dim(0), x.dim(0) == 0 ? 0 : x.size() / x.dim(0)});
}

}  // namespace deepobf
