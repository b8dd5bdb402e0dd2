#pragma once

#include <string>

#include "deepobf/tensor.hpp"

namespace deepobf {

/// Output extent of a sliding window; throws when the window does not fit.
inline Index window_output_extent(Index in, Index kernel, Index stride, Index padding) {
  if (kernel < 1 || stride < 1 || padding < 0) {
    throw ShapeError("invalid window: kernel " + std::to_string(kernel) + ", stride " +
                     std::to_string(stride) + ", padding " + std::to_string(padding));
  }
  const Index span = in + 2 * padding - kernel;
  if (span < 0) {
    throw ShapeError("window " + std::to_string(kernel) + " larger than padded input " +
                     std::to_string(in + 2 * padding));
  }
  return span / stride + 1;
}

template <typename Scalar>
struct ConvParams {
  Tensor<Scalar> weight;  // [out, in, kh, kw]
  Tensor<Scalar> bias;    // [out]
  Index stride = 1;
  Index padding = 0;

  Index out_channels() const { return weight.dim(0); }
  Index in_channels() const { return weight.dim(1); }
  Index kernel_h() const { return weight.dim(2); }
  Index kernel_w() const { return weight.dim(3); }
};

template <typename Scalar>
struct ConvGrads {
  Tensor<Scalar> weight;
  Tensor<Scalar> bias;
};

namespace detail {

template <typename Scalar>
void check_conv(const Tensor<Scalar>& x, const ConvParams<Scalar>& p) {
  if (p.weight.rank() != 4 || p.bias.rank() != 1 || p.bias.dim(0) != p.weight.dim(0)) {
    throw ShapeError("conv2d: weight " + shape_string(p.weight.shape()) + " / bias " +
                     shape_string(p.bias.shape()) + " are not [out,in,kh,kw] / [out]");
  }
  if (x.rank() != 4) throw ShapeError("conv2d: input must be 4-D, got " + shape_string(x.shape()));
  if (x.dim(1) != p.in_channels()) {
    throw ShapeError("conv2d: input has " + std::to_string(x.dim(1)) +
                     " channels, kernel expects " + std::to_string(p.in_channels()));
  }
}

// Patch matrix [in*kh*kw, oh*ow] for sample n.
template <typename Scalar>
void im2col(const Tensor<Scalar>& x, Index n, Index kh, Index kw, Index stride, Index pad,
            Index oh, Index ow, RowMatrix<Scalar>& cols) {
  const Index channels = x.dim(1), height = x.dim(2), width = x.dim(3);
  cols.resize(channels * kh * kw, oh * ow);
  const Scalar* src = x.data() + n * channels * height * width;
  for (Index c = 0; c < channels; ++c) {
    for (Index i = 0; i < kh; ++i) {
      for (Index j = 0; j < kw; ++j) {
        Scalar* row = cols.data() + ((c * kh + i) * kw + j) * oh * ow;
        for (Index y = 0; y < oh; ++y) {
          const Index iy = y * stride - pad + i;
          if (iy < 0 || iy >= height) {
            std::fill(row + y * ow, row + (y + 1) * ow, Scalar(0));
            continue;
          }
          const Scalar* line = src + (c * height + iy) * width;
          for (Index xo = 0; xo < ow; ++xo) {
            const Index ix = xo * stride - pad + j;
            row[y * ow + xo] = (ix >= 0 && ix < width) ? line[ix] : Scalar(0);
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im(const RowMatrix<Scalar>& cols, Index n, Index kh, Index kw, Index stride, Index pad,
            Index oh, Index ow, Tensor<Scalar>& dx) {
  const Index channels = dx.dim(1), height = dx.dim(2), width = dx.dim(3);
  Scalar* dst = dx.data() + n * channels * height * width;
  for (Index c = 0; c < channels; ++c) {
    for (Index i = 0; i < kh; ++i) {
      for (Index j = 0; j < kw; ++j) {
        const Scalar* row = cols.data() + ((c * kh + i) * kw + j) * oh * ow;
        for (Index y = 0; y < oh; ++y) {
          const Index iy = y * stride - pad + i;
          if (iy < 0 || iy >= height) continue;
          Scalar* line = dst + (c * height + iy) * width;
          for (Index xo = 0; xo < ow; ++xo) {
            const Index ix = xo * stride - pad + j;
            if (ix >= 0 && ix < width) line[ix] += row[y * ow + xo];
          }
        }
      }
    }
  }
}

template <typename Scalar>
bool is_pointwise(const ConvParams<Scalar>& p) {
  return p.kernel_h() == 1 && p.kernel_w() == 1 && p.stride == 1 && p.padding == 0;
}

}  // namespace detail

/// 2-D cross-correlation with bias: every output pixel is the windowed dot
/// product over all input channels plus the per-channel offset.
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const ConvParams<Scalar>& p) {
  detail::check_conv(x, p);
  const Index batch = x.dim(0), in_c = x.dim(1);
  const Index kh = p.kernel_h(), kw = p.kernel_w(), out_c = p.out_channels();
  const Index oh = window_output_extent(x.dim(2), kh, p.stride, p.padding);
  const Index ow = window_output_extent(x.dim(3), kw, p.stride, p.padding);
  Tensor<Scalar> y({batch, out_c, oh, ow});
  const auto w = p.weight.matrix(out_c, in_c * kh * kw);
  const auto& b = p.bias.values();
  RowMatrix<Scalar> cols;
  for (Index n = 0; n < batch; ++n) {
    Eigen::Map<RowMatrix<Scalar>> out(y.data() + n * out_c * oh * ow, out_c, oh * ow);
    if (detail::is_pointwise(p)) {
      Eigen::Map<const RowMatrix<Scalar>> in(x.data() + n * in_c * oh * ow, in_c, oh * ow);
      out.noalias() = w * in;
    } else {
      detail::im2col(x, n, kh, kw, p.stride, p.padding, oh, ow, cols);
      out.noalias() = w * cols;
    }
    out.colwise() += b;
  }
  return y;
}

/// Returns dL/dx. When `grads` is non-null, dL/dweight and dL/dbias are
/// accumulated into it (allocated on first use).
template <typename Scalar>
Tensor<Scalar> conv2d_backward(const Tensor<Scalar>& x, const ConvParams<Scalar>& p,
                               const Tensor<Scalar>& dy, ConvGrads<Scalar>* grads,
                               bool need_input_grad = true) {
  detail::check_conv(x, p);
  const Index batch = x.dim(0), in_c = x.dim(1);
  const Index kh = p.kernel_h(), kw = p.kernel_w(), out_c = p.out_channels();
  const Index oh = dy.dim(2), ow = dy.dim(3);
  const Index patch = in_c * kh * kw;
  Tensor<Scalar> dx = need_input_grad ? Tensor<Scalar>(x.shape()) : Tensor<Scalar>();
  if (grads) {
    if (grads->weight.shape() != p.weight.shape()) grads->weight = Tensor<Scalar>(p.weight.shape());
    if (grads->bias.shape() != p.bias.shape()) grads->bias = Tensor<Scalar>(p.bias.shape());
  }
  const auto w = p.weight.matrix(out_c, patch);
  const bool pointwise = detail::is_pointwise(p);
  RowMatrix<Scalar> cols, dcols;
  for (Index n = 0; n < batch; ++n) {
    Eigen::Map<const RowMatrix<Scalar>> g(dy.data() + n * out_c * oh * ow, out_c, oh * ow);
    if (pointwise) {
      Eigen::Map<const RowMatrix<Scalar>> in(x.data() + n * in_c * oh * ow, in_c, oh * ow);
      if (grads) grads->weight.matrix(out_c, patch).noalias() += g * in.transpose();
      if (need_input_grad) {
        Eigen::Map<RowMatrix<Scalar>> d(dx.data() + n * in_c * oh * ow, in_c, oh * ow);
        d.noalias() = w.transpose() * g;
      }
    } else {
      if (grads) {
        detail::im2col(x, n, kh, kw, p.stride, p.padding, oh, ow, cols);
        grads->weight.matrix(out_c, patch).noalias() += g * cols.transpose();
      }
      if (need_input_grad) {
        dcols.noalias() = w.transpose() * g;
        detail::col2im(dcols, n, kh, kw, p.stride, p.padding, oh, ow, dx);
      }
    }
    if (grads) grads->bias.values() += g.rowwise().sum();
  }
  return dx;
}

}  // namespace deepobf
