#pragma once

#include <limits>
#include <vector>

#include "deepobf/conv.hpp"
#include "deepobf/tensor.hpp"

namespace deepobf {

struct PoolWindow {
  Index kernel = 2;
  Index stride = 2;
  Index padding = 0;
};

/// Flat input index of the winning element per output element; -1 when the
/// window saw only padding.
struct MaxPoolCache {
  std::vector<Index> argmax;
};

template <typename Scalar>
Tensor<Scalar> maxpool(const Tensor<Scalar>& x, PoolWindow win, MaxPoolCache* cache = nullptr) {
  if (x.rank() != 4) throw ShapeError("maxpool: input must be 4-D, got " + shape_string(x.shape()));
  const Index batch = x.dim(0), channels = x.dim(1), height = x.dim(2), width = x.dim(3);
  const Index oh = window_output_extent(height, win.kernel, win.stride, win.padding);
  const Index ow = window_output_extent(width, win.kernel, win.stride, win.padding);
  Tensor<Scalar> y({batch, channels, oh, ow});
  if (cache) cache->argmax.assign(static_cast<std::size_t>(y.size()), -1);
  Index o = 0;
  for (Index plane = 0; plane < batch * channels; ++plane) {
    const Index base = plane * height * width;
    for (Index oy = 0; oy < oh; ++oy) {
      for (Index ox = 0; ox < ow; ++ox, ++o) {
        Scalar best = -std::numeric_limits<Scalar>::infinity();
        Index best_idx = -1;
        // Row-major scan with strict comparison: ties go to the first maximum.
        for (Index i = 0; i < win.kernel; ++i) {
          const Index iy = oy * win.stride - win.padding + i;
          if (iy < 0 || iy >= height) continue;
          for (Index j = 0; j < win.kernel; ++j) {
            const Index ix = ox * win.stride - win.padding + j;
            if (ix < 0 || ix >= width) continue;
            const Index idx = base + iy * width + ix;
            if (best_idx < 0 || x[idx] > best) {
              best = x[idx];
              best_idx = idx;
            }
          }
        }
        y[o] = best_idx < 0 ? Scalar(0) : best;
        if (cache) cache->argmax[static_cast<std::size_t>(o)] = best_idx;
      }
    }
  }
  return y;
}

template <typename Scalar>
Tensor<Scalar> maxpool_backward(const Tensor<Scalar>& dy, const Shape& input_shape,
                                const MaxPoolCache& cache) {
  Tensor<Scalar> dx(input_shape);
  for (Index o = 0; o < dy.size(); ++o) {
    const Index idx = cache.argmax[static_cast<std::size_t>(o)];
    if (idx >= 0) dx[idx] += dy[o];
  }
  return dx;
}

/// Window mean; padded positions count as zeros so the operator is a fixed
/// linear kernel of weight 1/(k*k).
template <typename Scalar>
Tensor<Scalar> avgpool(const Tensor<Scalar>& x, PoolWindow win) {
  if (x.rank() != 4) throw ShapeError("avgpool: input must be 4-D, got " + shape_string(x.shape()));
  const Index batch = x.dim(0), channels = x.dim(1), height = x.dim(2), width = x.dim(3);
  const Index oh = window_output_extent(height, win.kernel, win.stride, win.padding);
  const Index ow = window_output_extent(width, win.kernel, win.stride, win.padding);
  const Scalar scale = Scalar(1) / static_cast<Scalar>(win.kernel * win.kernel);
  Tensor<Scalar> y({batch, channels, oh, ow});
  Index o = 0;
  for (Index plane = 0; plane < batch * channels; ++plane) {
    const Index base = plane * height * width;
    for (Index oy = 0; oy < oh; ++oy) {
      for (Index ox = 0; ox < ow; ++ox, ++o) {
        Scalar acc = 0;
        for (Index i = 0; i < win.kernel; ++i) {
          const Index iy = oy * win.stride - win.padding + i;
          if (iy < 0 || iy >= height) continue;
          for (Index j = 0; j < win.kernel; ++j) {
            const Index ix = ox * win.stride - win.padding + j;
            if (ix >= 0 && ix < width) acc += x[base + iy * width + ix];
          }
        }
        y[o] = acc * scale;
      }
    }
  }
  return y;
}

template <typename Scalar>
Tensor<Scalar> avgpool_backward(const Tensor<Scalar>& dy, const Shape& input_shape,
                                PoolWindow win) {
  Tensor<Scalar> dx(input_shape);
  const Index height = input_shape[2], width = input_shape[3];
  const Index oh = dy.dim(2), ow = dy.dim(3);
  const Scalar scale = Scalar(1) / static_cast<Scalar>(win.kernel * win.kernel);
  Index o = 0;
  for (Index plane = 0; plane < input_shape[0] * input_shape[1]; ++plane) {
    const Index base = plane * height * width;
    for (Index oy = 0; oy < oh; ++oy) {
      for (Index ox = 0; ox < ow; ++ox, ++o) {
        const Scalar g = dy[o] * scale;
        for (Index i = 0; i < win.kernel; ++i) {
          const Index iy = oy * win.stride - win.padding + i;
          if (iy < 0 || iy >= height) continue;
          for (Index j = 0; j < win.kernel; ++j) {
            const Index ix = ox * win.stride - win.padding + j;
            if (ix >= 0 && ix < width) dx[base + iy * width + ix] += g;
          }
        }
      }
    }
  }
  return dx;
}

/// [b,c,h,w] -> [b,c] spatial mean.
template <typename Scalar>
Tensor<Scalar> global_avgpool(const Tensor<Scalar>& x) {
  if (x.rank() != 4) {
    throw ShapeError("global_avgpool: input must be 4-D, got " + shape_string(x.shape()));
  }
  const Index planes = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<Scalar> y({x.dim(0), x.dim(1)});
  y.values() = x.matrix(planes, hw).rowwise().mean();
  return y;
}

template <typename Scalar>
Tensor<Scalar> global_avgpool_backward(const Tensor<Scalar>& dy, const Shape& input_shape) {
  Tensor<Scalar> dx(input_shape);
  const Index planes = input_shape[0] * input_shape[1], hw = input_shape[2] * input_shape[3];
  dx.matrix(planes, hw).colwise() = dy.values() / static_cast<Scalar>(hw);
  return dx;
}

}  // namespace deepobf
