#pragma once

#include <cmath>

#include "deepobf/tensor.hpp"

namespace deepobf {

template <typename Scalar>
struct BatchNormParams {
  Tensor<Scalar> gamma;
  Tensor<Scalar> beta;
  Tensor<Scalar> running_mean;
  Tensor<Scalar> running_var;
  Scalar epsilon = Scalar(1e-5);
  Scalar momentum = Scalar(0.1);

  static BatchNormParams identity(Index channels) {
    BatchNormParams p;
    p.gamma = Tensor<Scalar>({channels}, Scalar(1));
    p.beta = Tensor<Scalar>({channels});
    p.running_mean = Tensor<Scalar>({channels});
    p.running_var = Tensor<Scalar>({channels}, Scalar(1));
    return p;
  }
  Index channels() const { return gamma.dim(0); }
};

template <typename Scalar>
struct BatchNormGrads {
  Tensor<Scalar> gamma;
  Tensor<Scalar> beta;
};

template <typename Scalar>
struct BatchNormCache {
  Tensor<Scalar> normalized;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_std;
  bool batch_statistics = false;
};

namespace detail {

template <typename Scalar>
void check_batchnorm(const Tensor<Scalar>& x, const BatchNormParams<Scalar>& p) {
  if (x.rank() != 4 && x.rank() != 2) {
    throw ShapeError("batchnorm: input must be 2-D or 4-D, got " + shape_string(x.shape()));
  }
  if (x.dim(1) != p.channels() || p.beta.dim(0) != p.channels() ||
      p.running_mean.dim(0) != p.channels() || p.running_var.dim(0) != p.channels()) {
    throw ShapeError("batchnorm: input has " + std::to_string(x.dim(1)) +
                     " channels, parameters have " + std::to_string(p.channels()));
  }
  if (!(p.epsilon > Scalar(0))) throw ShapeError("batchnorm: epsilon must be positive");
}

inline Index spatial_size(const Shape& s) { return s.size() == 4 ? s[2] * s[3] : 1; }

template <typename Scalar>
Tensor<Scalar> normalize(const Tensor<Scalar>& x, const BatchNormParams<Scalar>& p,
                         const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& mean,
                         const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& inv_std,
                         BatchNormCache<Scalar>* cache) {
  const Index batch = x.dim(0), channels = x.dim(1), hw = spatial_size(x.shape());
  Tensor<Scalar> y(x.shape());
  Tensor<Scalar> xhat(x.shape());
  for (Index n = 0; n < batch; ++n) {
    for (Index c = 0; c < channels; ++c) {
      const Index off = (n * channels + c) * hw;
      auto src = x.values().segment(off, hw).array();
      auto nrm = xhat.values().segment(off, hw).array();
      nrm = (src - mean[c]) * inv_std[c];
      y.values().segment(off, hw).array() = nrm * p.gamma[c] + p.beta[c];
    }
  }
  if (cache) {
    cache->normalized = std::move(xhat);
    cache->inv_std = inv_std;
  }
  return y;
}

}  // namespace detail

/// Batch normalisation with batch statistics (biased variance). Updates the
/// running statistics in `p` with rate `p.momentum`.
template <typename Scalar>
Tensor<Scalar> batchnorm_train(const Tensor<Scalar>& x, BatchNormParams<Scalar>& p,
                               BatchNormCache<Scalar>* cache = nullptr) {
  detail::check_batchnorm(x, p);
  if (x.dim(0) == 0) throw ShapeError("batchnorm: empty batch in training mode");
  const Index batch = x.dim(0), channels = x.dim(1), hw = detail::spatial_size(x.shape());
  const double count = static_cast<double>(batch * hw);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> mean(channels), inv_std(channels);
  for (Index c = 0; c < channels; ++c) {
    double sum = 0.0;
    for (Index n = 0; n < batch; ++n) {
      sum += x.values().segment((n * channels + c) * hw, hw).template cast<double>().sum();
    }
    const double mu = sum / count;
    double sq = 0.0;
    for (Index n = 0; n < batch; ++n) {
      sq += (x.values().segment((n * channels + c) * hw, hw).template cast<double>().array() - mu)
                .square()
                .sum();
    }
    const double var = sq / count;
    mean[c] = static_cast<Scalar>(mu);
    inv_std[c] = static_cast<Scalar>(1.0 / std::sqrt(var + static_cast<double>(p.epsilon)));
    p.running_mean[c] = (Scalar(1) - p.momentum) * p.running_mean[c] + p.momentum * mean[c];
    p.running_var[c] =
        (Scalar(1) - p.momentum) * p.running_var[c] + p.momentum * static_cast<Scalar>(var);
  }
  if (cache) cache->batch_statistics = true;
  return detail::normalize(x, p, mean, inv_std, cache);
}

/// Batch normalisation with the stored running statistics.
template <typename Scalar>
Tensor<Scalar> batchnorm_infer(const Tensor<Scalar>& x, const BatchNormParams<Scalar>& p,
                               BatchNormCache<Scalar>* cache = nullptr) {
  detail::check_batchnorm(x, p);
  const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_std =
      (p.running_var.values().array() + p.epsilon).rsqrt().matrix();
  if (cache) cache->batch_statistics = false;
  return detail::normalize(x, p, p.running_mean.values(), inv_std, cache);
}

template <typename Scalar>
Tensor<Scalar> batchnorm(const Tensor<Scalar>& x, BatchNormParams<Scalar>& p, bool training,
                         BatchNormCache<Scalar>* cache = nullptr) {
  return training ? batchnorm_train(x, p, cache) : batchnorm_infer(x, p, cache);
}

/// Returns dL/dx; accumulates dL/dgamma and dL/dbeta when `grads` is non-null.
template <typename Scalar>
Tensor<Scalar> batchnorm_backward(const Tensor<Scalar>& dy, const BatchNormParams<Scalar>& p,
                                  const BatchNormCache<Scalar>& cache,
                                  BatchNormGrads<Scalar>* grads) {
  const Index batch = dy.dim(0), channels = dy.dim(1), hw = detail::spatial_size(dy.shape());
  const Scalar count = static_cast<Scalar>(batch * hw);
  if (grads) {
    if (grads->gamma.shape() != p.gamma.shape()) grads->gamma = Tensor<Scalar>(p.gamma.shape());
    if (grads->beta.shape() != p.beta.shape()) grads->beta = Tensor<Scalar>(p.beta.shape());
  }
  Tensor<Scalar> dx(dy.shape());
  for (Index c = 0; c < channels; ++c) {
    Scalar sum_dy = 0, sum_dy_xhat = 0;
    for (Index n = 0; n < batch; ++n) {
      const Index off = (n * channels + c) * hw;
      sum_dy += dy.values().segment(off, hw).sum();
      sum_dy_xhat += dy.values().segment(off, hw).dot(cache.normalized.values().segment(off, hw));
    }
    if (grads) {
      grads->gamma[c] += sum_dy_xhat;
      grads->beta[c] += sum_dy;
    }
    const Scalar scale = p.gamma[c] * cache.inv_std[c];
    for (Index n = 0; n < batch; ++n) {
      const Index off = (n * channels + c) * hw;
      auto g = dy.values().segment(off, hw).array();
      if (cache.batch_statistics) {
        auto xhat = cache.normalized.values().segment(off, hw).array();
        dx.values().segment(off, hw).array() =
            (scale / count) * (count * g - sum_dy - xhat * sum_dy_xhat);
      } else {
        dx.values().segment(off, hw).array() = scale * g;
      }
    }
  }
  return dx;
}

}  // namespace deepobf
