#pragma once

#include <map>
#include <string>

#include "deepobf/tensor.hpp"

namespace deepobf {

struct SgdConfig {
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 0.0;
};

inline void check_sgd(const SgdConfig& cfg) {
  if (!(cfg.lr > 0.0)) throw std::invalid_argument("sgd: learning rate must be positive");
  if (cfg.momentum < 0.0 || cfg.weight_decay < 0.0) {
    throw std::invalid_argument("sgd: momentum and weight decay must be non-negative");
  }
}

/// One momentum-SGD update in place:
///   v <- momentum * v + (g + weight_decay * w);  w <- w - lr * v
template <typename Scalar>
void sgd_step(Eigen::Ref<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> weights,
              const Eigen::Ref<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>& grads,
              Eigen::Ref<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> velocity, const SgdConfig& cfg) {
  check_sgd(cfg);
  if (grads.size() != weights.size() || velocity.size() != weights.size()) {
    throw ShapeError("sgd: gradient/velocity extent differs from parameter extent");
  }
  const Scalar mu = static_cast<Scalar>(cfg.momentum);
  const Scalar wd = static_cast<Scalar>(cfg.weight_decay);
  const Scalar lr = static_cast<Scalar>(cfg.lr);
  velocity = mu * velocity + grads + wd * weights;
  weights -= lr * velocity;
}

/// Momentum SGD over named parameter tensors, consuming each tensor's grad().
template <typename Scalar>
class Sgd {
 public:
  explicit Sgd(SgdConfig cfg) : cfg_(cfg) { check_sgd(cfg_); }

  void step(const std::string& name, Tensor<Scalar>& param) {
    if (!param.has_grad()) return;
    auto [it, inserted] = velocity_.try_emplace(name);
    if (inserted) it->second = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>::Zero(param.size());
    sgd_step<Scalar>(param.values(), param.grad(), it->second, cfg_);
  }

  const SgdConfig& config() const { return cfg_; }
  void set_lr(double lr) {
    SgdConfig next = cfg_;
    next.lr = lr;
    check_sgd(next);
    cfg_ = next;
  }

 private:
  SgdConfig cfg_;
  std::map<std::string, Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> velocity_;
};

}  // namespace deepobf
