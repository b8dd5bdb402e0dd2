// Finite-difference checks of every differentiable op, run in double.
#pragma once

#include <string>
#include <vector>

#include "oracles.hpp"

namespace oracle {

struct GradCheck {
  std::string op;
  std::string wrt;
  std::uint64_t seed = 0;
  double rel_error = 0.0;
};

namespace detail {

using deepobf::TensorD;

inline Shape small_image(deepobf::Rng& rng) {
  return {uniform_int(rng, 1, 3), uniform_int(rng, 1, 4), uniform_int(rng, 2, 4), uniform_int(rng, 2, 4)};
}

// Values bounded away from zero so ReLU and L1 kinks are never straddled by
// the finite-difference step.
inline TensorD away_from_zero(const Shape& s, deepobf::Rng& rng) {
  TensorD t = random_tensor<double>(s, rng, 0.1, 1.0);
  std::bernoulli_distribution flip(0.5);
  for (Index i = 0; i < t.size(); ++i) {
    if (flip(rng)) t[i] = -t[i];
  }
  return t;
}

// Distinct values spaced well beyond the step, so max-pool winners are stable.
inline TensorD distinct(const Shape& s, deepobf::Rng& rng) {
  TensorD t(s);
  std::vector<double> v(static_cast<std::size_t>(t.size()));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.05 * static_cast<double>(i);
  std::shuffle(v.begin(), v.end(), rng);
  for (Index i = 0; i < t.size(); ++i) t[i] = v[static_cast<std::size_t>(i)] - 0.5;
  return t;
}

}  // namespace detail

inline std::vector<GradCheck> gradient_checks(std::uint64_t seed) {
  using namespace deepobf;
  using detail::TensorD;
  Rng rng = make_rng(seed, "gradcheck");
  std::vector<GradCheck> out;
  auto record = [&](std::string op, std::string wrt, const Eigen::VectorXd& a, const Eigen::VectorXd& n) {
    out.push_back({std::move(op), std::move(wrt), seed, relative_error(a, n)});
  };

  {  // conv2d, random stride / padding
    const Shape xs = detail::small_image(rng);
    const Index k = uniform_int(rng, 1, std::min<Index>(3, std::min(xs[2], xs[3])));
    ConvParams<double> p;
    p.weight = random_tensor<double>({uniform_int(rng, 1, 4), xs[1], k, k}, rng);
    p.bias = random_tensor<double>({p.weight.dim(0)}, rng);
    p.stride = uniform_int(rng, 1, 2);
    p.padding = uniform_int(rng, 0, 1);
    const TensorD x = random_tensor<double>(xs, rng);
    const TensorD r = random_tensor<double>(conv2d(x, p).shape(), rng);
    ConvGrads<double> g;
    const TensorD dx = conv2d_backward(x, p, r, &g);
    record("conv2d", "input", dx.values(), numeric_gradient([&](const TensorD& v) { return project(conv2d(v, p), r); }, x));
    record("conv2d", "weight", g.weight.values(), numeric_gradient([&](const TensorD& w) {
             ConvParams<double> q = p;
             q.weight = w;
             return project(conv2d(x, q), r);
           }, p.weight));
    record("conv2d", "bias", g.bias.values(), numeric_gradient([&](const TensorD& b) {
             ConvParams<double> q = p;
             q.bias = b;
             return project(conv2d(x, q), r);
           }, p.bias));
  }
  for (const bool training : {true, false}) {  // batchnorm, 4-D and 2-D
    const bool flat = uniform_int(rng, 0, 1) == 1;
    Shape xs = detail::small_image(rng);
    // At least three values per channel: with two, the normalised outputs are
    // always +-1 and the input gradient vanishes.
    xs[0] = uniform_int(rng, 2, 3);
    if (flat) xs = {uniform_int(rng, 3, 4), xs[1]};
    const Index ch = xs[1];
    BatchNormParams<double> p = BatchNormParams<double>::identity(ch);
    p.gamma = random_tensor<double>({ch}, rng, 0.5, 1.5);
    p.beta = random_tensor<double>({ch}, rng);
    p.running_mean = random_tensor<double>({ch}, rng);
    p.running_var = random_tensor<double>({ch}, rng, 0.5, 2.0);
    // Batch norm is scale invariant; a wide spread keeps the 1e-3 step small
    // relative to the batch deviation.
    const TensorD x = random_tensor<double>(xs, rng, -4.0, 4.0);
    auto run = [&](const TensorD& v, BatchNormParams<double> q) { return batchnorm(v, q, training); };
    BatchNormParams<double> q = p;
    BatchNormCache<double> cache;
    const TensorD y = batchnorm(x, q, training, &cache);
    const TensorD r = random_tensor<double>(y.shape(), rng);
    BatchNormGrads<double> g;
    const TensorD dx = batchnorm_backward(r, p, cache, &g);
    const std::string name = training ? "batchnorm[train]" : "batchnorm[infer]";
    record(name, "input", dx.values(), numeric_gradient([&](const TensorD& v) { return project(run(v, p), r); }, x));
    record(name, "gamma", g.gamma.values(), numeric_gradient([&](const TensorD& v) {
             BatchNormParams<double> s = p;
             s.gamma = v;
             return project(run(x, s), r);
           }, p.gamma));
    record(name, "beta", g.beta.values(), numeric_gradient([&](const TensorD& v) {
             BatchNormParams<double> s = p;
             s.beta = v;
             return project(run(x, s), r);
           }, p.beta));
  }
  {  // relu
    const TensorD x = detail::away_from_zero(detail::small_image(rng), rng);
    const TensorD r = random_tensor<double>(x.shape(), rng);
    record("relu", "input", relu_backward(x, r).values(),
           numeric_gradient([&](const TensorD& v) { return project(relu(v), r); }, x));
  }
  {  // max / average pooling
    const Shape xs = detail::small_image(rng);
    const Index k = uniform_int(rng, 1, std::min<Index>(3, std::min(xs[2], xs[3])));
    const PoolWindow win{k, uniform_int(rng, 1, 2), uniform_int(rng, 0, (k - 1) / 2)};
    const TensorD x = detail::distinct(xs, rng);
    MaxPoolCache cache;
    const TensorD y = maxpool(x, win, &cache);
    const TensorD r = random_tensor<double>(y.shape(), rng);
    record("maxpool", "input", maxpool_backward(r, x.shape(), cache).values(),
           numeric_gradient([&](const TensorD& v) { return project(maxpool(v, win), r); }, x));
    const TensorD ra = random_tensor<double>(avgpool(x, win).shape(), rng);
    record("avgpool", "input", avgpool_backward(ra, x.shape(), win).values(),
           numeric_gradient([&](const TensorD& v) { return project(avgpool(v, win), ra); }, x));
    const TensorD rg = random_tensor<double>(global_avgpool(x).shape(), rng);
    record("global_avgpool", "input", global_avgpool_backward(rg, x.shape()).values(),
           numeric_gradient([&](const TensorD& v) { return project(global_avgpool(v), rg); }, x));
  }
  {  // concat and add
    Shape a = detail::small_image(rng);
    Shape b = a;
    b[1] = uniform_int(rng, 1, 4);
    const TensorD xa = random_tensor<double>(a, rng), xb = random_tensor<double>(b, rng);
    const TensorD r = random_tensor<double>(concat_channels(std::vector<TensorD>{xa, xb}).shape(), rng);
    const std::vector<Index> counts{a[1], b[1]};
    const auto parts = concat_channels_backward(r, std::span<const Index>(counts));
    record("concat", "first", parts[0].values(), numeric_gradient([&](const TensorD& v) {
             return project(concat_channels(std::vector<TensorD>{v, xb}), r);
           }, xa));
    record("concat", "second", parts[1].values(), numeric_gradient([&](const TensorD& v) {
             return project(concat_channels(std::vector<TensorD>{xa, v}), r);
           }, xb));
    const TensorD xc = random_tensor<double>(a, rng);
    const TensorD ra = random_tensor<double>(a, rng);
    // d(a+b)/da is the identity, so the analytic gradient is the seed itself.
    record("add", "first", ra.values(),
           numeric_gradient([&](const TensorD& v) { return project(add_elementwise(v, xc), ra); }, xa));
    const TensorD rf = random_tensor<double>(flatten(xa).shape(), rng);
    record("flatten", "input", rf.values(),
           numeric_gradient([&](const TensorD& v) { return project(flatten(v), rf); }, xa));
  }
  {  // linear
    const Index batch = uniform_int(rng, 1, 4), features = uniform_int(rng, 1, 4), classes = uniform_int(rng, 1, 4);
    LinearParams<double> p{random_tensor<double>({classes, features}, rng), random_tensor<double>({classes}, rng)};
    const TensorD x = random_tensor<double>({batch, features}, rng);
    const TensorD r = random_tensor<double>({batch, classes}, rng);
    LinearGrads<double> g;
    const TensorD dx = linear_backward(x, p, r, &g);
    record("linear", "input", dx.values(), numeric_gradient([&](const TensorD& v) { return project(linear(v, p), r); }, x));
    record("linear", "weight", g.weight.values(), numeric_gradient([&](const TensorD& w) {
             LinearParams<double> q = p;
             q.weight = w;
             return project(linear(x, q), r);
           }, p.weight));
    record("linear", "bias", g.bias.values(), numeric_gradient([&](const TensorD& b) {
             LinearParams<double> q = p;
             q.bias = b;
             return project(linear(x, q), r);
           }, p.bias));
  }
  {  // losses
    const Index batch = uniform_int(rng, 1, 4), classes = uniform_int(rng, 2, 4);
    const TensorD logits = random_tensor<double>({batch, classes}, rng, -2.0, 2.0);
    std::vector<int> labels;
    for (Index n = 0; n < batch; ++n) labels.push_back(static_cast<int>(uniform_int(rng, 0, classes - 1)));
    record("softmax_cross_entropy", "logits", softmax_cross_entropy(logits, std::span<const int>(labels)).grad.values(),
           numeric_gradient([&](const TensorD& v) { return softmax_cross_entropy(v, std::span<const int>(labels)).value; },
                            logits));
    record("l1_onehot_loss", "logits", l1_onehot_loss(logits, std::span<const int>(labels)).grad.values(),
           numeric_gradient([&](const TensorD& v) { return l1_onehot_loss(v, std::span<const int>(labels)).value; },
                            logits));
    const TensorD target = random_tensor<double>(logits.shape(), rng);
    TensorD pred = detail::away_from_zero(logits.shape(), rng);
    pred.values() += target.values();
    record("l1_loss", "prediction", l1_loss(pred, target).grad.values(),
           numeric_gradient([&](const TensorD& v) { return l1_loss(v, target).value; }, pred));
  }
  return out;
}

}  // namespace oracle
