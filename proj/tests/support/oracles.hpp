// Independent reference implementations shared by the unit and acceptance
// suites. Nothing here calls the optimised code paths it is used to check.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "deepobf/architectures.hpp"
#include "deepobf/executor.hpp"
#include "deepobf/model_graph.hpp"
#include "deepobf/ops.hpp"
#include "deepobf/structure.hpp"

namespace oracle {

using deepobf::Index;
using deepobf::Shape;

template <typename Scalar>
deepobf::Tensor<Scalar> random_tensor(const Shape& shape, deepobf::Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  deepobf::Tensor<Scalar> t(shape);
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(u(rng));
  return t;
}

inline Index uniform_int(deepobf::Rng& rng, Index lo, Index hi) {
  return std::uniform_int_distribution<Index>(lo, hi)(rng);
}

// Six nested loops, straight from the definition.
template <typename Scalar>
deepobf::Tensor<Scalar> naive_conv2d(const deepobf::Tensor<Scalar>& x, const deepobf::ConvParams<Scalar>& p) {
  const Index b = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index co = p.weight.dim(0), kh = p.weight.dim(2), kw = p.weight.dim(3);
  const Index oh = (h + 2 * p.padding - kh) / p.stride + 1;
  const Index ow = (w + 2 * p.padding - kw) / p.stride + 1;
  deepobf::Tensor<Scalar> y({b, co, oh, ow});
  for (Index n = 0; n < b; ++n)
    for (Index o = 0; o < co; ++o)
      for (Index oy = 0; oy < oh; ++oy)
        for (Index ox = 0; ox < ow; ++ox) {
          double acc = p.bias[o];
          for (Index c = 0; c < ci; ++c)
            for (Index i = 0; i < kh; ++i)
              for (Index j = 0; j < kw; ++j) {
                const Index iy = oy * p.stride - p.padding + i, ix = ox * p.stride - p.padding + j;
                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                acc += static_cast<double>(p.weight.at(o, c, i, j)) * static_cast<double>(x.at(n, c, iy, ix));
              }
          y.at(n, o, oy, ox) = static_cast<Scalar>(acc);
        }
  return y;
}

// Central differences of a scalar function of one tensor, in double.
inline Eigen::VectorXd numeric_gradient(const std::function<double(const deepobf::TensorD&)>& f,
                                        deepobf::TensorD x, double step = 1e-3) {
  Eigen::VectorXd g(x.size());
  for (Index i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + step;
    const double up = f(x);
    x[i] = keep - step;
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2 * step);
  }
  return g;
}

// ||a - n|| / max(||a|| + ||n||, tiny): scale-free over the whole gradient.
inline double relative_error(const Eigen::VectorXd& analytic, const Eigen::VectorXd& numeric) {
  const double denom = std::max(analytic.norm() + numeric.norm(), 1e-12);
  return (analytic - numeric).norm() / denom;
}

// Projection of an op output onto fixed random weights, so every output
// element contributes to the checked scalar.
inline double project(const deepobf::TensorD& y, const deepobf::TensorD& r) { return y.values().dot(r.values()); }

// --- block fixtures ---------------------------------------------------------

inline deepobf::LayerSpec conv_node(const std::string& id, const std::string& input, Index in, Index out, Index k,
                                    Index s, Index p) {
  deepobf::LayerSpec n;
  n.id = id;
  n.kind = deepobf::LayerKind::conv;
  n.inputs = {input};
  n.in_channels = in;
  n.out_channels = out;
  n.kernel = k;
  n.stride = s;
  n.padding = p;
  return n;
}

inline deepobf::LayerSpec pool_node(const std::string& id, const std::string& input, deepobf::LayerKind kind,
                                    Index k, Index s, Index p) {
  deepobf::LayerSpec n;
  n.id = id;
  n.kind = kind;
  n.inputs = {input};
  n.kernel = k;
  n.stride = s;
  n.padding = p;
  return n;
}

inline deepobf::LayerSpec merge_node(const std::string& id, deepobf::LayerKind kind,
                                     std::vector<std::string> inputs) {
  deepobf::LayerSpec n;
  n.id = id;
  n.kind = kind;
  n.inputs = std::move(inputs);
  return n;
}

// Wraps one feature block into a runnable model with a small head.
inline deepobf::ModelGraph wrap_block(const deepobf::BlockSpec& block, const deepobf::ImageExtent& input,
                                      deepobf::ParamStore params, std::uint64_t seed = 1) {
  deepobf::ModelGraph m;
  m.input = input;
  m.classes = 2;
  m.blocks.push_back(block);
  const Shape out = deepobf::infer_block_output(block, input.shape());
  m.blocks.push_back(deepobf::classifier_block("head", out[0], 2));
  deepobf::Rng rng = deepobf::make_rng(seed, "wrap");
  for (const auto& b : m.blocks) {
    for (auto& [k, v] : deepobf::init_block_params(b, rng)) params.try_emplace(k, std::move(v));
  }
  m.params = std::move(params);
  deepobf::validate(m);
  return m;
}

struct LinearBlockCase {
  deepobf::BlockSpec block;
  deepobf::ParamStore params;
  deepobf::ImageExtent input;
};

// Random conv/concat/add block that the collapse rules accept: an optional
// stem conv, one to three parallel conv chains merged by concat or add, and an
// optional tail conv. Only convs reading the block input (or a bias-free 1x1
// stem) carry padding. At most three convs on any path.
inline LinearBlockCase random_linear_block(deepobf::Rng& rng) {
  using deepobf::LayerKind;
  LinearBlockCase c;
  c.input = {uniform_int(rng, 1, 8), 16, 16};
  c.block.name = "lin";
  const Index stride = uniform_int(rng, 1, 2);
  const bool stem = uniform_int(rng, 0, 2) == 0;
  const bool tail = uniform_int(rng, 0, 2) == 0;
  const Index depth_left = 3 - (stem ? 1 : 0) - (tail ? 1 : 0);
  const Index branches = uniform_int(rng, 1, 3);
  const bool use_add = branches > 1 && uniform_int(rng, 0, 1) == 1;
  const Index branch_out = uniform_int(rng, 1, 8 / std::max<Index>(1, use_add ? 1 : branches));

  std::string source(deepobf::kBlockInput);
  Index channels = c.input.channels;
  bool stem_pointwise_free = false;
  if (stem) {
    const Index k = uniform_int(rng, 0, 1) == 0 ? 1 : 3;
    const Index out = uniform_int(rng, 1, 8);
    c.block.nodes.push_back(conv_node("stem", source, channels, out, k, stride, uniform_int(rng, 0, (k - 1) / 2)));
    stem_pointwise_free = k == 1 && stride == 1 && uniform_int(rng, 0, 1) == 1;
    source = "stem";
    channels = out;
  }

  // Each branch is a kernel list plus the first conv's padding; branches align
  // when their composed footprints minus twice the padding agree.
  struct Branch {
    std::vector<Index> kernels;
    Index pad = 0;
  };
  std::vector<Branch> layout;
  const bool first_may_pad = !stem || stem_pointwise_free;
  Index shrink = -1;
  for (Index b = 0; b < branches; ++b) {
    Branch br;
    for (int attempt = 0; attempt < 200; ++attempt) {
      br.kernels.clear();
      const Index len = uniform_int(rng, 1, depth_left);
      Index total = 0;
      // Footprint minus twice the padding, in block-input pixels: layers after
      // a strided first conv count `stride` times.
      const Index scale = stem ? 1 : stride;
      for (Index i = 0; i < len; ++i) {
        const Index k = i == 0 ? 1 + 2 * uniform_int(rng, 0, 2) : 1 + 2 * uniform_int(rng, 0, 1);
        br.kernels.push_back(k);
        total += (k - 1) * (i == 0 ? 1 : scale);
      }
      const Index max_pad = first_may_pad ? (br.kernels.front() - 1) / 2 : 0;
      if (shrink < 0) {
        br.pad = uniform_int(rng, 0, max_pad);
        shrink = total - 2 * br.pad;
        break;
      }
      if ((total - shrink) % 2 == 0 && (total - shrink) / 2 >= 0 && (total - shrink) / 2 <= max_pad) {
        br.pad = (total - shrink) / 2;
        break;
      }
      if (attempt == 199) br = layout.front();
    }
    layout.push_back(br);
  }

  std::vector<std::string> exits;
  for (Index b = 0; b < branches; ++b) {
    std::string prev = source;
    Index ch = channels;
    const auto& br = layout[static_cast<std::size_t>(b)];
    for (std::size_t i = 0; i < br.kernels.size(); ++i) {
      const std::string id = "br" + std::to_string(b) + "_" + std::to_string(i);
      const bool last = i + 1 == br.kernels.size();
      const Index out = last ? branch_out : uniform_int(rng, 1, 8);
      const Index s = (i == 0 && !stem) ? stride : 1;
      c.block.nodes.push_back(conv_node(id, prev, ch, out, br.kernels[i], s, i == 0 ? br.pad : 0));
      prev = id;
      ch = out;
    }
    exits.push_back(prev);
  }
  Index merged_channels = branch_out;
  std::string last = exits.front();
  if (branches > 1) {
    c.block.nodes.push_back(merge_node("merge", use_add ? LayerKind::add : LayerKind::concat, exits));
    merged_channels = use_add ? branch_out : branch_out * branches;
    last = "merge";
  }
  if (tail) {
    c.block.nodes.push_back(conv_node("tail", last, merged_channels, uniform_int(rng, 1, 8),
                                      uniform_int(rng, 0, 1) == 0 ? 1 : 3, 1, 0));
  }
  deepobf::Rng init = deepobf::make_rng(rng(), "linear-block");
  c.params = deepobf::init_block_params(c.block, init);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (auto& [key, t] : c.params) {
    // No nonlinearity here, so unit gain keeps activations O(1) instead of He's sqrt(2) per conv.
    if (key.ends_with(".weight")) t.values() *= static_cast<float>(1.0 / std::sqrt(2.0));
    if (key.ends_with(".bias")) {
      for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<float>(u(rng));
    }
  }
  if (stem_pointwise_free) c.params.at("stem.bias").values().setZero();
  return c;
}

// Largest absolute difference between the block's own forward pass and the
// collapsed convolution, over `trials` random batches of two.
inline double collapse_max_error(const LinearBlockCase& c, std::uint64_t seed, int trials = 10) {
  const deepobf::ModelGraph m = wrap_block(c.block, c.input, c.params);
  const deepobf::ConvParams<float> collapsed = deepobf::collapse_linear_block(c.block, c.params);
  deepobf::Rng rng = deepobf::make_rng(seed, "collapse-inputs");
  double worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    const auto x = random_tensor<float>({2, c.input.channels, c.input.height, c.input.width}, rng);
    const deepobf::TensorF ref = deepobf::forward_to_block(m, x, c.block.name);
    const deepobf::TensorF got = deepobf::conv2d(x, collapsed);
    if (ref.shape() != got.shape()) return std::numeric_limits<double>::infinity();
    worst = std::max(worst, static_cast<double>((ref.values() - got.values()).cwiseAbs().maxCoeff()));
  }
  return worst;
}

// Random block of conv / pooling windows, optionally in parallel branches
// merged by concat or add. Extents stay even so stride-2 windows line up.
inline deepobf::BlockSpec random_kernel_block(deepobf::Rng& rng, Index in_channels) {
  using deepobf::LayerKind;
  deepobf::BlockSpec block;
  block.name = "kb";
  const Index branches = uniform_int(rng, 1, 3);
  const bool strided = uniform_int(rng, 0, 1) == 1;
  const bool use_add = branches > 1 && uniform_int(rng, 0, 1) == 1;
  const Index out_channels = uniform_int(rng, 1, 4);
  std::vector<std::string> exits;
  for (Index b = 0; b < branches; ++b) {
    const Index len = uniform_int(rng, 1, 3);
    const Index stride_at = strided ? uniform_int(rng, 0, len - 1) : -1;
    std::string prev(deepobf::kBlockInput);
    Index ch = in_channels;
    for (Index i = 0; i < len; ++i) {
      const std::string id = "n" + std::to_string(b) + "_" + std::to_string(i);
      const Index s = i == stride_at ? 2 : 1;
      const bool last = i + 1 == len;
      const Index op = last ? 0 : uniform_int(rng, 0, 2);  // branch ends on a conv to fix channels
      if (op == 0) {
        const Index k = 1 + 2 * uniform_int(rng, 0, 2);
        const Index out = last ? out_channels : uniform_int(rng, 1, 4);
        block.nodes.push_back(conv_node(id, prev, ch, out, k, s, (k - 1) / 2));
        ch = out;
      } else {
        const LayerKind kind = op == 1 ? LayerKind::maxpool : LayerKind::avgpool;
        if (s == 2 && uniform_int(rng, 0, 1) == 0) {
          block.nodes.push_back(pool_node(id, prev, kind, 2, 2, 0));
        } else {
          block.nodes.push_back(pool_node(id, prev, kind, 3, s, 1));
        }
      }
      prev = id;
    }
    exits.push_back(prev);
  }
  if (branches > 1) {
    block.nodes.push_back(merge_node("merge", use_add ? LayerKind::add : LayerKind::concat, exits));
  }
  return block;
}

// Receptive field by perturbation: with non-negative weights, zero biases and
// positive inputs every op is monotone, so an input pixel lies in the
// footprint of an output pixel exactly when a large bump there changes it.
// Footprint of output (oy, ox) and of (oy + 1, ox) give size, padding, stride.
inline deepobf::ReceptiveField impulse_footprint(const deepobf::BlockSpec& block, Index in_channels, Index extent) {
  const deepobf::ImageExtent input{in_channels, extent, extent};
  deepobf::ModelGraph m = wrap_block(block, input, {});
  for (auto& [key, t] : m.params) {
    if (key.ends_with(".weight")) t.values() = t.values().cwiseAbs().array() + 0.01f;
    if (key.ends_with(".bias")) t.values().setZero();
  }
  const deepobf::TensorF base(Shape{1, in_channels, extent, extent}, 0.5f);
  const deepobf::TensorF y0 = deepobf::forward_to_block(m, base, block.name);
  const Index oh = y0.dim(2), ow = y0.dim(3);
  const Index oy = oh / 2 - 1, ox = ow / 2 - 1;

  auto bounds = [&](Index ty, Index tx) {
    Index r0 = extent, r1 = -1, c0 = extent, c1 = -1;
    for (Index y = 0; y < extent; ++y) {
      for (Index x = 0; x < extent; ++x) {
        deepobf::TensorF bumped = base;
        for (Index c = 0; c < in_channels; ++c) bumped.at(0, c, y, x) = 1000.0f;
        const deepobf::TensorF y1 = deepobf::forward_to_block(m, bumped, block.name);
        bool changed = false;
        for (Index c = 0; c < y1.dim(1) && !changed; ++c) changed = y1.at(0, c, ty, tx) != y0.at(0, c, ty, tx);
        if (changed) {
          r0 = std::min(r0, y), r1 = std::max(r1, y);
          c0 = std::min(c0, x), c1 = std::max(c1, x);
        }
      }
    }
    return std::array<Index, 4>{r0, r1, c0, c1};
  };
  const auto a = bounds(oy, ox);
  const auto b = bounds(oy + 1, ox);
  deepobf::ReceptiveField f;
  f.height = a[1] - a[0] + 1;
  f.width = a[3] - a[2] + 1;
  f.stride = b[0] - a[0];
  f.padding = oy * f.stride - a[0];
  return f;
}

}  // namespace oracle
