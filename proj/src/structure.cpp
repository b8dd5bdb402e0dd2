#include "deepobf/structure.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_map>

namespace deepobf {

std::string ReceptiveField::describe() const {
  std::ostringstream out;
  out << height << "x" << width << " stride " << stride << " padding " << padding;
  return out.str();
}

ReceptiveField compose(const ReceptiveField& first, const ReceptiveField& next) {
  return {first.height + (next.height - 1) * first.stride, first.width + (next.width - 1) * first.stride,
          first.stride * next.stride, first.padding + next.padding * first.stride};
}

namespace {

ReceptiveField merge_fields(const LayerSpec& node, const std::vector<ReceptiveField>& branches) {
  ReceptiveField out = branches.front();
  Index end_h = out.height - out.padding, end_w = out.width - out.padding;
  for (const auto& b : branches) {
    if (b.stride != out.stride) {
      throw AnalysisError("node '" + node.id + "' merges branches with strides " +
                          std::to_string(out.stride) + " and " + std::to_string(b.stride));
    }
    out.padding = std::max(out.padding, b.padding);
    end_h = std::max(end_h, b.height - b.padding);
    end_w = std::max(end_w, b.width - b.padding);
  }
  out.height = end_h + out.padding;
  out.width = end_w + out.padding;
  return out;
}

}  // namespace

ReceptiveField receptive_field(const BlockSpec& block) {
  std::unordered_map<std::string, ReceptiveField> rf;
  auto lookup = [&](const std::string& ref) {
    if (ref == kBlockInput) return ReceptiveField{};
    auto it = rf.find(ref);
    if (it == rf.end()) throw GraphError("block '" + block.name + "': dangling input '" + ref + "'");
    return it->second;
  };
  for (const auto& n : block.nodes) {
    if (n.inputs.empty()) throw GraphError("node '" + n.id + "' has no inputs");
    ReceptiveField f;
    switch (n.kind) {
      case LayerKind::conv:
      case LayerKind::maxpool:
      case LayerKind::avgpool:
        f = compose(lookup(n.inputs.front()), window_field(n.kernel, n.stride, n.padding));
        break;
      case LayerKind::batchnorm:
      case LayerKind::relu:
        f = lookup(n.inputs.front());
        break;
      case LayerKind::concat:
      case LayerKind::add: {
        std::vector<ReceptiveField> branches;
        for (const auto& ref : n.inputs) branches.push_back(lookup(ref));
        f = merge_fields(n, branches);
        break;
      }
      default:
        throw AnalysisError("node '" + n.id + "' (" + std::string(to_string(n.kind)) +
                            ") is not a kernel operation; receptive fields apply to feature blocks only");
    }
    rf[n.id] = f;
  }
  return rf.at(block.exit().id);
}

ReceptiveField receptive_field(const ModelGraph& m, std::string_view first, std::string_view last) {
  const std::size_t lo = m.block_index(first), hi = m.block_index(last);
  if (lo > hi) throw GraphError("block range is reversed");
  ReceptiveField f;
  for (std::size_t i = lo; i <= hi; ++i) f = compose(f, receptive_field(m.blocks[i]));
  return f;
}

namespace {

// Equivalent convolution from the block input, kept in double.
struct Equivalent {
  Index out = 0, in = 0, kernel = 1, stride = 1, padding = 0;
  std::vector<double> weight;  // [out, in, kernel, kernel]
  std::vector<double> bias;

  double& w(Index o, Index c, Index i, Index j) {
    return weight[static_cast<std::size_t>(((o * in + c) * kernel + i) * kernel + j)];
  }
  double w(Index o, Index c, Index i, Index j) const {
    return weight[static_cast<std::size_t>(((o * in + c) * kernel + i) * kernel + j)];
  }
  bool bias_free_pointwise() const {
    return kernel == 1 && stride == 1 && padding == 0 &&
           std::all_of(bias.begin(), bias.end(), [](double b) { return b == 0.0; });
  }
  static Equivalent identity(Index channels) {
    Equivalent e;
    e.out = e.in = channels;
    e.weight.assign(static_cast<std::size_t>(channels * channels), 0.0);
    for (Index c = 0; c < channels; ++c) e.w(c, c, 0, 0) = 1.0;
    e.bias.assign(static_cast<std::size_t>(channels), 0.0);
    return e;
  }
};

Equivalent compose_conv(const Equivalent& e, const LayerSpec& n, const ParamStore& params) {
  if (n.kernel % 2 == 0) {
    throw AnalysisError("node '" + n.id + "' has an even kernel; only odd kernels can be aligned");
  }
  if (n.padding > 0 && !e.bias_free_pointwise()) {
    throw AnalysisError("node '" + n.id +
                        "' pads an intermediate feature map; zero padding there has no single-convolution equivalent");
  }
  if (n.in_channels != e.out) {
    throw ShapeError("node '" + n.id + "' expects " + std::to_string(n.in_channels) + " channels, upstream has " +
                     std::to_string(e.out));
  }
  const TensorF& k2 = params.at(param_key(n.id, "weight"));
  const TensorF& b2 = params.at(param_key(n.id, "bias"));
  Equivalent r;
  r.out = n.out_channels;
  r.in = e.in;
  r.kernel = e.kernel + (n.kernel - 1) * e.stride;
  r.stride = e.stride * n.stride;
  r.padding = e.padding + n.padding * e.stride;
  r.weight.assign(static_cast<std::size_t>(r.out * r.in * r.kernel * r.kernel), 0.0);
  r.bias.assign(static_cast<std::size_t>(r.out), 0.0);
  for (Index o = 0; o < r.out; ++o) {
    double bias = b2[o];
    for (Index m = 0; m < e.out; ++m) {
      for (Index i = 0; i < n.kernel; ++i) {
        for (Index j = 0; j < n.kernel; ++j) {
          const double k = k2.at(o, m, i, j);
          if (k == 0.0) continue;
          bias += k * e.bias[static_cast<std::size_t>(m)];
          for (Index c = 0; c < e.in; ++c) {
            for (Index u = 0; u < e.kernel; ++u) {
              for (Index v = 0; v < e.kernel; ++v) {
                r.w(o, c, i * e.stride + u, j * e.stride + v) += k * e.w(m, c, u, v);
              }
            }
          }
        }
      }
    }
    r.bias[static_cast<std::size_t>(o)] = bias;
  }
  return r;
}

// Places `e` into a larger footprint (kernel, padding) without changing its map.
Equivalent widen(const Equivalent& e, Index kernel, Index padding) {
  if (kernel == e.kernel && padding == e.padding) return e;
  Equivalent r = e;
  r.kernel = kernel;
  r.padding = padding;
  r.weight.assign(static_cast<std::size_t>(r.out * r.in * kernel * kernel), 0.0);
  const Index off = padding - e.padding;
  for (Index o = 0; o < e.out; ++o) {
    for (Index c = 0; c < e.in; ++c) {
      for (Index u = 0; u < e.kernel; ++u) {
        for (Index v = 0; v < e.kernel; ++v) r.w(o, c, u + off, v + off) = e.w(o, c, u, v);
      }
    }
  }
  return r;
}

std::pair<Index, Index> common_footprint(const LayerSpec& n, const std::vector<const Equivalent*>& parts) {
  Index padding = 0, end = 0;
  const Index offset = parts.front()->kernel - 2 * parts.front()->padding;
  for (const Equivalent* p : parts) {
    if (p->stride != parts.front()->stride) {
      throw AnalysisError("node '" + n.id + "' merges branches with different strides");
    }
    if (p->kernel - 2 * p->padding != offset) {
      throw AnalysisError("node '" + n.id + "' merges branches whose footprints are not centred alike");
    }
    padding = std::max(padding, p->padding);
    end = std::max(end, p->kernel - p->padding);
  }
  return {end + padding, padding};
}

}  // namespace

ConvParams<float> collapse_linear_block(const BlockSpec& block, const ParamStore& params) {
  Index in_channels = 0;
  for (const auto& n : block.nodes) {
    if (n.kind != LayerKind::conv && n.kind != LayerKind::concat && n.kind != LayerKind::add) {
      throw AnalysisError("node '" + n.id + "' (" + std::string(to_string(n.kind)) +
                          ") is nonlinear or not a convolution; only conv/concat/add blocks collapse exactly");
    }
    if (n.kind == LayerKind::conv &&
        std::find(n.inputs.begin(), n.inputs.end(), std::string(kBlockInput)) != n.inputs.end()) {
      in_channels = n.in_channels;
    }
  }
  if (in_channels == 0) throw AnalysisError("block '" + block.name + "' has no convolution on its input");

  std::unordered_map<std::string, Equivalent> eq;
  const Equivalent entry = Equivalent::identity(in_channels);
  auto lookup = [&](const std::string& ref) -> const Equivalent& {
    return ref == kBlockInput ? entry : eq.at(ref);
  };
  for (const auto& n : block.nodes) {
    if (n.kind == LayerKind::conv) {
      eq[n.id] = compose_conv(lookup(n.inputs.front()), n, params);
      continue;
    }
    std::vector<const Equivalent*> parts;
    for (const auto& ref : n.inputs) parts.push_back(&lookup(ref));
    const auto [kernel, padding] = common_footprint(n, parts);
    Equivalent merged;
    merged.in = in_channels;
    merged.kernel = kernel;
    merged.padding = padding;
    merged.stride = parts.front()->stride;
    if (n.kind == LayerKind::concat) {
      for (const Equivalent* p : parts) {
        const Equivalent w = widen(*p, kernel, padding);
        merged.out += w.out;
        merged.weight.insert(merged.weight.end(), w.weight.begin(), w.weight.end());
        merged.bias.insert(merged.bias.end(), w.bias.begin(), w.bias.end());
      }
    } else {
      for (const Equivalent* p : parts) {
        if (p->out != parts.front()->out) {
          throw AnalysisError("node '" + n.id + "' adds branches with " + std::to_string(parts.front()->out) +
                              " and " + std::to_string(p->out) +
                              " channels; add merges need an equal number of channels");
        }
      }
      merged = widen(*parts.front(), kernel, padding);
      for (std::size_t i = 1; i < parts.size(); ++i) {
        const Equivalent w = widen(*parts[i], kernel, padding);
        for (std::size_t k = 0; k < merged.weight.size(); ++k) merged.weight[k] += w.weight[k];
        for (std::size_t k = 0; k < merged.bias.size(); ++k) merged.bias[k] += w.bias[k];
      }
    }
    eq[n.id] = std::move(merged);
  }
  const Equivalent& e = eq.at(block.exit().id);
  ConvParams<float> out;
  out.weight = TensorF({e.out, e.in, e.kernel, e.kernel});
  for (std::size_t i = 0; i < e.weight.size(); ++i) out.weight[static_cast<Index>(i)] = static_cast<float>(e.weight[i]);
  out.bias = TensorF({e.out});
  for (Index o = 0; o < e.out; ++o) out.bias[o] = static_cast<float>(e.bias[static_cast<std::size_t>(o)]);
  out.stride = e.stride;
  out.padding = e.padding;
  return out;
}

int minimum_depth(Index stride) {
  if (stride < 1) throw AnalysisError("stride product must be positive");
  int depth = 0;
  while (stride % 2 == 0) {
    stride /= 2;
    ++depth;
  }
  if (stride > 1) ++depth;
  return std::max(depth, 1);
}

namespace {

std::vector<Index> stride_factors(Index stride) {
  std::vector<Index> f;
  while (stride % 2 == 0) {
    f.push_back(2);
    stride /= 2;
  }
  if (stride > 1) f.push_back(stride);
  return f;
}

ReceptiveField plan_field(const std::vector<SimulatorLayer>& layers) {
  ReceptiveField f;
  for (const auto& l : layers) f = compose(f, window_field(l.kernel, l.stride, l.padding));
  return f;
}

bool covers(const ReceptiveField& have, const ReceptiveField& want) {
  return have.height >= want.height && have.width >= want.width;
}

// Kernels for `depth` layers: strided layers first with the smallest odd
// kernel >= their stride, then 3x3 layers until covered, 1x1 after that;
// if still short, widen kernels from the last layer backwards.
std::vector<SimulatorLayer> layout(const ReceptiveField& target, int depth) {
  const auto factors = stride_factors(target.stride);
  std::vector<SimulatorLayer> layers(static_cast<std::size_t>(depth));
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Index s = i < factors.size() ? factors[i] : 1;
    layers[i].stride = s;
    layers[i].kernel = s == 1 ? 1 : (s % 2 == 1 ? s : s + 1);
  }
  for (auto& l : layers) {
    if (covers(plan_field(layers), target)) break;
    l.kernel = std::max<Index>(l.kernel, 3);
  }
  for (std::size_t i = layers.size(); !covers(plan_field(layers), target);) {
    i = i == 0 ? layers.size() - 1 : i - 1;
    layers[i].kernel += 2;
  }
  for (auto& l : layers) l.padding = (l.kernel - 1) / 2;
  return layers;
}

}  // namespace

SimulatorPlan plan_simulator(const PlanRequest& request) {
  const ReceptiveField& target = request.target;
  const int min_depth = minimum_depth(target.stride);
  int depth = 0;
  if (request.depth) {
    depth = *request.depth;
    if (depth < min_depth) {
      throw AnalysisError("depth " + std::to_string(depth) + " cannot reach stride product " +
                          std::to_string(target.stride) + "; minimum feasible depth is " +
                          std::to_string(min_depth));
    }
  } else if (!request.channels.empty()) {
    depth = static_cast<int>(request.channels.size());
  } else {
    // Smallest depth whose stacked 3x3 layers cover the target.
    depth = min_depth;
    while (true) {
      auto layers = layout(target, depth);
      const bool only_small = std::all_of(layers.begin(), layers.end(), [](const SimulatorLayer& l) {
        return l.kernel <= std::max<Index>(3, l.stride + 1);
      });
      if (only_small) break;
      ++depth;
    }
  }
  SimulatorPlan plan;
  plan.target = request.target_name;
  plan.in_channels = request.in_channels;
  plan.layers = layout(target, depth);
  if (!request.channels.empty()) {
    if (static_cast<int>(request.channels.size()) != depth) {
      throw AnalysisError("plan for '" + request.target_name + "' has " + std::to_string(depth) +
                          " layers but " + std::to_string(request.channels.size()) + " channel widths");
    }
    for (std::size_t i = 0; i < plan.layers.size(); ++i) plan.layers[i].out_channels = request.channels[i];
  } else {
    const double span = static_cast<double>(request.out_channels - request.in_channels);
    for (int i = 0; i < depth; ++i) {
      const double w = static_cast<double>(request.in_channels) + span * (i + 1) / depth;
      plan.layers[static_cast<std::size_t>(i)].out_channels = std::max<Index>(1, static_cast<Index>(std::ceil(w - 1e-9)));
    }
  }
  std::ostringstream why;
  why << "target footprint " << target.describe() << "; " << depth << " layer(s) cover "
      << plan_field(plan.layers).describe();
  plan.rationale = why.str();
  check_plan(plan, target, request.out_channels);
  return plan;
}

SimulatorPlan plan_simulator(const ModelGraph& m, std::string_view first, std::string_view last,
                             std::optional<int> depth, std::vector<Index> channels) {
  const std::size_t lo = m.block_index(first), hi = m.block_index(last);
  PlanRequest req;
  req.target = receptive_field(m, first, last);
  req.in_channels = block_input_shape(m, lo)[0];
  req.out_channels = block_input_shape(m, hi + 1)[0];
  req.depth = depth;
  req.channels = std::move(channels);
  req.target_name = first == last ? std::string(first) : std::string(first) + ".." + std::string(last);
  return plan_simulator(req);
}

void check_plan(const SimulatorPlan& plan, const ReceptiveField& target, Index out_channels) {
  if (plan.layers.empty()) throw AnalysisError("simulator plan has no layers");
  const ReceptiveField have = plan_field(plan.layers);
  if (!covers(have, target)) {
    throw AnalysisError("plan footprint " + have.describe() + " does not cover target " + target.describe());
  }
  if (have.stride != target.stride) {
    throw AnalysisError("plan stride " + std::to_string(have.stride) + " differs from target stride " +
                        std::to_string(target.stride));
  }
  if (plan.out_channels() != out_channels) {
    throw AnalysisError("plan ends with " + std::to_string(plan.out_channels()) + " channels, target has " +
                        std::to_string(out_channels));
  }
  for (const auto& l : plan.layers) {
    if (l.kernel < 1 || l.kernel % 2 == 0 || l.out_channels < 1) {
      throw AnalysisError("plan layers need odd kernels and positive widths");
    }
  }
}

BlockSpec plan_to_block(const SimulatorPlan& plan, const std::string& name) {
  BlockSpec b;
  b.name = name;
  std::string prev(kBlockInput);
  Index channels = plan.in_channels;
  for (std::size_t i = 0; i < plan.layers.size(); ++i) {
    const SimulatorLayer& l = plan.layers[i];
    const std::string tag = name + "_" + std::to_string(i + 1);
    LayerSpec c;
    c.id = tag + "conv";
    c.kind = LayerKind::conv;
    c.inputs = {prev};
    c.in_channels = channels;
    c.out_channels = l.out_channels;
    c.kernel = l.kernel;
    c.stride = l.stride;
    c.padding = l.padding;
    prev = c.id;
    b.nodes.push_back(std::move(c));
    if (l.batchnorm) {
      LayerSpec n;
      n.id = tag + "bn";
      n.kind = LayerKind::batchnorm;
      n.inputs = {prev};
      n.in_channels = n.out_channels = l.out_channels;
      prev = n.id;
      b.nodes.push_back(std::move(n));
    }
    if (l.relu) {
      LayerSpec n;
      n.id = tag + "relu";
      n.kind = LayerKind::relu;
      n.inputs = {prev};
      prev = n.id;
      b.nodes.push_back(std::move(n));
    }
    channels = l.out_channels;
  }
  return b;
}

}  // namespace deepobf
