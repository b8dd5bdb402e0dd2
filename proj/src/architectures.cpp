#include "deepobf/architectures.hpp"

#include <sstream>

namespace deepobf {
namespace {

LayerSpec conv(const std::string& id, const std::string& input, Index in, Index out, Index k, Index s,
               Index p) {
  LayerSpec n;
  n.id = id;
  n.kind = LayerKind::conv;
  n.inputs = {input};
  n.in_channels = in;
  n.out_channels = out;
  n.kernel = k;
  n.stride = s;
  n.padding = p;
  return n;
}

LayerSpec bn(const std::string& id, const std::string& input, Index ch) {
  LayerSpec n;
  n.id = id;
  n.kind = LayerKind::batchnorm;
  n.inputs = {input};
  n.in_channels = n.out_channels = ch;
  return n;
}

LayerSpec simple(const std::string& id, LayerKind kind, std::vector<std::string> inputs) {
  LayerSpec n;
  n.id = id;
  n.kind = kind;
  n.inputs = std::move(inputs);
  return n;
}

LayerSpec pool(const std::string& id, LayerKind kind, Index k) {
  LayerSpec n = simple(id, kind, {std::string(kBlockInput)});
  n.kernel = k;
  n.stride = k;
  return n;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  return out;
}

}  // namespace

BlockSpec inception_block(const std::string& name, Index in_channels, Index out_channels) {
  if (out_channels < 2 || out_channels % 2 != 0) {
    throw GraphError("inception block needs an even output channel count, got " + std::to_string(out_channels));
  }
  const Index half = out_channels / 2;
  const std::string in(kBlockInput);
  BlockSpec b;
  b.name = name;
  b.nodes = {
      conv(name + "_b1x1", in, in_channels, half, 1, 1, 0),
      conv(name + "_b3x3", in, in_channels, half, 3, 1, 1),
      simple(name + "_cat", LayerKind::concat, {name + "_b1x1", name + "_b3x3"}),
      bn(name + "_bn", name + "_cat", out_channels),
      simple(name + "_relu", LayerKind::relu, {name + "_bn"}),
  };
  return b;
}

BlockSpec residual_block(const std::string& name, Index in_channels, Index out_channels) {
  const std::string in(kBlockInput);
  BlockSpec b;
  b.name = name;
  b.nodes = {
      conv(name + "_c1", in, in_channels, out_channels, 3, 1, 1),
      bn(name + "_bn1", name + "_c1", out_channels),
      simple(name + "_r1", LayerKind::relu, {name + "_bn1"}),
      conv(name + "_c2", name + "_r1", out_channels, out_channels, 3, 1, 1),
      bn(name + "_bn2", name + "_c2", out_channels),
  };
  std::string skip = in;
  if (in_channels != out_channels) {
    b.nodes.push_back(conv(name + "_proj", in, in_channels, out_channels, 1, 1, 0));
    skip = name + "_proj";
  }
  b.nodes.push_back(simple(name + "_add", LayerKind::add, {name + "_bn2", skip}));
  b.nodes.push_back(simple(name + "_relu", LayerKind::relu, {name + "_add"}));
  return b;
}

BlockSpec conv_block(const std::string& name, Index in_channels, Index out_channels, Index kernel,
                     Index stride) {
  BlockSpec b;
  b.name = name;
  b.nodes = {
      conv(name + "_conv", std::string(kBlockInput), in_channels, out_channels, kernel, stride, (kernel - 1) / 2),
      bn(name + "_bn", name + "_conv", out_channels),
      simple(name + "_relu", LayerKind::relu, {name + "_bn"}),
  };
  return b;
}

BlockSpec linear_pair_block(const std::string& name, Index in_channels, Index out_channels) {
  BlockSpec b;
  b.name = name;
  b.nodes = {
      conv(name + "_c1", std::string(kBlockInput), in_channels, out_channels, 3, 1, 1),
      conv(name + "_c2", name + "_c1", out_channels, out_channels, 3, 1, 0),
  };
  return b;
}

BlockSpec maxpool_block(const std::string& name, Index kernel) {
  return {name, BlockRole::feature, {pool(name + "_pool", LayerKind::maxpool, kernel)}};
}

BlockSpec avgpool_block(const std::string& name, Index kernel) {
  return {name, BlockRole::feature, {pool(name + "_pool", LayerKind::avgpool, kernel)}};
}

BlockSpec classifier_block(const std::string& name, Index features, Index classes) {
  LayerSpec fc;
  fc.id = name + "_fc";
  fc.kind = LayerKind::linear;
  fc.inputs = {name + "_gap"};
  fc.in_channels = features;
  fc.out_channels = classes;
  return {name,
          BlockRole::classifier,
          {simple(name + "_gap", LayerKind::global_avgpool, {std::string(kBlockInput)}), fc}};
}

ModelGraph build_model(const ImageExtent& input, Index classes,
                       const std::vector<std::string>& block_descriptors, std::uint64_t seed) {
  ModelGraph m;
  m.input = input;
  m.classes = classes;
  Index channels = input.channels;
  int index = 0;
  for (const auto& desc : block_descriptors) {
    const auto parts = split(desc, ':');
    const std::string name = "b" + std::to_string(++index);
    auto arg = [&](std::size_t i) -> Index {
      if (i >= parts.size()) throw GraphError("block descriptor '" + desc + "' is missing arguments");
      try {
        return static_cast<Index>(std::stoll(parts[i]));
      } catch (const std::exception&) {
        throw GraphError("block descriptor '" + desc + "' has a non-integer argument");
      }
    };
    const std::string& kind = parts.empty() ? desc : parts[0];
    std::size_t arity = 0;
    BlockSpec b;
    if (kind == "incep") {
      b = inception_block(name, channels, arg(1));
      arity = 2;
    } else if (kind == "res") {
      b = residual_block(name, channels, arg(1));
      arity = 2;
    } else if (kind == "conv") {
      b = conv_block(name, channels, arg(1), arg(2), arg(3));
      arity = 4;
    } else if (kind == "lin2") {
      b = linear_pair_block(name, channels, arg(1));
      arity = 2;
    } else if (kind == "maxpool") {
      b = maxpool_block(name, arg(1));
      arity = 2;
    } else if (kind == "avgpool") {
      b = avgpool_block(name, arg(1));
      arity = 2;
    } else {
      throw GraphError("unknown block kind '" + kind + "' in '" + desc + "'");
    }
    if (parts.size() != arity) throw GraphError("block descriptor '" + desc + "' has the wrong argument count");
    if (b.nodes.front().kind == LayerKind::conv || kind == "res") channels = arg(1);
    m.blocks.push_back(std::move(b));
  }
  m.blocks.push_back(classifier_block("head", channels, classes));
  Rng rng = make_rng(seed, "init");
  for (const auto& b : m.blocks) m.params.merge(init_block_params(b, rng));
  validate(m);
  return m;
}

ModelGraph mini_inception_teacher(std::uint64_t seed, Index classes) {
  return build_model({3, 16, 16}, classes, {"incep:16", "incep:32", "maxpool:2", "incep:64"}, seed);
}

}  // namespace deepobf
