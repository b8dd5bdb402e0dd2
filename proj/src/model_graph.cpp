#include "deepobf/model_graph.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>
#include <unordered_set>

namespace deepobf {
namespace {

struct KindName {
  LayerKind kind;
  std::string_view name;
};

constexpr KindName kKindNames[] = {
    {LayerKind::conv, "conv"},
    {LayerKind::batchnorm, "batchnorm"},
    {LayerKind::relu, "relu"},
    {LayerKind::maxpool, "maxpool"},
    {LayerKind::avgpool, "avgpool"},
    {LayerKind::global_avgpool, "global_avgpool"},
    {LayerKind::linear, "linear"},
    {LayerKind::flatten, "flatten"},
    {LayerKind::concat, "concat"},
    {LayerKind::add, "add"},
};

bool valid_id(std::string_view id) {
  if (id.empty()) return false;
  return std::all_of(id.begin(), id.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-';
  });
}

std::string node_context(const BlockSpec& b, const LayerSpec& n) {
  return "block '" + b.name + "', node '" + n.id + "'";
}

}  // namespace

std::string_view to_string(LayerKind kind) {
  for (const auto& kn : kKindNames) {
    if (kn.kind == kind) return kn.name;
  }
  return "?";
}

LayerKind parse_layer_kind(std::string_view name) {
  for (const auto& kn : kKindNames) {
    if (kn.name == name) return kn.kind;
  }
  throw GraphError("unknown layer kind '" + std::string(name) + "'");
}

bool is_parameterized(LayerKind kind) {
  return kind == LayerKind::conv || kind == LayerKind::batchnorm || kind == LayerKind::linear;
}

std::vector<std::string> param_fields(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv:
    case LayerKind::linear:
      return {"weight", "bias"};
    case LayerKind::batchnorm:
      return {"gamma", "beta", "running_mean", "running_var"};
    default:
      return {};
  }
}

std::vector<std::string> trainable_fields(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv:
    case LayerKind::linear:
      return {"weight", "bias"};
    case LayerKind::batchnorm:
      return {"gamma", "beta"};
    default:
      return {};
  }
}

Shape param_shape(const LayerSpec& node, std::string_view field) {
  switch (node.kind) {
    case LayerKind::conv:
      if (field == "weight") return {node.out_channels, node.in_channels, node.kernel, node.kernel};
      if (field == "bias") return {node.out_channels};
      break;
    case LayerKind::linear:
      if (field == "weight") return {node.out_channels, node.in_channels};
      if (field == "bias") return {node.out_channels};
      break;
    case LayerKind::batchnorm:
      return {node.in_channels};
    default:
      break;
  }
  throw GraphError("node '" + node.id + "' has no parameter '" + std::string(field) + "'");
}

std::size_t ModelGraph::block_index(std::string_view name) const {
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    if (blocks[i].name == name) return i;
  }
  throw GraphError("unknown block '" + std::string(name) + "'");
}

const LayerSpec* ModelGraph::find_node(std::string_view id) const {
  for (const auto& b : blocks) {
    for (const auto& n : b.nodes) {
      if (n.id == id) return &n;
    }
  }
  return nullptr;
}

std::string BlockInterface::describe() const {
  return "in " + shape_string(input) + " -> out " + shape_string(output) + ", downsampling " +
         std::to_string(downsampling);
}

Shape infer_node_output(const LayerSpec& node, const std::vector<Shape>& inputs) {
  auto fail = [&](const std::string& why) {
    throw ShapeError("node '" + node.id + "' (" + std::string(to_string(node.kind)) + "): " + why);
  };
  const std::size_t arity = inputs.size();
  if (node.kind == LayerKind::concat || node.kind == LayerKind::add) {
    if (arity < 2) fail("needs at least two inputs");
  } else if (arity != 1) {
    fail("needs exactly one input, got " + std::to_string(arity));
  }
  const Shape& in = inputs.front();
  switch (node.kind) {
    case LayerKind::conv: {
      if (in.size() != 3) fail("expects an image input, got " + shape_string(in));
      if (in[0] != node.in_channels) {
        fail("declares " + std::to_string(node.in_channels) + " input channels but receives " +
             std::to_string(in[0]));
      }
      if (node.out_channels < 1 || node.kernel < 1) fail("needs positive channels and kernel");
      return {node.out_channels, window_output_extent(in[1], node.kernel, node.stride, node.padding),
              window_output_extent(in[2], node.kernel, node.stride, node.padding)};
    }
    case LayerKind::batchnorm:
      if (in.empty() || in[0] != node.in_channels) {
        fail("declares " + std::to_string(node.in_channels) + " channels but receives " +
             shape_string(in));
      }
      return in;
    case LayerKind::relu:
      return in;
    case LayerKind::maxpool:
    case LayerKind::avgpool:
      if (in.size() != 3) fail("expects an image input, got " + shape_string(in));
      return {in[0], window_output_extent(in[1], node.kernel, node.stride, node.padding),
              window_output_extent(in[2], node.kernel, node.stride, node.padding)};
    case LayerKind::global_avgpool:
      if (in.size() != 3) fail("expects an image input, got " + shape_string(in));
      return {in[0]};
    case LayerKind::flatten:
      return {numel(in)};
    case LayerKind::linear:
      if (in.size() != 1 || in[0] != node.in_channels) {
        fail("declares " + std::to_string(node.in_channels) + " features but receives " +
             shape_string(in));
      }
      if (node.out_channels < 1) fail("needs at least one output");
      return {node.out_channels};
    case LayerKind::concat: {
      Shape out = in;
      for (std::size_t i = 1; i < arity; ++i) {
        const Shape& s = inputs[i];
        if (s.size() != in.size() || !std::equal(s.begin() + 1, s.end(), in.begin() + 1)) {
          fail("spatial extents differ: " + shape_string(in) + " vs " + shape_string(s));
        }
        out[0] += s[0];
      }
      return out;
    }
    case LayerKind::add:
      for (std::size_t i = 1; i < arity; ++i) {
        if (inputs[i] != in) fail("extents differ: " + shape_string(in) + " vs " + shape_string(inputs[i]));
      }
      return in;
  }
  fail("unsupported kind");
  return {};
}

namespace {

// Per-block structural checks; returns producer indices per node (-1 = entry).
std::vector<std::vector<int>> resolve_block(const BlockSpec& block) {
  if (block.nodes.empty()) throw GraphError("block '" + block.name + "' has no nodes");
  std::unordered_map<std::string, int> index;
  std::vector<std::vector<int>> producers;
  std::vector<bool> consumed(block.nodes.size(), false);
  bool reads_entry = false;
  for (std::size_t i = 0; i < block.nodes.size(); ++i) {
    const LayerSpec& n = block.nodes[i];
    if (!valid_id(n.id)) throw GraphError(node_context(block, n) + ": invalid node id");
    const std::size_t arity = n.inputs.size();
    const bool merge = n.kind == LayerKind::concat || n.kind == LayerKind::add;
    if (merge ? arity < 2 : arity != 1) {
      throw GraphError(node_context(block, n) + ": " + std::string(to_string(n.kind)) +
                       (merge ? " needs at least two inputs" : " needs exactly one input"));
    }
    std::vector<int> p;
    for (const auto& ref : n.inputs) {
      if (ref == kBlockInput) {
        p.push_back(-1);
        reads_entry = true;
        continue;
      }
      auto it = index.find(ref);
      if (it == index.end()) {
        throw GraphError(node_context(block, n) + ": input '" + ref +
                         "' is not an earlier node of the block (dangling or cyclic reference)");
      }
      consumed[static_cast<std::size_t>(it->second)] = true;
      p.push_back(it->second);
    }
    if (!index.emplace(n.id, static_cast<int>(i)).second) {
      throw GraphError(node_context(block, n) + ": duplicate node id");
    }
    producers.push_back(std::move(p));
  }
  if (!reads_entry) throw GraphError("block '" + block.name + "' never reads its input");
  for (std::size_t i = 0; i + 1 < block.nodes.size(); ++i) {
    if (!consumed[i]) {
      throw GraphError(node_context(block, block.nodes[i]) +
                       ": output unused; a block must have a single exit");
    }
  }
  return producers;
}

}  // namespace

Shape infer_block_output(const BlockSpec& block, const Shape& input) {
  const auto producers = resolve_block(block);
  std::vector<Shape> shapes;
  for (std::size_t i = 0; i < block.nodes.size(); ++i) {
    std::vector<Shape> ins;
    for (int p : producers[i]) ins.push_back(p < 0 ? input : shapes[static_cast<std::size_t>(p)]);
    shapes.push_back(infer_node_output(block.nodes[i], ins));
  }
  return shapes.back();
}

Index block_downsampling(const BlockSpec& block) {
  const auto producers = resolve_block(block);
  std::vector<Index> stride;
  for (std::size_t i = 0; i < block.nodes.size(); ++i) {
    const LayerSpec& n = block.nodes[i];
    Index s = 0;
    for (int p : producers[i]) s = std::max(s, p < 0 ? Index{1} : stride[static_cast<std::size_t>(p)]);
    if (n.kind == LayerKind::conv || n.kind == LayerKind::maxpool || n.kind == LayerKind::avgpool) {
      s *= n.stride;
    }
    stride.push_back(s);
  }
  return stride.back();
}

Shape block_input_shape(const ModelGraph& m, std::size_t block) {
  Shape s = m.input.shape();
  for (std::size_t i = 0; i < block; ++i) s = infer_block_output(m.blocks[i], s);
  return s;
}

BlockInterface block_interface(const ModelGraph& m, std::string_view block_name) {
  const std::size_t i = m.block_index(block_name);
  BlockInterface bi;
  bi.input = block_input_shape(m, i);
  bi.output = infer_block_output(m.blocks[i], bi.input);
  bi.downsampling = block_downsampling(m.blocks[i]);
  return bi;
}

void validate(const ModelGraph& m) {
  if (m.blocks.empty()) throw GraphError("model has no blocks");
  if (m.classes < 1) throw GraphError("model needs at least one class");
  if (m.input.channels < 1 || m.input.height < 1 || m.input.width < 1) {
    throw GraphError("model input extent must be positive");
  }
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    const bool last = i + 1 == m.blocks.size();
    if ((m.blocks[i].role == BlockRole::classifier) != last) {
      throw GraphError("exactly one classifier block is required, positioned last (block '" +
                       m.blocks[i].name + "')");
    }
    if (!valid_id(m.blocks[i].name)) throw GraphError("invalid block name '" + m.blocks[i].name + "'");
  }
  std::unordered_set<std::string> ids, names;
  std::unordered_set<std::string> expected_keys;
  Shape s = m.input.shape();
  for (const auto& b : m.blocks) {
    if (!names.insert(b.name).second) throw GraphError("duplicate block name '" + b.name + "'");
    for (const auto& n : b.nodes) {
      if (!ids.insert(n.id).second) throw GraphError("duplicate node id '" + n.id + "'");
      for (const auto& f : param_fields(n.kind)) {
        const std::string key = param_key(n.id, f);
        auto it = m.params.find(key);
        if (it == m.params.end()) throw GraphError("missing parameter '" + key + "'");
        if (it->second.shape() != param_shape(n, f)) {
          throw ShapeError("parameter '" + key + "' has extent " + shape_string(it->second.shape()) +
                           ", node expects " + shape_string(param_shape(n, f)));
        }
        expected_keys.insert(key);
      }
    }
    s = infer_block_output(b, s);
    if (b.role == BlockRole::feature && s.size() != 3) {
      throw ShapeError("feature block '" + b.name + "' must output an image, got " + shape_string(s));
    }
  }
  if (s != Shape{m.classes}) {
    throw ShapeError("classifier outputs " + shape_string(s) + ", model declares " +
                     std::to_string(m.classes) + " classes");
  }
  for (const auto& [key, t] : m.params) {
    if (!expected_keys.count(key)) throw GraphError("parameter '" + key + "' belongs to no node");
  }
  for (const auto& id : m.frozen) {
    const LayerSpec* n = m.find_node(id);
    if (!n || !is_parameterized(n->kind)) {
      throw GraphError("frozen id '" + id + "' is not a parameterized node");
    }
  }
}

ParamStore init_block_params(const BlockSpec& block, Rng& rng) {
  ParamStore out;
  for (const auto& n : block.nodes) {
    switch (n.kind) {
      case LayerKind::conv:
      case LayerKind::linear: {
        const Index fan_in = n.kind == LayerKind::conv ? n.in_channels * n.kernel * n.kernel
                                                       : n.in_channels;
        const double bound = n.kind == LayerKind::conv ? std::sqrt(6.0 / static_cast<double>(fan_in))
                                                       : 1.0 / std::sqrt(static_cast<double>(fan_in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        TensorF w(param_shape(n, "weight"));
        for (Index i = 0; i < w.size(); ++i) w[i] = static_cast<float>(dist(rng));
        out[param_key(n.id, "weight")] = std::move(w);
        out[param_key(n.id, "bias")] = TensorF(param_shape(n, "bias"));
        break;
      }
      case LayerKind::batchnorm: {
        const auto bn = BatchNormParams<float>::identity(n.in_channels);
        out[param_key(n.id, "gamma")] = bn.gamma;
        out[param_key(n.id, "beta")] = bn.beta;
        out[param_key(n.id, "running_mean")] = bn.running_mean;
        out[param_key(n.id, "running_var")] = bn.running_var;
        break;
      }
      default:
        break;
    }
  }
  return out;
}

std::vector<std::string> block_node_ids(const BlockSpec& block) {
  std::vector<std::string> ids;
  for (const auto& n : block.nodes) ids.push_back(n.id);
  return ids;
}

ModelGraph replace_blocks(const ModelGraph& m, std::string_view first, std::string_view last,
                          BlockSpec replacement, ParamStore replacement_params) {
  const std::size_t lo = m.block_index(first), hi = m.block_index(last);
  if (lo > hi) throw GraphError("block range '" + std::string(first) + "'..'" + std::string(last) + "' is reversed");
  if (hi + 1 == m.blocks.size()) throw GraphError("the classifier block cannot be replaced");

  BlockInterface expected;
  expected.input = block_input_shape(m, lo);
  expected.output = expected.input;
  expected.downsampling = 1;
  for (std::size_t i = lo; i <= hi; ++i) {
    expected.output = infer_block_output(m.blocks[i], expected.output);
    expected.downsampling *= block_downsampling(m.blocks[i]);
  }
  BlockInterface actual;
  actual.input = expected.input;
  try {
    actual.output = infer_block_output(replacement, expected.input);
    actual.downsampling = block_downsampling(replacement);
  } catch (const ShapeError& e) {
    throw ShapeError("replacement block '" + replacement.name + "' does not accept the interface (" +
                     expected.describe() + "): " + e.what());
  }
  if (!(actual == expected)) {
    throw ShapeError("interface mismatch replacing '" + std::string(first) + "'..'" +
                     std::string(last) + "': expected " + std::to_string(expected.output[0]) +
                     " output channels (" + expected.describe() + "), replacement '" +
                     replacement.name + "' has " + std::to_string(actual.output[0]) +
                     " output channels (" + actual.describe() + ")");
  }

  ModelGraph out;
  out.input = m.input;
  out.classes = m.classes;
  std::unordered_set<std::string> removed;
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    if (i < lo || i > hi) {
      out.blocks.push_back(m.blocks[i]);
      continue;
    }
    for (const auto& n : m.blocks[i].nodes) removed.insert(n.id);
    if (i == lo) out.blocks.push_back(replacement);
  }
  for (const auto& [key, t] : m.params) {
    if (!removed.count(key.substr(0, key.rfind('.')))) out.params.emplace(key, t);
  }
  for (auto& [key, t] : replacement_params) {
    if (!out.params.emplace(key, std::move(t)).second) {
      throw GraphError("replacement parameter '" + key + "' collides with an existing node");
    }
  }
  for (const auto& id : m.frozen) {
    if (!removed.count(id)) out.frozen.insert(id);
  }
  validate(out);
  return out;
}

ModelGraph replace_block(const ModelGraph& m, std::string_view block_name, BlockSpec replacement,
                         ParamStore replacement_params) {
  return replace_blocks(m, block_name, block_name, std::move(replacement),
                        std::move(replacement_params));
}

void freeze(ModelGraph& m, const std::vector<std::string>& node_ids) {
  for (const auto& id : node_ids) {
    const LayerSpec* n = m.find_node(id);
    if (!n) throw GraphError("cannot freeze unknown node '" + id + "'");
    if (is_parameterized(n->kind)) m.frozen.insert(id);
  }
}

void unfreeze(ModelGraph& m, const std::vector<std::string>& node_ids) {
  for (const auto& id : node_ids) {
    if (!m.find_node(id)) throw GraphError("cannot unfreeze unknown node '" + id + "'");
    m.frozen.erase(id);
  }
}

std::vector<std::string> parameterized_nodes(const ModelGraph& m) {
  std::vector<std::string> ids;
  for (const auto& b : m.blocks) {
    for (const auto& n : b.nodes) {
      if (is_parameterized(n.kind)) ids.push_back(n.id);
    }
  }
  return ids;
}

void freeze_all(ModelGraph& m) {
  for (auto& id : parameterized_nodes(m)) m.frozen.insert(id);
}

void unfreeze_all(ModelGraph& m) { m.frozen.clear(); }

Index param_count(const BlockSpec& block) {
  Index total = 0;
  for (const auto& n : block.nodes) {
    for (const auto& f : trainable_fields(n.kind)) total += numel(param_shape(n, f));
  }
  return total;
}

Index param_count(const ModelGraph& m) {
  Index total = 0;
  for (const auto& b : m.blocks) total += param_count(b);
  return total;
}

Index feature_conv_count(const ModelGraph& m) {
  Index count = 0;
  for (std::size_t i = 0; i < m.feature_block_count(); ++i) {
    for (const auto& n : m.blocks[i].nodes) count += n.kind == LayerKind::conv;
  }
  return count;
}

}  // namespace deepobf
