#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "deepobf/ops.hpp"
#include "deepobf/random.hpp"

namespace deepobf {

enum class LayerKind {
  conv,
  batchnorm,
  relu,
  maxpool,
  avgpool,
  global_avgpool,
  linear,
  flatten,
  concat,
  add,
};

std::string_view to_string(LayerKind kind);
LayerKind parse_layer_kind(std::string_view name);
bool is_parameterized(LayerKind kind);

/// Reference to the block's single entry tensor in LayerSpec::inputs.
inline constexpr std::string_view kBlockInput = "@in";

struct LayerSpec {
  std::string id;
  LayerKind kind = LayerKind::relu;
  std::vector<std::string> inputs;
  Index in_channels = 0;   // conv, linear (features), batchnorm
  Index out_channels = 0;  // conv, linear (classes), batchnorm
  Index kernel = 1;        // conv and pooling windows (square)
  Index stride = 1;
  Index padding = 0;

  bool operator==(const LayerSpec&) const = default;
};

enum class BlockRole { feature, classifier };

/// Single-entry, single-exit layer DAG. Nodes are listed in topological order
/// and the last node is the exit.
struct BlockSpec {
  std::string name;
  BlockRole role = BlockRole::feature;
  std::vector<LayerSpec> nodes;

  const LayerSpec& exit() const { return nodes.back(); }
  bool operator==(const BlockSpec&) const = default;
};

struct ImageExtent {
  Index channels = 3;
  Index height = 32;
  Index width = 32;

  Shape shape() const { return {channels, height, width}; }
  bool operator==(const ImageExtent&) const = default;
};

/// Parameter arrays keyed "<node>.<field>" (weight, bias, gamma, beta,
/// running_mean, running_var).
using ParamStore = std::map<std::string, TensorF>;

struct ModelGraph {
  ImageExtent input;
  Index classes = 0;
  std::vector<BlockSpec> blocks;
  ParamStore params;
  std::set<std::string> frozen;  // node ids

  std::size_t block_index(std::string_view name) const;
  const BlockSpec& block(std::string_view name) const { return blocks[block_index(name)]; }
  const LayerSpec* find_node(std::string_view id) const;
  const BlockSpec& classifier() const { return blocks.back(); }
  std::size_t feature_block_count() const { return blocks.size() - 1; }
};

/// Extent-level contract of a block as seen from its neighbours.
struct BlockInterface {
  Shape input;   // per-sample extent, batch omitted
  Shape output;
  Index downsampling = 1;  // product of strides along the block

  std::string describe() const;
  bool operator==(const BlockInterface&) const = default;
};

/// Parameter field names of a node, trainable ones first.
std::vector<std::string> param_fields(LayerKind kind);
std::vector<std::string> trainable_fields(LayerKind kind);
inline std::string param_key(std::string_view node, std::string_view field) {
  return std::string(node) + "." + std::string(field);
}
Shape param_shape(const LayerSpec& node, std::string_view field);

/// Per-sample output extent of one node given its input extents.
Shape infer_node_output(const LayerSpec& node, const std::vector<Shape>& inputs);
/// Per-sample output extent of a block; validates the DAG on the way.
Shape infer_block_output(const BlockSpec& block, const Shape& input);
/// Product of strides along the block (parallel branches must agree).
Index block_downsampling(const BlockSpec& block);

/// Structural and parameter validation: acyclic single-entry/single-exit
/// blocks, channel closure, exactly one trailing classifier, parameter
/// extents, frozen set membership. Throws GraphError or ShapeError.
void validate(const ModelGraph& m);

BlockInterface block_interface(const ModelGraph& m, std::string_view block_name);
Shape block_input_shape(const ModelGraph& m, std::size_t block);

/// He-style uniform initialisation of every parameter a block needs.
ParamStore init_block_params(const BlockSpec& block, Rng& rng);

/// Splice `replacement` in place of the contiguous blocks [first, last]; all
/// other parameters are carried over untouched. The replacement must present
/// the same interface (channels, downsampling, output extent).
ModelGraph replace_blocks(const ModelGraph& m, std::string_view first, std::string_view last,
                          BlockSpec replacement, ParamStore replacement_params);
ModelGraph replace_block(const ModelGraph& m, std::string_view block_name, BlockSpec replacement,
                         ParamStore replacement_params);

void freeze(ModelGraph& m, const std::vector<std::string>& node_ids);
void unfreeze(ModelGraph& m, const std::vector<std::string>& node_ids);
void freeze_all(ModelGraph& m);
void unfreeze_all(ModelGraph& m);
std::vector<std::string> parameterized_nodes(const ModelGraph& m);
std::vector<std::string> block_node_ids(const BlockSpec& block);

/// Trainable scalar count (running statistics are buffers, not parameters).
Index param_count(const ModelGraph& m);
Index param_count(const BlockSpec& block);
/// 32-bit storage: 4 bytes per trainable scalar.
inline Index param_bytes(const ModelGraph& m) { return 4 * param_count(m); }

/// Number of conv nodes across the feature blocks.
Index feature_conv_count(const ModelGraph& m);

}  // namespace deepobf
