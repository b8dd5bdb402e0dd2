#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "deepobf/model_graph.hpp"

namespace deepobf {

// Block builders. Node ids are "<block name>_<suffix>".

/// Two parallel branches (1x1 conv, 3x3 conv) concatenated, then BN and ReLU.
/// `out_channels` is split evenly between the branches.
BlockSpec inception_block(const std::string& name, Index in_channels, Index out_channels);

/// conv3x3-BN-ReLU-conv3x3-BN plus identity (or 1x1 projection when the
/// channel count changes), then ReLU.
BlockSpec residual_block(const std::string& name, Index in_channels, Index out_channels);

/// conv-BN-ReLU with "same" padding.
BlockSpec conv_block(const std::string& name, Index in_channels, Index out_channels, Index kernel,
                     Index stride);

/// Two stacked 3x3 convolutions with no nonlinearity between them (the first
/// padded, the second not), collapsible to a single 5x5 convolution.
BlockSpec linear_pair_block(const std::string& name, Index in_channels, Index out_channels);

BlockSpec maxpool_block(const std::string& name, Index kernel);
BlockSpec avgpool_block(const std::string& name, Index kernel);

/// Global average pool followed by one linear layer.
BlockSpec classifier_block(const std::string& name, Index features, Index classes);

/// Declarative block list used by configs: "incep:C", "res:C", "conv:C:K:S",
/// "lin2:C", "maxpool:K", "avgpool:K". Names are b1, b2, ...
ModelGraph build_model(const ImageExtent& input, Index classes,
                       const std::vector<std::string>& block_descriptors, std::uint64_t seed);

/// Reference teacher: three inception blocks 3->16->32->64 on 3x16x16, a 2x2
/// max-pool after the second, global average pool, linear head to 4 classes.
/// Blocks are b1, b2, b3 (pool), b4; classifier "head".
ModelGraph mini_inception_teacher(std::uint64_t seed, Index classes = 4);

}  // namespace deepobf
