#pragma once

#include <optional>
#include <string>
#include <vector>

#include "deepobf/model_graph.hpp"

namespace deepobf {

/// Input footprint of one output pixel, relative to the block input.
///
/// Output pixel (oy, ox) depends on input rows [oy*stride - padding,
/// oy*stride - padding + height - 1], and likewise for columns.
struct ReceptiveField {
  Index height = 1;
  Index width = 1;
  Index stride = 1;
  Index padding = 0;

  bool operator==(const ReceptiveField&) const = default;
  std::string describe() const;
};

/// Sequential composition: `next` applied to the output of `first`.
ReceptiveField compose(const ReceptiveField& first, const ReceptiveField& next);
/// Footprint of a single window op (conv or pooling).
inline ReceptiveField window_field(Index kernel, Index stride, Index padding) {
  return {kernel, kernel, stride, padding};
}

/// Receptive field of a block. Conv and pooling windows compose as
/// h <- h + (k - 1) * s_cum; batch-norm and ReLU are transparent; concat/add
/// merges take the bounding box of their branches (the elementwise max when
/// branches are centred). Throws AnalysisError on flatten/linear/global pool.
ReceptiveField receptive_field(const BlockSpec& block);
/// Receptive field of consecutive blocks of a model, first..last inclusive.
ReceptiveField receptive_field(const ModelGraph& m, std::string_view first, std::string_view last);

/// Replaces a purely linear block (conv, concat, add only) with one
/// convolution that computes the same map. Sequential pairs fold kernels and
/// biases; concat stacks output channels; add sums aligned kernels. Smaller
/// kernels are zero-padded into the common footprint.
///
/// Exactness needs zero padding to act on the block input only: a padded
/// conv that reads an intermediate map is rejected unless everything upstream
/// of it is a bias-free 1x1 map.
ConvParams<float> collapse_linear_block(const BlockSpec& block, const ParamStore& params);

struct SimulatorLayer {
  Index kernel = 3;
  Index stride = 1;
  Index padding = 1;
  Index out_channels = 1;
  bool batchnorm = true;
  bool relu = true;

  bool operator==(const SimulatorLayer&) const = default;
};

struct SimulatorPlan {
  std::string target;  // block (or "first..last") being simulated
  Index in_channels = 1;
  std::vector<SimulatorLayer> layers;
  std::string rationale;

  Index out_channels() const { return layers.back().out_channels; }
};

struct PlanRequest {
  ReceptiveField target;
  Index in_channels = 1;
  Index out_channels = 1;
  std::optional<int> depth;
  /// Explicit per-layer widths; the last must equal out_channels.
  std::vector<Index> channels;
  std::string target_name;
};

/// Sequential conv plan whose composed footprint covers the target and whose
/// stride product equals the target's. Strided layers come first; kernels
/// default to 3x3 until the footprint is covered and 1x1 afterwards; widths
/// interpolate linearly (rounded up) from input to output channels. BN and
/// ReLU follow every conv.
SimulatorPlan plan_simulator(const PlanRequest& request);
/// Plan for blocks first..last of a model.
SimulatorPlan plan_simulator(const ModelGraph& m, std::string_view first, std::string_view last,
                             std::optional<int> depth, std::vector<Index> channels = {});

/// Minimum number of layers that can realise a stride product (2 per layer,
/// odd remainder in one layer).
int minimum_depth(Index stride);

/// Materialises a plan as a sequential block named `name`.
BlockSpec plan_to_block(const SimulatorPlan& plan, const std::string& name);

/// Checks the plan invariants against a target; throws AnalysisError.
void check_plan(const SimulatorPlan& plan, const ReceptiveField& target, Index out_channels);

}  // namespace deepobf
