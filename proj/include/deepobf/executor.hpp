#pragma once

#include <optional>
#include <string_view>
#include <variant>
#include <vector>

#include "deepobf/model_graph.hpp"

namespace deepobf {

enum class Mode { train, infer };

/// Gradient injected at the exit of a block.
struct GradSeed {
  std::size_t block = 0;
  TensorF grad;
};

/// Forward/backward executor over a ModelGraph.
///
/// In train mode, batch-norm nodes outside the frozen set normalise with
/// batch statistics and update their running statistics; frozen batch-norm
/// nodes always use the stored statistics. Backward accumulates into the
/// grad() buffers of trainable parameters only, while still propagating
/// through frozen nodes.
class Tape {
 public:
  Tape(ModelGraph& model, Mode mode);

  /// Runs blocks 0..last_block inclusive (all blocks by default) and returns
  /// the exit tensor of the last executed block.
  const TensorF& run(const TensorF& x, std::optional<std::size_t> last_block = std::nullopt);

  const TensorF& block_output(std::size_t block) const;

  /// Reverse pass from the given seeds. Call run() first; seeds must lie in
  /// executed blocks.
  void backward(const std::vector<GradSeed>& seeds);

  /// Zeroes the gradient buffers of all trainable parameters.
  void zero_grad();
  /// Keys of all parameters that receive gradients.
  const std::vector<std::string>& trainable_keys() const { return trainable_keys_; }

 private:
  struct Node {
    const LayerSpec* spec = nullptr;
    std::vector<int> inputs;  // global node indices, -1 = model input
    std::size_t block = 0;
    bool frozen = false;
    bool needs_grad = false;
  };
  using Cache = std::variant<std::monostate, BatchNormCache<float>, MaxPoolCache>;

  const TensorF& input_of(int index) const;

  ModelGraph& model_;
  Mode mode_;
  std::vector<Node> nodes_;
  std::vector<int> block_exit_;
  std::vector<TensorF> outputs_;
  std::vector<Cache> caches_;
  std::vector<std::string> trainable_keys_;
  TensorF input_;
  int executed_ = 0;
};

/// Inference-mode logits. Never mutates the model.
TensorF forward(const ModelGraph& m, const TensorF& x);
/// Full forward in the requested mode; train mode updates running statistics.
TensorF forward(ModelGraph& m, const TensorF& x, Mode mode);
/// Inference-mode exit tensor of the named block (classifier not executed).
TensorF forward_to_block(const ModelGraph& m, const TensorF& x, std::string_view block_name);

}  // namespace deepobf
