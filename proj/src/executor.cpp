#include "deepobf/executor.hpp"

#include <unordered_map>

namespace deepobf {
namespace {

ConvParams<float> conv_params(const ParamStore& store, const LayerSpec& n) {
  ConvParams<float> p;
  p.weight = store.at(param_key(n.id, "weight"));
  p.bias = store.at(param_key(n.id, "bias"));
  p.stride = n.stride;
  p.padding = n.padding;
  return p;
}

LinearParams<float> linear_params(const ParamStore& store, const LayerSpec& n) {
  return {store.at(param_key(n.id, "weight")), store.at(param_key(n.id, "bias"))};
}

BatchNormParams<float> bn_params(const ParamStore& store, const LayerSpec& n) {
  BatchNormParams<float> p;
  p.gamma = store.at(param_key(n.id, "gamma"));
  p.beta = store.at(param_key(n.id, "beta"));
  p.running_mean = store.at(param_key(n.id, "running_mean"));
  p.running_var = store.at(param_key(n.id, "running_var"));
  return p;
}

void accumulate(ParamStore& store, const std::string& key, const TensorF& g) {
  store.at(key).grad() += g.values();
}

}  // namespace

Tape::Tape(ModelGraph& model, Mode mode) : model_(model), mode_(mode) {
  validate(model_);
  for (std::size_t b = 0; b < model_.blocks.size(); ++b) {
    const BlockSpec& block = model_.blocks[b];
    const int entry = block_exit_.empty() ? -1 : block_exit_.back();
    std::unordered_map<std::string, int> local;
    for (const auto& spec : block.nodes) {
      Node node;
      node.spec = &spec;
      node.block = b;
      node.frozen = model_.frozen.count(spec.id) > 0;
      for (const auto& ref : spec.inputs) {
        node.inputs.push_back(ref == kBlockInput ? entry : local.at(ref));
      }
      const bool trainable = mode_ == Mode::train && is_parameterized(spec.kind) && !node.frozen;
      node.needs_grad = trainable;
      for (int in : node.inputs) {
        if (in >= 0 && nodes_[static_cast<std::size_t>(in)].needs_grad) node.needs_grad = true;
      }
      if (trainable) {
        for (const auto& f : trainable_fields(spec.kind)) trainable_keys_.push_back(param_key(spec.id, f));
      }
      local[spec.id] = static_cast<int>(nodes_.size());
      nodes_.push_back(std::move(node));
    }
    block_exit_.push_back(static_cast<int>(nodes_.size()) - 1);
  }
  outputs_.resize(nodes_.size());
  caches_.resize(nodes_.size());
}

const TensorF& Tape::input_of(int index) const {
  return index < 0 ? input_ : outputs_[static_cast<std::size_t>(index)];
}

const TensorF& Tape::run(const TensorF& x, std::optional<std::size_t> last_block) {
  const Shape expected = model_.input.shape();
  if (x.rank() != 4 || !std::equal(expected.begin(), expected.end(), x.shape().begin() + 1)) {
    throw ShapeError("model expects input [b," + std::to_string(expected[0]) + "," +
                     std::to_string(expected[1]) + "," + std::to_string(expected[2]) + "], got " +
                     shape_string(x.shape()));
  }
  const std::size_t last = last_block.value_or(model_.blocks.size() - 1);
  if (last >= model_.blocks.size()) throw GraphError("block index out of range");
  input_ = x;
  executed_ = block_exit_[last] + 1;
  for (int i = 0; i < executed_; ++i) {
    const Node& node = nodes_[static_cast<std::size_t>(i)];
    const LayerSpec& spec = *node.spec;
    const TensorF& in = input_of(node.inputs.front());
    TensorF& out = outputs_[static_cast<std::size_t>(i)];
    Cache& cache = caches_[static_cast<std::size_t>(i)];
    switch (spec.kind) {
      case LayerKind::conv:
        out = conv2d(in, conv_params(model_.params, spec));
        break;
      case LayerKind::batchnorm: {
        auto p = bn_params(model_.params, spec);
        auto& c = cache.emplace<BatchNormCache<float>>();
        if (mode_ == Mode::train && !node.frozen) {
          out = batchnorm_train(in, p, &c);
          model_.params.at(param_key(spec.id, "running_mean")) = std::move(p.running_mean);
          model_.params.at(param_key(spec.id, "running_var")) = std::move(p.running_var);
        } else {
          out = batchnorm_infer(in, p, &c);
        }
        break;
      }
      case LayerKind::relu:
        out = relu(in);
        break;
      case LayerKind::maxpool:
        out = maxpool(in, {spec.kernel, spec.stride, spec.padding}, &cache.emplace<MaxPoolCache>());
        break;
      case LayerKind::avgpool:
        out = avgpool(in, {spec.kernel, spec.stride, spec.padding});
        break;
      case LayerKind::global_avgpool:
        out = global_avgpool(in);
        break;
      case LayerKind::flatten:
        out = flatten(in);
        break;
      case LayerKind::linear:
        out = linear(in, linear_params(model_.params, spec));
        break;
      case LayerKind::concat: {
        std::vector<const TensorF*> xs;
        for (int j : node.inputs) xs.push_back(&input_of(j));
        out = concat_channels<float>(std::span<const TensorF* const>(xs));
        break;
      }
      case LayerKind::add: {
        out = input_of(node.inputs[0]);
        for (std::size_t j = 1; j < node.inputs.size(); ++j) {
          out = add_elementwise(out, input_of(node.inputs[j]));
        }
        break;
      }
    }
  }
  return outputs_[static_cast<std::size_t>(executed_ - 1)];
}

const TensorF& Tape::block_output(std::size_t block) const {
  const int idx = block_exit_.at(block);
  if (idx >= executed_) throw GraphError("block " + std::to_string(block) + " was not executed");
  return outputs_[static_cast<std::size_t>(idx)];
}

void Tape::zero_grad() {
  for (const auto& key : trainable_keys_) model_.params.at(key).grad().setZero();
}

void Tape::backward(const std::vector<GradSeed>& seeds) {
  if (mode_ != Mode::train) throw GraphError("backward requires a train-mode tape");
  std::vector<TensorF> grads(static_cast<std::size_t>(executed_));
  auto add_grad = [&](int idx, TensorF g) {
    if (idx < 0 || !nodes_[static_cast<std::size_t>(idx)].needs_grad) return;
    TensorF& slot = grads[static_cast<std::size_t>(idx)];
    if (slot.size() == 0 && slot.rank() == 0) {
      slot = std::move(g);
    } else {
      slot.values() += g.values();
    }
  };
  for (const auto& seed : seeds) {
    const int idx = block_exit_.at(seed.block);
    if (idx >= executed_) throw GraphError("gradient seed on a block that was not executed");
    if (seed.grad.shape() != outputs_[static_cast<std::size_t>(idx)].shape()) {
      throw ShapeError("gradient seed " + shape_string(seed.grad.shape()) + " does not match block output " +
                       shape_string(outputs_[static_cast<std::size_t>(idx)].shape()));
    }
    add_grad(idx, seed.grad);
  }
  for (int i = executed_ - 1; i >= 0; --i) {
    const Node& node = nodes_[static_cast<std::size_t>(i)];
    TensorF& dy = grads[static_cast<std::size_t>(i)];
    if (!node.needs_grad || dy.rank() == 0) continue;
    const LayerSpec& spec = *node.spec;
    const bool trainable = is_parameterized(spec.kind) && !node.frozen;
    bool upstream = false;
    for (int in : node.inputs) upstream = upstream || (in >= 0 && nodes_[static_cast<std::size_t>(in)].needs_grad);
    const TensorF& in = input_of(node.inputs.front());
    switch (spec.kind) {
      case LayerKind::conv: {
        ConvGrads<float> g;
        const auto p = conv_params(model_.params, spec);
        TensorF dx = conv2d_backward(in, p, dy, trainable ? &g : nullptr, upstream);
        if (trainable) {
          accumulate(model_.params, param_key(spec.id, "weight"), g.weight);
          accumulate(model_.params, param_key(spec.id, "bias"), g.bias);
        }
        if (upstream) add_grad(node.inputs[0], std::move(dx));
        break;
      }
      case LayerKind::batchnorm: {
        BatchNormGrads<float> g;
        const auto p = bn_params(model_.params, spec);
        TensorF dx = batchnorm_backward(dy, p, std::get<BatchNormCache<float>>(caches_[static_cast<std::size_t>(i)]),
                                        trainable ? &g : nullptr);
        if (trainable) {
          accumulate(model_.params, param_key(spec.id, "gamma"), g.gamma);
          accumulate(model_.params, param_key(spec.id, "beta"), g.beta);
        }
        add_grad(node.inputs[0], std::move(dx));
        break;
      }
      case LayerKind::relu:
        add_grad(node.inputs[0], relu_backward(in, dy));
        break;
      case LayerKind::maxpool:
        add_grad(node.inputs[0],
                 maxpool_backward(dy, in.shape(), std::get<MaxPoolCache>(caches_[static_cast<std::size_t>(i)])));
        break;
      case LayerKind::avgpool:
        add_grad(node.inputs[0], avgpool_backward(dy, in.shape(), {spec.kernel, spec.stride, spec.padding}));
        break;
      case LayerKind::global_avgpool:
        add_grad(node.inputs[0], global_avgpool_backward(dy, in.shape()));
        break;
      case LayerKind::flatten:
        add_grad(node.inputs[0], dy.reshaped(in.shape()));
        break;
      case LayerKind::linear: {
        LinearGrads<float> g;
        TensorF dx = linear_backward(in, linear_params(model_.params, spec), dy, trainable ? &g : nullptr);
        if (trainable) {
          accumulate(model_.params, param_key(spec.id, "weight"), g.weight);
          accumulate(model_.params, param_key(spec.id, "bias"), g.bias);
        }
        add_grad(node.inputs[0], std::move(dx));
        break;
      }
      case LayerKind::concat: {
        std::vector<Index> counts;
        for (int j : node.inputs) counts.push_back(input_of(j).dim(1));
        auto parts = concat_channels_backward(dy, std::span<const Index>(counts));
        for (std::size_t j = 0; j < parts.size(); ++j) add_grad(node.inputs[j], std::move(parts[j]));
        break;
      }
      case LayerKind::add:
        for (int j : node.inputs) add_grad(j, dy);
        break;
    }
    dy = TensorF();
  }
}

TensorF forward(const ModelGraph& m, const TensorF& x) {
  // Inference never writes to the model; the tape only needs mutable access
  // for train-mode statistics.
  Tape tape(const_cast<ModelGraph&>(m), Mode::infer);
  return tape.run(x);
}

TensorF forward(ModelGraph& m, const TensorF& x, Mode mode) {
  Tape tape(m, mode);
  return tape.run(x);
}

TensorF forward_to_block(const ModelGraph& m, const TensorF& x, std::string_view block_name) {
  const std::size_t b = m.block_index(block_name);
  if (m.blocks[b].role == BlockRole::classifier) {
    throw GraphError("forward_to_block: '" + std::string(block_name) + "' is the classifier");
  }
  Tape tape(const_cast<ModelGraph&>(m), Mode::infer);
  return tape.run(x, b);
}

}  // namespace deepobf
