#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "deepobf/dataset.hpp"
#include "deepobf/errors.hpp"
#include "deepobf/executor.hpp"
#include "deepobf/model_graph.hpp"
#include "deepobf/optim.hpp"
#include "deepobf/structure.hpp"

namespace deepobf {

enum class JointMode { alternating, combined, hint_only };
enum class TaskLossKind { cross_entropy, l1_onehot };
enum class LrSchedule { constant, cosine };

std::string_view to_string(JointMode mode);
JointMode parse_joint_mode(std::string_view text);
std::string_view to_string(TaskLossKind kind);
TaskLossKind parse_task_loss(std::string_view text);
std::string_view to_string(LrSchedule schedule);
LrSchedule parse_lr_schedule(std::string_view text);

/// Plain label training (teacher training, fine-tuning, attacks).
struct TrainConfig {
  int epochs = 30;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 0.0;
  Index batch_size = 32;
  std::uint64_t seed = 1;
  TaskLossKind task_loss = TaskLossKind::cross_entropy;
  LrSchedule schedule = LrSchedule::constant;

  /// Throws std::invalid_argument on out-of-range settings.
  void check() const;
  SgdConfig sgd() const { return {lr, momentum, weight_decay}; }
  /// Learning rate for a 1-based epoch; cosine decays towards lr/100.
  double lr_at(int epoch) const;
};

struct JointTrainConfig : TrainConfig {
  double alpha = 1.0;
  JointMode mode = JointMode::alternating;

  void check() const;
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  std::optional<double> hint_loss;
  double task_loss = 0.0;
  double train_acc = 0.0;
  double test_acc = 0.0;
  double seconds = 0.0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  double seconds = 0.0;

  /// Header plus one row per epoch; a missing hint loss is an empty field.
  std::string csv() const;
  void write_csv(const std::filesystem::path& path) const;
  /// Inverse of csv(); total seconds is the sum of the rows.
  static TrainLog parse_csv(const std::string& text);
  /// Max test accuracy over the logged epochs, nullopt when empty.
  std::optional<double> best_test_acc() const;
};

/// Non-finite loss. Carries the log up to the last completed epoch.
class TrainingDiverged : public DivergenceError {
 public:
  TrainingDiverged(const std::string& what, int epoch, int batch, TrainLog log)
      : DivergenceError(what, epoch, batch), log_(std::move(log)) {}
  const TrainLog& log() const { return log_; }

 private:
  TrainLog log_;
};

struct SplitScore {
  double accuracy = 0.0;
  double loss = 0.0;
  Index correct = 0;
};

/// Inference-mode accuracy and mean task loss over a split.
SplitScore score(const ModelGraph& m, const Split& split, TaskLossKind kind = TaskLossKind::cross_entropy);
std::vector<int> predict(const ModelGraph& m, const TensorF& images);

/// Mean L1 distance between the teacher's tap at `block` and the student's
/// tap at `sim_block`, both in inference mode.
double hint_loss(const ModelGraph& teacher, const ModelGraph& student_mixed, std::string_view block,
                 std::string_view sim_block, const TensorF& x);
/// Classification loss of the mixed network in inference mode.
double task_loss(const ModelGraph& student_mixed, const TensorF& x, std::span<const int> labels,
                 TaskLossKind kind = TaskLossKind::cross_entropy);

/// Trains only the nodes of `sim_block` inside `mixed` (everything else is
/// frozen for the duration, batch-norm statistics included) against the tap
/// of `hint_block` in `hint_source` and the labels. `mixed` is updated in
/// place; its frozen set is restored on return.
TrainLog train_mixed(const ModelGraph& hint_source, std::string_view hint_block, ModelGraph& mixed,
                     std::string_view sim_block, const Dataset& data, const JointTrainConfig& cfg);

struct SimulatorResult {
  BlockSpec block;
  ParamStore params;
  ModelGraph mixed;  // working model with the trained simulator spliced in
  TrainLog log;
};

/// Simulates blocks [first, last] of `working` with a fresh network built
/// from `plan`, using the tap of `last` in `hint_source` as the hint.
/// `hint_source` is usually the original teacher; pass the working model
/// itself for plain hint training.
SimulatorResult train_simulator(const ModelGraph& hint_source, const ModelGraph& working, std::string_view first,
                                std::string_view last, const SimulatorPlan& plan, const std::string& sim_name,
                                const Dataset& data, const JointTrainConfig& cfg);
inline SimulatorResult train_simulator(const ModelGraph& teacher, std::string_view block, const SimulatorPlan& plan,
                                       const Dataset& data, const JointTrainConfig& cfg) {
  return train_simulator(teacher, teacher, block, block, plan, std::string(block) + "s", data, cfg);
}

struct SupervisedResult {
  ModelGraph best;  // best-test-accuracy checkpoint, the input when no epoch ran
  TrainLog log;
};

/// Label-only training of every non-frozen parameter.
SupervisedResult train_supervised(const ModelGraph& m, const Dataset& data, const TrainConfig& cfg);

}  // namespace deepobf
