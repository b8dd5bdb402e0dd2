#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "deepobf/distillation.hpp"
#include "deepobf/eval.hpp"

namespace deepobf {

/// Stage names, in execution order.
inline constexpr const char* kStageOriginal = "original";
inline constexpr const char* kStageRound1 = "round1";
inline constexpr const char* kStageFinetune = "finetune";
inline constexpr const char* kStageRound2 = "round2";

struct Round1Group {
  std::string first;  // contiguous block range [first, last]
  std::string last;
  SimulatorPlan plan;

  std::string label() const { return first == last ? first : first + ".." + last; }
  /// Name of the simulator block that replaces the group.
  std::string sim_name() const { return first == last ? first + "s" : first + "_" + last + "s"; }
};

struct ObfuscationPlan {
  std::vector<Round1Group> round1;
  JointTrainConfig round1_train;
  TrainConfig finetune;
  SimulatorPlan round2;
  JointTrainConfig round2_train;
  std::uint64_t seed = 1;

  /// Canonical text of every setting; the resume key hashes this.
  std::string describe() const;
  std::uint64_t hash() const;
};

/// Groups must be disjoint, contiguous, bottom-up, and each plan must match
/// its group's interface; round 2 must span input to extractor output.
/// Throws ShapeError naming the offending group, or GraphError for bad order.
void check_plan(const ObfuscationPlan& plan, const ModelGraph& teacher);

/// Convenience builder used by the CLI and the tests.
struct PlanOptions {
  std::vector<std::pair<std::string, std::string>> groups;  // empty: one per non-pooling block
  std::optional<int> round1_depth = 2;  // capped at each group's conv count
  std::vector<std::vector<Index>> round1_widths;  // per group; empty: analyzer rule
  std::optional<int> round2_depth;
  std::vector<Index> round2_widths;
  JointTrainConfig round1_train;
  TrainConfig finetune;
  JointTrainConfig round2_train;
  std::uint64_t seed = 1;
};

/// Builds the plan from the teacher's receptive fields. Stage seeds are
/// derived from the global seed, overriding the seeds in the options.
ObfuscationPlan make_plan(const ModelGraph& teacher, const PlanOptions& options);

struct StageLog {
  std::string stage;  // "round1:<group>", "finetune", "round2"
  TrainLog log;
};

/// Observers; `after_group` sees the working model before and after one
/// round-1 group was trained (simulator spliced in, not yet renamed away).
struct PipelineHooks {
  std::function<void(const Round1Group&, const ModelGraph& before, const ModelGraph& after)> after_group;
  std::function<void(const std::string& stage, const ModelGraph& m)> after_stage;
};

struct Round1Result {
  ModelGraph model;  // M'
  std::vector<StageLog> logs;
};

Round1Result obfuscate_round1(const ModelGraph& teacher, const ObfuscationPlan& plan, const Dataset& data,
                              const PipelineHooks& hooks = {});
/// All parameters unfrozen and trained on labels; best-test checkpoint.
SupervisedResult finetune(const ModelGraph& m, const Dataset& data, const TrainConfig& cfg);
/// Replaces the whole extractor of M' by one sequential block "features".
SimulatorResult obfuscate_round2(const ModelGraph& m_prime, const ObfuscationPlan& plan, const Dataset& data);

struct ReportRow {
  std::string stage;
  double test_acc = 0.0;
  Index param_bytes = 0;
  double mean_infer_us = 0.0;
  double size_overhead = 0.0;
  double time_overhead = 0.0;
};

struct ObfuscationReport {
  std::vector<ReportRow> rows;

  std::string csv() const;
  std::string text() const;
};

/// Rows with overheads against the first row.
ObfuscationReport make_report(const std::vector<std::pair<std::string, const ModelGraph*>>& stages, const Split& test,
                              const TimingProtocol& timing = {});

/// Stage checkpoints were written for a different (plan, data, teacher).
class CheckpointMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PipelineOptions {
  std::optional<std::filesystem::path> checkpoint_dir;
  std::optional<std::string> stop_after;  // stage name
  TimingProtocol timing;
  PipelineHooks hooks;
};

struct ObfuscationResult {
  bool complete = false;  // false when stopped early
  ModelGraph final_model;
  ObfuscationReport report;
  std::vector<StageLog> logs;
  std::vector<std::string> resumed;  // stages loaded from checkpoints
};

/// round1 -> finetune -> round2 -> report. With a checkpoint directory,
/// every finished stage (and every round-1 group) is saved and a rerun
/// resumes from the last one.
ObfuscationResult obfuscate(const ModelGraph& teacher, const ObfuscationPlan& plan, const Dataset& data,
                            const PipelineOptions& options = {});

/// Key written to the checkpoint manifest.
std::string resume_key(const ModelGraph& teacher, const ObfuscationPlan& plan, const Dataset& data);

}  // namespace deepobf
