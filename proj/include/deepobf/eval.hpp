#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "deepobf/distillation.hpp"

namespace deepobf {

/// cost2/cost1 - 1. Throws std::invalid_argument when cost1 <= 0.
double overhead(double cost1, double cost2);
/// 1 - acc2/acc1; undefined (nullopt) when acc1 == 0.
std::optional<double> declination(double acc1, double acc2);

/// Correct/total over the split in inference mode.
double accuracy(const ModelGraph& m, const Split& split);
/// Parameter bytes at 4 bytes per trainable scalar.
Index model_size(const ModelGraph& m);

struct TimingProtocol {
  int warmup = 100;
  int runs = 1000;
};

/// Mean wall time in microseconds of single-sample inference passes over
/// samples of the split, after warm-up. Forward computation only.
double inference_time_us(const ModelGraph& m, const Split& split, const TimingProtocol& protocol = {});

enum class AttackKind { incremental, transfer_finetune, transfer_frozen };
std::string_view to_string(AttackKind kind);
AttackKind parse_attack_kind(std::string_view text);

struct AttackConfig {
  AttackKind kind = AttackKind::transfer_finetune;
  std::string dataset;     // spec string of the target data
  Index new_classes = 0;   // incremental only
  TrainConfig train;
};

struct AttackOutcome {
  double best_acc = 0.0;
  TrainLog log;
  ModelGraph attacked;  // best checkpoint
};

/// Copy of `m` with a freshly initialised classifier for `classes` outputs.
/// Extractor parameters are carried over bit for bit.
ModelGraph with_new_head(const ModelGraph& m, Index classes, std::uint64_t seed);

/// Enlarged head, then every parameter fine-tuned on the new data.
AttackOutcome attack_incremental(const ModelGraph& m, const AttackConfig& cfg, const Dataset& data_new);
/// Reinitialised head; transfer_frozen trains the head only.
AttackOutcome attack_transfer(const ModelGraph& m, const AttackConfig& cfg, const Dataset& data_new);
AttackOutcome run_attack(const ModelGraph& m, const AttackConfig& cfg, const Dataset& data_new);

struct DeclinationRow {
  std::string network;
  AttackKind attack = AttackKind::transfer_finetune;
  double baseline_acc = 0.0;    // original model attacked
  double obfuscated_acc = 0.0;  // obfuscated model attacked
  std::optional<double> declination;  // recomputed, never taken from input
  bool flagged = false;               // baseline accuracy 0
};

/// Recomputes every declination from the two accuracies.
std::vector<DeclinationRow> declination_table(std::vector<DeclinationRow> rows);
std::string declination_csv(const std::vector<DeclinationRow>& rows);
std::string declination_text(const std::vector<DeclinationRow>& rows);

// Published results used to check the two formulas. Percentages as printed.

struct PublishedCostRow {
  std::string network;
  std::string round;  // "-", "1st", "2nd"
  double acc_pct, size_mb, time_us;
  std::optional<double> size_overhead_pct, time_overhead_pct;
};

struct PublishedFinetuneRow {
  std::string network;
  std::string task;  // "CIFAR-100" (incremental) or "STL10" (transfer)
  double original_pct, obfuscated_pct, declination_pct;
};

const std::vector<PublishedCostRow>& published_cost_rows();
const std::vector<PublishedFinetuneRow>& published_finetune_rows();

struct FormulaCheck {
  std::string label;
  double printed_pct = 0.0;
  double computed_pct = 0.0;
  double tolerance_pct = 0.0;
  bool pass() const;
};

/// Overheads within one percentage point of the printed value.
std::vector<FormulaCheck> check_cost_formulas();
/// Declinations within a tenth of a percentage point.
std::vector<FormulaCheck> check_declination_formulas();

}  // namespace deepobf
