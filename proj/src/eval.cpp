#include "deepobf/eval.hpp"

#include <chrono>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "deepobf/model_io.hpp"

namespace deepobf {

double overhead(double cost1, double cost2) {
  if (!(cost1 > 0.0)) throw std::invalid_argument("overhead: baseline cost must be positive");
  return cost2 / cost1 - 1.0;
}

std::optional<double> declination(double acc1, double acc2) {
  if (acc1 == 0.0) return std::nullopt;
  return 1.0 - acc2 / acc1;
}

double accuracy(const ModelGraph& m, const Split& split) { return score(m, split).accuracy; }

Index model_size(const ModelGraph& m) { return param_bytes(m); }

double inference_time_us(const ModelGraph& m, const Split& split, const TimingProtocol& protocol) {
  if (split.size() == 0) throw std::invalid_argument("inference_time: empty split");
  if (protocol.warmup < 0 || protocol.runs < 1) throw std::invalid_argument("inference_time: bad protocol");
  const Shape& s = split.images.shape();
  const Index pixels = s[1] * s[2] * s[3];
  std::vector<TensorF> samples;
  for (Index i = 0; i < std::min<Index>(split.size(), 64); ++i) {
    TensorF x({1, s[1], s[2], s[3]});
    x.values() = split.images.values().segment(i * pixels, pixels);
    samples.push_back(std::move(x));
  }
  ModelGraph copy = m;
  Tape tape(copy, Mode::infer);
  float sink = 0.0f;
  for (int i = 0; i < protocol.warmup; ++i) sink += tape.run(samples[static_cast<std::size_t>(i) % samples.size()])[0];
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < protocol.runs; ++i) sink += tape.run(samples[static_cast<std::size_t>(i) % samples.size()])[0];
  const double us = std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - t0).count();
  // Keeps the passes from being optimised away.
  volatile float observed = sink;
  (void)observed;
  return us / protocol.runs;
}

std::string_view to_string(AttackKind kind) {
  switch (kind) {
    case AttackKind::incremental: return "incremental";
    case AttackKind::transfer_finetune: return "transfer_finetune";
    case AttackKind::transfer_frozen: return "transfer_frozen";
  }
  return "?";
}

AttackKind parse_attack_kind(std::string_view text) {
  for (AttackKind k : {AttackKind::incremental, AttackKind::transfer_finetune, AttackKind::transfer_frozen}) {
    if (to_string(k) == text) return k;
  }
  throw std::invalid_argument("unknown attack kind '" + std::string(text) + "'");
}

ModelGraph with_new_head(const ModelGraph& m, Index classes, std::uint64_t seed) {
  if (classes < 1) throw std::invalid_argument("class count must be positive");
  ModelGraph out = m;
  BlockSpec& head = out.blocks.back();
  LayerSpec* fc = nullptr;
  for (auto& n : head.nodes) {
    if (n.kind == LayerKind::linear) fc = &n;
  }
  if (fc == nullptr) throw GraphError("classifier '" + head.name + "' has no linear layer");
  fc->out_channels = classes;
  out.classes = classes;
  Rng rng = make_rng(seed, "new-head");
  ParamStore fresh = init_block_params(head, rng);
  for (const auto& field : param_fields(LayerKind::linear)) {
    const std::string key = param_key(fc->id, field);
    out.params[key] = fresh.at(key);
  }
  validate(out);
  return out;
}

namespace {

AttackOutcome train_attack(ModelGraph m, const TrainConfig& cfg, const Dataset& data) {
  SupervisedResult r = train_supervised(m, data, cfg);
  AttackOutcome out;
  out.best_acc = r.log.best_test_acc().value_or(score(r.best, data.test).accuracy);
  out.log = std::move(r.log);
  out.attacked = std::move(r.best);
  return out;
}

}  // namespace

AttackOutcome attack_incremental(const ModelGraph& m, const AttackConfig& cfg, const Dataset& data_new) {
  if (cfg.kind != AttackKind::incremental) throw std::invalid_argument("attack_incremental: wrong attack kind");
  if (cfg.new_classes <= m.classes) {
    throw ShapeError("incremental attack needs more classes than the model's " + std::to_string(m.classes) + ", got " +
                     std::to_string(cfg.new_classes));
  }
  ModelGraph attacked = with_new_head(m, cfg.new_classes, derive_seed(cfg.train.seed, "incremental-head"));
  unfreeze_all(attacked);
  return train_attack(std::move(attacked), cfg.train, data_new);
}

AttackOutcome attack_transfer(const ModelGraph& m, const AttackConfig& cfg, const Dataset& data_new) {
  if (cfg.kind == AttackKind::incremental) throw std::invalid_argument("attack_transfer: wrong attack kind");
  if (data_new.train.classes != m.classes) {
    throw ShapeError("transfer attack needs " + std::to_string(m.classes) + " classes, dataset has " +
                     std::to_string(data_new.train.classes));
  }
  ModelGraph attacked = with_new_head(m, m.classes, derive_seed(cfg.train.seed, "transfer-head"));
  unfreeze_all(attacked);
  if (cfg.kind == AttackKind::transfer_frozen) {
    for (std::size_t b = 0; b + 1 < attacked.blocks.size(); ++b) freeze(attacked, block_node_ids(attacked.blocks[b]));
  }
  return train_attack(std::move(attacked), cfg.train, data_new);
}

AttackOutcome run_attack(const ModelGraph& m, const AttackConfig& cfg, const Dataset& data_new) {
  return cfg.kind == AttackKind::incremental ? attack_incremental(m, cfg, data_new)
                                             : attack_transfer(m, cfg, data_new);
}

std::vector<DeclinationRow> declination_table(std::vector<DeclinationRow> rows) {
  for (auto& r : rows) {
    r.declination = declination(r.baseline_acc, r.obfuscated_acc);
    r.flagged = !r.declination.has_value();
  }
  return rows;
}

std::string declination_csv(const std::vector<DeclinationRow>& rows) {
  std::ostringstream out;
  out.precision(9);
  out << "network,attack,baseline_acc,obfuscated_acc,declination,flag\n";
  for (const auto& r : declination_table(rows)) {
    out << r.network << ',' << to_string(r.attack) << ',' << r.baseline_acc << ',' << r.obfuscated_acc << ',';
    if (r.declination) out << *r.declination;
    out << ',' << (r.flagged ? "undefined" : "") << '\n';
  }
  return out.str();
}

std::string declination_text(const std::vector<DeclinationRow>& rows) {
  std::ostringstream out;
  out << std::left << std::setw(16) << "network" << std::setw(20) << "attack" << std::right << std::setw(10)
      << "acc1" << std::setw(10) << "acc2" << std::setw(10) << "decline" << '\n';
  out << std::fixed << std::setprecision(2);
  for (const auto& r : declination_table(rows)) {
    out << std::left << std::setw(16) << r.network << std::setw(20) << to_string(r.attack) << std::right
        << std::setw(9) << 100.0 * r.baseline_acc << '%' << std::setw(9) << 100.0 * r.obfuscated_acc << '%';
    if (r.declination) {
      out << std::setw(9) << std::setprecision(1) << 100.0 * *r.declination << '%' << std::setprecision(2);
    } else {
      out << std::setw(10) << "n/a";
    }
    out << '\n';
  }
  return out.str();
}

const std::vector<PublishedCostRow>& published_cost_rows() {
  static const std::vector<PublishedCostRow> rows{
      {"GoogLeNet", "-", 90.83, 2.51, 17.85, std::nullopt, std::nullopt},
      {"GoogLeNet", "1st", 90.99, 7.82, 7.69, 212.0, -59.0},
      {"GoogLeNet", "2nd", 90.92, 2.49, 7.01, -1.0, -63.0},
      {"ResNet", "-", 90.94, 43.36, 10.50, std::nullopt, std::nullopt},
      {"ResNet", "1st", 91.39, 26.80, 6.76, -38.0, -36.0},
      {"ResNet", "2nd", 91.04, 11.38, 5.17, -74.0, -51.0},
      {"DenseNet", "-", 90.14, 4.24, 35.53, std::nullopt, std::nullopt},
      {"DenseNet", "1st", 90.87, 8.86, 8.86, 109.0, -75.0},
      {"DenseNet", "2nd", 90.31, 4.21, 5.52, -1.0, -84.0},
  };
  return rows;
}

const std::vector<PublishedFinetuneRow>& published_finetune_rows() {
  static const std::vector<PublishedFinetuneRow> rows{
      {"GoogLeNet", "CIFAR-100", 66.5, 63.59, 4.4}, {"GoogLeNet", "STL10", 79.15, 77.95, 1.5},
      {"ResNet", "CIFAR-100", 66.92, 64.77, 3.2},   {"ResNet", "STL10", 78.86, 75.97, 3.7},
      {"DenseNet", "CIFAR-100", 67.16, 62.91, 6.3}, {"DenseNet", "STL10", 78.45, 76.90, 2.0},
  };
  return rows;
}

bool FormulaCheck::pass() const { return std::abs(computed_pct - printed_pct) <= tolerance_pct + 1e-9; }

std::vector<FormulaCheck> check_cost_formulas() {
  std::vector<FormulaCheck> out;
  const PublishedCostRow* base = nullptr;
  for (const auto& r : published_cost_rows()) {
    if (r.round == "-") {
      base = &r;
      continue;
    }
    const std::string label = r.network + " " + r.round;
    out.push_back({label + " size", *r.size_overhead_pct, 100.0 * overhead(base->size_mb, r.size_mb), 1.0});
    out.push_back({label + " time", *r.time_overhead_pct, 100.0 * overhead(base->time_us, r.time_us), 1.0});
  }
  return out;
}

std::vector<FormulaCheck> check_declination_formulas() {
  std::vector<FormulaCheck> out;
  for (const auto& r : published_finetune_rows()) {
    const double d = 100.0 * *declination(r.original_pct, r.obfuscated_pct);
    out.push_back({r.network + " " + r.task, r.declination_pct, d, 0.1});
  }
  return out;
}

}  // namespace deepobf
