// deepobf: train, obfuscate, evaluate, attack and analyze models from a config file.
#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "deepobf/architectures.hpp"
#include "deepobf/config.hpp"
#include "deepobf/model_io.hpp"

namespace fs = std::filesystem;
using namespace deepobf;

namespace {

enum Exit { kOk = 0, kFixtureFail = 1, kUsage = 2, kMismatch = 3, kDiverged = 4 };

struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "config file");
  cmd->add_option("--out", c.out, "output directory (overrides [run] out)");
  cmd->add_option("--seed", c.seed, "global seed (overrides [run] seed)");
}

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_run_config(c.config);
  if (!c.out.empty()) cfg.out = c.out;
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

RunConfig require_config(const Common& c) {
  if (c.config.empty()) throw ConfigError("--config is required");
  return resolve(c);
}

Dataset load_data(const std::string& spec) {
  DatasetSpec s;
  try {
    s = DatasetSpec::parse(spec);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return load_dataset(s);
}

ModelGraph load_model(const fs::path& path) {
  if (!fs::exists(path)) throw ModelFileError(ModelFileError::Kind::io, "no model file at " + path.string());
  return load(path);
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string pct(double v) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(2) << 100.0 * v << '%';
  return s.str();
}

// ---- train

int cmd_train(const Common& common) {
  const RunConfig cfg = require_config(common);
  const Dataset data = load_data(cfg.data);
  const ModelGraph init = cfg.build_teacher();
  SupervisedResult r = train_supervised(init, data, cfg.teacher_train());
  fs::create_directories(cfg.out);
  save(r.best, cfg.out / "teacher.dobf");
  r.log.write_csv(cfg.out / "train.csv");
  const SplitScore s = score(r.best, data.test);
  std::cout << "teacher: " << cfg.blocks.size() << " feature blocks, " << param_bytes(r.best) << " parameter bytes\n"
            << "epochs: " << r.log.epochs.size() << ", test accuracy " << pct(s.accuracy) << "\n"
            << "hash: " << hex64(model_hash(r.best)) << "\n"
            << "wrote " << (cfg.out / "teacher.dobf").string() << ", " << (cfg.out / "train.csv").string() << "\n";
  return kOk;
}

// ---- obfuscate

struct ObfuscateArgs {
  std::string teacher;
  std::string stop_after;
  bool no_checkpoints = false;
  int timing_runs = 1000;
};

int cmd_obfuscate(const Common& common, const ObfuscateArgs& a) {
  const RunConfig cfg = require_config(common);
  const fs::path teacher_path = a.teacher.empty() ? cfg.out / "teacher.dobf" : fs::path(a.teacher);
  const ModelGraph teacher = load_model(teacher_path);
  const Dataset data = load_data(cfg.data);
  const ObfuscationPlan plan = make_plan(teacher, cfg.plan_options());
  PipelineOptions opts;
  if (!a.no_checkpoints) opts.checkpoint_dir = cfg.out / "stages";
  if (!a.stop_after.empty()) opts.stop_after = a.stop_after;
  opts.timing = {std::max(1, a.timing_runs / 10), a.timing_runs};
  opts.hooks.after_stage = [](const std::string& stage, const ModelGraph& m) {
    std::cout << "stage " << stage << " done, " << param_bytes(m) << " parameter bytes\n" << std::flush;
  };
  std::cout << plan.describe() << std::flush;
  const ObfuscationResult r = obfuscate(teacher, plan, data, opts);
  for (const auto& s : r.resumed) std::cout << "resumed " << s << " from checkpoint\n";
  if (!r.complete) {
    std::cout << "stopped after " << a.stop_after << "\n";
    return kOk;
  }
  save(r.final_model, cfg.out / "obfuscated.dobf");
  write_text(cfg.out / "report.csv", r.report.csv());
  write_text(cfg.out / "report.txt", r.report.text());
  for (const auto& log : r.logs) {
    std::string name = log.stage;
    for (char& c : name) {
      if (c == ':' || c == '.') c = '_';
    }
    log.log.write_csv(cfg.out / ("obfuscate_" + name + ".csv"));
  }
  std::cout << r.report.text() << "hash: " << hex64(model_hash(r.final_model)) << "\n"
            << "wrote " << (cfg.out / "obfuscated.dobf").string() << "\n";
  return kOk;
}

// ---- eval

struct EvalArgs {
  std::string model;
  std::string data;
  bool fixtures = false;
  int timing_runs = 1000;
};

int run_fixtures(const fs::path& out) {
  bool ok = true;
  auto emit = [&](const std::string& title, const std::vector<FormulaCheck>& checks, const std::string& file) {
    std::ostringstream csv;
    csv << "label,printed_pct,computed_pct,tolerance_pct,pass\n";
    std::cout << title << "\n";
    for (const auto& c : checks) {
      csv << c.label << ',' << c.printed_pct << ',' << std::setprecision(9) << c.computed_pct << std::setprecision(6)
          << ',' << c.tolerance_pct << ',' << (c.pass() ? "yes" : "no") << '\n';
      std::cout << "  " << std::left << std::setw(24) << c.label << std::right << std::fixed << std::setprecision(2)
                << std::setw(9) << c.printed_pct << std::setw(9) << c.computed_pct << "  "
                << (c.pass() ? "ok" : "MISMATCH") << '\n';
      std::cout.unsetf(std::ios::fixed);
      ok = ok && c.pass();
    }
    write_text(out / file, csv.str());
  };
  emit("cost overheads (printed vs recomputed, %)", check_cost_formulas(), "fixtures_cost.csv");
  emit("declinations (printed vs recomputed, %)", check_declination_formulas(), "fixtures_declination.csv");
  std::cout << (ok ? "all fixture checks pass\n" : "some fixture checks fail\n");
  return ok ? kOk : kFixtureFail;
}

int cmd_eval(const Common& common, const EvalArgs& a) {
  const RunConfig cfg = resolve(common);
  if (a.fixtures) return run_fixtures(cfg.out);
  if (a.model.empty()) throw ConfigError("eval needs --model or --fixtures");
  const ModelGraph m = load_model(a.model);
  const Dataset data = load_data(a.data.empty() ? cfg.data : a.data);
  const SplitScore s = score(m, data.test);
  const double us = inference_time_us(m, data.test, {std::max(1, a.timing_runs / 10), a.timing_runs});
  std::cout << "model,test_acc,correct,total,param_bytes,mean_infer_us\n"
            << a.model << ',' << s.accuracy << ',' << s.correct << ',' << data.test.size() << ','
            << model_size(m) << ',' << us << '\n';
  return kOk;
}

// ---- attack

struct AttackArgs {
  std::string model;
  std::string baseline;
  std::string network;
};

std::vector<DeclinationRow> read_declinations(const fs::path& path) {
  std::vector<DeclinationRow> rows;
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() < 4) continue;
    rows.push_back({cells[0], parse_attack_kind(cells[1]), std::stod(cells[2]), std::stod(cells[3]), {}, false});
  }
  return rows;
}

// Largest absolute change over the parameters of every feature block.
double extractor_delta(const ModelGraph& before, const ModelGraph& after) {
  double delta = 0.0;
  for (std::size_t b = 0; b + 1 < before.blocks.size(); ++b) {
    for (const auto& id : block_node_ids(before.blocks[b])) {
      const LayerSpec* node = before.find_node(id);
      for (const auto& field : param_fields(node->kind)) {
        const auto key = param_key(id, field);
        const auto& x = before.params.at(key).values();
        const auto& y = after.params.at(key).values();
        delta = std::max(delta, static_cast<double>((x - y).cwiseAbs().maxCoeff()));
      }
    }
  }
  return delta;
}

int cmd_attack(const Common& common, const AttackArgs& a) {
  const RunConfig cfg = require_config(common);
  const AttackConfig acfg = cfg.attack_config();
  if (acfg.dataset.empty()) throw ConfigError("[attack] needs a 'dataset'");
  const fs::path model_path = a.model.empty() ? cfg.out / "obfuscated.dobf" : fs::path(a.model);
  const fs::path base_path = a.baseline.empty() ? cfg.out / "teacher.dobf" : fs::path(a.baseline);
  const ModelGraph model = load_model(model_path);
  const ModelGraph baseline = load_model(base_path);
  const Dataset data = load_data(acfg.dataset);

  const AttackOutcome base = run_attack(baseline, acfg, data);
  const AttackOutcome obf = run_attack(model, acfg, data);
  fs::create_directories(cfg.out);
  const std::string kind(to_string(acfg.kind));
  base.log.write_csv(cfg.out / ("attack_" + kind + "_baseline.csv"));
  obf.log.write_csv(cfg.out / ("attack_" + kind + "_obfuscated.csv"));

  const fs::path table = cfg.out / "declination.csv";
  std::vector<DeclinationRow> rows = fs::exists(table) ? read_declinations(table) : std::vector<DeclinationRow>{};
  rows.push_back({a.network.empty() ? model_path.stem().string() : a.network, acfg.kind, base.best_acc, obf.best_acc,
                  {}, false});
  write_text(table, declination_csv(rows));

  std::cout << "attack " << kind << " on " << acfg.dataset << "\n"
            << "extractor parameter delta: baseline " << extractor_delta(baseline, base.attacked) << ", obfuscated "
            << extractor_delta(model, obf.attacked) << "\n"
            << declination_text(rows);
  return kOk;
}

// ---- analyze

struct AnalyzeArgs {
  std::string model;
  std::string block;
};

int cmd_analyze(const Common& common, const AnalyzeArgs& a) {
  ModelGraph m;
  if (!a.model.empty()) {
    m = load_model(a.model);
  } else if (!common.config.empty()) {
    m = resolve(common).build_teacher();
  } else {
    throw ConfigError("analyze needs --model or --config");
  }
  for (std::size_t b = 0; b + 1 < m.blocks.size(); ++b) {
    const BlockSpec& block = m.blocks[b];
    if (!a.block.empty() && block.name != a.block) continue;
    const ReceptiveField rf = receptive_field(block);
    std::cout << "block " << block.name << "\n  receptive field " << rf.height << "x" << rf.width << ", stride "
              << rf.stride << ", padding " << rf.padding << "\n  interface " << block_interface(m, block.name).describe()
              << "\n  collapse ";
    try {
      const ConvParams<float> c = collapse_linear_block(block, m.params);
      std::cout << "single conv " << c.out_channels() << "x" << c.in_channels() << "x" << c.kernel_h() << "x"
                << c.weight.dim(3) << " stride " << c.stride << " padding " << c.padding;
    } catch (const AnalysisError&) {
      std::cout << "none (not linear)";
    }
    std::cout << '\n';
  }
  if (!a.block.empty()) {
    m.block(a.block);  // throws for an unknown name
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"deepobf: structure obfuscation by simulation networks"};
  app.require_subcommand(1);
  Common common;

  auto* train = app.add_subcommand("train", "train the configured teacher from scratch");
  add_common(train, common);

  ObfuscateArgs ob;
  auto* obfuscate_cmd = app.add_subcommand("obfuscate", "two-round obfuscation of a trained teacher");
  add_common(obfuscate_cmd, common);
  obfuscate_cmd->add_option("--teacher", ob.teacher, "teacher model (default <out>/teacher.dobf)");
  obfuscate_cmd->add_option("--stop-after", ob.stop_after, "stop after a stage: round1, finetune, round2")
      ->check(CLI::IsMember({"round1", "finetune", "round2"}));
  obfuscate_cmd->add_flag("--no-checkpoints", ob.no_checkpoints, "do not save or resume stage checkpoints");
  obfuscate_cmd->add_option("--timing-runs", ob.timing_runs, "timed inference passes per model")
      ->check(CLI::PositiveNumber);

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "accuracy, size and inference time of a model");
  add_common(eval, common);
  eval->add_option("--model", ev.model, "model file");
  eval->add_option("--data", ev.data, "dataset spec (default: the config's)");
  eval->add_flag("--fixtures", ev.fixtures, "check the overhead and declination formulas on the published tables");
  eval->add_option("--timing-runs", ev.timing_runs, "timed inference passes")->check(CLI::PositiveNumber);

  AttackArgs at;
  auto* attack = app.add_subcommand("attack", "fine-tuning attack on a model and its baseline");
  add_common(attack, common);
  attack->add_option("--model", at.model, "attacked model (default <out>/obfuscated.dobf)");
  attack->add_option("--baseline", at.baseline, "baseline model (default <out>/teacher.dobf)");
  attack->add_option("--network", at.network, "row label in the declination table");

  AnalyzeArgs an;
  auto* analyze = app.add_subcommand("analyze", "receptive fields and linear collapse per block");
  add_common(analyze, common);
  analyze->add_option("--model", an.model, "model file (or --config to use the configured architecture)");
  analyze->add_option("--block", an.block, "only this block");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*train) return cmd_train(common);
    if (*obfuscate_cmd) return cmd_obfuscate(common, ob);
    if (*eval) return cmd_eval(common, ev);
    if (*attack) return cmd_attack(common, at);
    if (*analyze) return cmd_analyze(common, an);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const ModelFileError& e) {
    std::cerr << "model file: " << e.what() << '\n';
    return kUsage;
  } catch (const DivergenceError& e) {
    std::cerr << "diverged at epoch " << e.epoch() << " batch " << e.batch() << ": " << e.what() << '\n';
    return kDiverged;
  } catch (const ShapeError& e) {
    std::cerr << "shape mismatch: " << e.what() << '\n';
    return kMismatch;
  } catch (const CheckpointMismatch& e) {
    std::cerr << "checkpoint mismatch: " << e.what() << '\n';
    return kMismatch;
  } catch (const GraphError& e) {
    std::cerr << "graph error: " << e.what() << '\n';
    return kMismatch;
  } catch (const AnalysisError& e) {
    std::cerr << "analysis error: " << e.what() << '\n';
    return kMismatch;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFixtureFail;
  }
  return kUsage;
}
