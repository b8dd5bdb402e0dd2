#include "deepobf/pipeline.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>

#include "deepobf/model_io.hpp"

namespace deepobf {

namespace {

void describe_train(std::ostream& out, const TrainConfig& c) {
  out << std::setprecision(17) << "epochs=" << c.epochs << " lr=" << c.lr << " momentum=" << c.momentum
      << " weight_decay=" << c.weight_decay << " batch=" << c.batch_size << " seed=" << c.seed
      << " task_loss=" << to_string(c.task_loss) << " schedule=" << to_string(c.schedule);
}

void describe_joint(std::ostream& out, const JointTrainConfig& c) {
  describe_train(out, c);
  out << " alpha=" << c.alpha << " mode=" << to_string(c.mode);
}

void describe_simulator(std::ostream& out, const SimulatorPlan& p) {
  out << "in=" << p.in_channels;
  for (const auto& l : p.layers) {
    out << " [k" << l.kernel << " s" << l.stride << " p" << l.padding << " c" << l.out_channels
        << (l.batchnorm ? " bn" : "") << (l.relu ? " relu" : "") << "]";
  }
}

std::vector<std::size_t> feature_range(const ModelGraph& m) {
  if (m.feature_block_count() == 0) throw GraphError("model has no feature blocks");
  return {0, m.feature_block_count() - 1};
}

int conv_count(const BlockSpec& b) {
  int n = 0;
  for (const auto& node : b.nodes) n += node.kind == LayerKind::conv;
  return n;
}
bool has_conv(const BlockSpec& b) { return conv_count(b) > 0; }

// A default-depth simulator never has more convs than the blocks it replaces.
std::optional<int> capped_depth(const ModelGraph& m, const std::string& first, const std::string& last,
                                std::optional<int> depth) {
  if (!depth) return depth;
  int convs = 0;
  for (std::size_t b = m.block_index(first); b <= m.block_index(last); ++b) convs += conv_count(m.blocks[b]);
  return std::max(1, std::min(*depth, convs));
}

// Teacher with every round-1 group replaced by its (untrained) simulator; the
// structure of M' is fixed by the plan.
ModelGraph planned_intermediate(const ModelGraph& teacher, const ObfuscationPlan& plan) {
  ModelGraph m = teacher;
  for (const auto& g : plan.round1) {
    const BlockSpec b = plan_to_block(g.plan, g.sim_name());
    Rng rng = make_rng(0, "planned");
    try {
      m = replace_blocks(m, g.first, g.last, b, init_block_params(b, rng));
    } catch (const ShapeError& e) {
      throw ShapeError("round-1 group '" + g.label() + "': " + e.what());
    }
  }
  return m;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
}

JointTrainConfig group_config(const ObfuscationPlan& plan, std::size_t index) {
  JointTrainConfig cfg = plan.round1_train;
  cfg.seed = derive_seed(plan.round1_train.seed, "group", index);
  return cfg;
}

// Trains one round-1 group against the current working model.
SimulatorResult run_group(const ModelGraph& teacher, const ModelGraph& working, const ObfuscationPlan& plan,
                          std::size_t index, const Dataset& data) {
  const Round1Group& g = plan.round1[index];
  try {
    return train_simulator(teacher, working, g.first, g.last, g.plan, g.sim_name(), data, group_config(plan, index));
  } catch (const ShapeError& e) {
    throw ShapeError("round-1 group '" + g.label() + "': " + e.what());
  } catch (const TrainingDiverged& e) {
    throw TrainingDiverged("round-1 group '" + g.label() + "': " + e.what(), e.epoch(), e.batch(), e.log());
  }
}

}  // namespace

std::string ObfuscationPlan::describe() const {
  std::ostringstream out;
  out << "seed " << seed << "\n";
  for (const auto& g : round1) {
    out << "group " << g.first << " " << g.last << " ";
    describe_simulator(out, g.plan);
    out << "\n";
  }
  out << "round1_train ";
  describe_joint(out, round1_train);
  out << "\nfinetune ";
  describe_train(out, finetune);
  out << "\nround2 ";
  describe_simulator(out, round2);
  out << "\nround2_train ";
  describe_joint(out, round2_train);
  out << "\n";
  return out.str();
}

std::uint64_t ObfuscationPlan::hash() const { return fnv1a64(describe()); }

void check_plan(const ObfuscationPlan& plan, const ModelGraph& teacher) {
  validate(teacher);
  std::optional<std::size_t> previous;
  for (const auto& g : plan.round1) {
    std::size_t first = 0, last = 0;
    try {
      first = teacher.block_index(g.first);
      last = teacher.block_index(g.last);
    } catch (const GraphError& e) {
      throw GraphError("round-1 group '" + g.label() + "': " + e.what());
    }
    if (first > last) throw GraphError("round-1 group '" + g.label() + "' runs top-down");
    if (teacher.blocks[last].role == BlockRole::classifier) {
      throw GraphError("round-1 group '" + g.label() + "' includes the classifier");
    }
    if (previous && first <= *previous) {
      throw GraphError("round-1 group '" + g.label() + "' overlaps or precedes the group before it");
    }
    previous = last;
  }
  const ModelGraph m_prime = planned_intermediate(teacher, plan);
  const auto range = feature_range(m_prime);
  const BlockSpec b = plan_to_block(plan.round2, "features");
  Rng rng = make_rng(0, "planned");
  try {
    replace_blocks(m_prime, m_prime.blocks[range[0]].name, m_prime.blocks[range[1]].name, b,
                   init_block_params(b, rng));
  } catch (const ShapeError& e) {
    throw ShapeError(std::string("round-2 plan: ") + e.what());
  }
  plan.round1_train.check();
  plan.finetune.check();
  plan.round2_train.check();
}

ObfuscationPlan make_plan(const ModelGraph& teacher, const PlanOptions& o) {
  ObfuscationPlan plan;
  plan.seed = o.seed;
  auto groups = o.groups;
  if (groups.empty()) {
    for (std::size_t b = 0; b < teacher.feature_block_count(); ++b) {
      if (has_conv(teacher.blocks[b])) groups.emplace_back(teacher.blocks[b].name, teacher.blocks[b].name);
    }
  }
  if (!o.round1_widths.empty() && o.round1_widths.size() != groups.size()) {
    throw ShapeError("round-1 widths given for " + std::to_string(o.round1_widths.size()) + " groups, plan has " +
                     std::to_string(groups.size()));
  }
  for (std::size_t i = 0; i < groups.size(); ++i) {
    Round1Group g{groups[i].first, groups[i].second, {}};
    const std::vector<Index> widths = o.round1_widths.empty() ? std::vector<Index>{} : o.round1_widths[i];
    try {
      const auto depth = widths.empty() ? capped_depth(teacher, g.first, g.last, o.round1_depth) : std::nullopt;
      g.plan = plan_simulator(teacher, g.first, g.last, depth, widths);
    } catch (const std::exception& e) {
      throw AnalysisError("round-1 group '" + g.label() + "': " + e.what());
    }
    plan.round1.push_back(std::move(g));
  }
  const ModelGraph m_prime = planned_intermediate(teacher, plan);
  const auto range = feature_range(m_prime);
  plan.round2 = plan_simulator(m_prime, m_prime.blocks[range[0]].name, m_prime.blocks[range[1]].name,
                               o.round2_widths.empty() ? o.round2_depth : std::nullopt, o.round2_widths);
  plan.round1_train = o.round1_train;
  plan.finetune = o.finetune;
  plan.round2_train = o.round2_train;
  plan.round1_train.seed = derive_seed(o.seed, kStageRound1);
  plan.finetune.seed = derive_seed(o.seed, kStageFinetune);
  plan.round2_train.seed = derive_seed(o.seed, kStageRound2);
  check_plan(plan, teacher);
  return plan;
}

Round1Result obfuscate_round1(const ModelGraph& teacher, const ObfuscationPlan& plan, const Dataset& data,
                              const PipelineHooks& hooks) {
  check_plan(plan, teacher);
  Round1Result out{teacher, {}};
  for (std::size_t i = 0; i < plan.round1.size(); ++i) {
    SimulatorResult r = run_group(teacher, out.model, plan, i, data);
    if (hooks.after_group) hooks.after_group(plan.round1[i], out.model, r.mixed);
    out.logs.push_back({std::string(kStageRound1) + ":" + plan.round1[i].label(), std::move(r.log)});
    out.model = std::move(r.mixed);
  }
  return out;
}

SupervisedResult finetune(const ModelGraph& m, const Dataset& data, const TrainConfig& cfg) {
  ModelGraph open = m;
  unfreeze_all(open);
  SupervisedResult r = train_supervised(open, data, cfg);
  r.best.frozen = m.frozen;
  return r;
}

SimulatorResult obfuscate_round2(const ModelGraph& m_prime, const ObfuscationPlan& plan, const Dataset& data) {
  const auto range = feature_range(m_prime);
  try {
    return train_simulator(m_prime, m_prime, m_prime.blocks[range[0]].name, m_prime.blocks[range[1]].name,
                           plan.round2, "features", data, plan.round2_train);
  } catch (const ShapeError& e) {
    throw ShapeError(std::string("round-2 plan: ") + e.what());
  }
}

std::string ObfuscationReport::csv() const {
  std::ostringstream out;
  out.precision(9);
  out << "stage,test_acc,param_bytes,mean_infer_us,size_overhead,time_overhead\n";
  for (const auto& r : rows) {
    out << r.stage << ',' << r.test_acc << ',' << r.param_bytes << ',' << r.mean_infer_us << ',' << r.size_overhead
        << ',' << r.time_overhead << '\n';
  }
  return out.str();
}

std::string ObfuscationReport::text() const {
  std::ostringstream out;
  out << std::left << std::setw(10) << "stage" << std::right << std::setw(9) << "acc." << std::setw(12) << "size (B)"
      << std::setw(12) << "time (us)" << std::setw(10) << "size" << std::setw(10) << "time" << '\n';
  out << std::fixed;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    out << std::left << std::setw(10) << r.stage << std::right << std::setprecision(2) << std::setw(8)
        << 100.0 * r.test_acc << '%' << std::setw(12) << r.param_bytes << std::setw(12) << r.mean_infer_us;
    if (i == 0) {
      out << std::setw(10) << "-" << std::setw(10) << "-";
    } else {
      out << std::setprecision(0) << std::setw(9) << 100.0 * r.size_overhead << '%' << std::setw(9)
          << 100.0 * r.time_overhead << '%';
    }
    out << '\n';
  }
  return out.str();
}

ObfuscationReport make_report(const std::vector<std::pair<std::string, const ModelGraph*>>& stages, const Split& test,
                              const TimingProtocol& timing) {
  ObfuscationReport report;
  for (const auto& [name, model] : stages) {
    ReportRow r;
    r.stage = name;
    r.test_acc = accuracy(*model, test);
    r.param_bytes = model_size(*model);
    r.mean_infer_us = inference_time_us(*model, test, timing);
    if (!report.rows.empty()) {
      const ReportRow& base = report.rows.front();
      r.size_overhead = overhead(static_cast<double>(base.param_bytes), static_cast<double>(r.param_bytes));
      r.time_overhead = overhead(base.mean_infer_us, r.mean_infer_us);
    }
    report.rows.push_back(r);
  }
  return report;
}

std::string resume_key(const ModelGraph& teacher, const ObfuscationPlan& plan, const Dataset& data) {
  return "plan=" + hex64(plan.hash()) + " teacher=" + hex64(model_hash(teacher)) +
         " data=" + hex64(dataset_digest(data));
}

ObfuscationResult obfuscate(const ModelGraph& teacher, const ObfuscationPlan& plan, const Dataset& data,
                            const PipelineOptions& options) {
  check_plan(plan, teacher);
  ObfuscationResult result;
  const auto& dir = options.checkpoint_dir;
  auto path = [&](const std::string& file) { return *dir / file; };
  auto have = [&](const std::string& file) { return dir && std::filesystem::exists(path(file)); };
  auto log_name = [](const std::string& stage) {
    std::string s = stage;
    for (char& c : s) {
      if (c == ':' || c == '.') c = '_';
    }
    return s + ".csv";
  };
  auto finish_stage = [&](const std::string& stage, const ModelGraph& m, const std::string& file, const TrainLog& log,
                          const std::string& log_stage) {
    result.logs.push_back({log_stage, log});
    if (dir) {
      log.write_csv(path(log_name(log_stage)));
      save(m, path(file));
    }
    if (options.hooks.after_stage) options.hooks.after_stage(stage, m);
  };
  auto resume = [&](const std::string& file, const std::string& log_stage) {
    result.resumed.push_back(log_stage);
    const auto log_path = path(log_name(log_stage));
    result.logs.push_back({log_stage, std::filesystem::exists(log_path) ? TrainLog::parse_csv(read_file(log_path))
                                                                        : TrainLog{}});
    return load(path(file));
  };
  auto stop_here = [&](const std::string& stage) { return options.stop_after && *options.stop_after == stage; };

  if (dir) {
    std::filesystem::create_directories(*dir);
    const std::string key = resume_key(teacher, plan, data);
    const auto manifest = path("manifest.txt");
    if (std::filesystem::exists(manifest)) {
      std::string stored = read_file(manifest);
      while (!stored.empty() && stored.back() == '\n') stored.pop_back();
      if (stored != key) {
        throw CheckpointMismatch("checkpoints in " + dir->string() + " belong to a different run (" + stored +
                                 "), this run is " + key);
      }
    } else {
      write_file(manifest, key + "\n");
    }
  }

  // Round 1, resumable per group.
  ModelGraph m_prime;
  if (have("round1.dobf")) {
    for (const auto& g : plan.round1) {
      const std::string stage = std::string(kStageRound1) + ":" + g.label();
      const auto log_path = path(log_name(stage));
      result.logs.push_back({stage, std::filesystem::exists(log_path) ? TrainLog::parse_csv(read_file(log_path))
                                                                      : TrainLog{}});
    }
    result.resumed.push_back(kStageRound1);
    m_prime = load(path("round1.dobf"));
  } else {
    ModelGraph working = teacher;
    std::size_t start = 0;
    for (std::size_t i = plan.round1.size(); i > 0; --i) {
      if (have("round1_" + std::to_string(i) + ".dobf")) {
        start = i;
        break;
      }
    }
    for (std::size_t i = 0; i < start; ++i) {
      const std::string stage = std::string(kStageRound1) + ":" + plan.round1[i].label();
      if (i + 1 == start) {
        working = resume("round1_" + std::to_string(i + 1) + ".dobf", stage);
      } else {
        result.resumed.push_back(stage);
        const auto log_path = path(log_name(stage));
        result.logs.push_back({stage, std::filesystem::exists(log_path) ? TrainLog::parse_csv(read_file(log_path))
                                                                        : TrainLog{}});
      }
    }
    for (std::size_t i = start; i < plan.round1.size(); ++i) {
      const Round1Group& g = plan.round1[i];
      SimulatorResult r = run_group(teacher, working, plan, i, data);
      if (options.hooks.after_group) options.hooks.after_group(g, working, r.mixed);
      working = std::move(r.mixed);
      const std::string stage = std::string(kStageRound1) + ":" + g.label();
      finish_stage(stage, working, "round1_" + std::to_string(i + 1) + ".dobf", r.log, stage);
    }
    m_prime = std::move(working);
    if (dir) save(m_prime, path("round1.dobf"));
    if (options.hooks.after_stage) options.hooks.after_stage(kStageRound1, m_prime);
  }
  if (stop_here(kStageRound1)) {
    result.final_model = m_prime;
    return result;
  }

  ModelGraph tuned;
  if (have("finetune.dobf")) {
    tuned = resume("finetune.dobf", kStageFinetune);
  } else {
    SupervisedResult r = finetune(m_prime, data, plan.finetune);
    tuned = std::move(r.best);
    finish_stage(kStageFinetune, tuned, "finetune.dobf", r.log, kStageFinetune);
  }
  if (stop_here(kStageFinetune)) {
    result.final_model = tuned;
    return result;
  }

  if (have("round2.dobf")) {
    result.final_model = resume("round2.dobf", kStageRound2);
  } else {
    SimulatorResult r = obfuscate_round2(tuned, plan, data);
    result.final_model = std::move(r.mixed);
    finish_stage(kStageRound2, result.final_model, "round2.dobf", r.log, kStageRound2);
  }
  if (stop_here(kStageRound2)) return result;

  result.report = make_report({{kStageOriginal, &teacher},
                               {kStageRound1, &m_prime},
                               {kStageFinetune, &tuned},
                               {kStageRound2, &result.final_model}},
                              data.test, options.timing);
  if (dir) {
    write_file(path("report.csv"), result.report.csv());
    write_file(path("report.txt"), result.report.text());
  }
  result.complete = true;
  return result;
}

}  // namespace deepobf
