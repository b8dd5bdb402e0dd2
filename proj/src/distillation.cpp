#include "deepobf/distillation.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "deepobf/loss.hpp"
#include "deepobf/model_io.hpp"

namespace deepobf {

namespace {

constexpr Index kEvalChunk = 256;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

TensorF rows(const TensorF& t, Index begin, Index count) {
  Shape s = t.shape();
  const Index per = t.size() / s[0];
  s[0] = count;
  TensorF out(s);
  out.values() = t.values().segment(begin * per, count * per);
  return out;
}

TensorF gather_rows(const TensorF& t, std::span<const Index> order) {
  Shape s = t.shape();
  const Index per = t.size() / s[0];
  s[0] = static_cast<Index>(order.size());
  TensorF out(s);
  for (std::size_t i = 0; i < order.size(); ++i) {
    out.values().segment(static_cast<Index>(i) * per, per) = t.values().segment(order[i] * per, per);
  }
  return out;
}

// Block taps of a whole split, computed in inference mode in chunks.
TensorF tap_of_split(const ModelGraph& m, std::string_view block, const TensorF& images) {
  const Index n = images.dim(0);
  TensorF out;
  for (Index begin = 0; begin < n; begin += kEvalChunk) {
    const Index count = std::min(kEvalChunk, n - begin);
    const TensorF part = forward_to_block(m, rows(images, begin, count), block);
    if (begin == 0) {
      Shape s = part.shape();
      s[0] = n;
      out = TensorF(s);
    }
    const Index per = part.size() / count;
    out.values().segment(begin * per, part.size()) = part.values();
  }
  return out;
}

LossResult<float> label_loss(const TensorF& logits, std::span<const int> labels, TaskLossKind kind) {
  return kind == TaskLossKind::cross_entropy ? softmax_cross_entropy(logits, labels) : l1_onehot_loss(logits, labels);
}

Index count_correct(const TensorF& logits, std::span<const int> labels) {
  Index correct = 0;
  for (Index n = 0; n < logits.dim(0); ++n) {
    Index best = 0;
    for (Index k = 1; k < logits.dim(1); ++k) {
      if (logits.at(n, k) > logits.at(n, best)) best = k;
    }
    correct += best == labels[static_cast<std::size_t>(n)];
  }
  return correct;
}

void check_finite(double loss, int epoch, int batch, const TrainLog& log, std::string_view what) {
  if (!std::isfinite(loss)) {
    throw TrainingDiverged(std::string(what) + " loss is not finite at epoch " + std::to_string(epoch) + ", batch " +
                               std::to_string(batch),
                           epoch, batch, log);
  }
}

void check_classes(const ModelGraph& m, const Dataset& data) {
  if (data.train.classes != m.classes || data.test.classes != m.classes) {
    throw ShapeError("dataset has " + std::to_string(data.train.classes) + " classes, model has " +
                     std::to_string(m.classes));
  }
}

void step_all(Tape& tape, ModelGraph& m, Sgd<float>& sgd) {
  for (const auto& key : tape.trainable_keys()) sgd.step(key, m.params.at(key));
}

}  // namespace

std::string_view to_string(JointMode mode) {
  switch (mode) {
    case JointMode::alternating: return "alternating";
    case JointMode::combined: return "combined";
    case JointMode::hint_only: return "hint_only";
  }
  return "?";
}

JointMode parse_joint_mode(std::string_view text) {
  for (JointMode m : {JointMode::alternating, JointMode::combined, JointMode::hint_only}) {
    if (to_string(m) == text) return m;
  }
  throw std::invalid_argument("unknown training mode '" + std::string(text) + "'");
}

std::string_view to_string(TaskLossKind kind) {
  return kind == TaskLossKind::cross_entropy ? "cross_entropy" : "l1_onehot";
}

TaskLossKind parse_task_loss(std::string_view text) {
  if (text == "cross_entropy") return TaskLossKind::cross_entropy;
  if (text == "l1_onehot") return TaskLossKind::l1_onehot;
  throw std::invalid_argument("unknown task loss '" + std::string(text) + "'");
}

std::string_view to_string(LrSchedule schedule) {
  return schedule == LrSchedule::constant ? "constant" : "cosine";
}

LrSchedule parse_lr_schedule(std::string_view text) {
  if (text == "constant") return LrSchedule::constant;
  if (text == "cosine") return LrSchedule::cosine;
  throw std::invalid_argument("unknown learning-rate schedule '" + std::string(text) + "'");
}

double TrainConfig::lr_at(int epoch) const {
  if (schedule == LrSchedule::constant || epochs <= 1) return lr;
  const double t = static_cast<double>(epoch - 1) / static_cast<double>(epochs - 1);
  const double floor = lr / 100.0;
  return floor + (lr - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

void TrainConfig::check() const {
  if (epochs < 0) throw std::invalid_argument("epochs must be non-negative");
  if (batch_size < 1) throw std::invalid_argument("batch size must be at least 1");
  check_sgd(sgd());
}

void JointTrainConfig::check() const {
  TrainConfig::check();
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw std::invalid_argument("alpha must be a non-negative number");
}

std::string TrainLog::csv() const {
  std::ostringstream out;
  out.precision(9);
  out << "epoch,hint_loss,task_loss,train_acc,test_acc,seconds\n";
  for (const auto& r : epochs) {
    out << r.epoch << ',';
    if (r.hint_loss) out << *r.hint_loss;
    out << ',' << r.task_loss << ',' << r.train_acc << ',' << r.test_acc << ',' << r.seconds << '\n';
  }
  return out.str();
}

void TrainLog::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << csv();
}

TrainLog TrainLog::parse_csv(const std::string& text) {
  TrainLog log;
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "epoch,hint_loss,task_loss,train_acc,test_acc,seconds") {
    throw std::invalid_argument("training log: missing header");
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream fields(line);
    for (std::string cell; std::getline(fields, cell, ',');) f.push_back(cell);
    if (f.size() == 5 && line.back() == ',') f.emplace_back();
    if (f.size() != 6) throw std::invalid_argument("training log: bad row '" + line + "'");
    try {
      EpochRecord r;
      r.epoch = std::stoi(f[0]);
      if (!f[1].empty()) r.hint_loss = std::stod(f[1]);
      r.task_loss = std::stod(f[2]);
      r.train_acc = std::stod(f[3]);
      r.test_acc = std::stod(f[4]);
      r.seconds = std::stod(f[5]);
      log.seconds += r.seconds;
      log.epochs.push_back(r);
    } catch (const std::logic_error&) {
      throw std::invalid_argument("training log: bad row '" + line + "'");
    }
  }
  return log;
}

std::optional<double> TrainLog::best_test_acc() const {
  std::optional<double> best;
  for (const auto& r : epochs) {
    if (!best || r.test_acc > *best) best = r.test_acc;
  }
  return best;
}

std::vector<int> predict(const ModelGraph& m, const TensorF& images) {
  std::vector<int> out;
  for (Index begin = 0; begin < images.dim(0); begin += kEvalChunk) {
    const Index count = std::min(kEvalChunk, images.dim(0) - begin);
    const TensorF logits = forward(m, rows(images, begin, count));
    for (Index n = 0; n < count; ++n) {
      Index best = 0;
      for (Index k = 1; k < logits.dim(1); ++k) {
        if (logits.at(n, k) > logits.at(n, best)) best = k;
      }
      out.push_back(static_cast<int>(best));
    }
  }
  return out;
}

SplitScore score(const ModelGraph& m, const Split& split, TaskLossKind kind) {
  if (split.classes != m.classes) {
    throw ShapeError("split has " + std::to_string(split.classes) + " classes, model has " +
                     std::to_string(m.classes));
  }
  SplitScore s;
  const Index n = split.size();
  if (n == 0) return s;
  double loss_sum = 0.0;
  for (Index begin = 0; begin < n; begin += kEvalChunk) {
    const Index count = std::min(kEvalChunk, n - begin);
    const TensorF logits = forward(m, rows(split.images, begin, count));
    const std::span<const int> labels(split.labels.data() + begin, static_cast<std::size_t>(count));
    loss_sum += label_loss(logits, labels, kind).value * static_cast<double>(count);
    s.correct += count_correct(logits, labels);
  }
  s.accuracy = static_cast<double>(s.correct) / static_cast<double>(n);
  s.loss = loss_sum / static_cast<double>(n);
  return s;
}

double hint_loss(const ModelGraph& teacher, const ModelGraph& student_mixed, std::string_view block,
                 std::string_view sim_block, const TensorF& x) {
  const TensorF t = forward_to_block(teacher, x, block);
  const TensorF s = forward_to_block(student_mixed, x, sim_block);
  if (t.shape() != s.shape()) {
    throw ShapeError("hint training needs the simulator output to have the same extent as the teacher block: '" +
                     std::string(block) + "' gives " + shape_string(t.shape()) + ", '" + std::string(sim_block) +
                     "' gives " + shape_string(s.shape()));
  }
  return l1_loss(s, t).value;
}

double task_loss(const ModelGraph& student_mixed, const TensorF& x, std::span<const int> labels, TaskLossKind kind) {
  return label_loss(forward(student_mixed, x), labels, kind).value;
}

TrainLog train_mixed(const ModelGraph& hint_source, std::string_view hint_block, ModelGraph& mixed,
                     std::string_view sim_block, const Dataset& data, const JointTrainConfig& cfg) {
  cfg.check();
  check_classes(mixed, data);
  const auto t0 = Clock::now();
  const std::size_t sim = mixed.block_index(sim_block);
  if (mixed.blocks[sim].role == BlockRole::classifier) {
    throw GraphError("the classifier cannot be a simulator");
  }
  const TensorF hints = tap_of_split(hint_source, hint_block, data.train.images);
  {
    const TensorF probe = forward_to_block(mixed, rows(data.train.images, 0, 1), sim_block);
    if (!std::equal(probe.shape().begin() + 1, probe.shape().end(), hints.shape().begin() + 1) ||
        probe.rank() != hints.rank()) {
      throw ShapeError("hint training needs the simulator output to have the same extent as the teacher block: '" +
                       std::string(hint_block) + "' gives " + shape_string(hints.shape()) + " over the split, '" +
                       std::string(sim_block) + "' gives " + shape_string(probe.shape()) + " per sample");
    }
  }

  const std::set<std::string> saved_frozen = mixed.frozen;
  freeze_all(mixed);
  unfreeze(mixed, block_node_ids(mixed.blocks[sim]));

  TrainLog log;
  Sgd<float> sgd(cfg.sgd());
  const float alpha = static_cast<float>(cfg.alpha);
  const std::size_t last = mixed.blocks.size() - 1;
  try {
    Tape tape(mixed, Mode::train);
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
      const auto e0 = Clock::now();
      sgd.set_lr(cfg.lr_at(epoch));
      BatchStream stream(data.train, cfg.batch_size, derive_seed(cfg.seed, "epoch", static_cast<std::uint64_t>(epoch)),
                         true);
      int batch = 0;
      while (auto b = stream.next()) {
        ++batch;
        const bool odd = batch % 2 == 1;
        bool use_hint = true, use_task = false;
        switch (cfg.mode) {
          case JointMode::hint_only: break;
          case JointMode::combined: use_task = true; break;
          case JointMode::alternating:
            use_hint = odd;
            use_task = !odd && alpha != 0.0f;
            break;
        }
        if (!use_hint && !use_task) continue;
        tape.zero_grad();
        const TensorF& out = tape.run(b->images, use_task ? std::nullopt : std::optional<std::size_t>(sim));
        std::vector<GradSeed> seeds;
        if (use_hint) {
          const TensorF target = gather_rows(hints, b->indices);
          const LossResult<float> h = l1_loss(tape.block_output(sim), target);
          check_finite(h.value, epoch, batch, log, "hint");
          seeds.push_back({sim, h.grad});
        }
        if (use_task) {
          LossResult<float> t = label_loss(out, b->labels, cfg.task_loss);
          check_finite(t.value, epoch, batch, log, "task");
          t.grad.values() *= alpha;
          seeds.push_back({last, std::move(t.grad)});
        }
        tape.backward(seeds);
        step_all(tape, mixed, sgd);
      }
      EpochRecord r;
      r.epoch = epoch;
      const SplitScore train = score(mixed, data.train, cfg.task_loss);
      r.hint_loss = l1_loss(tap_of_split(mixed, sim_block, data.train.images), hints).value;
      check_finite(*r.hint_loss, epoch, batch, log, "hint");
      r.task_loss = train.loss;
      r.train_acc = train.accuracy;
      r.test_acc = score(mixed, data.test, cfg.task_loss).accuracy;
      r.seconds = seconds_since(e0);
      log.epochs.push_back(r);
    }
  } catch (...) {
    mixed.frozen = saved_frozen;
    throw;
  }
  mixed.frozen = saved_frozen;
  log.seconds = seconds_since(t0);
  return log;
}

SimulatorResult train_simulator(const ModelGraph& hint_source, const ModelGraph& working, std::string_view first,
                                std::string_view last, const SimulatorPlan& plan, const std::string& sim_name,
                                const Dataset& data, const JointTrainConfig& cfg) {
  cfg.check();
  const BlockSpec block = plan_to_block(plan, sim_name);
  Rng rng = make_rng(cfg.seed, "simulator-init", fnv1a64(sim_name));
  SimulatorResult r;
  r.mixed = replace_blocks(working, first, last, block, init_block_params(block, rng));
  r.mixed.frozen = working.frozen;
  r.log = train_mixed(hint_source, last, r.mixed, sim_name, data, cfg);
  r.block = r.mixed.block(sim_name);
  for (const auto& id : block_node_ids(r.block)) {
    for (auto it = r.mixed.params.lower_bound(id + "."); it != r.mixed.params.end() && it->first.starts_with(id + ".");
         ++it) {
      r.params.insert(*it);
    }
  }
  return r;
}

SupervisedResult train_supervised(const ModelGraph& m, const Dataset& data, const TrainConfig& cfg) {
  cfg.check();
  check_classes(m, data);
  const auto t0 = Clock::now();
  SupervisedResult r{m, {}};
  ModelGraph work = m;
  Sgd<float> sgd(cfg.sgd());
  Tape tape(work, Mode::train);
  const std::size_t last = work.blocks.size() - 1;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto e0 = Clock::now();
    sgd.set_lr(cfg.lr_at(epoch));
    BatchStream stream(data.train, cfg.batch_size, derive_seed(cfg.seed, "epoch", static_cast<std::uint64_t>(epoch)),
                       true);
    int batch = 0;
    while (auto b = stream.next()) {
      ++batch;
      tape.zero_grad();
      LossResult<float> t = label_loss(tape.run(b->images), b->labels, cfg.task_loss);
      check_finite(t.value, epoch, batch, r.log, "task");
      tape.backward({{last, std::move(t.grad)}});
      step_all(tape, work, sgd);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    const SplitScore train = score(work, data.train, cfg.task_loss);
    check_finite(train.loss, epoch, batch, r.log, "task");
    rec.task_loss = train.loss;
    rec.train_acc = train.accuracy;
    rec.test_acc = score(work, data.test, cfg.task_loss).accuracy;
    rec.seconds = seconds_since(e0);
    const std::optional<double> best = r.log.best_test_acc();
    r.log.epochs.push_back(rec);
    if (!best || rec.test_acc > *best) r.best = work;
  }
  r.log.seconds = seconds_since(t0);
  return r;
}

}  // namespace deepobf
