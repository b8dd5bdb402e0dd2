#include "deepobf/config.hpp"

#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "deepobf/architectures.hpp"

namespace deepobf {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_trim(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(s);
  while (std::getline(in, cell, sep)) out.push_back(trim(cell));
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

template <typename T>
T parse_number(const IniValue& v, const std::string& key) {
  try {
    std::size_t used = 0;
    T out{};
    if constexpr (std::is_same_v<T, double>) {
      out = std::stod(v.text, &used);
    } else if constexpr (std::is_same_v<T, std::uint64_t>) {
      if (!v.text.empty() && v.text[0] == '-') throw std::invalid_argument("negative");
      out = std::stoull(v.text, &used);
    } else {
      out = static_cast<T>(std::stoll(v.text, &used));
    }
    if (used == v.text.size()) return out;
  } catch (const std::exception&) {
  }
  throw ConfigError("'" + key + "' needs a number, got '" + v.text + "'", v.line);
}

std::vector<Index> parse_widths(const std::string& text, const IniValue& v, const std::string& key) {
  std::vector<Index> out;
  for (const auto& cell : split_trim(text, ',')) {
    out.push_back(parse_number<Index>({cell, v.line}, key));
    if (out.back() < 1) throw ConfigError("'" + key + "' widths must be positive", v.line);
  }
  return out;
}

template <typename F>
auto enum_value(const IniValue& v, F parse) {
  try {
    return parse(v.text);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what(), v.line);
  }
}

// Applies known keys of a section; anything left over is an error.
class SectionReader {
 public:
  SectionReader(const std::string& name, const IniSection& s) : name_(name), s_(s) {}

  void on(const std::string& key, const std::function<void(const IniValue&)>& f) {
    handled_.insert(key);
    if (auto it = s_.find(key); it != s_.end()) f(it->second);
  }

  void finish() const {
    for (const auto& [key, v] : s_) {
      if (!handled_.count(key)) throw ConfigError("unknown key '" + key + "' in [" + name_ + "]", v.line);
    }
  }

 private:
  std::string name_;
  const IniSection& s_;
  std::set<std::string> handled_;
};

void read_train(SectionReader& r, TrainConfig& c) {
  r.on("epochs", [&](const IniValue& v) {
    c.epochs = parse_number<int>(v, "epochs");
    if (c.epochs < 0) throw ConfigError("'epochs' must be non-negative", v.line);
  });
  r.on("lr", [&](const IniValue& v) {
    c.lr = parse_number<double>(v, "lr");
    if (!(c.lr > 0.0)) throw ConfigError("'lr' must be positive", v.line);
  });
  r.on("momentum", [&](const IniValue& v) {
    c.momentum = parse_number<double>(v, "momentum");
    if (c.momentum < 0.0) throw ConfigError("'momentum' must be non-negative", v.line);
  });
  r.on("weight_decay", [&](const IniValue& v) {
    c.weight_decay = parse_number<double>(v, "weight_decay");
    if (c.weight_decay < 0.0) throw ConfigError("'weight_decay' must be non-negative", v.line);
  });
  r.on("batch_size", [&](const IniValue& v) {
    c.batch_size = parse_number<Index>(v, "batch_size");
    if (c.batch_size < 1) throw ConfigError("'batch_size' must be at least 1", v.line);
  });
  r.on("schedule", [&](const IniValue& v) { c.schedule = enum_value(v, parse_lr_schedule); });
  r.on("task_loss", [&](const IniValue& v) { c.task_loss = enum_value(v, parse_task_loss); });
}

void read_joint(SectionReader& r, JointTrainConfig& c) {
  read_train(r, c);
  r.on("alpha", [&](const IniValue& v) {
    c.alpha = parse_number<double>(v, "alpha");
    if (!(c.alpha >= 0.0)) throw ConfigError("'alpha' must be non-negative", v.line);
  });
  r.on("mode", [&](const IniValue& v) { c.mode = enum_value(v, parse_joint_mode); });
}

std::optional<int> parse_depth(const IniValue& v) {
  if (v.text == "auto") return std::nullopt;
  const int d = parse_number<int>(v, "depth");
  if (d < 1) throw ConfigError("'depth' must be at least 1 or 'auto'", v.line);
  return d;
}

}  // namespace

IniDocument parse_ini(const std::string& text) {
  IniDocument doc;
  std::istringstream in(text);
  std::string raw;
  std::string section;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const auto hash = raw.find('#');
    const std::string s = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (s.empty()) continue;
    if (s.front() == '[') {
      if (s.back() != ']') throw ConfigError("unterminated section header", line);
      section = trim(s.substr(1, s.size() - 2));
      if (section.empty()) throw ConfigError("empty section name", line);
      if (doc.sections.count(section)) throw ConfigError("duplicate section [" + section + "]", line);
      doc.sections[section];
      doc.section_lines[section] = line;
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("expected 'key = value'", line);
    if (section.empty()) throw ConfigError("key outside of any section", line);
    const std::string key = trim(s.substr(0, eq));
    if (key.empty()) throw ConfigError("empty key", line);
    auto& sec = doc.sections[section];
    if (sec.count(key)) throw ConfigError("duplicate key '" + key + "' in [" + section + "]", line);
    sec[key] = {trim(s.substr(eq + 1)), line};
  }
  return doc;
}

std::uint64_t RunConfig::model_seed() const { return derive_seed(seed, "model-init"); }
std::uint64_t RunConfig::train_seed() const { return derive_seed(seed, "teacher-train"); }
std::uint64_t RunConfig::attack_seed() const { return derive_seed(seed, "attack"); }

ModelGraph RunConfig::build_teacher() const {
  const DatasetSpec spec = DatasetSpec::parse(data);
  return build_model(spec.extent, spec.classes, blocks, model_seed());
}

TrainConfig RunConfig::teacher_train() const {
  TrainConfig c = train;
  c.seed = train_seed();
  return c;
}

PlanOptions RunConfig::plan_options() const {
  PlanOptions o = plan;
  o.seed = seed;
  return o;
}

AttackConfig RunConfig::attack_config() const {
  AttackConfig a = attack;
  a.train.seed = attack_seed();
  return a;
}

RunConfig parse_run_config(const std::string& text) {
  const IniDocument doc = parse_ini(text);
  RunConfig c;
  c.plan.round1_train.mode = JointMode::alternating;
  const std::set<std::string> known{"run", "data", "model", "train", "round1", "finetune", "round2", "attack"};
  for (const auto& [name, line] : doc.section_lines) {
    if (!known.count(name)) throw ConfigError("unknown section [" + name + "]", line);
  }
  auto section = [&](const std::string& name, const std::function<void(SectionReader&)>& body) {
    auto it = doc.sections.find(name);
    if (it == doc.sections.end()) return;
    SectionReader r(name, it->second);
    body(r);
    r.finish();
  };
  section("run", [&](SectionReader& r) {
    r.on("seed", [&](const IniValue& v) { c.seed = parse_number<std::uint64_t>(v, "seed"); });
    r.on("out", [&](const IniValue& v) { c.out = v.text; });
  });
  section("data", [&](SectionReader& r) {
    r.on("spec", [&](const IniValue& v) {
      try {
        DatasetSpec::parse(v.text);
      } catch (const ConfigError& e) {
        throw ConfigError(e.what(), v.line);
      }
      c.data = v.text;
    });
  });
  section("model", [&](SectionReader& r) {
    r.on("blocks", [&](const IniValue& v) {
      c.blocks = split_trim(v.text, ',');
      for (const auto& b : c.blocks) {
        if (b.empty()) throw ConfigError("empty block descriptor", v.line);
      }
    });
  });
  section("train", [&](SectionReader& r) { read_train(r, c.train); });
  section("round1", [&](SectionReader& r) {
    read_joint(r, c.plan.round1_train);
    r.on("groups", [&](const IniValue& v) {
      c.plan.groups.clear();
      for (const auto& g : split_trim(v.text, ';')) {
        const auto dots = g.find("..");
        if (g.empty()) throw ConfigError("empty group", v.line);
        if (dots == std::string::npos) {
          c.plan.groups.emplace_back(g, g);
        } else {
          c.plan.groups.emplace_back(trim(g.substr(0, dots)), trim(g.substr(dots + 2)));
        }
      }
    });
    r.on("depth", [&](const IniValue& v) { c.plan.round1_depth = parse_depth(v); });
    r.on("widths", [&](const IniValue& v) {
      c.plan.round1_widths.clear();
      for (const auto& g : split_trim(v.text, ';')) c.plan.round1_widths.push_back(parse_widths(g, v, "widths"));
    });
  });
  section("finetune", [&](SectionReader& r) { read_train(r, c.plan.finetune); });
  section("round2", [&](SectionReader& r) {
    read_joint(r, c.plan.round2_train);
    r.on("depth", [&](const IniValue& v) { c.plan.round2_depth = parse_depth(v); });
    r.on("widths", [&](const IniValue& v) { c.plan.round2_widths = parse_widths(v.text, v, "widths"); });
  });
  section("attack", [&](SectionReader& r) {
    read_train(r, c.attack.train);
    r.on("kind", [&](const IniValue& v) { c.attack.kind = enum_value(v, parse_attack_kind); });
    r.on("dataset", [&](const IniValue& v) {
      try {
        DatasetSpec::parse(v.text);
      } catch (const ConfigError& e) {
        throw ConfigError(e.what(), v.line);
      }
      c.attack.dataset = v.text;
    });
    r.on("new_classes", [&](const IniValue& v) { c.attack.new_classes = parse_number<Index>(v, "new_classes"); });
  });
  // Model blocks are named b1..bN in order.
  for (const auto& [first, last] : c.plan.groups) {
    for (const auto& name : {first, last}) {
      bool known_block = false;
      for (std::size_t i = 1; i <= c.blocks.size(); ++i) known_block = known_block || name == "b" + std::to_string(i);
      if (!known_block) {
        throw ConfigError("[round1] group refers to unknown block '" + name + "'",
                          doc.sections.at("round1").at("groups").line);
      }
    }
  }
  if (!c.plan.round1_widths.empty() && !c.plan.groups.empty() &&
      c.plan.round1_widths.size() != c.plan.groups.size()) {
    throw ConfigError("[round1] lists " + std::to_string(c.plan.round1_widths.size()) + " width groups for " +
                          std::to_string(c.plan.groups.size()) + " block groups",
                      doc.sections.at("round1").at("widths").line);
  }
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config '" + path.string() + "'");
  std::ostringstream s;
  s << in.rdbuf();
  try {
    return parse_run_config(s.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

}  // namespace deepobf
