#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "deepobf/eval.hpp"
#include "deepobf/pipeline.hpp"

namespace deepobf {

/// Flat INI text: [section] headers, key = value lines, # comments.
/// Duplicate sections or keys are errors; values keep their source line.
struct IniValue {
  std::string text;
  int line = 0;
};
using IniSection = std::map<std::string, IniValue>;
struct IniDocument {
  std::map<std::string, IniSection> sections;
  std::map<std::string, int> section_lines;
};
IniDocument parse_ini(const std::string& text);

/// Everything a command needs. Every key is optional except where noted;
/// unknown sections and keys are rejected.
struct RunConfig {
  std::uint64_t seed = 1;
  std::filesystem::path out = "out";

  std::string data = "synth:4:3x16x16:200:50:7";
  std::vector<std::string> blocks{"incep:16", "incep:32", "maxpool:2", "incep:64"};

  TrainConfig train;
  PlanOptions plan;  // groups/widths refer to the model's block names
  AttackConfig attack;

  /// Seeds for each component, all derived from `seed`.
  std::uint64_t model_seed() const;
  std::uint64_t train_seed() const;
  std::uint64_t attack_seed() const;

  ModelGraph build_teacher() const;
  TrainConfig teacher_train() const;
  PlanOptions plan_options() const;
  AttackConfig attack_config() const;
};

/// Throws ConfigError carrying the offending line.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace deepobf
