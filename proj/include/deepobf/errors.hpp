#pragma once

#include <stdexcept>
#include <string>

namespace deepobf {

/// Extent or channel mismatch between tensors, parameters, or block interfaces.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed model graph (dangling references, cycles, unknown ids).
class GraphError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A block that cannot be analysed or collapsed by the kernel calculus.
class AnalysisError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Non-finite loss during training. Carries where it happened.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, int epoch, int batch)
      : std::runtime_error(what), epoch_(epoch), batch_(batch) {}
  int epoch() const { return epoch_; }
  int batch() const { return batch_; }

 private:
  int epoch_;
  int batch_;
};

/// Bad config file or command-line usage. `line` is 0 when not line-anchored.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& what, int line = 0)
      : std::runtime_error(line > 0 ? "line " + std::to_string(line) + ": " + what : what),
        line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

}  // namespace deepobf
