#pragma once

#include <stdexcept>
#include <string>

namespace pcct {

/// Invalid configuration or violated precondition on caller-supplied values.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// An upstream stage has not produced the artifacts a stage needs.
class DependencyError : public std::runtime_error {
 public:
  DependencyError(std::string stage, const std::string& what)
      : std::runtime_error("missing upstream stage '" + stage + "': " + what),
        stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

/// NaN/Inf produced during a computation (training divergence, bad input).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// On-disk artifact is malformed or fails its integrity check.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ConfigError(msg);
}

}  // namespace pcct
