#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace neurofuse {

enum class ErrorKind {
  Dimension,
  Numeric,
  Contract,
  InsufficientData,
  DegenerateSeries,
  DegenerateGraph,
  Vocabulary,
  Stratification,
  UndefinedMetric,
  Divergence,
  Config,
  Io,
};

std::string_view to_string(ErrorKind kind);

// Every failure raised by the library. `module()` names the subsystem that
// detected the problem so the CLI can emit a machine-readable record.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, std::string module, const std::string& message)
      : std::runtime_error(message), kind_(kind), module_(std::move(module)) {}

  ErrorKind kind() const noexcept { return kind_; }
  const std::string& module() const noexcept { return module_; }

 private:
  ErrorKind kind_;
  std::string module_;
};

[[noreturn]] inline void fail(ErrorKind kind, std::string module,
                              const std::string& message) {
  throw Error(kind, std::move(module), message);
}

}  // namespace neurofuse
