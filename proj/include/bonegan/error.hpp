#pragma once

#include <stdexcept>
#include <string>

namespace bonegan {

// Base of every exception thrown by the library. `kind()` is a short stable
// tag used by the CLI when printing structured diagnostics.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

// Precondition violated by caller-supplied data (non-finite voxel, bad shape...).
struct InvalidInput : Error {
  explicit InvalidInput(const std::string& what) : Error("invalid_input", what) {}
};

// Malformed or truncated file.
struct FormatError : Error {
  explicit FormatError(const std::string& what) : Error("format_error", what) {}
};

struct IoError : Error {
  explicit IoError(const std::string& what) : Error("io_error", what) {}
};

// Invalid configuration (unknown key, out-of-range hyperparameter, ...).
struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error("config_error", what) {}
};

// A statistic that is undefined for the given data, e.g. TMD of a volume
// with no voxel above threshold.
struct UndefinedStatistic : Error {
  explicit UndefinedStatistic(const std::string& what) : Error("undefined_statistic", what) {}
};

}  // namespace bonegan
