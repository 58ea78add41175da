#pragma once

#include <stdexcept>
#include <string>

namespace qgait {

/// Base class for every error raised by the library. `kind()` is a short
/// stable token used by the CLI when it prints machine-parseable errors.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

struct DimensionError : Error {
  explicit DimensionError(const std::string& w) : Error("dimension", w) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error("config", w) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& w) : Error("numeric", w) {}
};
struct UsageError : Error {
  explicit UsageError(const std::string& w) : Error("usage", w) {}
};
struct IoError : Error {
  explicit IoError(const std::string& w) : Error("io", w) {}
};
struct TrainingError : Error {
  TrainingError(const std::string& w, long iteration)
      : Error("training", w + " at iteration " + std::to_string(iteration)),
        iteration_(iteration) {}
  long iteration() const noexcept { return iteration_; }

 private:
  long iteration_;
};
struct LoweringError : Error {
  explicit LoweringError(const std::string& w) : Error("lowering", w) {}
};

}  // namespace qgait
