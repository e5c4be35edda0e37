#pragma once

#include <stdexcept>
#include <string>

namespace moelab {

// Common base so the CLI can map any library failure to a machine-readable
// record with a stable `kind` tag.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& msg)
      : std::runtime_error(msg), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

struct InvalidInput : Error {
  explicit InvalidInput(const std::string& msg) : Error("invalid_input", msg) {}
};

struct InvalidConfig : Error {
  explicit InvalidConfig(const std::string& msg) : Error("invalid_config", msg) {}
};

struct InvalidRoute : Error {
  explicit InvalidRoute(const std::string& msg) : Error("invalid_route", msg) {}
};

// A cached forward trace does not belong to the parameters it is used with.
struct TraceMismatch : Error {
  explicit TraceMismatch(const std::string& msg) : Error("trace_mismatch", msg) {}
};

struct CorruptCheckpoint : Error {
  explicit CorruptCheckpoint(const std::string& msg) : Error("corrupt_checkpoint", msg) {}
};

struct CorruptData : Error {
  explicit CorruptData(const std::string& msg) : Error("corrupt_data", msg) {}
};

// A reference computation (finite differences, cross-checked estimator)
// could not produce a trustworthy value.
struct OracleFailure : Error {
  explicit OracleFailure(const std::string& msg) : Error("oracle_failure", msg) {}
};

struct TrainDiverged : Error {
  explicit TrainDiverged(const std::string& msg) : Error("train_diverged", msg) {}
};

struct PipelineError : Error {
  explicit PipelineError(const std::string& msg) : Error("pipeline_error", msg) {}
};

// Broken internal postcondition; always a bug, never a user error.
struct InternalInvariant : Error {
  explicit InternalInvariant(const std::string& msg) : Error("internal_invariant", msg) {}
};

}  // namespace moelab
