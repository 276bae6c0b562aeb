#ifndef SEED_ERRORS_HPP_
#define SEED_ERRORS_HPP_

#include <stdexcept>
#include <string>

namespace seed {

// Exit codes used by the command line tool. Each error class maps to one.
enum class ExitCode : int {
  kOk = 0,
  kConfig = 2,
  kContract = 3,
  kNumeric = 4,
};

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual ExitCode exit_code() const = 0;
};

// Bad configuration, shapes that do not fit together, missing files.
class ConfigError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const override { return ExitCode::kConfig; }
};

// A caller broke an operation's precondition.
class ContractViolation : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const override { return ExitCode::kContract; }
};

// Non-finite values surfaced during training or evaluation.
class NumericError : public Error {
 public:
  NumericError(const std::string& what, std::string snapshot_path = {})
      : Error(what), snapshot_path_(std::move(snapshot_path)) {}
  ExitCode exit_code() const override { return ExitCode::kNumeric; }
  const std::string& snapshot_path() const { return snapshot_path_; }

 private:
  std::string snapshot_path_;
};

// Checkpoint or manifest could not be read.
class LoadError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

}  // namespace seed

#endif  // SEED_ERRORS_HPP_
