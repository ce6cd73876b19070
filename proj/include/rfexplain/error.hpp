#pragma once

#include <stdexcept>
#include <string>

namespace rfexplain {

// Stable across releases; the CLI maps these directly onto exit codes.
enum class ErrorCategory { config = 1, data = 2, model_mismatch = 3, stage = 4 };

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorCategory::config, what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ErrorCategory::data, what) {}
};

class ModelMismatchError : public Error {
 public:
  explicit ModelMismatchError(const std::string& what)
      : Error(ErrorCategory::model_mismatch, what) {}
};

class StageError : public Error {
 public:
  explicit StageError(const std::string& what) : Error(ErrorCategory::stage, what) {}
};

}  // namespace rfexplain
