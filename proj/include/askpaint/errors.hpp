#pragma once

#include <stdexcept>
#include <string>

namespace askpaint {

// Bad input values or shapes supplied by a caller.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Inconsistent configuration (channel counts, image sizes, topology).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// An operation was attempted in a state that does not permit it.
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class NotFoundError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Checkpoint loading failures. Each cause has its own type so callers can
// distinguish them without parsing messages.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class CorruptCheckpointError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class CheckpointVersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class CheckpointShapeError : public CheckpointError {
 public:
  CheckpointShapeError(const std::string& array_name, const std::string& what)
      : CheckpointError(what), array_name_(array_name) {}
  const std::string& array_name() const noexcept { return array_name_; }

 private:
  std::string array_name_;
};

// Training diverged or could not persist its state.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace askpaint
