#pragma once

#include <stdexcept>
#include <string>

namespace qct {

/// Base for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration value or combination (CLI exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Caller violated a precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public ContractError {
 public:
  using ContractError::ContractError;
};

class IndexError : public ContractError {
 public:
  using ContractError::ContractError;
};

/// CTC target cannot be aligned to the available frames.
class InfeasibleTargetError : public ContractError {
 public:
  using ContractError::ContractError;
};

/// A precision assignment does not cover the model's quantizable tensors.
class AssignmentError : public ContractError {
 public:
  using ContractError::ContractError;
};

/// Non-finite training loss (CLI exit code 3).
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// Malformed archive, checkpoint, or dataset file (CLI exit code 4).
class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// WER is undefined for an empty reference.
class UndefinedWerError : public ContractError {
 public:
  using ContractError::ContractError;
};

}  // namespace qct
