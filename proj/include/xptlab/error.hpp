#pragma once

#include <stdexcept>
#include <string>

namespace xptlab {

// Failure categories map onto distinct process exit codes in the CLI.
enum class ErrorKind {
  kInput = 2,
  kInvariant = 3,
  kIo = 4,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Shapes that cannot be combined by an operation.
class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& what) : Error(ErrorKind::kInput, what) {}
};

/// Index outside its valid range (labels, token ids, language ids).
class IndexError : public Error {
 public:
  explicit IndexError(const std::string& what) : Error(ErrorKind::kInput, what) {}
};

/// A caller broke an operation's precondition.
class ContractError : public Error {
 public:
  explicit ContractError(const std::string& what) : Error(ErrorKind::kInput, what) {}
};

/// Malformed or missing user input (configs, datasets, sizes).
class InputError : public Error {
 public:
  explicit InputError(const std::string& what) : Error(ErrorKind::kInput, what) {}
};

/// A runtime invariant was violated, e.g. the frozen backbone changed.
class InvariantError : public Error {
 public:
  explicit InvariantError(const std::string& what) : Error(ErrorKind::kInvariant, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorKind::kIo, what) {}
};

// Checkpoint container failures. Each has its own type so callers can tell
// a foreign file from a newer format from a damaged one.
class BadMagicError : public IoError {
 public:
  explicit BadMagicError(const std::string& what) : IoError(what) {}
};

class VersionError : public IoError {
 public:
  explicit VersionError(const std::string& what) : IoError(what) {}
};

class ChecksumError : public IoError {
 public:
  explicit ChecksumError(const std::string& what) : IoError(what) {}
};

}  // namespace xptlab
