#pragma once

#include <stdexcept>
#include <string>

namespace davpt {

enum class ErrorKind {
  Dimension,
  Contract,
  Config,
  Format,
  Io,
  Numeric,
  Diverged,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct DimensionError : Error {
  explicit DimensionError(const std::string& what) : Error(ErrorKind::Dimension, what) {}
};

struct ContractError : Error {
  explicit ContractError(const std::string& what) : Error(ErrorKind::Contract, what) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error(ErrorKind::Config, what) {}
};

struct IoError : Error {
  explicit IoError(const std::string& what) : Error(ErrorKind::Io, what) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& what) : Error(ErrorKind::Numeric, what) {}
};

/// Distinguishes the ways a binary file can be rejected.
enum class FormatIssue {
  BadMagic,
  UnsupportedVersion,
  Truncated,
  TrailingBytes,
  BadHeader,
  BadLabel,
};

class FormatError : public Error {
 public:
  FormatError(FormatIssue issue, const std::string& what) : Error(ErrorKind::Format, what), issue_(issue) {}
  FormatIssue issue() const noexcept { return issue_; }

 private:
  FormatIssue issue_;
};

}  // namespace davpt
