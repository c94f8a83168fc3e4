#pragma once

#include <stdexcept>
#include <string>

namespace mixlat {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Caller broke a precondition (shape, count, dimension).
class ContractViolation : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf in an input or an intermediate.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed file. Carries the byte offset at which parsing failed.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class GenerationError : public Error {
 public:
  using Error::Error;
};

/// Model unusable for inference (non-finite parameters, shape mismatch).
class ModelError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint written by an incompatible version or under a different config.
class IncompatibleError : public Error {
 public:
  using Error::Error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ContractViolation(msg);
}

}  // namespace mixlat
