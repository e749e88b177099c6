#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace dubox {

// Base of every error the library throws. `kind()` is a stable token used
// by the CLI when it prints a machine-parsable failure line.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
  virtual const char* kind() const noexcept { return "Error"; }
};

class ShapeError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "ShapeError"; }
};

// Non-finite value produced by (or fed into) a numeric operation.
class NumericError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "NumericError"; }
};

// Violated precondition of an API call.
class ContractError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "ContractError"; }
};

class DegenerateBoxError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "DegenerateBoxError"; }
};

// Malformed binary or text file. Carries the byte offset where parsing failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte " + std::to_string(offset) + ")"),
        offset_(offset) {}
  const char* kind() const noexcept override { return "FormatError"; }
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

// Invalid run configuration. `key_path` names the offending key, e.g.
// "optimizer.lr".
class ConfigError : public Error {
 public:
  ConfigError(std::string key_path, const std::string& what)
      : Error(key_path + ": " + what), key_path_(std::move(key_path)) {}
  const char* kind() const noexcept override { return "ConfigError"; }
  const std::string& key_path() const noexcept { return key_path_; }

 private:
  std::string key_path_;
};

class IOError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "IOError"; }
};

}  // namespace dubox
