#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace tsdpo {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NameError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Raised when a primitive produces NaN/Inf. Carries the offending node.
class NonFiniteError : public Error {
 public:
  NonFiniteError(std::size_t node, const std::string& what)
      : Error(what), node_(node) {}
  std::size_t node() const { return node_; }

 private:
  std::size_t node_;
};

/// Malformed or invariant-violating input data. line() is 1-based, 0 if n/a.
class DataError : public Error {
 public:
  DataError(std::size_t line, const std::string& what)
      : Error(what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// A prerequisite artifact is absent on disk.
class MissingDependency : public Error {
 public:
  explicit MissingDependency(std::string path)
      : Error("missing prerequisite: " + path), path_(std::move(path)) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

}  // namespace tsdpo
