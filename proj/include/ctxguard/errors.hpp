#pragma once

#include <stdexcept>
#include <string>

namespace ctxguard {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class GeometryError : public Error {
 public:
  using Error::Error;
};

/// Scene placement gave up; the caller retries with an advanced rng.
class GenerationError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class VersionError : public Error {
 public:
  using Error::Error;
};

class CapacityError : public Error {
 public:
  using Error::Error;
};

class ConsistencyError : public Error {
 public:
  using Error::Error;
};

/// Invalid or unknown run-configuration content.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A pipeline stage needs an artifact that has not been produced yet.
class PrerequisiteError : public Error {
 public:
  explicit PrerequisiteError(const std::string& path)
      : Error("missing prerequisite: " + path), path_(path) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

}  // namespace ctxguard
