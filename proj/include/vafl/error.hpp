#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace vafl {

// Workers are numbered 1..q everywhere an id crosses a module boundary
// (tree leaves, event records, partition ownership). Block indices are 0-based.
using WorkerId = std::size_t;

inline std::size_t block_of(WorkerId id) { return id - 1; }
inline WorkerId worker_of(std::size_t block) { return block + 1; }

class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class BoundsError : public std::out_of_range {
 public:
  BoundsError(std::size_t line, const std::string& what)
      : std::out_of_range("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class InvalidPartition : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an aggregation request violates the reduction protocol
/// (missing contributions, unsafe tree pair, mismatched leaf sets).
class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ConvergenceError : public std::runtime_error {
 public:
  ConvergenceError(const std::string& what, double achieved)
      : std::runtime_error(what + " (achieved gradient norm " + std::to_string(achieved) + ")"),
        achieved_(achieved) {}
  double achieved() const noexcept { return achieved_; }

 private:
  double achieved_;
};

class AnalysisError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace vafl
