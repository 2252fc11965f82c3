#pragma once

#include <stdexcept>
#include <string>

namespace fmapkit {

/// Coarse failure class. Usage and I/O problems map to exit code 2, numerical
/// failures to exit code 1.
enum class ErrorKind {
  parse,
  topology,
  io,
  usage,
  dimension,
  singular,
  convergence,
  hierarchy,
  numeric,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

  bool is_computational() const noexcept {
    switch (kind_) {
      case ErrorKind::singular:
      case ErrorKind::convergence:
      case ErrorKind::hierarchy:
      case ErrorKind::numeric:
        return true;
      default:
        return false;
    }
  }

 private:
  ErrorKind kind_;
};

struct ParseError : Error {
  explicit ParseError(const std::string& what) : Error(ErrorKind::parse, "parse error: " + what) {}
};

struct TopologyError : Error {
  explicit TopologyError(const std::string& what) : Error(ErrorKind::topology, "topology error: " + what) {}
};

struct IoError : Error {
  explicit IoError(const std::string& what) : Error(ErrorKind::io, "io error: " + what) {}
};

struct UsageError : Error {
  explicit UsageError(const std::string& what) : Error(ErrorKind::usage, what) {}
};

struct DimensionError : Error {
  explicit DimensionError(const std::string& what) : Error(ErrorKind::dimension, "dimension mismatch: " + what) {}
};

/// A linear system could not be solved. `row` is the functional-map row whose
/// system failed, or -1 for whole-matrix solves.
struct SingularError : Error {
  SingularError(const std::string& what, long row)
      : Error(ErrorKind::singular, "singular system: " + what), row(row) {}
  long row;
};

struct ConvergenceError : Error {
  explicit ConvergenceError(const std::string& what) : Error(ErrorKind::convergence, "no convergence: " + what) {}
};

struct HierarchyError : Error {
  explicit HierarchyError(const std::string& what) : Error(ErrorKind::hierarchy, "hierarchy error: " + what) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& what) : Error(ErrorKind::numeric, what) {}
};

}  // namespace fmapkit
