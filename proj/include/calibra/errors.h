#pragma once

#include <stdexcept>
#include <string>

namespace calibra {

// Malformed or unreadable input files. Maps to CLI exit code 4.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Data or configuration violates a precondition. Maps to exit code 2.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// The origin is not interior to the convex hull of the constraint rows,
// so no positive weights satisfy the moment constraints. Exit code 3.
class ConvexHullViolation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Constraint columns are collinear beyond the solver's tolerance.
class RankDeficiency : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace calibra
