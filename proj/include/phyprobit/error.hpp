#pragma once

#include <stdexcept>
#include <string>

namespace phyprobit {

/// Malformed user input (tree text, trait tables, config values).
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A numerical invariant broke during sampling or linear algebra.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace phyprobit
