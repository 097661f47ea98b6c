#pragma once

#include <stdexcept>
#include <string>

namespace firmbound {

// Precondition violations on user-supplied data.
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A posterior with a zero entry was asked to produce an LLR.
class DegeneratePosterior : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Solver breakdown: failed factorization, divergence, non-finite loss.
class NumericFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace firmbound
