// SPDX-License-Identifier: Apache-2.0

#ifndef SEQTR_ERRORS_HPP
#define SEQTR_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace seqtr {

/// Shape or width disagreement between operands.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Non-finite values or values outside an operation's numeric domain.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace seqtr

#endif  // SEQTR_ERRORS_HPP
