#pragma once

#include <stdexcept>
#include <string>

namespace potl {

// Malformed or inconsistent input data (CLI exit code 2).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Numerical breakdown: singular risk sets, NaN scores, ascent violations
// (CLI exit code 3).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace potl
