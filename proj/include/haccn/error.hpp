#pragma once

#include <stdexcept>
#include <string>

namespace haccn {

// Each error kind maps onto one CLI exit code (see tools/haccn.cpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad parameter values or malformed configuration.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// Input data that violates a contract: out-of-bounds points, shape mismatches,
// unknown tensor names in a checkpoint.
class InvalidData : public Error {
 public:
  using Error::Error;
};

class ShapeError : public InvalidData {
 public:
  using InvalidData::InvalidData;
};

// Non-finite loss during an optimisation loop.
class Diverged : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace haccn
