#pragma once

#include <stdexcept>
#include <string>

namespace poisonforge {

// Base of every error the library raises.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// A forward/backward pass or an optimizer step produced NaN or Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

class AutodiffError : public Error {
 public:
  using Error::Error;
};

// Malformed or inconsistent input data (IDX files, checkpoints, manifests).
class DataError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Attack training diverged or stalled.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

// ASR is undefined because the clean model recognizes no trigger sample.
class ZeroDenominatorError : public Error {
 public:
  using Error::Error;
};

}  // namespace poisonforge
