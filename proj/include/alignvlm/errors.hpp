#pragma once

#include <stdexcept>
#include <string>

namespace alignvlm {

// Every error the library throws derives from Error so callers (the CLI in
// particular) can map categories onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class InputError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

// Raised when the training loss stays far above its starting value.
class DivergenceError : public NumericError {
 public:
  DivergenceError(int stage, const std::string& what)
      : NumericError(what), stage_(stage) {}
  int stage() const noexcept { return stage_; }

 private:
  int stage_;
};

class GradientStateError : public Error {
 public:
  using Error::Error;
};

}  // namespace alignvlm
