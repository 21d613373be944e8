#pragma once

#include <stdexcept>
#include <string>

namespace ulsa {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeMismatch : public Error {
 public:
  using Error::Error;
};

/// A forward value turned NaN/Inf, or an optimizer step saw a non-finite gradient.
class NonFinite : public Error {
 public:
  using Error::Error;
};

class InsufficientTissue : public Error {
 public:
  using Error::Error;
};

class DegenerateStains : public Error {
 public:
  using Error::Error;
};

class MissingTranslator : public Error {
 public:
  using Error::Error;
};

class EmptyPool : public Error {
 public:
  using Error::Error;
};

class SingleClass : public Error {
 public:
  using Error::Error;
};

/// User-facing configuration problems (bad keys, values, missing paths).
class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace ulsa
