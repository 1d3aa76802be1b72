#pragma once

#include <stdexcept>
#include <string>

namespace calliope {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// numerics
class ShapeMismatch : public Error {
 public:
  using Error::Error;
};
class NonFiniteValue : public Error {
 public:
  using Error::Error;
};
class NotScalar : public Error {
 public:
  using Error::Error;
};

// midi / tokenization
class MalformedHeader : public Error {
 public:
  using Error::Error;
};
class UnsupportedFormat : public Error {
 public:
  using Error::Error;
};
class TruncatedChunk : public Error {
 public:
  using Error::Error;
};
class EmptyAfterQuantize : public Error {
 public:
  using Error::Error;
};
class InvalidNote : public Error {
 public:
  using Error::Error;
};

// training / io
class TooFewSongs : public Error {
 public:
  using Error::Error;
};
class NonFiniteLoss : public Error {
 public:
  using Error::Error;
};
class BarsMismatch : public Error {
 public:
  using Error::Error;
};
class ConfigError : public Error {
 public:
  using Error::Error;
};
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace calliope
