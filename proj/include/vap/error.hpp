#pragma once

#include <stdexcept>
#include <string>

namespace vap {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input file (annotation, manifest, WAV, checkpoint).
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Inconsistent or out-of-range configuration values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Index, frame or time outside the valid range of a container.
class RangeError : public Error {
 public:
  using Error::Error;
};

/// Violation of the streaming wire protocol.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

}  // namespace vap
