#pragma once

#include <stdexcept>
#include <string>

namespace fb {

// Encoder transport / backend failure (remote service down, protocol error).
class EncoderUnavailableError : public std::runtime_error {
 public:
  explicit EncoderUnavailableError(const std::string& what)
      : std::runtime_error(what) {}
};

// Malformed or inconsistent experiment configuration.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// File ingestion / persistence failure, carries a reason string.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace fb
