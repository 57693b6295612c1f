#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace nupix {

// Thrown when a tensor/image shape does not match what an operation expects.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Thrown when an input value is outside the mathematical domain of an operation.
struct DomainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Thrown for invalid configurations (bad stage specs, priors, constraint sets...).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Thrown when a file on disk does not match its declared format.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Thrown when a checkpoint's embedded hash or version does not match.
struct VersionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Thrown when a pluggable component (e.g. a log-prob provider) violates its contract.
struct InterfaceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Thrown when a file or directory cannot be created, read or written.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Thrown when a pipeline stage fails; the message names the stage.
struct PipelineError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// FNV-1a, used for config hashes embedded in checkpoints and run directory names.
inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ull) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hex_hash(std::uint64_t h) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<size_t>(i)] = digits[h & 0xf];
    h >>= 4;
  }
  return s;
}

}  // namespace nupix
