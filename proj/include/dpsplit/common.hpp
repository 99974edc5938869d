#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>

namespace dpsplit {

// Error taxonomy used across the library. All conditions that a caller can
// provoke map onto one of these; internal invariant violations use assert.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad parameter values, impossible sizes, malformed experiment setups.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error("config: " + msg) {}
};

// Data handed to an operation does not match its contract (shape, channels).
class InputError : public Error {
 public:
  explicit InputError(const std::string& msg) : Error("input: " + msg) {}
};

// Non-finite values or diverged computations surfaced to the caller.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& msg) : Error("numeric: " + msg) {}
};

// Missing or corrupt dataset files.
class IngestError : public Error {
 public:
  explicit IngestError(const std::string& msg) : Error("ingest: " + msg) {}
};

// Filesystem failures while writing artifacts.
class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error("io: " + msg) {}
};

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw Error(msg);
}

// Shortest round-trip decimal form, identical across reruns; the basis of
// byte-stable CSV output. Non-finite values get fixed spellings so they
// survive serialization formats without native infinity support.
inline std::string format_value(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_value(const std::string& s) {
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
    throw InputError("cannot parse number: " + s);
  return v;
}

}  // namespace dpsplit
