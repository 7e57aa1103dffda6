// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace kdq {

/// Shape/dimension mismatch in a tensor primitive or layer.
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error("shape error: " + msg) {}
};

/// Invalid scalar argument (temperature, threshold, ...).
struct ParamError : std::runtime_error {
  explicit ParamError(const std::string& msg) : std::runtime_error("parameter error: " + msg) {}
};

/// Caller broke an API contract (non-scalar loss, missing grads, ...).
struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& msg) : std::runtime_error("contract error: " + msg) {}
};

/// Invalid or inconsistent configuration.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

/// Calibration could not produce usable statistics.
struct CalibrationError : std::runtime_error {
  explicit CalibrationError(const std::string& msg) : std::runtime_error("calibration error: " + msg) {}
};

/// INT8 conversion failure (missing stats, overflow risk, ...).
struct ConversionError : std::runtime_error {
  explicit ConversionError(const std::string& msg) : std::runtime_error("conversion error: " + msg) {}
};

/// Corrupt or incompatible file contents.
struct FormatError : std::runtime_error {
  explicit FormatError(const std::string& msg) : std::runtime_error("format error: " + msg) {}
};

/// Evaluation cannot proceed (no annotated classes, ...).
struct EvalError : std::runtime_error {
  explicit EvalError(const std::string& msg) : std::runtime_error("evaluation error: " + msg) {}
};

/// A pipeline stage failed; the run ledger stays resumable.
struct StageError : std::runtime_error {
  explicit StageError(const std::string& msg) : std::runtime_error("stage failure: " + msg) {}
};

inline std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline int64_t numel_of(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

// 64-bit FNV-1a; used for config digests and content hashes of artifacts.
inline uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 1469598103934665603ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline uint64_t fnv1a64(const std::string& s, uint64_t h = 1469598103934665603ull) {
  return fnv1a64(s.data(), s.size(), h);
}

inline std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

}  // namespace kdq
