#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace cotfilter {

// ---------------------------------------------------------------------------
// Error taxonomy. Precondition violations use std::invalid_argument; the
// types below cover runtime failures that callers route on.
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Filesystem-level failure (missing file, unwritable destination).
class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed corpus content: bad JSON line, missing/non-string field,
/// duplicate id.
class CorpusError : public Error {
 public:
  using Error::Error;
};

/// Unreadable or truncated checkpoint file.
class CheckpointError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint belongs to a run with a different configuration.
class DigestMismatchError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

/// Transport or protocol failure talking to a model backend, after the
/// retry budget is spent.
class BackendError : public Error {
 public:
  using Error::Error;
};

/// A scripted backend was asked for a key it does not hold. Always a test
/// or mock-script defect, never silently defaulted.
class ScriptError : public Error {
 public:
  using Error::Error;
};

/// Backend token stream does not concatenate back to the text it scored.
class ReconstructionError : public Error {
 public:
  using Error::Error;
};

/// A trace cannot be split into at least two segments.
class UnsegmentableError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Deterministic hashing. FNV-1a, fixed across platforms; used for mock
// lookup keys, config digests, and per-rollout seed derivation.
// ---------------------------------------------------------------------------

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
inline constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

constexpr std::uint64_t fnv1a64(std::string_view bytes,
                                std::uint64_t h = kFnvOffset) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= kFnvPrime;
  }
  return h;
}

constexpr std::uint64_t fnv1a64_u64(std::uint64_t value, std::uint64_t h) {
  for (int i = 0; i < 8; ++i) {
    h ^= static_cast<unsigned char>(value >> (i * 8));
    h *= kFnvPrime;
  }
  return h;
}

inline std::string to_hex16(std::uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = kDigits[v & 0xf];
    v >>= 4;
  }
  return out;
}

/// 16-hex-char digest of a byte string.
inline std::string digest_hex(std::string_view bytes) {
  return to_hex16(fnv1a64(bytes));
}

/// Seed for one backend request, derived from stable identifiers so results
/// do not depend on scheduling order. `stage` namespaces the stream
/// ("rollout", "repair", "segment").
inline std::uint64_t derive_seed(std::string_view sample_id,
                                 std::string_view stage, std::uint64_t k,
                                 std::uint64_t r) {
  std::uint64_t h = fnv1a64(sample_id);
  h = fnv1a64("\x1f", h);
  h = fnv1a64(stage, h);
  h = fnv1a64_u64(k, h);
  h = fnv1a64_u64(r, h);
  return h;
}

inline std::string_view trim_view(std::string_view s) {
  const char* ws = " \t\r\n";
  auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}

inline std::string trim(std::string_view s) { return std::string(trim_view(s)); }

}  // namespace cotfilter
