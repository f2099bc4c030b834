#pragma once

// Shared aliases, error taxonomy, and small bit-mixing utilities used by
// every module in the library.

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace nfc {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// A caller broke an API precondition (bad shape, bad range, bad state).
struct ContractViolation : std::logic_error {
  using std::logic_error::logic_error;
};

// Inputs were well-formed but the requested operation has no valid result
// (empty posterior, unsupported kernel family, degenerate dataset, ...).
struct DomainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A numeric routine diverged or produced non-finite values.
struct NumericalFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A config file or config value could not be parsed / validated.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A required on-disk artifact (dataset, checkpoint, run dir) is absent.
struct MissingArtifact : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ContractViolation(msg);
}

inline void require_domain(bool cond, const std::string& msg) {
  if (!cond) throw DomainError(msg);
}

inline void require_finite(const Vec& v, const std::string& what) {
  if (!v.allFinite()) throw DomainError(what + ": non-finite values");
}

inline void require_finite(const Mat& m, const std::string& what) {
  if (!m.allFinite()) throw DomainError(what + ": non-finite values");
}

// FNV-1a 64-bit hash; used for config hashing and seed derivation from tags.
inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= static_cast<std::uint64_t>(c);
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string to_hex(std::uint64_t x) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[x & 0xf];
    x >>= 4;
  }
  return out;
}

// splitmix64 finalizer: the standard bijective mixer.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Derives an independent stream seed from a base seed and one or more
// stream indices. Chaining mix64 keeps distinct index tuples decorrelated,
// so workers can be assigned per-item seeds that do not depend on job count.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  return mix64(base ^ mix64(stream + 0x51ed270b1d093bc5ull));
}

template <typename... Rest>
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream, Rest... rest) {
  return derive_seed(derive_seed(base, stream), rest...);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag) {
  return derive_seed(base, fnv1a64(tag));
}

template <typename... Rest>
std::uint64_t derive_seed(std::uint64_t base, std::string_view tag,
                          Rest... rest) {
  return derive_seed(derive_seed(base, fnv1a64(tag)), rest...);
}

}  // namespace nfc
