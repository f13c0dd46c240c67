#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace mtr {

// Contract violations: caller broke a documented precondition.
class ContractError : public std::logic_error {
 public:
  explicit ContractError(const std::string& what) : std::logic_error(what) {}
};

// Bad input data (CSV rows, checkpoints, manifests).
class LoadError : public std::runtime_error {
 public:
  explicit LoadError(const std::string& what) : std::runtime_error(what) {}
};

// Bad run configuration (unknown keys, invalid combinations).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Non-finite losses or gradients encountered during training.
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

std::uint64_t fnv1a64(std::string_view bytes);

// Deterministic seed derivation for per-city / per-run RNG streams.
std::uint64_t derive_seed(std::uint64_t root, std::uint64_t stream);

// UTC timestamps with whole-second resolution ("2018-01-01T00:00:00Z").
std::string format_iso8601(std::int64_t unix_seconds);
std::int64_t parse_iso8601(const std::string& text);  // throws LoadError

// Round-trip-exact double formatting for CSV output.
std::string format_double(double v);

}  // namespace mtr
