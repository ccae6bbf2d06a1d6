#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace xptlab {

/// Lowercase hex SHA-256 of `bytes`.
std::string sha256_hex(std::string_view bytes);

/// Appends `values` as little-endian IEEE-754 doubles.
void append_f64_le(std::string& out, std::span<const double> values);
/// Reads `count` little-endian doubles starting at `offset`.
void read_f64_le(std::string_view bytes, std::size_t offset, std::span<double> out);

/// Seeded sub-stream derivation (splitmix64 finalizer).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt);

}  // namespace xptlab
