#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "dsconv/model.hpp"

namespace dsconv {

inline constexpr int kModelFormatVersion = 1;
inline constexpr std::uint16_t kBlobVersion = 1;
inline constexpr std::size_t kBlobAlignment = 64;

enum class BlobType : std::uint16_t { f32 = 1, f16 = 2, u32 = 3, u8_packed = 4 };

/// One little-endian array file: 64-byte header, payload padded to 64 bytes.
/// See docs/model_format.md for the byte layout.
struct Blob {
  BlobType type = BlobType::f32;
  std::uint8_t bits = 32;            // element width; code width for u8_packed
  std::vector<std::uint64_t> dims;   // at most 4
  std::uint64_t count = 0;           // logical element count
  std::vector<std::uint8_t> payload; // unpadded
};

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> encode_blob(const Blob& b);
/// Throws FormatError (VersionError for an unknown blob version).
Blob decode_blob(std::span<const std::uint8_t> bytes, const std::string& what);

Blob make_f32_blob(std::span<const float> v, std::vector<std::uint64_t> dims);
Blob make_f16_blob(std::span<const Half> v, std::vector<std::uint64_t> dims);
Blob make_u32_blob(std::span<const std::uint32_t> v);
/// LSB-first bit packing of codes < 2^bits.
Blob make_packed_blob(std::span<const std::uint32_t> codes, unsigned bits);

std::vector<float> blob_f32(const Blob& b, const std::string& what);
std::vector<Half> blob_f16(const Blob& b, const std::string& what);
std::vector<std::uint32_t> blob_u32(const Blob& b, const std::string& what);
std::vector<std::uint32_t> blob_codes(const Blob& b, const std::string& what);

/// Writes `dir/manifest.json` plus one blob per array. Validates first.
void save_model(const Model& model, const std::filesystem::path& dir);

/// Verifies every checksum, rebuilds (and so re-validates) CSR kernels and
/// checks the decoded model. Throws FormatError / ChecksumError /
/// VersionError / IoError.
Model load_model(const std::filesystem::path& dir);

void save_network_config(const NetworkConfig& config, const std::filesystem::path& file);
NetworkConfig load_network_config(const std::filesystem::path& file);

/// Single-blob tensor file used for `infer --input`.
void save_tensor(const Tensor4D<float>& x, const std::filesystem::path& file);
Tensor4D<float> load_tensor(const std::filesystem::path& file);

}  // namespace dsconv
