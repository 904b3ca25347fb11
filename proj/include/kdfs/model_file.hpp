// Copyright 2026 The KDFS Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef KDFS_MODEL_FILE_HPP
#define KDFS_MODEL_FILE_HPP

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "kdfs/tensor.hpp"

namespace kdfs {

// Binary container shared by exported models and training checkpoints.
//
//   offset 0   "KDFS"                      4 bytes magic
//          4   u32 version                 little-endian
//          8   u32 n, n bytes              architecture descriptor (UTF-8 JSON)
//              u32 tensor count
//              per tensor:
//                u32 n, n bytes            name
//                u32 rank, rank x u32      shape
//                numel x f32               values, little-endian
//   end - 8    u64 checksum                FNV-1a 64 of every preceding byte

inline constexpr std::uint32_t kModelFileVersion = 1;

struct ModelFile {
  nlohmann::json descriptor = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  const Tensor<float>& tensor(const std::string& name) const;
};

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes);
/// fnv1a64 as 16 lowercase hex digits.
std::string hash_hex(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> encode(const ModelFile& file);

/// Throws FormatError (bad magic, truncation), VersionError or
/// CorruptionError (checksum mismatch).
ModelFile decode(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace kdfs

#endif  // KDFS_MODEL_FILE_HPP
