#pragma once

// Versioned tensor container shared by checkpoints and head snapshots.
//
//   bytes 0..7   magic "GEMCLTNS"
//   u32          format version
//   u32          header length H
//   u32          CRC-32 of the header bytes
//   H bytes      UTF-8 JSON header:
//                  {"kind": ..., "meta": {...},
//                   "tensors": [{"name", "shape", "offset", "crc32"}, ...]}
//   payload      little-endian IEEE-754 doubles; tensor offsets are in bytes
//                from the start of the payload, CRC-32 per tensor
//
// All integers are little-endian. Every tensor is restored bit-exactly.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "gemcl/tensor.hpp"
#include "json.hpp"

namespace gemcl::container {

inline constexpr std::uint32_t kFormatVersion = 1;

struct Document {
  std::string kind;
  nlohmann::json meta = nlohmann::json::object();
  NamedTensors tensors;
};

std::vector<unsigned char> encode(const Document& doc);
// Throws ParseError on truncation or a malformed header, ChecksumError on a
// CRC mismatch, and ParseError naming both kinds when `expected_kind` differs.
Document decode(std::span<const unsigned char> bytes, const std::string& expected_kind,
                const std::string& what = "container");

void write(const std::filesystem::path& path, const Document& doc);
Document read(const std::filesystem::path& path, const std::string& expected_kind);

std::uint32_t crc32(std::span<const unsigned char> bytes);

}  // namespace gemcl::container
