#include "gemcl/container.hpp"

#include <zlib.h>

#include <algorithm>
#include <cstdio>

#include "bytes.hpp"
#include "gemcl/error.hpp"

namespace gemcl::container {
namespace {

constexpr char kMagic[] = "GEMCLTNS";
constexpr std::size_t kMagicSize = 8;

std::string hex32(std::uint32_t v) {
  char buf[11];
  std::snprintf(buf, sizeof buf, "0x%08x", v);
  return buf;
}

}  // namespace

std::uint32_t crc32(std::span<const unsigned char> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large buffers in slices.
  while (!bytes.empty()) {
    const std::size_t n = std::min<std::size_t>(bytes.size(), 1u << 30);
    crc = ::crc32(crc, bytes.data(), static_cast<uInt>(n));
    bytes = bytes.subspan(n);
  }
  return static_cast<std::uint32_t>(crc);
}

std::vector<unsigned char> encode(const Document& doc) {
  bytes::Writer payload;
  nlohmann::json directory = nlohmann::json::array();
  for (const auto& [name, t] : doc.tensors) {
    const std::size_t offset = payload.buffer().size();
    payload.put_f64s(t.data());
    const std::span<const unsigned char> raw(payload.buffer().data() + offset, t.size() * 8);
    directory.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"crc32", crc32(raw)}});
  }
  const nlohmann::json header = {{"kind", doc.kind}, {"meta", doc.meta}, {"tensors", directory}};
  const std::string text = header.dump();
  const std::span<const unsigned char> text_bytes(reinterpret_cast<const unsigned char*>(text.data()),
                                                  text.size());

  bytes::Writer out;
  out.raw(std::string_view(kMagic, kMagicSize));
  out.put<std::uint32_t>(kFormatVersion);
  out.put<std::uint32_t>(static_cast<std::uint32_t>(text.size()));
  out.put<std::uint32_t>(crc32(text_bytes));
  out.raw(text_bytes);
  out.raw(payload.buffer());
  return std::move(out.buffer());
}

Document decode(std::span<const unsigned char> data, const std::string& expected_kind,
                const std::string& what) {
  bytes::Reader r(data, what);
  if (r.take_string(kMagicSize) != std::string_view(kMagic, kMagicSize)) {
    throw ParseError(what + ": not a gemcl tensor file (bad magic)");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kFormatVersion) {
    throw ParseError(what + ": unsupported format version " + std::to_string(version) +
                     " (expected " + std::to_string(kFormatVersion) + ")");
  }
  const auto header_len = r.get<std::uint32_t>();
  const auto header_crc = r.get<std::uint32_t>();
  const auto header_bytes = r.take(header_len);
  if (crc32(header_bytes) != header_crc) {
    throw ChecksumError(what + ": header checksum mismatch (stored " + hex32(header_crc) +
                        ", computed " + hex32(crc32(header_bytes)) + ")");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_bytes.begin(), header_bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(what + ": malformed header: " + e.what());
  }

  Document doc;
  try {
    doc.kind = header.at("kind").get<std::string>();
    if (doc.kind != expected_kind) {
      throw ParseError(what + ": expected a " + expected_kind + " file, found " + doc.kind);
    }
    doc.meta = header.at("meta");
    const auto payload = data.subspan(r.position());
    std::size_t expected_size = 0;
    for (const auto& entry : header.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::size_t>();
      const auto stored = entry.at("crc32").get<std::uint32_t>();
      const std::size_t count = shape_size(shape);
      if (offset > payload.size() || payload.size() - offset < count * 8) {
        throw ParseError(what + ": truncated payload for tensor '" + name + "'");
      }
      const auto raw = payload.subspan(offset, count * 8);
      if (crc32(raw) != stored) {
        throw ChecksumError(what + ": checksum mismatch in tensor '" + name + "'");
      }
      bytes::Reader tr(raw, what);
      std::vector<double> values(count);
      for (double& v : values) v = tr.get_f64();
      doc.tensors.emplace(name, Tensor(shape, std::move(values)));
      expected_size = std::max(expected_size, offset + count * 8);
    }
    if (payload.size() != expected_size) {
      throw ParseError(what + ": " + std::to_string(payload.size() - expected_size) +
                       " trailing bytes after payload");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(what + ": malformed header: " + e.what());
  } catch (const ShapeError& e) {
    throw ParseError(what + ": malformed tensor directory: " + e.what());
  }
  return doc;
}

void write(const std::filesystem::path& path, const Document& doc) {
  bytes::write_file(path.string(), encode(doc));
}

Document read(const std::filesystem::path& path, const std::string& expected_kind) {
  const auto data = bytes::read_file(path.string());
  return decode(data, expected_kind, path.string());
}

}  // namespace gemcl::container
