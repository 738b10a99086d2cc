#pragma once

// Little-endian encoding helpers for the binary file formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gemcl/error.hpp"

namespace gemcl::bytes {

template <class T>
T byteswap_if_big(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(buf[i], buf[sizeof(T) - 1 - i]);
    std::memcpy(&v, buf, sizeof(T));
  }
  return v;
}

class Writer {
 public:
  void raw(std::string_view s) { out_.insert(out_.end(), s.begin(), s.end()); }
  void raw(std::span<const unsigned char> s) { out_.insert(out_.end(), s.begin(), s.end()); }
  template <class T>
  void put(T v) {
    v = byteswap_if_big(v);
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out_.insert(out_.end(), buf, buf + sizeof(T));
  }
  void put_f64(double v) { put(std::bit_cast<std::uint64_t>(v)); }
  void put_f64s(std::span<const double> vs) {
    for (double v : vs) put_f64(v);
  }
  std::vector<unsigned char>& buffer() { return out_; }

 private:
  std::vector<unsigned char> out_;
};

class Reader {
 public:
  Reader(std::span<const unsigned char> data, std::string what)
      : data_(data), what_(std::move(what)) {}

  std::size_t remaining() const { return data_.size() - pos_; }
  std::size_t position() const { return pos_; }
  void need(std::size_t n) const {
    if (remaining() < n) throw ParseError(what_ + ": truncated (needed " + std::to_string(n) +
                                          " more bytes at offset " + std::to_string(pos_) + ")");
  }
  std::span<const unsigned char> take(std::size_t n) {
    need(n);
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::string take_string(std::size_t n) {
    auto s = take(n);
    return std::string(s.begin(), s.end());
  }
  template <class T>
  T get() {
    auto s = take(sizeof(T));
    T v;
    std::memcpy(&v, s.data(), sizeof(T));
    return byteswap_if_big(v);
  }
  double get_f64() { return std::bit_cast<double>(get<std::uint64_t>()); }
  void skip(std::size_t n) { take(n); }

 private:
  std::span<const unsigned char> data_;
  std::size_t pos_ = 0;
  std::string what_;
};

std::vector<unsigned char> read_file(const std::string& path);
void write_file(const std::string& path, std::span<const unsigned char> data);
void write_text(const std::string& path, std::string_view text);

// Shortest-safe round-trip text form used in every CSV/JSON output.
std::string format_double(double v);

}  // namespace gemcl::bytes
