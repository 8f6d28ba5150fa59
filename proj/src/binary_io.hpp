#pragma once

// Little-endian readers/writers shared by the three binary file formats.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "knnprompt/errors.hpp"

namespace knnprompt::detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
T byteswap_if_big(T v) {
  if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
    std::array<unsigned char, sizeof(T)> b;
    std::memcpy(b.data(), &v, sizeof(T));
    std::reverse(b.begin(), b.end());
    std::memcpy(&v, b.data(), sizeof(T));
  }
  return v;
}

class BinaryWriter {
 public:
  explicit BinaryWriter(const std::filesystem::path& path)
      : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw FormatError(FormatErrc::kIo, "cannot open for writing: " + path.string());
  }

  void magic(std::string_view m) { raw(m.data(), m.size()); }

  template <typename T>
  void put(T v) {
    v = byteswap_if_big(v);
    raw(&v, sizeof(T));
  }

  template <typename T>
  void put_all(std::span<const T> values) {
    if constexpr (std::endian::native == std::endian::little) {
      raw(values.data(), values.size_bytes());
    } else {
      for (const T& v : values) put(v);
    }
  }

  void finish() {
    out_.flush();
    if (!out_) throw FormatError(FormatErrc::kIo, "write failed: " + path_.string());
  }

 private:
  void raw(const void* data, std::size_t n) {
    out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!out_) throw FormatError(FormatErrc::kIo, "write failed: " + path_.string());
  }

  std::filesystem::path path_;
  std::ofstream out_;
};

// Reads the whole file up front so truncation can be reported as
// expected-vs-actual byte counts.
class BinaryReader {
 public:
  explicit BinaryReader(const std::filesystem::path& path) : path_(path.string()) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError(FormatErrc::kIo, "cannot open " + path_);
    in.seekg(0, std::ios::end);
    const auto size = static_cast<std::size_t>(in.tellg());
    in.seekg(0);
    data_.resize(size);
    in.read(reinterpret_cast<char*>(data_.data()), static_cast<std::streamsize>(size));
    if (!in) throw FormatError(FormatErrc::kIo, "read failed: " + path_);
  }

  const std::string& path() const { return path_; }
  std::size_t size() const { return data_.size(); }
  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }

  void expect_magic(std::string_view m) {
    require(m.size(), "magic");
    if (std::memcmp(data_.data() + pos_, m.data(), m.size()) != 0) {
      throw FormatError(FormatErrc::kBadMagic, path_ + ": bad magic (expected " + std::string(m) + ")");
    }
    pos_ += m.size();
  }

  template <typename T>
  T get(const char* what) {
    require(sizeof(T), what);
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return byteswap_if_big(v);
  }

  template <typename T>
  void get_all(std::span<T> out, const char* what) {
    require(out.size_bytes(), what);
    std::memcpy(out.data(), data_.data() + pos_, out.size_bytes());
    pos_ += out.size_bytes();
    if constexpr (std::endian::native == std::endian::big) {
      for (T& v : out) v = byteswap_if_big(v);
    }
  }

  // Fails early when the header promises more payload than the file holds.
  void require_total(std::uint64_t expected_total) const {
    if (expected_total != data_.size()) {
      const auto kind = expected_total > data_.size() ? FormatErrc::kTruncated : FormatErrc::kMalformed;
      throw FormatError(kind, path_ + ": " +
                                  (kind == FormatErrc::kTruncated ? "truncated file" : "trailing bytes") +
                                  ": expected " + std::to_string(expected_total) + " bytes, got " +
                                  std::to_string(data_.size()));
    }
  }

  void expect_end() const {
    if (pos_ != data_.size()) {
      throw FormatError(FormatErrc::kMalformed, path_ + ": " + std::to_string(data_.size() - pos_) +
                                                    " trailing bytes at offset " + std::to_string(pos_));
    }
  }

 private:
  void require(std::size_t n, const char* what) const {
    if (n > data_.size() - pos_) {
      throw FormatError(FormatErrc::kTruncated,
                        path_ + ": truncated file reading " + what + " at offset " + std::to_string(pos_) +
                            ": expected " + std::to_string(pos_ + n) + " bytes, got " +
                            std::to_string(data_.size()));
    }
  }

  std::string path_;
  std::vector<unsigned char> data_;
  std::size_t pos_ = 0;
};

}  // namespace knnprompt::detail
