#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "rfexplain/error.hpp"

namespace rfexplain::detail {

class Fnv1a {
 public:
  void update(const void* data, std::size_t size) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < size; ++i) {
      state_ ^= bytes[i];
      state_ *= 0x100000001b3ULL;
    }
  }
  void update(std::string_view s) {
    update(s.data(), s.size());
    const char sep = '\0';
    update(&sep, 1);
  }
  template <typename T>
    requires std::is_arithmetic_v<T>
  void update(T value) {
    update(&value, sizeof(T));
  }
  std::uint64_t digest() const { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::uint64_t fnv1a(std::string_view s) {
  Fnv1a h;
  h.update(s.data(), s.size());
  return h.digest();
}

class BinaryWriter {
 public:
  explicit BinaryWriter(const std::string& path) : out_(path, std::ios::binary) {
    if (!out_) throw StageError("cannot open '" + path + "' for writing");
  }

  template <typename T>
    requires std::is_arithmetic_v<T>
  void put(T value) {
    out_.write(reinterpret_cast<const char*>(&value), sizeof(T));
  }
  template <typename T>
    requires std::is_arithmetic_v<T>
  void put_array(const T* data, std::size_t count) {
    put<std::uint64_t>(count);
    out_.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * sizeof(T)));
  }
  void put_string(std::string_view s) {
    put<std::uint64_t>(s.size());
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void put_raw(std::string_view s) { out_.write(s.data(), static_cast<std::streamsize>(s.size())); }
  void finish() {
    out_.flush();
    if (!out_) throw StageError("write failed");
  }

 private:
  std::ofstream out_;
};

class BinaryReader {
 public:
  explicit BinaryReader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw DataError("cannot open '" + path + "'");
  }

  template <typename T>
    requires std::is_arithmetic_v<T>
  T get() {
    T value{};
    in_.read(reinterpret_cast<char*>(&value), sizeof(T));
    check();
    return value;
  }
  template <typename T>
    requires std::is_arithmetic_v<T>
  std::vector<T> get_array(std::uint64_t max_count = (1ULL << 34)) {
    const auto count = get<std::uint64_t>();
    if (count > max_count) throw DataError("corrupt array length in '" + path_ + "'");
    std::vector<T> values(count);
    in_.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(count * sizeof(T)));
    check();
    return values;
  }
  std::string get_string() {
    const auto size = get<std::uint64_t>();
    if (size > (1ULL << 30)) throw DataError("corrupt string length in '" + path_ + "'");
    std::string s(size, '\0');
    in_.read(s.data(), static_cast<std::streamsize>(size));
    check();
    return s;
  }
  std::string get_raw(std::size_t size) {
    std::string s(size, '\0');
    in_.read(s.data(), static_cast<std::streamsize>(size));
    check();
    return s;
  }

 private:
  void check() {
    if (!in_) throw DataError("truncated file '" + path_ + "'");
  }
  std::ifstream in_;
  std::string path_;
};

}  // namespace rfexplain::detail
