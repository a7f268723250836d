#pragma once

// CATN tensor container:
//   "CATN" | u32 version (=1) | u32 count |
//   count × { u32 name_len | name | u8 rank | rank × u32 extent | u8 dtype | payload }
// All integers and scalars little-endian; dtype 0 = f32, 1 = f64.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <variant>
#include <vector>

#include "coupalign/errors.hpp"
#include "coupalign/tensor.hpp"

namespace coupalign::catn {

inline constexpr std::uint32_t kVersion = 1;

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

struct Entry {
  std::string name;
  Shape shape;
  std::variant<std::vector<float>, std::vector<double>> values;

  DType dtype() const { return values.index() == 0 ? DType::f32 : DType::f64; }
};

namespace detail {

template <class U>
U to_little(U v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(U)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<U>(bytes);
  }
  return v;
}

class Writer {
 public:
  template <class U>
  void put(U v) {
    v = to_little(v);
    const auto* p = reinterpret_cast<const char*>(&v);
    out_.insert(out_.end(), p, p + sizeof(U));
  }
  void put_bytes(const std::string& s) { out_.insert(out_.end(), s.begin(), s.end()); }
  std::vector<char>& bytes() { return out_; }

 private:
  std::vector<char> out_;
};

class Reader {
 public:
  explicit Reader(const std::vector<char>& buf) : buf_(buf) {}

  template <class U>
  U get(const char* what) {
    need(sizeof(U), what);
    U v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return to_little(v);
  }
  std::string get_string(std::size_t n, const char* what) {
    need(n, what);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t offset() const { return pos_; }
  bool at_end() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (buf_.size() - pos_ < n) throw FormatError(std::string("truncated CATN data reading ") + what, pos_);
  }
  const std::vector<char>& buf_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<char> encode(const std::vector<Entry>& entries) {
  detail::Writer w;
  w.put_bytes("CATN");
  w.put<std::uint32_t>(kVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(e.name.size()));
    w.put_bytes(e.name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(e.shape.size()));
    for (std::size_t d : e.shape) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(e.dtype()));
    std::visit([&](const auto& vals) {
      if (vals.size() != numel(e.shape)) {
        throw DimensionError("CATN entry '" + e.name + "' has " + std::to_string(vals.size()) +
                             " values for shape " + shape_str(e.shape));
      }
      for (auto v : vals) w.put(v);
    }, e.values);
  }
  return std::move(w.bytes());
}

inline std::vector<Entry> decode(const std::vector<char>& buf) {
  detail::Reader r(buf);
  if (r.get_string(4, "magic") != "CATN") throw FormatError("bad CATN magic", 0);
  const auto version = r.get<std::uint32_t>("version");
  if (version != kVersion) {
    throw UnsupportedVersionError("unsupported CATN version " + std::to_string(version), 4);
  }
  const auto count = r.get<std::uint32_t>("tensor count");
  std::vector<Entry> out;
  for (std::uint32_t t = 0; t < count; ++t) {
    Entry e;
    const auto name_len = r.get<std::uint32_t>("name length");
    e.name = r.get_string(name_len, "name");
    const auto rank = r.get<std::uint8_t>("rank");
    for (std::uint8_t i = 0; i < rank; ++i) {
      const std::size_t at = r.offset();
      const auto ext = r.get<std::uint32_t>("extent");
      if (ext == 0) throw FormatError("zero extent in tensor '" + e.name + "'", at);
      e.shape.push_back(ext);
    }
    const std::size_t tag_at = r.offset();
    const auto tag = r.get<std::uint8_t>("dtype");
    const std::size_t n = numel(e.shape);
    if (tag == 0) {
      std::vector<float> v(n);
      for (auto& x : v) x = r.get<float>("f32 payload");
      e.values = std::move(v);
    } else if (tag == 1) {
      std::vector<double> v(n);
      for (auto& x : v) x = r.get<double>("f64 payload");
      e.values = std::move(v);
    } else {
      throw FormatError("unknown dtype tag " + std::to_string(tag), tag_at);
    }
    out.push_back(std::move(e));
  }
  if (!r.at_end()) throw FormatError("trailing bytes after last tensor", r.offset());
  return out;
}

inline void save(const std::filesystem::path& path, const std::vector<Entry>& entries) {
  const auto bytes = encode(entries);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot open " + path.string() + " for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("write failed for " + path.string());
}

inline std::vector<Entry> load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open CATN file " + path.string(), 0);
  std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode(bytes);
}

template <class T>
Entry to_entry(const std::string& name, const Tensor<T>& t) {
  return Entry{name, t.shape(), std::vector<T>(t.values().begin(), t.values().end())};
}

/// Converts an entry into a tensor of precision T (values cast if needed).
template <class T>
Tensor<T> to_tensor(const Entry& e) {
  return std::visit([&](const auto& vals) {
    return Tensor<T>(e.shape, std::vector<T>(vals.begin(), vals.end()));
  }, e.values);
}

inline const Entry& find(const std::vector<Entry>& entries, const std::string& name) {
  for (const auto& e : entries)
    if (e.name == name) return e;
  throw DataError("CATN container has no tensor named '" + name + "'");
}

}  // namespace coupalign::catn
