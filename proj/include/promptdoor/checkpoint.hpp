// Sectioned parameter container.
//
// Layout (little-endian):
//   magic "PDCK" | u32 version
//   u32 meta count   | { str key | str value }*
//   u32 tensor count | { str name | u32 rank | u64 dims[rank] | f32 data[numel] }*
// where str = u32 length + bytes. Entries are written in name order, so the
// bytes depend only on the contents.
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "promptdoor/numcore.hpp"

namespace promptdoor {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// FNV-1a, 64 bit.
class Fnv1a {
 public:
  void update(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h_ ^= b[i];
      h_ *= 0x100000001b3ULL;
    }
  }
  void update(std::string_view s) { update(s.data(), s.size()); }
  std::uint64_t value() const { return h_; }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

inline std::uint64_t hash_bytes(std::string_view s) {
  Fnv1a h;
  h.update(s);
  return h.value();
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

class Checkpoint {
 public:
  static constexpr std::uint32_t kVersion = 1;

  std::map<std::string, std::string> meta;
  std::map<std::string, nc::Tensor> tensors;

  void put(const std::string& name, const nc::Tensor& t) { tensors[name] = t.detach(); }

  const nc::Tensor& get(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw FormatError("checkpoint: missing tensor '" + name + "'");
    return it->second;
  }

  const std::string& get_meta(const std::string& key) const {
    auto it = meta.find(key);
    if (it == meta.end()) throw FormatError("checkpoint: missing meta '" + key + "'");
    return it->second;
  }

  std::string serialize() const {
    std::string out = "PDCK";
    put_u32(out, kVersion);
    put_u32(out, static_cast<std::uint32_t>(meta.size()));
    for (const auto& [k, v] : meta) {
      put_str(out, k);
      put_str(out, v);
    }
    put_u32(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
      put_str(out, name);
      put_u32(out, static_cast<std::uint32_t>(t.rank()));
      for (auto d : t.shape()) put_u64(out, d);
      for (float f : t.data()) {
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        put_u32(out, bits);
      }
    }
    return out;
  }

  static Checkpoint deserialize(std::string_view bytes) {
    Reader r{bytes};
    if (r.take(4) != "PDCK") throw FormatError("checkpoint: bad magic");
    const auto version = r.u32();
    if (version != kVersion) {
      throw FormatError("checkpoint: unsupported version " + std::to_string(version));
    }
    Checkpoint ck;
    for (auto n = r.u32(); n > 0; --n) {
      auto k = r.str();
      ck.meta[k] = r.str();
    }
    for (auto n = r.u32(); n > 0; --n) {
      auto name = r.str();
      nc::Shape shape(r.u32());
      for (auto& d : shape) d = r.u64();
      std::vector<float> data(nc::numel_of(shape));
      for (auto& f : data) {
        const std::uint32_t bits = r.u32();
        std::memcpy(&f, &bits, 4);
      }
      ck.tensors[name] = nc::Tensor::from(std::move(shape), std::move(data));
    }
    if (!r.done()) throw FormatError("checkpoint: trailing bytes");
    return ck;
  }

  void save(const std::string& path) const { write_file(path, serialize()); }
  static Checkpoint load(const std::string& path) { return deserialize(read_file(path)); }

 private:
  static void put_u32(std::string& o, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) o.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  static void put_u64(std::string& o, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) o.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  static void put_str(std::string& o, std::string_view s) {
    put_u32(o, static_cast<std::uint32_t>(s.size()));
    o.append(s);
  }

  struct Reader {
    std::string_view b;
    std::size_t pos = 0;
    std::string_view take(std::size_t n) {
      if (pos + n > b.size()) throw FormatError("checkpoint: truncated at byte " + std::to_string(pos));
      auto s = b.substr(pos, n);
      pos += n;
      return s;
    }
    std::uint64_t uint(int n) {
      auto s = take(n);
      std::uint64_t v = 0;
      for (int i = n - 1; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[i]);
      return v;
    }
    std::uint32_t u32() { return static_cast<std::uint32_t>(uint(4)); }
    std::uint64_t u64() { return uint(8); }
    std::string str() { return std::string(take(u32())); }
    bool done() const { return pos == b.size(); }
  };
};

}  // namespace promptdoor
