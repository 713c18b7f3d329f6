#pragma once

// Binary checkpoint format (all integers and floats little-endian):
//
//   magic      8 bytes  "IFPNCKPT"
//   version    u32      kCheckpointVersion
//   digest     u64      FNV-1a of the canonical config JSON
//   config     u64 length + UTF-8 JSON
//   step       u64
//   sections   u32 count, then per section:
//                name (u32 length + bytes), u32 segment count, per segment:
//                name (u32 length + bytes), 4 x u64 shape (N, C, H, W),
//                N*C*H*W x f64
//
// Tensor files use the same section encoding under the magic "IFPNTENS".

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ifpn/harness/config.hpp"
#include "ifpn/tape.hpp"

namespace ifpn::harness {

inline constexpr char kCheckpointMagic[8] = {'I', 'F', 'P', 'N', 'C', 'K', 'P', 'T'};
inline constexpr char kTensorMagic[8] = {'I', 'F', 'P', 'N', 'T', 'E', 'N', 'S'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  ExperimentConfig config;
  std::uint64_t step = 0;
  ParamSet encoder;
  ParamSet transform;
  ParamSet head;

  friend bool operator==(const Checkpoint& a, const Checkpoint& b) {
    return to_json(a.config) == to_json(b.config) && a.step == b.step && a.encoder == b.encoder &&
           a.transform == b.transform && a.head == b.head;
  }
};

namespace io {

template <class T>
T to_le(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
  return v;
}

template <class T>
void put(std::ostream& os, T v) {
  v = to_le(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw FormatError("unexpected end of file");
  return to_le(v);
}

inline void put_string(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is, std::size_t max_len = std::size_t{1} << 20) {
  const auto n = get<std::uint32_t>(is);
  if (n > max_len) throw FormatError("string length " + std::to_string(n) + " exceeds limit");
  std::string s(n, '\0');
  if (n > 0 && !is.read(s.data(), n)) throw FormatError("unexpected end of file");
  return s;
}

inline void put_params(std::ostream& os, const std::string& name, const ParamSet& p) {
  put_string(os, name);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(p.num_segments()));
  for (std::size_t s = 0; s < p.num_segments(); ++s) {
    put_string(os, p.name(s));
    const Shape4& sh = p.at(s).shape();
    for (std::uint64_t d : {sh.n, sh.c, sh.h, sh.w}) put<std::uint64_t>(os, d);
    for (double v : p.at(s).vec()) put<double>(os, v);
  }
}

inline std::pair<std::string, ParamSet> get_params(std::istream& is) {
  std::string name = get_string(is);
  const auto count = get<std::uint32_t>(is);
  ParamSet p;
  for (std::uint32_t s = 0; s < count; ++s) {
    std::string seg = get_string(is);
    Shape4 sh{};
    sh.n = get<std::uint64_t>(is);
    sh.c = get<std::uint64_t>(is);
    sh.h = get<std::uint64_t>(is);
    sh.w = get<std::uint64_t>(is);
    if (sh.volume() > (std::size_t{1} << 32)) throw FormatError("segment '" + seg + "' is implausibly large");
    Vec data(sh.volume());
    for (double& v : data) v = get<double>(is);
    p.add(std::move(seg), Array4(sh, std::move(data)));
  }
  return {std::move(name), std::move(p)};
}

inline void expect_magic(std::istream& is, const char (&magic)[8]) {
  char m[8];
  if (!is.read(m, 8) || std::memcmp(m, magic, 8) != 0) throw FormatError("bad magic");
}

}  // namespace io

inline void write_checkpoint(std::ostream& os, const Checkpoint& c) {
  os.write(kCheckpointMagic, 8);
  io::put<std::uint32_t>(os, kCheckpointVersion);
  io::put<std::uint64_t>(os, config_digest(c.config));
  const std::string cfg = to_json(c.config).dump();
  io::put<std::uint64_t>(os, cfg.size());
  os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  io::put<std::uint64_t>(os, c.step);
  io::put<std::uint32_t>(os, 3);
  io::put_params(os, "encoder", c.encoder);
  io::put_params(os, "transform", c.transform);
  io::put_params(os, "head", c.head);
}

inline Checkpoint read_checkpoint(std::istream& is) {
  io::expect_magic(is, kCheckpointMagic);
  const auto version = io::get<std::uint32_t>(is);
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto digest = io::get<std::uint64_t>(is);
  const auto len = io::get<std::uint64_t>(is);
  if (len > (std::uint64_t{1} << 24)) throw FormatError("config block too large");
  std::string cfg(len, '\0');
  if (len > 0 && !is.read(cfg.data(), static_cast<std::streamsize>(len))) throw FormatError("truncated config");
  Checkpoint c;
  c.config = parse_config(cfg);
  if (config_digest(c.config) != digest) throw FormatError("config digest mismatch");
  c.step = io::get<std::uint64_t>(is);
  const auto sections = io::get<std::uint32_t>(is);
  for (std::uint32_t k = 0; k < sections; ++k) {
    auto [name, params] = io::get_params(is);
    if (name == "encoder") {
      c.encoder = std::move(params);
    } else if (name == "transform") {
      c.transform = std::move(params);
    } else if (name == "head") {
      c.head = std::move(params);
    } else {
      throw FormatError("unknown checkpoint section '" + name + "'");
    }
  }
  return c;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write '" + path + "'");
  write_checkpoint(os, c);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read '" + path + "'");
  return read_checkpoint(is);
}

/// Named arrays, e.g. an input image for `solve`.
inline void save_tensors(const std::string& path, const ParamSet& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write '" + path + "'");
  os.write(kTensorMagic, 8);
  io::put_params(os, "tensors", tensors);
}

inline ParamSet load_tensors(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read '" + path + "'");
  io::expect_magic(is, kTensorMagic);
  return io::get_params(is).second;
}

}  // namespace ifpn::harness
