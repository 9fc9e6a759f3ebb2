#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <string>

#include "srki/adapters.hpp"
#include "srki/errors.hpp"
#include "srki/model.hpp"

namespace srki {

inline constexpr std::array<char, 4> kAdapterMagic{'S', 'R', 'K', 'I'};
inline constexpr std::array<char, 4> kBackboneMagic{'S', 'R', 'K', 'B'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace io {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b, 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b, 8);
}

inline std::uint32_t get_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError(std::string("truncated checkpoint: ") + what);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(b[i]) << (8 * i);
  return v;
}

inline std::uint64_t get_u64(std::istream& is, const char* what) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw FormatError(std::string("truncated checkpoint: ") + what);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
  return v;
}

inline void put_f32_matrix(std::ostream& os, const Tensor& t) {
  for (double v : t.data()) put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

inline Tensor get_f32_matrix(std::istream& is, std::size_t r, std::size_t c) {
  Tensor t = Tensor::matrix(r, c);
  for (double& v : t.data()) v = std::bit_cast<float>(get_u32(is, "matrix data"));
  return t;
}

inline void put_f64_matrix(std::ostream& os, const Tensor& t) {
  for (double v : t.data()) put_u64(os, std::bit_cast<std::uint64_t>(v));
}

inline Tensor get_f64_matrix(std::istream& is, std::size_t r, std::size_t c) {
  Tensor t = Tensor::matrix(r, c);
  for (double& v : t.data()) v = std::bit_cast<double>(get_u64(is, "matrix data"));
  return t;
}

inline void expect_magic(std::istream& is, const std::array<char, 4>& magic) {
  char m[4];
  if (!is.read(m, 4)) throw FormatError("truncated checkpoint: magic");
  if (!std::equal(m, m + 4, magic.begin())) {
    throw FormatError("bad checkpoint magic: expected '" + std::string(magic.begin(), magic.end()) +
                      "', found '" + std::string(m, 4) + "'");
  }
}

inline void expect_version(std::istream& is) {
  const std::uint32_t v = get_u32(is, "version");
  if (v != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version: expected " + std::to_string(kCheckpointVersion) +
                      ", found " + std::to_string(v));
  }
}

inline void expect_dim(const char* name, std::size_t expected, std::uint32_t found) {
  if (expected != found) {
    throw DimensionError(std::string("checkpoint ") + name + " mismatch: expected " +
                         std::to_string(expected) + ", found " + std::to_string(found));
  }
}

}  // namespace io

// Header: magic, version, L, D, P, H as u32; then per layer W̃_Q, W̃_K, W̃_V as
// little-endian float32, row-major.
inline void save_checkpoint(std::ostream& os, const AdapterSet& a, const ModelConfig& cfg) {
  a.validate(cfg);
  os.write(kAdapterMagic.data(), 4);
  io::put_u32(os, kCheckpointVersion);
  for (std::size_t v : {cfg.layers, cfg.width, cfg.encoder_dim, cfg.heads}) {
    io::put_u32(os, static_cast<std::uint32_t>(v));
  }
  for (const auto& l : a.layers) {
    io::put_f32_matrix(os, l.query);
    io::put_f32_matrix(os, l.key);
    io::put_f32_matrix(os, l.value);
  }
  if (!os) throw FormatError("checkpoint write failed");
}

struct CheckpointHeader {
  std::size_t layers = 0, width = 0, encoder_dim = 0, heads = 0;
};

// With `expected`, every header dimension must match it.
inline AdapterSet load_checkpoint(std::istream& is, const std::optional<ModelConfig>& expected = {},
                                  CheckpointHeader* header_out = nullptr) {
  io::expect_magic(is, kAdapterMagic);
  io::expect_version(is);
  CheckpointHeader h;
  h.layers = io::get_u32(is, "L");
  h.width = io::get_u32(is, "D");
  h.encoder_dim = io::get_u32(is, "P");
  h.heads = io::get_u32(is, "H");
  if (expected) {
    io::expect_dim("L", expected->layers, static_cast<std::uint32_t>(h.layers));
    io::expect_dim("D", expected->width, static_cast<std::uint32_t>(h.width));
    io::expect_dim("P", expected->encoder_dim, static_cast<std::uint32_t>(h.encoder_dim));
    io::expect_dim("H", expected->heads, static_cast<std::uint32_t>(h.heads));
  }
  if (h.layers == 0 || h.width == 0 || h.encoder_dim == 0 || h.heads == 0) {
    throw FormatError("checkpoint header has a zero dimension");
  }
  AdapterSet a;
  for (std::size_t l = 0; l < h.layers; ++l) {
    LayerAdapters la;
    la.query = io::get_f32_matrix(is, h.width, h.width);
    la.key = io::get_f32_matrix(is, h.encoder_dim, h.width);
    la.value = io::get_f32_matrix(is, h.encoder_dim, h.width);
    a.layers.push_back(std::move(la));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after checkpoint");
  if (header_out) *header_out = h;
  return a;
}

inline void save_checkpoint(const std::string& path, const AdapterSet& a, const ModelConfig& cfg) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open '" + path + "' for writing");
  save_checkpoint(os, a, cfg);
}

inline AdapterSet load_checkpoint(const std::string& path,
                                  const std::optional<ModelConfig>& expected = {}) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open '" + path + "'");
  return load_checkpoint(is, expected);
}

// Backbone weights keep full double precision: magic "SRKB", version, then
// L, D, H, V, P, max_seq, ffn_mult as u32, then every weight as float64.
inline void save_backbone(std::ostream& os, const Backbone& b) {
  const auto& c = b.config;
  os.write(kBackboneMagic.data(), 4);
  io::put_u32(os, kCheckpointVersion);
  for (std::size_t v : {c.layers, c.width, c.heads, c.vocab, c.encoder_dim, c.max_seq, c.ffn_mult}) {
    io::put_u32(os, static_cast<std::uint32_t>(v));
  }
  for (const Tensor* t : b.parameters()) io::put_f64_matrix(os, *t);
  if (!os) throw FormatError("backbone write failed");
}

inline Backbone load_backbone(std::istream& is) {
  io::expect_magic(is, kBackboneMagic);
  io::expect_version(is);
  ModelConfig c;
  c.layers = io::get_u32(is, "L");
  c.width = io::get_u32(is, "D");
  c.heads = io::get_u32(is, "H");
  c.vocab = io::get_u32(is, "V");
  c.encoder_dim = io::get_u32(is, "P");
  c.max_seq = io::get_u32(is, "max_seq");
  c.ffn_mult = io::get_u32(is, "ffn_mult");
  c.validate();
  Backbone b = Backbone::random(c, 0);  // shapes only; every value is overwritten
  for (Tensor* t : b.parameters()) *t = io::get_f64_matrix(is, t->rows(), t->cols());
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after backbone");
  return b;
}

inline void save_backbone(const std::string& path, const Backbone& b) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open '" + path + "' for writing");
  save_backbone(os, b);
}

inline Backbone load_backbone(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open '" + path + "'");
  return load_backbone(is);
}

}  // namespace srki
