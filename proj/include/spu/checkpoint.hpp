// SPDX-License-Identifier: Apache-2.0
//
// "SPTR" model container. All integers are little-endian u32 (input ids are
// i32), all parameters little-endian IEEE-754 binary32. See
// docs/checkpoint_format.md for the byte layout.
#pragma once

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "spu/model.hpp"

namespace spu {

inline constexpr char kCheckpointMagic[4] = {'S', 'P', 'T', 'R'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}
inline void put_f32(std::ostream& os, float f) { put_u32(os, std::bit_cast<std::uint32_t>(f)); }
inline void put_f32s(std::ostream& os, const std::vector<float>& v) {
  for (float f : v) put_f32(os, f);
}

class Reader {
 public:
  explicit Reader(std::istream& is) : is_(is) {}
  std::uint32_t u32(const char* what) {
    unsigned char b[4];
    if (!is_.read(reinterpret_cast<char*>(b), 4))
      throw std::runtime_error(std::string("checkpoint truncated while reading ") + what + " at byte " +
                               std::to_string(pos_));
    pos_ += 4;
    return std::uint32_t{b[0]} | (std::uint32_t{b[1]} << 8) | (std::uint32_t{b[2]} << 16) |
           (std::uint32_t{b[3]} << 24);
  }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  std::vector<float> f32s(std::size_t n, const char* what) {
    check_len(n * 4, what);
    std::vector<float> v(n);
    for (auto& f : v) f = f32(what);
    return v;
  }
  std::string bytes(std::size_t n, const char* what) {
    check_len(n, what);
    std::string s(n, '\0');
    if (n && !is_.read(s.data(), static_cast<std::streamsize>(n)))
      throw std::runtime_error(std::string("checkpoint truncated while reading ") + what);
    pos_ += n;
    return s;
  }

 private:
  void check_len(std::size_t n, const char* what) {
    if (n > (std::size_t{1} << 34)) throw std::runtime_error(std::string("checkpoint: implausible length for ") + what);
  }
  std::istream& is_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline void save_checkpoint(const ModelGraph<float>& m, std::ostream& os) {
  using namespace detail;
  os.write(kCheckpointMagic, 4);
  put_u32(os, kCheckpointVersion);
  put_u32(os, static_cast<std::uint32_t>(m.nodes.size()));
  for (int k = 0; k < 3; ++k) put_u32(os, static_cast<std::uint32_t>(m.input_shape.at(static_cast<std::size_t>(k))));
  put_u32(os, static_cast<std::uint32_t>(m.num_classes));
  for (const auto& n : m.nodes) {
    put_u32(os, static_cast<std::uint32_t>(n.kind));
    put_u32(os, static_cast<std::uint32_t>(n.stride));
    put_u32(os, static_cast<std::uint32_t>(n.pad));
    put_u32(os, static_cast<std::uint32_t>(n.groups));
    put_u32(os, static_cast<std::uint32_t>(n.inputs.size()));
    for (int src : n.inputs) put_u32(os, static_cast<std::uint32_t>(src));
    put_u32(os, static_cast<std::uint32_t>(n.name.size()));
    os.write(n.name.data(), static_cast<std::streamsize>(n.name.size()));
    put_u32(os, static_cast<std::uint32_t>(n.weight.rank()));
    for (auto d : n.weight.shape()) put_u32(os, static_cast<std::uint32_t>(d));
    put_f32s(os, n.weight.vec());
    put_u32(os, static_cast<std::uint32_t>(n.bias.size()));
    put_f32s(os, n.bias);
    put_u32(os, static_cast<std::uint32_t>(n.gamma.size()));
    put_f32s(os, n.gamma);
    put_f32s(os, n.beta);
    put_f32s(os, n.mean);
    put_f32s(os, n.var);
    put_f32(os, n.eps);
    put_u32(os, n.mask.empty() ? 0u : 1u);
    if (!n.mask.empty()) {
      std::string packed((n.mask.size() + 7) / 8, '\0');
      for (std::size_t i = 0; i < n.mask.size(); ++i)
        if (n.mask[i]) packed[i / 8] = static_cast<char>(packed[i / 8] | (1 << (i % 8)));
      os.write(packed.data(), static_cast<std::streamsize>(packed.size()));
    }
  }
  if (!os) throw std::runtime_error("checkpoint: write failed");
}

inline ModelGraph<float> load_checkpoint(std::istream& is) {
  detail::Reader r(is);
  const std::string magic = r.bytes(4, "magic");
  if (magic != std::string(kCheckpointMagic, 4)) throw std::runtime_error("checkpoint: bad magic (expected SPTR)");
  const auto version = r.u32("version");
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported format version " + std::to_string(version));
  ModelGraph<float> m;
  const auto count = r.u32("node count");
  m.input_shape = {r.u32("input H"), r.u32("input W"), r.u32("input C")};
  m.num_classes = static_cast<int>(r.u32("num_classes"));
  for (std::uint32_t i = 0; i < count; ++i) {
    LayerNode<float> n;
    n.id = static_cast<int>(i);
    const auto kind = r.u32("kind");
    if (kind < 1 || kind > 8) throw std::runtime_error("checkpoint: unknown layer kind " + std::to_string(kind));
    n.kind = static_cast<LayerKind>(kind);
    n.stride = static_cast<int>(r.u32("stride"));
    n.pad = static_cast<int>(r.u32("pad"));
    n.groups = static_cast<int>(r.u32("groups"));
    const auto nin = r.u32("input count");
    for (std::uint32_t k = 0; k < nin; ++k) n.inputs.push_back(static_cast<int>(r.u32("input id")));
    n.name = r.bytes(r.u32("name length"), "name");
    const auto rank = r.u32("weight rank");
    Shape s;
    for (std::uint32_t k = 0; k < rank; ++k) s.push_back(r.u32("weight dim"));
    if (rank) n.weight = Tensor<float>(s, r.f32s(shape_numel(s), "weights"));
    n.bias = r.f32s(r.u32("bias length"), "bias");
    const auto gn = r.u32("groupnorm length");
    n.gamma = r.f32s(gn, "gamma");
    n.beta = r.f32s(gn, "beta");
    n.mean = r.f32s(gn, "mean");
    n.var = r.f32s(gn, "var");
    n.eps = r.f32("eps");
    if (r.u32("mask flag")) {
      const std::string packed = r.bytes((n.weight.size() + 7) / 8, "mask");
      n.mask.resize(n.weight.size());
      for (std::size_t k = 0; k < n.mask.size(); ++k)
        n.mask[k] = static_cast<std::uint8_t>((static_cast<unsigned char>(packed[k / 8]) >> (k % 8)) & 1u);
    }
    m.nodes.push_back(std::move(n));
  }
  m.infer_shapes(1);
  return m;
}

inline void save_checkpoint(const ModelGraph<float>& m, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  save_checkpoint(m, os);
}

inline ModelGraph<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  return load_checkpoint(is);
}

inline std::string checkpoint_bytes(const ModelGraph<float>& m) {
  std::ostringstream os(std::ios::binary);
  save_checkpoint(m, os);
  return os.str();
}

}  // namespace spu
