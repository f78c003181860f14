#pragma once

// NSCK checkpoint container (little-endian):
//   magic "NSCK" | version u16 = 1 | config: vocab u32, D u32, blocks u32,
//   heads u32, context u32, seed u64 | tensor count u32 |
//   per tensor: name (u16 len + UTF-8), rank u8, dims u32[rank], f32 data |
//   CRC32 over everything before it.
// Matrices are stored [in, out]. Tensors may appear in any order on read.

#include <array>
#include <cmath>
#include <cstring>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "neuronscope/detail/binary_io.hpp"
#include "neuronscope/error.hpp"
#include "neuronscope/tlm/model.hpp"

namespace nscope::tlm {

inline constexpr std::array<char, 4> kCheckpointMagic = {'N', 'S', 'C', 'K'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

template <typename T>
void save_checkpoint(const Tlm<T>& model, std::ostream& out) {
  nscope::detail::BinaryWriter w(out);
  const auto& c = model.config();
  w.bytes(kCheckpointMagic.data(), kCheckpointMagic.size());
  w.u16(kCheckpointVersion);
  w.u32(c.vocab_size);
  w.u32(c.model_dim);
  w.u32(c.num_blocks);
  w.u32(c.num_heads);
  w.u32(c.context_length);
  w.u64(c.seed);
  std::uint32_t count = 0;
  model.weights().visit([&](const std::string&, const Tensor<T>&) { ++count; });
  w.u32(count);
  std::vector<float> buf;
  model.weights().visit([&](const std::string& name, const Tensor<T>& t) {
    w.short_string(name);
    w.u8(static_cast<std::uint8_t>(t.shape.size()));
    for (auto d : t.shape) w.u32(static_cast<std::uint32_t>(d));
    buf.assign(t.data.begin(), t.data.end());
    w.array(std::span<const float>(buf));
  });
  w.finish_with_crc();
}

template <typename T>
void save_checkpoint_file(const Tlm<T>& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::Io, "cannot create " + path);
  save_checkpoint(model, out);
  out.flush();
  if (!out) fail(ErrorCode::Io, "failed writing " + path);
}

// The whole container is checksummed before any field is trusted, so a
// damaged file can never drive allocation or produce a partial model.
template <typename T>
Tlm<T> load_checkpoint(std::istream& in, const std::optional<TlmConfig>& expected = std::nullopt) {
  const std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  require(blob.size() >= 4 + 2 + 28 + 4 + 4, ErrorCode::TruncatedFile, "checkpoint too short");
  if (blob.compare(0, 4, std::string_view(kCheckpointMagic.data(), 4)) != 0)
    fail(ErrorCode::BadMagic, "not an NSCK checkpoint");
  {
    nscope::detail::Crc32 crc;
    crc.update(blob.data(), blob.size() - 4);
    std::uint32_t stored = 0;
    std::memcpy(&stored, blob.data() + blob.size() - 4, 4);
    if (crc.value() != stored) fail(ErrorCode::ChecksumMismatch, "checkpoint CRC32 mismatch");
  }

  std::istringstream body(blob);
  nscope::detail::BinaryReader r(body);
  std::array<char, 4> magic{};
  r.bytes(magic.data(), magic.size());
  const auto version = r.u16();
  if (version != kCheckpointVersion)
    fail(ErrorCode::UnsupportedVersion, "checkpoint version " + std::to_string(version));
  TlmConfig cfg;
  cfg.vocab_size = r.u32();
  cfg.model_dim = r.u32();
  cfg.num_blocks = r.u32();
  cfg.num_heads = r.u32();
  cfg.context_length = r.u32();
  cfg.seed = r.u64();
  try {
    cfg.validate();
  } catch (const Error& e) {
    fail(ErrorCode::FormatError, std::string("checkpoint config invalid: ") + e.what());
  }
  if (expected) {
    auto a = cfg, b = *expected;
    a.seed = b.seed = 0;
    require(a == b, ErrorCode::ShapeMismatch, "checkpoint config differs from the expected model");
  }
  // Expected tensor bytes must fit in the blob before anything is allocated.
  {
    const std::uint64_t d = cfg.model_dim;
    const std::uint64_t floats = (2 * std::uint64_t{cfg.vocab_size} + cfg.context_length) * d +
                                 std::uint64_t{cfg.num_blocks} * (12 * d * d + 13 * d) + 2 * d;
    require(floats <= blob.size() / 4, ErrorCode::ShapeMismatch,
            "checkpoint too small for its declared config");
  }

  Tlm<T> model(cfg);
  std::map<std::string, Tensor<T>*> slots;
  model.weights().visit([&](const std::string& name, Tensor<T>& t) { slots[name] = &t; });
  const auto count = r.u32();
  require(count == slots.size(), ErrorCode::ShapeMismatch,
          "checkpoint holds " + std::to_string(count) + " tensors, model needs " +
              std::to_string(slots.size()));
  std::vector<float> buf;
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto name = r.short_string();
    const auto it = slots.find(name);
    require(it != slots.end() && it->second != nullptr, ErrorCode::ShapeMismatch,
            "unexpected or duplicate tensor '" + name + "'");
    auto& t = *it->second;
    const auto rank = r.u8();
    require(rank == t.shape.size(), ErrorCode::ShapeMismatch, "rank mismatch for '" + name + "'");
    for (std::size_t i = 0; i < rank; ++i) {
      const auto dim = r.u32();
      require(dim == t.shape[i], ErrorCode::ShapeMismatch, "shape mismatch for '" + name + "'");
    }
    buf.resize(t.size());
    r.bytes(buf.data(), buf.size() * sizeof(float));
    for (std::size_t i = 0; i < buf.size(); ++i) {
      require(std::isfinite(buf[i]), ErrorCode::FormatError, "non-finite weight in '" + name + "'");
      t.data[i] = T(buf[i]);
    }
    it->second = nullptr;
  }
  require(r.consumed() + 4 == blob.size(), ErrorCode::FormatError, "trailing bytes in checkpoint");
  return model;
}

template <typename T>
Tlm<T> load_checkpoint_file(const std::string& path,
                            const std::optional<TlmConfig>& expected = std::nullopt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::Io, "cannot open " + path);
  return load_checkpoint<T>(in, expected);
}

}  // namespace nscope::tlm
