#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "neuronscope/error.hpp"

namespace nscope {

// The four linear layers probed in every transformer block, in catalog order:
// fused QKV projection, attention output projection, MLP expansion and MLP
// projection.
enum class UnitKind : std::uint8_t { A = 0, Aproj = 1, B = 2, Bproj = 3 };

inline constexpr std::array<UnitKind, 4> kAllUnitKinds = {UnitKind::A, UnitKind::Aproj, UnitKind::B,
                                                         UnitKind::Bproj};

constexpr std::string_view to_string(UnitKind kind) noexcept {
  switch (kind) {
    case UnitKind::A: return "A";
    case UnitKind::Aproj: return "Aproj";
    case UnitKind::B: return "B";
    case UnitKind::Bproj: return "Bproj";
  }
  return "?";
}

inline std::optional<UnitKind> parse_unit_kind(std::string_view s) {
  for (auto k : kAllUnitKinds)
    if (to_string(k) == s) return k;
  return std::nullopt;
}

// Width of a layer kind in multiples of the model dimension.
constexpr std::uint64_t width_factor(UnitKind kind) noexcept {
  switch (kind) {
    case UnitKind::A: return 3;
    case UnitKind::Aproj: return 1;
    case UnitKind::B: return 4;
    case UnitKind::Bproj: return 1;
  }
  return 0;
}

// Offset of a kind inside a block, in multiples of the model dimension.
constexpr std::uint64_t offset_factor(UnitKind kind) noexcept {
  switch (kind) {
    case UnitKind::A: return 0;
    case UnitKind::Aproj: return 3;
    case UnitKind::B: return 4;
    case UnitKind::Bproj: return 8;
  }
  return 0;
}

inline constexpr std::uint64_t kUnitsPerBlockFactor = 9;

struct UnitId {
  std::uint32_t block = 0;
  UnitKind kind = UnitKind::A;
  std::uint32_t channel = 0;

  friend auto operator<=>(const UnitId&, const UnitId&) = default;
};

inline std::string to_string(const UnitId& id) {
  return std::to_string(id.block) + ":" + std::string(to_string(id.kind)) + ":" +
         std::to_string(id.channel);
}

// Maps between flattened unit indices and (block, kind, channel). Blocks are
// enumerated in order; inside a block A, Aproj, B, Bproj; channels ascending.
class UnitCatalog {
 public:
  UnitCatalog() = default;
  UnitCatalog(std::uint32_t model_dim, std::uint32_t num_blocks)
      : model_dim_(model_dim), num_blocks_(num_blocks) {
    require(model_dim > 0 && num_blocks > 0, ErrorCode::InvalidArgument,
            "catalog needs a positive model dimension and block count");
  }

  std::uint32_t model_dim() const noexcept { return model_dim_; }
  std::uint32_t num_blocks() const noexcept { return num_blocks_; }
  std::uint64_t units_per_block() const noexcept { return kUnitsPerBlockFactor * model_dim_; }
  std::uint64_t total_units() const noexcept { return units_per_block() * num_blocks_; }

  std::uint64_t width(UnitKind kind) const noexcept { return width_factor(kind) * model_dim_; }

  bool contains(const UnitId& id) const noexcept {
    return id.block < num_blocks_ && id.channel < width(id.kind);
  }

  std::uint64_t flatten(const UnitId& id) const {
    require(contains(id), ErrorCode::UnknownUnit, "unit " + to_string(id) + " outside catalog");
    return id.block * units_per_block() + offset_factor(id.kind) * model_dim_ + id.channel;
  }

  UnitId unflatten(std::uint64_t index) const {
    require(index < total_units(), ErrorCode::OutOfRange,
            "flattened index " + std::to_string(index) + " >= M");
    const auto per_block = units_per_block();
    UnitId id;
    id.block = static_cast<std::uint32_t>(index / per_block);
    const auto within = index % per_block;
    for (auto kind : kAllUnitKinds) {
      const auto begin = offset_factor(kind) * model_dim_;
      if (within < begin + width(kind)) {
        id.kind = kind;
        id.channel = static_cast<std::uint32_t>(within - begin);
        break;
      }
    }
    return id;
  }

  // Flattened index of the first unit in (block, kind).
  std::uint64_t group_begin(std::uint32_t block, UnitKind kind) const noexcept {
    return block * units_per_block() + offset_factor(kind) * model_dim_;
  }

  friend bool operator==(const UnitCatalog&, const UnitCatalog&) = default;

 private:
  std::uint32_t model_dim_ = 0;
  std::uint32_t num_blocks_ = 0;
};

}  // namespace nscope
