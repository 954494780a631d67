#pragma once

// Stage schedules: the per-block layout of a multiscale audio transformer.

#include <array>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mast/errors.hpp"
#include "mast/ops.hpp"

namespace mast {

enum class BlockKind { Attn, MMSA };

inline std::string to_string(BlockKind k) { return k == BlockKind::Attn ? "Attn" : "MMSA"; }

inline BlockKind block_kind_from_string(const std::string& s) {
  if (s == "Attn") return BlockKind::Attn;
  if (s == "MMSA") return BlockKind::MMSA;
  throw ConfigError("unknown block kind '" + s + "' (expected Attn or MMSA)");
}

/// (frequency, time) arrangement of grid tokens. Tokens are stored
/// frequency-major: index = f * time + t, after the class token if present.
struct TokenGrid {
  std::size_t freq = 1;
  std::size_t time = 1;
  bool has_class_token = true;

  std::size_t grid_count() const { return freq * time; }
  std::size_t count() const { return grid_count() + (has_class_token ? 1 : 0); }
  std::size_t offset() const { return has_class_token ? 1 : 0; }

  friend bool operator==(const TokenGrid&, const TokenGrid&) = default;
};

/// Output extent of overlapping mean pooling along one axis: kernel 3,
/// padding 1 for stride > 1; stride 1 leaves the axis untouched.
inline std::size_t pooled_extent(std::size_t extent, std::size_t stride) {
  if (stride == 0) throw ConfigError("pooling stride must be at least 1");
  if (stride == 1) return extent;
  const std::size_t padded = extent + 2;
  if (padded < 3) throw DimensionError("pooled extent would be empty");
  return (padded - 3) / stride + 1;
}

inline TokenGrid pooled_grid(const TokenGrid& g, std::size_t stride_f, std::size_t stride_t) {
  return {pooled_extent(g.freq, stride_f), pooled_extent(g.time, stride_t), g.has_class_token};
}

struct PatchSpec {
  std::size_t dim = 96;
  std::size_t kernel = 7;
  std::size_t stride = 4;
  std::size_t pad = 3;

  friend bool operator==(const PatchSpec&, const PatchSpec&) = default;
};

struct BlockSpec {
  BlockKind kind = BlockKind::Attn;
  std::size_t dim_in = 96;
  std::size_t dim_out = 96;
  std::size_t heads = 1;
  std::size_t pool_stride_f = 1;
  std::size_t pool_stride_t = 1;
  double mlp_ratio = 4.0;

  std::size_t head_dim() const { return dim_out / heads; }
  std::size_t mlp_hidden() const {
    return static_cast<std::size_t>(std::lround(static_cast<double>(dim_out) * mlp_ratio));
  }
  bool pools() const { return pool_stride_f > 1 || pool_stride_t > 1; }

  friend bool operator==(const BlockSpec&, const BlockSpec&) = default;
};

struct StageSchedule {
  std::string name = "custom";
  std::size_t input_freq = 128;  // mel bins (h)
  std::size_t input_time = 1024;  // frames (T)
  PatchSpec patch;
  std::vector<BlockSpec> blocks;
  std::vector<std::size_t> head_sizes{527};

  friend bool operator==(const StageSchedule&, const StageSchedule&) = default;

  std::size_t final_dim() const { return blocks.empty() ? patch.dim : blocks.back().dim_out; }

  TokenGrid patch_grid() const {
    return {conv_out_extent(input_freq, patch.kernel, patch.stride, patch.pad),
            conv_out_extent(input_time, patch.kernel, patch.stride, patch.pad), true};
  }

  /// Grid entering each block, followed by the final output grid (size blocks+1).
  std::vector<TokenGrid> grids() const {
    std::vector<TokenGrid> out{patch_grid()};
    for (const auto& b : blocks)
      out.push_back(pooled_grid(out.back(), b.pool_stride_f, b.pool_stride_t));
    return out;
  }

  void validate() const {
    if (input_freq == 0 || input_time == 0) throw ConfigError("input extents must be positive");
    if (patch.dim == 0 || patch.kernel == 0 || patch.stride == 0)
      throw ConfigError("patch dim, kernel and stride must be positive");
    if (head_sizes.empty()) throw ConfigError("schedule needs at least one classification head");
    for (auto c : head_sizes)
      if (c == 0) throw ConfigError("classification head with zero classes");
    std::size_t dim = patch.dim;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const auto& b = blocks[i];
      const std::string where = "block " + std::to_string(i) + ": ";
      if (b.dim_in != dim)
        throw ConfigError(where + "dim_in " + std::to_string(b.dim_in) +
                          " does not chain from previous dim " + std::to_string(dim));
      if (b.heads == 0 || b.dim_out % b.heads != 0)
        throw ConfigError(where + "head count " + std::to_string(b.heads) +
                          " does not divide dim_out " + std::to_string(b.dim_out));
      if (b.pool_stride_f == 0 || b.pool_stride_t == 0)
        throw ConfigError(where + "pool strides must be at least 1");
      if (b.mlp_ratio <= 0 || b.mlp_hidden() == 0)
        throw ConfigError(where + "mlp_ratio must be positive");
      if (b.kind == BlockKind::Attn) {
        if (b.dim_in != b.dim_out || b.pools())
          throw ConfigError(where + "Attn blocks keep dim and use unit strides");
      } else {
        if (b.dim_out != 2 * b.dim_in)
          throw ConfigError(where + "MMSA blocks must double the channel dim");
        if (!b.pools()) throw ConfigError(where + "MMSA blocks need a stride above 1");
      }
      dim = b.dim_out;
    }
    try {
      (void)grids();
    } catch (const DimensionError& e) {
      throw ConfigError(std::string("schedule does not fit its input: ") + e.what());
    }
  }
};

// ---------------------------------------------------------------------------
// JSON

inline void to_json(nlohmann::json& j, const BlockSpec& b) {
  j = nlohmann::json{{"kind", to_string(b.kind)},
                     {"dim_in", b.dim_in},
                     {"dim_out", b.dim_out},
                     {"heads", b.heads},
                     {"pool_stride_f", b.pool_stride_f},
                     {"pool_stride_t", b.pool_stride_t},
                     {"mlp_ratio", b.mlp_ratio}};
}

inline void from_json(const nlohmann::json& j, BlockSpec& b) {
  b.kind = block_kind_from_string(j.at("kind").get<std::string>());
  j.at("dim_in").get_to(b.dim_in);
  j.at("dim_out").get_to(b.dim_out);
  j.at("heads").get_to(b.heads);
  b.pool_stride_f = j.value("pool_stride_f", std::size_t{1});
  b.pool_stride_t = j.value("pool_stride_t", std::size_t{1});
  b.mlp_ratio = j.value("mlp_ratio", 4.0);
}

inline void to_json(nlohmann::json& j, const StageSchedule& s) {
  j = nlohmann::json{
      {"name", s.name},
      {"input", {{"freq", s.input_freq}, {"time", s.input_time}}},
      {"patch",
       {{"dim", s.patch.dim}, {"kernel", s.patch.kernel}, {"stride", s.patch.stride},
        {"pad", s.patch.pad}}},
      {"blocks", s.blocks},
      {"head_sizes", s.head_sizes}};
}

inline void from_json(const nlohmann::json& j, StageSchedule& s) {
  s.name = j.value("name", std::string("custom"));
  const auto& in = j.at("input");
  in.at("freq").get_to(s.input_freq);
  in.at("time").get_to(s.input_time);
  const auto& p = j.at("patch");
  p.at("dim").get_to(s.patch.dim);
  p.at("kernel").get_to(s.patch.kernel);
  p.at("stride").get_to(s.patch.stride);
  s.patch.pad = p.value("pad", std::size_t{0});
  j.at("blocks").get_to(s.blocks);
  j.at("head_sizes").get_to(s.head_sizes);
}

// ---------------------------------------------------------------------------
// Presets

namespace detail {

inline BlockSpec attn(std::size_t dim, std::size_t heads) {
  return {BlockKind::Attn, dim, dim, heads, 1, 1, 4.0};
}
inline BlockSpec mmsa(std::size_t dim_in, std::size_t heads, std::size_t sf, std::size_t st) {
  return {BlockKind::MMSA, dim_in, 2 * dim_in, heads, sf, st, 4.0};
}

// Stage layout shared by mast-b and its ablations. `pools[k]` gives the
// (f, t) stride of the k-th transition block (blocks 2, 5, 21), or {1,1}
// to keep that block a plain Attn block at the current width.
inline StageSchedule mast_family(const std::string& name,
                                 const std::array<std::array<std::size_t, 2>, 3>& pools) {
  StageSchedule s;
  s.name = name;
  s.input_freq = 128;
  s.input_time = 1024;
  s.patch = {96, 7, 4, 3};
  s.head_sizes = {527};
  constexpr std::size_t kTransitions[3] = {2, 5, 21};
  std::size_t dim = 96;
  std::size_t next = 0;
  for (std::size_t i = 0; i < 24; ++i) {
    if (next < 3 && i == kTransitions[next]) {
      const auto [sf, st] = pools[next];
      ++next;
      if (sf > 1 || st > 1) {
        s.blocks.push_back(mmsa(dim, 2 * dim / 96, sf, st));
        dim *= 2;
        continue;
      }
    }
    s.blocks.push_back(attn(dim, dim / 96));
  }
  return s;
}

}  // namespace detail

inline std::vector<std::string> preset_names() {
  return {"mast-b",
          "ast",
          "ablation-no-pool",
          "ablation-first-pool-only",
          "ablation-two-pools",
          "ablation-2d-at-21",
          "mast-tiny",
          "gradcheck-tiny"};
}

inline StageSchedule make_schedule(const std::string& preset) {
  using detail::attn;
  using detail::mmsa;
  StageSchedule s;
  if (preset == "mast-b") {
    s = detail::mast_family(preset, {{{2, 2}, {2, 2}, {1, 2}}});
  } else if (preset == "ablation-no-pool") {
    s = detail::mast_family(preset, {{{1, 1}, {1, 1}, {1, 1}}});
  } else if (preset == "ablation-first-pool-only") {
    s = detail::mast_family(preset, {{{2, 2}, {1, 1}, {1, 1}}});
  } else if (preset == "ablation-two-pools") {
    s = detail::mast_family(preset, {{{2, 2}, {2, 2}, {1, 1}}});
  } else if (preset == "ablation-2d-at-21") {
    s = detail::mast_family(preset, {{{2, 2}, {2, 2}, {2, 2}}});
  } else if (preset == "ast") {
    s.name = preset;
    s.patch = {768, 16, 10, 0};
    for (int i = 0; i < 12; ++i) s.blocks.push_back(attn(768, 12));
    s.head_sizes = {527};
  } else if (preset == "mast-tiny") {
    // mast-b widths divided by 8 on a 32×64 input, seven blocks with the
    // same 2D, 2D, time-only transition order.
    s.name = preset;
    s.input_freq = 32;
    s.input_time = 64;
    s.patch = {12, 7, 4, 3};
    s.blocks = {attn(12, 1),  mmsa(12, 2, 2, 2), attn(24, 2), mmsa(24, 4, 2, 2),
                attn(48, 4), mmsa(48, 8, 1, 2), attn(96, 8)};
    s.head_sizes = {4};
  } else if (preset == "gradcheck-tiny") {
    s.name = preset;
    s.input_freq = 16;
    s.input_time = 32;
    s.patch = {4, 7, 4, 3};
    s.blocks = {mmsa(4, 2, 2, 2), attn(8, 2)};
    s.head_sizes = {3};
  } else {
    std::string known;
    for (const auto& n : preset_names()) known += (known.empty() ? "" : ", ") + n;
    throw ConfigError("unknown schedule preset '" + preset + "' (known: " + known + ")");
  }
  s.validate();
  return s;
}

/// Same block pattern with every width divided by `divisor` and a new input size.
inline StageSchedule shrink_schedule(const StageSchedule& base, std::size_t divisor,
                                     std::size_t input_freq, std::size_t input_time,
                                     std::vector<std::size_t> head_sizes) {
  StageSchedule s = base;
  s.name = base.name + "/" + std::to_string(divisor);
  s.input_freq = input_freq;
  s.input_time = input_time;
  auto shrink = [&](std::size_t d) {
    if (d % divisor != 0)
      throw ConfigError("width " + std::to_string(d) + " not divisible by " +
                        std::to_string(divisor));
    return d / divisor;
  };
  s.patch.dim = shrink(s.patch.dim);
  for (auto& b : s.blocks) {
    b.dim_in = shrink(b.dim_in);
    b.dim_out = shrink(b.dim_out);
  }
  s.head_sizes = std::move(head_sizes);
  s.validate();
  return s;
}

/// Preset name or path to a JSON schedule document.
inline StageSchedule load_schedule(const std::string& preset_or_path) {
  for (const auto& n : preset_names())
    if (n == preset_or_path) return make_schedule(n);
  std::ifstream in(preset_or_path);
  if (!in) return make_schedule(preset_or_path);  // reports the unknown preset
  StageSchedule s;
  try {
    s = nlohmann::json::parse(in).get<StageSchedule>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("invalid schedule file '" + preset_or_path + "': " + e.what());
  }
  s.validate();
  return s;
}

}  // namespace mast
