#pragma once

// Static architecture accounting: shapes, parameter counts, and MACs.
//
// Counts are derived from closed-form formulas over the schedule and are kept
// independent from model.hpp's allocation code so the two can be compared.

#include <algorithm>
#include <cstdint>
#include <iomanip>
#include <utility>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mast/schedule.hpp"

namespace mast {

enum class MacMode {
  ProjectionsOnly,  // parameterized linear/conv maps only
  Full,             // plus QKᵀ, attention·V, relative-position dots, pooling
};

inline std::string to_string(MacMode m) {
  return m == MacMode::ProjectionsOnly ? "projections-only" : "full";
}

inline MacMode mac_mode_from_string(const std::string& s) {
  if (s == "projections-only") return MacMode::ProjectionsOnly;
  if (s == "full") return MacMode::Full;
  throw ConfigError("unknown MAC accounting mode '" + s + "'");
}

enum class RowKind { PatchEmbed, Attn, MMSA, Norm, Head };

inline std::string to_string(RowKind k) {
  switch (k) {
    case RowKind::PatchEmbed: return "PatchEmbed";
    case RowKind::Attn: return "Attn-MLP";
    case RowKind::MMSA: return "MMSA-MLP";
    case RowKind::Norm: return "Norm";
    case RowKind::Head: return "Head";
  }
  return "?";
}

struct ReportRow {
  std::string name;
  RowKind kind;
  std::size_t dim = 0;      // channels, or class count for heads
  TokenGrid grid;           // meaningless for Norm/Head rows
  std::uint64_t params = 0;
  std::uint64_t macs = 0;

  /// "96×(8192=32×256)" for token rows, "527" for heads, class token excluded.
  std::string feature() const {
    if (kind == RowKind::Head) return std::to_string(dim);
    if (kind == RowKind::Norm) return std::to_string(dim);
    std::ostringstream os;
    os << dim << "×(" << grid.grid_count() << '=' << grid.freq << "×" << grid.time << ')';
    return os.str();
  }
};

struct ComplexityReport {
  std::string schedule;
  MacMode mode = MacMode::ProjectionsOnly;
  std::vector<ReportRow> rows;
  std::uint64_t total_params = 0;
  std::uint64_t total_macs = 0;
};

namespace detail {

using u64 = std::uint64_t;

inline u64 block_params(const BlockSpec& b, const TokenGrid& out) {
  const u64 din = b.dim_in, dout = b.dim_out, hid = b.mlp_hidden(), dh = b.head_dim();
  u64 n = 2 * din;                                    // norm1
  n += 3 * (din * dout + dout);                       // q, k, v
  n += dout * dout + dout;                            // output projection
  n += ((2 * u64{out.time} - 1) + (2 * u64{out.freq} - 1)) * dh;  // R_t, R_f
  if (b.kind == BlockKind::MMSA) n += din * dout + dout;  // residual expansion
  n += 2 * dout;                                      // norm2
  n += dout * hid + hid + hid * dout + dout;          // mlp
  return n;
}

inline u64 block_macs(const BlockSpec& b, const TokenGrid& in, const TokenGrid& out,
                      MacMode mode) {
  const u64 din = b.dim_in, dout = b.dim_out, hid = b.mlp_hidden();
  const u64 n_in = in.count(), n_out = out.count();
  u64 m = 3 * n_in * din * dout;   // q, k, v projections before pooling
  m += n_out * dout * dout;        // output projection
  if (b.kind == BlockKind::MMSA) m += n_out * din * dout;
  m += 2 * n_out * dout * hid;     // mlp
  if (mode == MacMode::Full) {
    m += 2 * n_out * n_out * dout;                            // QKᵀ and P·V
    m += u64{out.grid_count()} * (out.time + out.freq) * dout;  // rel-pos dots
    if (b.pools()) {
      const u64 window = (b.pool_stride_f > 1 ? 3 : 1) * (b.pool_stride_t > 1 ? 3 : 1);
      m += u64{out.grid_count()} * window * (3 * dout + din);
    }
  }
  return m;
}

}  // namespace detail

/// Full report for one accounting mode.
inline ComplexityReport analyze(const StageSchedule& s, MacMode mode = MacMode::ProjectionsOnly) {
  s.validate();
  using detail::u64;
  ComplexityReport r;
  r.schedule = s.name;
  r.mode = mode;
  const auto grids = s.grids();
  const u64 d0 = s.patch.dim, k = s.patch.kernel;
  r.rows.push_back({"Patch Embed", RowKind::PatchEmbed, s.patch.dim, grids[0],
                    d0 * k * k + d0 + d0, d0 * k * k * grids[0].grid_count()});
  for (std::size_t i = 0; i < s.blocks.size(); ++i) {
    const auto& b = s.blocks[i];
    r.rows.push_back({"Block " + std::to_string(i),
                      b.kind == BlockKind::MMSA ? RowKind::MMSA : RowKind::Attn, b.dim_out,
                      grids[i + 1], detail::block_params(b, grids[i + 1]),
                      detail::block_macs(b, grids[i], grids[i + 1], mode)});
  }
  const u64 d = s.final_dim();
  r.rows.push_back({"Norm", RowKind::Norm, s.final_dim(), grids.back(), 2 * d, 0});
  for (std::size_t h = 0; h < s.head_sizes.size(); ++h) {
    const u64 c = s.head_sizes[h];
    r.rows.push_back({"Head " + std::to_string(h), RowKind::Head, s.head_sizes[h], grids.back(),
                      d * c + c, d * c});
  }
  for (const auto& row : r.rows) {
    r.total_params += row.params;
    r.total_macs += row.macs;
  }
  return r;
}

inline std::uint64_t count_params(const StageSchedule& s) { return analyze(s).total_params; }

inline std::uint64_t count_macs(const StageSchedule& s, MacMode mode) {
  return analyze(s, mode).total_macs;
}

/// Feature shapes in network order: patch embedding, each block, each head.
inline std::vector<std::string> shape_trace(const StageSchedule& s) {
  std::vector<std::string> out;
  for (const auto& row : analyze(s).rows)
    if (row.kind != RowKind::Norm) out.push_back(row.feature());
  return out;
}

struct ComparisonRow {
  std::string name;
  std::string feature_a, feature_b;
  std::int64_t param_diff = 0;
  std::int64_t mac_diff = 0;  // projections-only
};

struct Comparison {
  std::string a, b;
  double param_ratio = 1;
  double mac_ratio_projections = 1;
  double mac_ratio_full = 1;
  std::vector<ComparisonRow> rows;
};

/// Ratios are a / b.
inline Comparison compare(const StageSchedule& a, const StageSchedule& b) {
  const auto pa = analyze(a, MacMode::ProjectionsOnly), pb = analyze(b, MacMode::ProjectionsOnly);
  const auto fa = analyze(a, MacMode::Full), fb = analyze(b, MacMode::Full);
  Comparison c;
  c.a = a.name;
  c.b = b.name;
  c.param_ratio = static_cast<double>(pa.total_params) / static_cast<double>(pb.total_params);
  c.mac_ratio_projections =
      static_cast<double>(pa.total_macs) / static_cast<double>(pb.total_macs);
  c.mac_ratio_full = static_cast<double>(fa.total_macs) / static_cast<double>(fb.total_macs);
  // Token rows line up by position; norm and head rows line up by name.
  const auto split = [](const ComplexityReport& r) {
    std::pair<std::vector<const ReportRow*>, std::vector<const ReportRow*>> parts;
    for (const auto& row : r.rows)
      (row.kind == RowKind::Norm || row.kind == RowKind::Head ? parts.second : parts.first)
          .push_back(&row);
    return parts;
  };
  const auto [body_a, tail_a] = split(pa);
  const auto [body_b, tail_b] = split(pb);
  const auto add_row = [&](const ReportRow* ra, const ReportRow* rb) {
    ComparisonRow row;
    row.name = ra ? ra->name : rb->name;
    row.feature_a = ra ? ra->feature() : "-";
    row.feature_b = rb ? rb->feature() : "-";
    const auto sp = [](const ReportRow* r) { return r ? static_cast<std::int64_t>(r->params) : 0; };
    const auto sm = [](const ReportRow* r) { return r ? static_cast<std::int64_t>(r->macs) : 0; };
    row.param_diff = sp(ra) - sp(rb);
    row.mac_diff = sm(ra) - sm(rb);
    c.rows.push_back(row);
  };
  for (std::size_t i = 0; i < std::max(body_a.size(), body_b.size()); ++i)
    add_row(i < body_a.size() ? body_a[i] : nullptr, i < body_b.size() ? body_b[i] : nullptr);
  for (const ReportRow* ra : tail_a) {
    const ReportRow* match = nullptr;
    for (const ReportRow* rb : tail_b)
      if (rb->name == ra->name) match = rb;
    add_row(ra, match);
  }
  for (const ReportRow* rb : tail_b) {
    bool seen = false;
    for (const ReportRow* ra : tail_a) seen = seen || ra->name == rb->name;
    if (!seen) add_row(nullptr, rb);
  }
  return c;
}

// ---------------------------------------------------------------------------
// Emitters

namespace detail {

// Left/right-justify by code points; feature strings contain "×".
inline std::string pad(const std::string& s, std::size_t width, bool left = true) {
  std::size_t cps = 0;
  for (unsigned char ch : s)
    if ((ch & 0xC0) != 0x80) ++cps;
  if (cps >= width) return s + (left ? " " : "");
  const std::string fill(width - cps, ' ');
  return left ? s + fill : fill + s;
}

}  // namespace detail

inline std::string format_table(const ComplexityReport& r) {
  using detail::pad;
  std::ostringstream os;
  os << "schedule: " << r.schedule << "  (MACs: " << to_string(r.mode) << ")\n";
  os << pad("Block", 14) << pad("Feature", 22) << pad("Arch.", 12) << pad("Params", 14, false)
     << pad("MACs", 18, false) << '\n';
  for (const auto& row : r.rows) {
    os << pad(row.name, 14) << pad(row.feature(), 22) << pad(to_string(row.kind), 12)
       << pad(std::to_string(row.params), 14, false) << pad(std::to_string(row.macs), 18, false)
       << '\n';
  }
  os << std::fixed << std::setprecision(2) << "total params: " << r.total_params << " ("
     << static_cast<double>(r.total_params) / 1e6 << " M)\n"
     << "total MACs:   " << r.total_macs << " (" << static_cast<double>(r.total_macs) / 1e9
     << " G)\n";
  return os.str();
}

inline std::string format_csv(const ComplexityReport& r) {
  std::ostringstream os;
  os << "name,kind,dim,freq,time,tokens,params,macs\n";
  for (const auto& row : r.rows) {
    const bool tokens = row.kind != RowKind::Head && row.kind != RowKind::Norm;
    os << row.name << ',' << to_string(row.kind) << ',' << row.dim << ','
       << (tokens ? row.grid.freq : 0) << ',' << (tokens ? row.grid.time : 0) << ','
       << (tokens ? row.grid.grid_count() : 0) << ',' << row.params << ',' << row.macs << '\n';
  }
  return os.str();
}

inline nlohmann::json to_json(const ComplexityReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    rows.push_back({{"name", row.name},
                    {"kind", to_string(row.kind)},
                    {"feature", row.feature()},
                    {"dim", row.dim},
                    {"params", row.params},
                    {"macs", row.macs}});
  }
  return {{"schedule", r.schedule},
          {"accounting_mode", to_string(r.mode)},
          {"rows", rows},
          {"totals", {{"params", r.total_params}, {"macs", r.total_macs}}}};
}

inline std::string format_comparison(const Comparison& c) {
  using detail::pad;
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "compare " << c.a << " vs " << c.b << '\n';
  os << "params ratio: " << c.param_ratio << '\n';
  os << "macs ratio (projections-only): " << c.mac_ratio_projections << '\n';
  os << "macs ratio (full): " << c.mac_ratio_full << '\n';
  os << pad("Block", 14) << pad(c.a, 22) << pad(c.b, 22) << pad("d params", 14, false)
     << pad("d MACs", 16, false) << '\n';
  for (const auto& row : c.rows) {
    os << pad(row.name, 14) << pad(row.feature_a, 22) << pad(row.feature_b, 22)
       << pad(std::to_string(row.param_diff), 14, false)
       << pad(std::to_string(row.mac_diff), 16, false) << '\n';
  }
  return os.str();
}

inline nlohmann::json to_json(const Comparison& c) {
  return {{"a", c.a},
          {"b", c.b},
          {"param_ratio", c.param_ratio},
          {"mac_ratio_projections_only", c.mac_ratio_projections},
          {"mac_ratio_full", c.mac_ratio_full}};
}

}  // namespace mast
