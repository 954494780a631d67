#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "mast/errors.hpp"
#include "mast/model.hpp"
#include "mast/schedule.hpp"
#include "mast/tensor.hpp"
#include "mast/training.hpp"

namespace mast {

// ---------------------------------------------------------------------------
// MTSR tensor files
//
// "MTSR" | u8 version=1 | u8 dtype (0=f32, 1=f64) | u8 ndim | ndim × u64 LE extents
// | row-major LE payload

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

inline constexpr std::uint8_t kMtsrVersion = 1;

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>, "f32 or f64 only");
  return std::is_same_v<T, float> ? DType::F32 : DType::F64;
}

inline std::size_t dtype_size(DType d) { return d == DType::F32 ? 4 : 8; }

namespace detail {

template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i)
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

template <typename U>
U get_le(std::string_view in, std::size_t pos) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i)
    v |= static_cast<U>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return v;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("failed writing '" + path + "'");
}

inline void need(std::string_view in, std::size_t pos, std::size_t len, std::size_t base,
                 const std::string& what) {
  if (in.size() < pos + len)
    throw FormatError("truncated " + what + " at byte offset " + std::to_string(base + pos) +
                      ": expected " + std::to_string(len) + " bytes, found " +
                      std::to_string(in.size() > pos ? in.size() - pos : 0));
}

}  // namespace detail

template <typename T>
std::string encode_tensor(const Tensor<T>& t) {
  if (t.rank() > 255) throw DimensionError("MTSR supports at most 255 dimensions");
  std::string out = "MTSR";
  out.push_back(static_cast<char>(kMtsrVersion));
  out.push_back(static_cast<char>(dtype_of<T>()));
  out.push_back(static_cast<char>(t.rank()));
  for (auto e : t.shape()) detail::put_le<std::uint64_t>(out, e);
  out.reserve(out.size() + t.size() * sizeof(T));
  for (T v : t.values()) {
    if constexpr (std::is_same_v<T, float>)
      detail::put_le(out, std::bit_cast<std::uint32_t>(v));
    else
      detail::put_le(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

/// A decoded tensor keeps its on-disk precision.
struct StoredTensor {
  DType dtype = DType::F32;
  Tensor<float> f32;
  Tensor<double> f64;

  const Shape& shape() const { return dtype == DType::F32 ? f32.shape() : f64.shape(); }

  template <typename T>
  Tensor<T> as() const {
    return dtype == DType::F32 ? f32.template cast<T>() : f64.template cast<T>();
  }
};

/// Decodes one MTSR block starting at `in[0]`. `base` is the block's offset
/// in the enclosing file, used in error messages. `consumed` receives the
/// block length.
inline StoredTensor decode_tensor(std::string_view in, std::size_t base = 0,
                                  std::size_t* consumed = nullptr) {
  detail::need(in, 0, 7, base, "MTSR header");
  if (in.substr(0, 4) != "MTSR")
    throw FormatError("bad magic at byte offset " + std::to_string(base) + ": expected 'MTSR'");
  const auto version = static_cast<std::uint8_t>(in[4]);
  if (version != kMtsrVersion)
    throw FormatError("unsupported MTSR version " + std::to_string(version) +
                      " at byte offset " + std::to_string(base + 4));
  const auto dt = static_cast<std::uint8_t>(in[5]);
  if (dt > 1)
    throw FormatError("unknown dtype code " + std::to_string(dt) + " at byte offset " +
                      std::to_string(base + 5));
  const auto ndim = static_cast<std::uint8_t>(in[6]);
  if (ndim == 0) throw FormatError("zero-rank tensor at byte offset " + std::to_string(base + 6));
  std::size_t pos = 7;
  detail::need(in, pos, 8u * ndim, base, "MTSR extents");
  Shape shape(ndim);
  for (auto& e : shape) {
    const auto v = detail::get_le<std::uint64_t>(in, pos);
    if (v == 0) throw FormatError("zero extent at byte offset " + std::to_string(base + pos));
    e = static_cast<std::size_t>(v);
    pos += 8;
  }
  StoredTensor st;
  st.dtype = static_cast<DType>(dt);
  const std::size_t n = shape_numel(shape);
  detail::need(in, pos, n * dtype_size(st.dtype), base, "MTSR payload");
  if (st.dtype == DType::F32) {
    std::vector<float> data(n);
    for (std::size_t i = 0; i < n; ++i, pos += 4)
      data[i] = std::bit_cast<float>(detail::get_le<std::uint32_t>(in, pos));
    st.f32 = Tensor<float>(shape, std::move(data));
  } else {
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i, pos += 8)
      data[i] = std::bit_cast<double>(detail::get_le<std::uint64_t>(in, pos));
    st.f64 = Tensor<double>(shape, std::move(data));
  }
  if (consumed) *consumed = pos;
  return st;
}

template <typename T>
void write_tensor(const std::string& path, const Tensor<T>& t) {
  detail::write_file(path, encode_tensor(t));
}

inline StoredTensor read_stored_tensor(const std::string& path) {
  const std::string bytes = detail::read_file(path);
  std::size_t used = 0;
  StoredTensor st = decode_tensor(bytes, 0, &used);
  if (used != bytes.size())
    throw FormatError("'" + path + "': " + std::to_string(bytes.size() - used) +
                      " trailing bytes after payload at byte offset " + std::to_string(used));
  return st;
}

/// Reads an MTSR file, converting to T if the stored precision differs.
template <typename T>
Tensor<T> read_tensor(const std::string& path) {
  return read_stored_tensor(path).as<T>();
}

// ---------------------------------------------------------------------------
// Manifests

struct ManifestEntry {
  std::string path;  // resolved against the manifest directory
  std::vector<std::size_t> labels;
  std::vector<std::size_t> labels2;
};

namespace detail {

inline std::vector<std::size_t> parse_labels(const nlohmann::json& j, const std::string& where) {
  std::vector<std::size_t> out;
  auto one = [&](const nlohmann::json& v) {
    if (!v.is_number_integer() || v.get<long long>() < 0)
      throw InputError(where + ": labels must be non-negative integers");
    out.push_back(v.get<std::size_t>());
  };
  if (j.is_array()) {
    for (const auto& v : j) one(v);
  } else {
    one(j);
  }
  return out;
}

}  // namespace detail

inline std::vector<ManifestEntry> load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open manifest '" + path + "'");
  const auto dir = std::filesystem::path(path).parent_path();
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path + ":" + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw InputError(where + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("path") || !j["path"].is_string() || !j.contains("labels"))
      throw InputError(where + ": expected {\"path\": str, \"labels\": [int]}");
    ManifestEntry e;
    std::filesystem::path p = j["path"].get<std::string>();
    e.path = (p.is_absolute() ? p : dir / p).string();
    e.labels = detail::parse_labels(j["labels"], where);
    if (e.labels.empty()) throw InputError(where + ": empty label list");
    if (j.contains("labels2")) e.labels2 = detail::parse_labels(j["labels2"], where);
    out.push_back(std::move(e));
  }
  if (out.empty()) throw InputError("manifest '" + path + "' has no entries");
  return out;
}

/// Paths are written relative to the manifest's directory when possible.
inline void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  const auto dir = std::filesystem::path(path).parent_path();
  std::ostringstream out;
  for (const auto& e : entries) {
    nlohmann::json j;
    std::filesystem::path p = e.path;
    j["path"] = dir.empty() ? p.string() : p.lexically_relative(dir).string();
    j["labels"] = e.labels;
    if (!e.labels2.empty()) j["labels2"] = e.labels2;
    out << j.dump() << "\n";
  }
  detail::write_file(path, out.str());
}

/// Loads every spectrogram and validates labels against the schedule before
/// any training work starts.
inline std::vector<Example> load_examples(const std::vector<ManifestEntry>& entries,
                                          const StageSchedule& s) {
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto check = [&](const std::vector<std::size_t>& labels, std::size_t head) {
      for (auto l : labels)
        if (head >= s.head_sizes.size() || l >= s.head_sizes[head])
          throw InputError("manifest entry " + std::to_string(i) + " ('" + entries[i].path +
                           "'): label " + std::to_string(l) + " out of range for head " +
                           std::to_string(head));
    };
    check(entries[i].labels, 0);
    check(entries[i].labels2, 1);
    if (!std::filesystem::exists(entries[i].path))
      throw InputError("manifest entry " + std::to_string(i) + ": missing file '" +
                       entries[i].path + "'");
  }
  std::vector<Example> out;
  out.reserve(entries.size());
  for (const auto& e : entries)
    out.push_back(Example{read_tensor<float>(e.path), e.labels, e.labels2});
  validate_examples(out, s);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// "MCKP" | u8 version | u64 LE header length | JSON header | MTSR blocks
// The header carries the schedule, training config and a directory of
// {name, offset, length} entries with offsets relative to the first block.

inline constexpr std::uint8_t kCheckpointVersion = 1;

struct Checkpoint {
  StageSchedule schedule;
  TrainConfig train;
  ModelParams<float> params;
  int format_version = kCheckpointVersion;
};

inline std::string encode_checkpoint(const Checkpoint& c) {
  check_params_match(c.params, c.schedule);
  std::string blobs;
  nlohmann::json dir = nlohmann::json::array();
  for (const auto& [name, t] : c.params.tensors) {
    const std::string block = encode_tensor(t);
    dir.push_back({{"name", name}, {"offset", blobs.size()}, {"length", block.size()}});
    blobs += block;
  }
  const nlohmann::json header = {{"format_version", c.format_version},
                                 {"schedule", c.schedule},
                                 {"train_config", c.train},
                                 {"tensor_count", c.params.tensors.size()},
                                 {"tensors", dir}};
  const std::string h = header.dump();
  std::string out = "MCKP";
  out.push_back(static_cast<char>(kCheckpointVersion));
  detail::put_le<std::uint64_t>(out, h.size());
  return out + h + blobs;
}

inline Checkpoint decode_checkpoint(std::string_view in) {
  detail::need(in, 0, 13, 0, "checkpoint preamble");
  if (in.substr(0, 4) != "MCKP") throw FormatError("bad checkpoint magic at byte offset 0");
  const auto version = static_cast<std::uint8_t>(in[4]);
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version) +
                      " at byte offset 4");
  const auto hlen = detail::get_le<std::uint64_t>(in, 5);
  detail::need(in, 13, hlen, 0, "checkpoint header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(in.substr(13, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header at byte offset 13: ") + e.what());
  }
  Checkpoint c;
  try {
    c.format_version = header.at("format_version").get<int>();
    c.schedule = header.at("schedule").get<StageSchedule>();
    c.train = header.at("train_config").get<TrainConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }
  const auto& dir = header.at("tensors");
  const auto count = header.at("tensor_count").get<std::size_t>();
  if (!dir.is_array() || dir.size() != count)
    throw FormatError("checkpoint header declares " + std::to_string(count) +
                      " tensors but the directory lists " + std::to_string(dir.size()));
  const std::size_t base = 13 + hlen;
  const std::string_view blobs = in.substr(base);
  for (const auto& e : dir) {
    const auto name = e.at("name").get<std::string>();
    const auto off = e.at("offset").get<std::size_t>();
    const auto len = e.at("length").get<std::size_t>();
    detail::need(blobs, off, len, base, "tensor '" + name + "'");
    std::size_t used = 0;
    StoredTensor st = decode_tensor(blobs.substr(off, len), base + off, &used);
    if (used != len)
      throw FormatError("tensor '" + name + "' at byte offset " + std::to_string(base + off) +
                        ": directory length " + std::to_string(len) + ", block length " +
                        std::to_string(used));
    if (!c.params.tensors.emplace(name, st.as<float>()).second)
      throw FormatError("duplicate tensor '" + name + "' in checkpoint directory");
  }
  check_params_match(c.params, c.schedule);
  return c;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
  detail::write_file(path, encode_checkpoint(c));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  return decode_checkpoint(detail::read_file(path));
}

/// Loads a checkpoint and requires its tensors to fit `expected`.
inline Checkpoint load_checkpoint(const std::string& path, const StageSchedule& expected) {
  Checkpoint c = load_checkpoint(path);
  check_params_match(c.params, expected);
  return c;
}

// ---------------------------------------------------------------------------
// Synthetic data

struct SynthOptions {
  std::size_t n_samples = 32;
  std::size_t n_classes = 4;
  std::uint64_t seed = 7;
  std::size_t freq = 32;
  std::size_t time = 64;
};

/// Class c: noise plus energy centred on mel row
/// (c * spacing + spacing / 2) mod freq, spread over about ±2 rows, gated by
/// an on/off pattern with a class-specific period.
/// spacing = max(1, freq / n_classes).
/// Labels cycle through classes so every class is represented.
inline std::vector<Example> synth_examples(const SynthOptions& o) {
  if (o.n_samples == 0 || o.n_classes == 0 || o.freq == 0 || o.time == 0)
    throw ConfigError("synth: sizes must be positive");
  std::mt19937_64 rng(o.seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  const std::size_t spacing = std::max<std::size_t>(1, o.freq / o.n_classes);
  std::vector<Example> out;
  for (std::size_t i = 0; i < o.n_samples; ++i) {
    const std::size_t c = i % o.n_classes;
    const double centre = static_cast<double>((c * spacing + spacing / 2) % o.freq);
    const std::size_t period = 4 + 2 * c;
    const std::size_t phase = rng() % period;
    Tensor<float> spec({o.freq, o.time});
    for (std::size_t f = 0; f < o.freq; ++f) {
      const double d = (static_cast<double>(f) - centre) / 1.5;
      const double profile = std::exp(-0.5 * d * d);
      for (std::size_t t = 0; t < o.time; ++t) {
        const bool on = ((t + phase) % period) < period / 2;
        const double v = 0.3 * noise(rng) + (on ? 2.0 * profile * (1.0 + 0.2 * noise(rng)) : 0.0);
        spec(f, t) = static_cast<float>(v);
      }
    }
    out.push_back(Example{std::move(spec), {c}, {}});
  }
  return out;
}

/// Writes sample_NNNN.mtsr files and manifest.jsonl into `dir`.
inline std::vector<ManifestEntry> synth_dataset(const std::string& dir, const SynthOptions& o) {
  std::filesystem::create_directories(dir);
  const auto examples = synth_examples(o);
  std::vector<ManifestEntry> entries;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    std::ostringstream name;
    name << "sample_" << std::setw(4) << std::setfill('0') << i << ".mtsr";
    const auto p = (std::filesystem::path(dir) / name.str()).string();
    write_tensor(p, examples[i].spec);
    entries.push_back({p, examples[i].labels, {}});
  }
  write_manifest((std::filesystem::path(dir) / "manifest.jsonl").string(), entries);
  return entries;
}

}  // namespace mast
