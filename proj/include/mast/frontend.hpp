#pragma once

// Waveform -> log-mel spectrogram (n_mels × target_frames).

#include <algorithm>
#include <bit>
#include <cmath>
#include <complex>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <numbers>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mast/errors.hpp"
#include "mast/tensor.hpp"

namespace mast {

struct SpectrogramConfig {
  double sample_rate = 16000.0;
  double window_ms = 25.0;
  double hop_ms = 10.0;
  // 1024 rather than 512: with 512 bins the narrow low-frequency filters of
  // a 128-band bank fall between bin centres and come out empty.
  std::size_t n_fft = 1024;
  std::size_t n_mels = 128;
  std::size_t target_frames = 1024;
  double low_freq_hz = 0.0;
  double high_freq_hz = 0.0;  // 0 means sample_rate / 2
  std::string mel_scale = "htk";
  double log_floor = 1e-10;
  double normalize_mean = -4.2677393;
  double normalize_std = 4.5689974;

  std::size_t window_length() const {
    return static_cast<std::size_t>(std::lround(sample_rate * window_ms / 1000.0));
  }
  std::size_t hop_length() const {
    return static_cast<std::size_t>(std::lround(sample_rate * hop_ms / 1000.0));
  }
  std::size_t n_bins() const { return n_fft / 2 + 1; }
  double nyquist() const { return high_freq_hz > 0 ? high_freq_hz : sample_rate / 2; }

  void validate() const {
    if (sample_rate <= 0) throw ConfigError("sample_rate must be positive");
    if (n_fft == 0 || !std::has_single_bit(n_fft))
      throw ConfigError("n_fft must be a power of two, got " + std::to_string(n_fft));
    if (window_length() == 0 || hop_length() == 0)
      throw ConfigError("window and hop must be at least one sample");
    if (n_fft < window_length())
      throw ConfigError("n_fft (" + std::to_string(n_fft) +
                        ") is shorter than the window (" +
                        std::to_string(window_length()) + " samples)");
    if (n_mels == 0) throw ConfigError("n_mels must be at least 1");
    if (target_frames == 0) throw ConfigError("target_frames must be at least 1");
    if (mel_scale != "htk") throw ConfigError("unsupported mel scale '" + mel_scale + "'");
    if (low_freq_hz < 0 || low_freq_hz >= nyquist())
      throw ConfigError("low_freq_hz must lie in [0, nyquist)");
    if (log_floor <= 0) throw ConfigError("log_floor must be positive");
  }
};

inline void to_json(nlohmann::json& j, const SpectrogramConfig& c) {
  j = nlohmann::json{{"sample_rate", c.sample_rate},   {"window_ms", c.window_ms},
                     {"hop_ms", c.hop_ms},             {"n_fft", c.n_fft},
                     {"n_mels", c.n_mels},             {"target_frames", c.target_frames},
                     {"low_freq_hz", c.low_freq_hz},   {"high_freq_hz", c.high_freq_hz},
                     {"mel_scale", c.mel_scale},       {"log_floor", c.log_floor},
                     {"normalize_mean", c.normalize_mean},
                     {"normalize_std", c.normalize_std}};
}

// Missing keys keep their defaults.
inline void from_json(const nlohmann::json& j, SpectrogramConfig& c) {
  auto opt = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  opt("sample_rate", c.sample_rate);
  opt("window_ms", c.window_ms);
  opt("hop_ms", c.hop_ms);
  opt("n_fft", c.n_fft);
  opt("n_mels", c.n_mels);
  opt("target_frames", c.target_frames);
  opt("low_freq_hz", c.low_freq_hz);
  opt("high_freq_hz", c.high_freq_hz);
  opt("mel_scale", c.mel_scale);
  opt("log_floor", c.log_floor);
  opt("normalize_mean", c.normalize_mean);
  opt("normalize_std", c.normalize_std);
}

struct Spectrogram {
  Tensor<float> values;  // n_mels × target_frames
  SpectrogramConfig config;
};

// ---------------------------------------------------------------------------
// FFT

namespace detail {

// In-place iterative radix-2 FFT; size must be a power of two.
inline void fft_inplace(std::vector<std::complex<double>>& a) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2 * std::numbers::pi / static_cast<double>(len);
    for (std::size_t i = 0; i < n; i += len) {
      for (std::size_t k = 0; k < len / 2; ++k) {
        const std::complex<double> w = std::polar(1.0, ang * static_cast<double>(k));
        const auto u = a[i + k];
        const auto v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
      }
    }
  }
}

}  // namespace detail

/// Periodic Hann window.
inline std::vector<double> hann_window(std::size_t length) {
  std::vector<double> w(length);
  for (std::size_t n = 0; n < length; ++n)
    w[n] = 0.5 - 0.5 * std::cos(2 * std::numbers::pi * static_cast<double>(n) /
                                static_cast<double>(length));
  return w;
}

inline std::size_t stft_frame_count(std::size_t samples, const SpectrogramConfig& cfg) {
  const std::size_t win = cfg.window_length();
  if (samples <= win) return 1;
  return 1 + (samples - win) / cfg.hop_length();
}

/// Power spectrum |DFT|^2 per frame: frames × (n_fft/2 + 1). No center padding.
inline Tensor<double> stft_power(const std::vector<float>& wave,
                                 const SpectrogramConfig& cfg) {
  cfg.validate();
  if (wave.empty()) throw InputError("stft_power: empty waveform");
  const std::size_t win = cfg.window_length();
  const std::size_t hop = cfg.hop_length();
  const std::size_t frames = stft_frame_count(wave.size(), cfg);
  const std::size_t bins = cfg.n_bins();
  const auto window = hann_window(win);

  Tensor<double> power({frames, bins});
  std::vector<std::complex<double>> buf(cfg.n_fft);
  for (std::size_t f = 0; f < frames; ++f) {
    std::fill(buf.begin(), buf.end(), std::complex<double>{});
    const std::size_t start = f * hop;
    for (std::size_t n = 0; n < win; ++n) {
      const std::size_t idx = start + n;
      const double s = idx < wave.size() ? static_cast<double>(wave[idx]) : 0.0;
      buf[n] = s * window[n];
    }
    detail::fft_inplace(buf);
    for (std::size_t k = 0; k < bins; ++k) power(f, k) = std::norm(buf[k]);
  }
  return power;
}

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// Band edges in mel: n_mels + 2 points equally spaced between low and high.
inline std::vector<double> mel_band_edges(const SpectrogramConfig& cfg) {
  const double lo = hz_to_mel(cfg.low_freq_hz);
  const double hi = hz_to_mel(cfg.nyquist());
  std::vector<double> edges(cfg.n_mels + 2);
  const double step = (hi - lo) / static_cast<double>(cfg.n_mels + 1);
  for (std::size_t i = 0; i < edges.size(); ++i) edges[i] = lo + step * static_cast<double>(i);
  return edges;
}

/// Weight of triangular filter `m` at frequency `hz` (triangle in the mel domain).
inline double mel_filter_weight(const std::vector<double>& edges, std::size_t m, double hz) {
  const double mel = hz_to_mel(hz);
  const double left = edges[m], center = edges[m + 1], right = edges[m + 2];
  if (mel <= left || mel >= right) return 0.0;
  return mel <= center ? (mel - left) / (center - left) : (right - mel) / (right - center);
}

/// n_mels × (n_fft/2 + 1) triangular filterbank.
inline Tensor<double> mel_filterbank(const SpectrogramConfig& cfg) {
  cfg.validate();
  const auto edges = mel_band_edges(cfg);
  const std::size_t bins = cfg.n_bins();
  const double bin_hz = cfg.sample_rate / static_cast<double>(cfg.n_fft);
  Tensor<double> fb({cfg.n_mels, bins});
  for (std::size_t m = 0; m < cfg.n_mels; ++m) {
    bool any = false;
    for (std::size_t k = 0; k < bins; ++k) {
      fb(m, k) = mel_filter_weight(edges, m, bin_hz * static_cast<double>(k));
      any = any || fb(m, k) > 0;
    }
    if (!any) {
      throw ConfigError("mel filter " + std::to_string(m) +
                        " covers no FFT bin; n_mels is too large for n_fft = " +
                        std::to_string(cfg.n_fft));
    }
  }
  return fb;
}

/// Right-pads with `fill` or truncates the tail so there are exactly `target` columns.
/// Input layout: rows × frames.
template <typename T>
Tensor<T> pad_or_truncate(const Tensor<T>& spec, std::size_t target, T fill) {
  require_rank(spec, 2, "pad_or_truncate");
  const std::size_t rows = spec.dim(0), cols = spec.dim(1);
  Tensor<T> out({rows, target}, fill);
  const std::size_t keep = std::min(cols, target);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < keep; ++c) out(r, c) = spec(r, c);
  return out;
}

/// (x - mean) / (2 * std).
template <typename T>
Tensor<T> normalize(const Tensor<T>& spec, double mean, double std) {
  if (!(std > 0)) throw ConfigError("normalize: std must be positive");
  Tensor<T> out = spec;
  const double denom = 2.0 * std;
  for (auto& v : out.values()) v = static_cast<T>((static_cast<double>(v) - mean) / denom);
  return out;
}

inline Spectrogram log_mel(const std::vector<float>& wave, const SpectrogramConfig& cfg) {
  cfg.validate();
  const Tensor<double> power = stft_power(wave, cfg);
  const Tensor<double> fb = mel_filterbank(cfg);
  const std::size_t frames = power.dim(0), bins = power.dim(1);

  // mel × frames
  Tensor<double> logmel({cfg.n_mels, frames});
  for (std::size_t m = 0; m < cfg.n_mels; ++m) {
    for (std::size_t f = 0; f < frames; ++f) {
      double e = 0;
      for (std::size_t k = 0; k < bins; ++k) e += fb(m, k) * power(f, k);
      logmel(m, f) = std::log(e + cfg.log_floor);
    }
  }
  const Tensor<double> fitted =
      pad_or_truncate(logmel, cfg.target_frames, std::log(cfg.log_floor));
  const Tensor<double> normed = normalize(fitted, cfg.normalize_mean, cfg.normalize_std);
  Spectrogram out{normed.cast<float>(), cfg};
  require_finite(out.values, "log_mel");
  return out;
}

// ---------------------------------------------------------------------------
// RIFF/WAVE PCM

struct WavData {
  std::vector<float> samples;  // mono, scaled to [-1, 1)
  std::uint32_t sample_rate = 0;
  std::uint16_t channels = 0;
};

namespace detail {

inline std::uint32_t read_le32(const unsigned char* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 |
         std::uint32_t(p[3]) << 24;
}
inline std::uint16_t read_le16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | p[1] << 8);
}

}  // namespace detail

/// Reads 16-bit PCM WAV; multi-channel input is averaged to mono.
inline WavData read_wav(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open WAV file '" + path + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::string(bytes.begin(), bytes.begin() + 4) != "RIFF" ||
      std::string(bytes.begin() + 8, bytes.begin() + 12) != "WAVE") {
    throw FormatError("'" + path + "' is not a RIFF/WAVE file");
  }
  WavData wav;
  std::uint16_t format = 0, bits = 0;
  bool have_fmt = false;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const std::string id(bytes.begin() + pos, bytes.begin() + pos + 4);
    const std::uint32_t len = detail::read_le32(&bytes[pos + 4]);
    const std::size_t body = pos + 8;
    if (body + len > bytes.size()) {
      throw FormatError("WAV chunk '" + id + "' at byte " + std::to_string(pos) +
                        " runs past end of file");
    }
    if (id == "fmt ") {
      if (len < 16) throw FormatError("WAV fmt chunk too short");
      format = detail::read_le16(&bytes[body]);
      wav.channels = detail::read_le16(&bytes[body + 2]);
      wav.sample_rate = detail::read_le32(&bytes[body + 4]);
      bits = detail::read_le16(&bytes[body + 14]);
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw FormatError("WAV data chunk before fmt chunk");
      if (format != 1 || bits != 16)
        throw FormatError("only 16-bit PCM WAV is supported");
      if (wav.channels == 0) throw FormatError("WAV declares zero channels");
      const std::size_t frames = len / (2u * wav.channels);
      wav.samples.resize(frames);
      for (std::size_t f = 0; f < frames; ++f) {
        double acc = 0;
        for (std::size_t c = 0; c < wav.channels; ++c) {
          const auto s = static_cast<std::int16_t>(
              detail::read_le16(&bytes[body + 2 * (f * wav.channels + c)]));
          acc += s / 32768.0;
        }
        wav.samples[f] = static_cast<float>(acc / wav.channels);
      }
      return wav;
    }
    pos = body + len + (len & 1u);
  }
  throw FormatError("WAV file '" + path + "' has no data chunk");
}

/// Writes interleaved 16-bit PCM. `samples` holds frames × channels values.
inline void write_wav(const std::string& path, const std::vector<float>& samples,
                      std::uint32_t sample_rate, std::uint16_t channels = 1) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write WAV file '" + path + "'");
  auto le32 = [&](std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
  };
  auto le16 = [&](std::uint16_t v) {
    const unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
    out.write(reinterpret_cast<const char*>(b), 2);
  };
  const std::uint32_t data_len = static_cast<std::uint32_t>(samples.size() * 2);
  out.write("RIFF", 4);
  le32(36 + data_len);
  out.write("WAVEfmt ", 8);
  le32(16);
  le16(1);
  le16(channels);
  le32(sample_rate);
  le32(sample_rate * channels * 2);
  le16(static_cast<std::uint16_t>(channels * 2));
  le16(16);
  out.write("data", 4);
  le32(data_len);
  for (float s : samples) {
    const double c = std::clamp(static_cast<double>(s), -1.0, 32767.0 / 32768.0);
    le16(static_cast<std::uint16_t>(static_cast<std::int16_t>(std::lround(c * 32768.0))));
  }
}

}  // namespace mast
