#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "mast/frontend.hpp"

using mast::SpectrogramConfig;

namespace {

std::vector<float> sine(double freq, double sr, std::size_t n, double amp = 0.5) {
  std::vector<float> w(n);
  for (std::size_t i = 0; i < n; ++i)
    w[i] = static_cast<float>(amp * std::sin(2 * std::numbers::pi * freq * static_cast<double>(i) / sr));
  return w;
}

std::filesystem::path temp_file(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "mast_frontend_test";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST(Stft, FrameCountWithoutCentering) {
  SpectrogramConfig cfg;
  EXPECT_EQ(mast::stft_frame_count(163840, cfg), 1022u);
  EXPECT_EQ(mast::stft_frame_count(400, cfg), 1u);
  EXPECT_EQ(mast::stft_frame_count(100, cfg), 1u);
  EXPECT_EQ(mast::stft_frame_count(560, cfg), 2u);
}

TEST(Stft, ZeroWaveGivesZeroPower) {
  auto p = mast::stft_power(std::vector<float>(2000, 0.0f), SpectrogramConfig{});
  EXPECT_EQ(p.dim(1), 513u);
  for (double v : p.values()) EXPECT_EQ(v, 0.0);
}

TEST(Stft, SineAtBinPeaksAtThatBin) {
  SpectrogramConfig cfg;
  const std::size_t k = 40;
  const double f = k * cfg.sample_rate / static_cast<double>(cfg.n_fft);
  auto p = mast::stft_power(sine(f, cfg.sample_rate, 4000), cfg);
  for (std::size_t t = 0; t < p.dim(0); ++t) {
    auto row = p.row(t);
    EXPECT_EQ(static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()), k);
  }
}

TEST(Stft, MatchesDirectDft) {
  SpectrogramConfig cfg;
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> u(-1.f, 1.f);
  std::vector<float> wave(900);
  for (auto& v : wave) v = u(rng);
  auto p = mast::stft_power(wave, cfg);
  const std::size_t win = cfg.window_length(), hop = cfg.hop_length(), n = cfg.n_fft;
  for (std::size_t t = 0; t < p.dim(0); ++t)
    for (std::size_t k = 0; k < p.dim(1); k += 17) {
      double re = 0, im = 0;
      for (std::size_t i = 0; i < win; ++i) {
        const double w = 0.5 - 0.5 * std::cos(2 * std::numbers::pi * i / static_cast<double>(win));
        const double x = wave[t * hop + i] * w;
        const double ang = -2 * std::numbers::pi * static_cast<double>(k * i) / static_cast<double>(n);
        re += x * std::cos(ang);
        im += x * std::sin(ang);
      }
      EXPECT_NEAR(p(t, k), re * re + im * im, 1e-8 * (1 + re * re + im * im));
    }
}

TEST(Stft, ParsevalPerFrame) {
  SpectrogramConfig cfg;
  std::mt19937_64 rng(4);
  std::normal_distribution<float> g(0.f, 0.3f);
  std::vector<float> wave(1600);
  for (auto& v : wave) v = g(rng);
  auto p = mast::stft_power(wave, cfg);
  const std::size_t win = cfg.window_length(), hop = cfg.hop_length(), n = cfg.n_fft;
  for (std::size_t t = 0; t < p.dim(0); ++t) {
    double energy = 0;
    for (std::size_t i = 0; i < win; ++i) {
      const double w = 0.5 - 0.5 * std::cos(2 * std::numbers::pi * i / static_cast<double>(win));
      energy += std::pow(wave[t * hop + i] * w, 2);
    }
    // one-sided spectrum: interior bins appear twice in the full DFT
    double spec = p(t, 0) + p(t, n / 2);
    for (std::size_t k = 1; k < n / 2; ++k) spec += 2 * p(t, k);
    EXPECT_NEAR(spec / static_cast<double>(n), energy, 1e-9 * energy);
  }
}

TEST(Stft, EmptyWaveIsInputError) {
  EXPECT_THROW(mast::stft_power({}, SpectrogramConfig{}), mast::InputError);
}

TEST(MelFilterbank, HtkFormulaCentres) {
  SpectrogramConfig cfg;
  auto edges = mast::mel_band_edges(cfg);
  ASSERT_EQ(edges.size(), 130u);
  const double lo = 2595.0 * std::log10(1.0 + cfg.low_freq_hz / 700.0);
  const double hi = 2595.0 * std::log10(1.0 + 8000.0 / 700.0);
  for (std::size_t m = 0; m < 128; ++m) {
    const double mel = lo + (hi - lo) * static_cast<double>(m + 1) / 129.0;
    const double hz = 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0);
    EXPECT_NEAR(mast::mel_to_hz(edges[m + 1]), hz, 1e-9);
  }
  EXPECT_NEAR(mast::hz_to_mel(1000.0), 999.9855371396, 1e-6);
}

TEST(MelFilterbank, RowsAreTriangularAndIncreasing) {
  SpectrogramConfig cfg;
  auto fb = mast::mel_filterbank(cfg);
  auto edges = mast::mel_band_edges(cfg);
  ASSERT_EQ(fb.shape(), (mast::Shape{128, 513}));
  std::size_t prev_peak = 0;
  for (std::size_t m = 0; m < 128; ++m) {
    auto row = fb.row(m);
    const auto peak = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    if (m > 0) {
      EXPECT_GE(peak, prev_peak);
    }
    prev_peak = peak;
    // non-negative, rises to the peak then falls
    for (std::size_t k = 0; k < row.size(); ++k) {
      EXPECT_GE(row[k], 0.0);
      if (k > 0 && k <= peak) {
        EXPECT_GE(row[k], row[k - 1]);
      } else if (k > peak) {
        EXPECT_LE(row[k], row[k - 1]);
      }
    }
    EXPECT_NEAR(mast::mel_filter_weight(edges, m, mast::mel_to_hz(edges[m])), 0.0, 1e-9);
    EXPECT_NEAR(mast::mel_filter_weight(edges, m, mast::mel_to_hz(edges[m + 2])), 0.0, 1e-9);
    EXPECT_NEAR(mast::mel_filter_weight(edges, m, mast::mel_to_hz(edges[m + 1])), 1.0, 1e-9);
  }
  // centre frequencies strictly increase
  for (std::size_t m = 1; m < 128; ++m) EXPECT_GT(edges[m + 1], edges[m]);
  // every interior bin is covered
  for (std::size_t k = 1; k + 1 < fb.dim(1); ++k) {
    double s = 0;
    for (std::size_t m = 0; m < 128; ++m) s += fb(m, k);
    EXPECT_GT(s, 0.0) << "bin " << k;
  }
}

TEST(MelFilterbank, TooManyMelsIsConfigError) {
  SpectrogramConfig cfg;
  cfg.n_mels = 400;
  EXPECT_THROW(mast::mel_filterbank(cfg), mast::ConfigError);
}

TEST(PadOrTruncate, Cases) {
  mast::Tensor<double> s({2, 900}, 1.0);
  auto padded = mast::pad_or_truncate(s, 1024, -5.0);
  EXPECT_EQ(padded.dim(1), 1024u);
  for (std::size_t c = 900; c < 1024; ++c) EXPECT_EQ(padded(1, c), -5.0);
  EXPECT_EQ(padded(1, 899), 1.0);

  mast::Tensor<double> exact({2, 1024}, 2.0);
  EXPECT_EQ(mast::pad_or_truncate(exact, 1024, 0.0), exact);

  mast::Tensor<double> longer({1, 1100});
  for (std::size_t c = 0; c < 1100; ++c) longer(0, c) = static_cast<double>(c);
  auto cut = mast::pad_or_truncate(longer, 1024, 0.0);
  for (std::size_t c = 0; c < 1024; ++c) EXPECT_EQ(cut(0, c), static_cast<double>(c));
}

TEST(Normalize, Cases) {
  mast::Tensor<double> x({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(mast::normalize(x, 0.0, 0.5), x);
  auto z = mast::normalize(mast::Tensor<double>({2, 2}, 3.0), 3.0, 1.0);
  for (double v : z.values()) EXPECT_EQ(v, 0.0);
  auto own = mast::normalize(x, 2.5, std::sqrt(1.25));
  double mean = 0;
  for (double v : own.values()) mean += v;
  EXPECT_NEAR(mean, 0.0, 1e-12);
  EXPECT_THROW(mast::normalize(x, 0.0, 0.0), mast::ConfigError);
}

TEST(LogMel, FullLengthClipGivesModelInputShape) {
  SpectrogramConfig cfg;
  auto spec = mast::log_mel(sine(440.0, 16000.0, 163840), cfg);
  EXPECT_EQ(spec.values.shape(), (mast::Shape{128, 1024}));
  EXPECT_TRUE(spec.values.all_finite());
}

TEST(LogMel, ZeroWaveIsConstant) {
  SpectrogramConfig cfg;
  auto spec = mast::log_mel(std::vector<float>(8000, 0.0f), cfg);
  const float expected = static_cast<float>((std::log(1e-10) - cfg.normalize_mean) / (2 * cfg.normalize_std));
  for (float v : spec.values.values()) EXPECT_FLOAT_EQ(v, expected);
}

TEST(LogMel, WhiteNoiseIsFiniteAndDeterministic) {
  SpectrogramConfig cfg;
  cfg.target_frames = 200;
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<float> u(-1.f, 1.f);
  std::vector<float> wave(24000);
  for (auto& v : wave) v = u(rng);
  auto a = mast::log_mel(wave, cfg), b = mast::log_mel(wave, cfg);
  EXPECT_TRUE(a.values.all_finite());
  EXPECT_EQ(a.values, b.values);
  EXPECT_EQ(a.values.shape(), (mast::Shape{128, 200}));
}

TEST(LogMel, ShapeIndependentOfDuration) {
  SpectrogramConfig cfg;
  cfg.target_frames = 64;
  for (std::size_t n : {100u, 4000u, 20000u}) {
    auto spec = mast::log_mel(sine(1000.0, 16000.0, n), cfg);
    EXPECT_EQ(spec.values.shape(), (mast::Shape{128, 64}));
  }
}

TEST(Config, ValidationAndJson) {
  SpectrogramConfig cfg;
  cfg.n_fft = 256;  // shorter than the 400-sample window
  EXPECT_THROW(cfg.validate(), mast::ConfigError);
  SpectrogramConfig base;
  base.n_mels = 64;
  nlohmann::json j = base;
  auto back = j.get<SpectrogramConfig>();
  EXPECT_EQ(back.n_mels, 64u);
  EXPECT_EQ(back.n_fft, base.n_fft);
  auto partial = nlohmann::json{{"target_frames", 10}}.get<SpectrogramConfig>();
  EXPECT_EQ(partial.target_frames, 10u);
  EXPECT_EQ(partial.n_mels, 128u);
}

TEST(Wav, RoundTripMono) {
  const auto path = temp_file("mono.wav").string();
  auto wave = sine(300.0, 16000.0, 1000);
  mast::write_wav(path, wave, 16000, 1);
  auto back = mast::read_wav(path);
  EXPECT_EQ(back.sample_rate, 16000u);
  EXPECT_EQ(back.channels, 1u);
  ASSERT_EQ(back.samples.size(), wave.size());
  for (std::size_t i = 0; i < wave.size(); ++i) EXPECT_NEAR(back.samples[i], wave[i], 1.0 / 32768 + 1e-6);
}

TEST(Wav, StereoIsAveraged) {
  const auto path = temp_file("stereo.wav").string();
  std::vector<float> interleaved = {0.5f, -0.5f, 0.25f, 0.75f};
  mast::write_wav(path, interleaved, 16000, 2);
  auto back = mast::read_wav(path);
  EXPECT_EQ(back.channels, 2u);
  ASSERT_EQ(back.samples.size(), 2u);
  EXPECT_NEAR(back.samples[0], 0.0f, 1e-4);
  EXPECT_NEAR(back.samples[1], 0.5f, 1e-4);
}

TEST(Wav, GarbageIsFormatError) {
  const auto path = temp_file("bad.wav").string();
  std::ofstream(path) << "not a wav file at all, definitely not";
  EXPECT_THROW(mast::read_wav(path), mast::FormatError);
}
