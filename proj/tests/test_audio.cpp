#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "gemcl/audio.hpp"
#include "gemcl/error.hpp"

using namespace gemcl;
using namespace gemcl::audio;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  fs::path dir = fs::path(GEMCL_TEST_DATA_DIR) / "audio_tmp";
  fs::create_directories(dir);
  return dir;
}

std::vector<unsigned char> wav_bytes(std::uint16_t format, std::uint16_t channels, std::uint32_t rate,
                                     std::uint16_t bits, const std::vector<unsigned char>& payload) {
  std::vector<unsigned char> b;
  auto put = [&](std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) b.push_back(static_cast<unsigned char>(v >> (8 * i)));
  };
  auto tag = [&](const char* s) { b.insert(b.end(), s, s + 4); };
  tag("RIFF");
  put(36 + payload.size(), 4);
  tag("WAVE");
  tag("fmt ");
  put(16, 4);
  put(format, 2);
  put(channels, 2);
  put(rate, 4);
  put(rate * channels * bits / 8, 4);
  put(channels * bits / 8, 2);
  put(bits, 2);
  tag("data");
  put(payload.size(), 4);
  b.insert(b.end(), payload.begin(), payload.end());
  return b;
}

Waveform noise(std::size_t n, std::uint64_t seed, double amplitude = 0.3) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-amplitude, amplitude);
  Waveform w;
  w.samples.resize(n);
  for (double& s : w.samples) s = u(rng);
  return w;
}

}  // namespace

TEST_CASE("load_wav examples") {
  const fs::path dir = temp_dir();
  SUBCASE("one second of 16-bit silence") {
    Waveform w;
    w.samples.assign(16000, 0.0);
    save_wav(dir / "silence.wav", w);
    const Waveform back = load_wav(dir / "silence.wav");
    CHECK(back.samples.size() == 16000);
    CHECK(std::all_of(back.samples.begin(), back.samples.end(), [](double s) { return s == 0.0; }));
  }
  SUBCASE("most negative 16-bit sample maps to -1") {
    const auto bytes = wav_bytes(1, 1, 16000, 16, {0x00, 0x80, 0xff, 0x7f});
    const Waveform w = parse_wav(bytes);
    REQUIRE(w.samples.size() == 2);
    CHECK(w.samples[0] == -1.0);
    CHECK(w.samples[1] == 32767.0 / 32768.0);
  }
  SUBCASE("8 kHz is rejected") {
    const auto bytes = wav_bytes(1, 1, 8000, 16, {0, 0});
    CHECK_THROWS_WITH_AS(parse_wav(bytes), doctest::Contains("unsupported sample rate"), ParseError);
  }
  SUBCASE("stereo is rejected") {
    const auto bytes = wav_bytes(1, 2, 16000, 16, {0, 0, 0, 0});
    CHECK_THROWS_WITH_AS(parse_wav(bytes), doctest::Contains("channel count"), ParseError);
  }
  SUBCASE("8-bit PCM is rejected") {
    const auto bytes = wav_bytes(1, 1, 16000, 8, {0, 0});
    CHECK_THROWS_WITH_AS(parse_wav(bytes), doctest::Contains("unsupported codec"), ParseError);
  }
  SUBCASE("truncated data chunk") {
    auto bytes = wav_bytes(1, 1, 16000, 16, {1, 2, 3, 4, 5, 6});
    bytes.resize(bytes.size() - 3);
    CHECK_THROWS_WITH_AS(parse_wav(bytes), doctest::Contains("truncated"), ParseError);
  }
  SUBCASE("not a RIFF file") {
    const std::vector<unsigned char> junk = {'O', 'g', 'g', 'S', 0, 0, 0, 0};
    CHECK_THROWS_AS(parse_wav(junk), ParseError);
  }
  SUBCASE("32-bit float round trip") {
    Waveform w = noise(1000, 3);
    save_wav(dir / "float.wav", w, PcmFormat::Float32);
    const Waveform back = load_wav(dir / "float.wav");
    REQUIRE(back.samples.size() == w.samples.size());
    for (std::size_t i = 0; i < w.samples.size(); ++i) {
      CHECK(back.samples[i] == static_cast<double>(static_cast<float>(w.samples[i])));
    }
  }
  SUBCASE("unknown chunks are skipped") {
    auto bytes = wav_bytes(1, 1, 16000, 16, {0x00, 0x40});
    const std::vector<unsigned char> list = {'L', 'I', 'S', 'T', 3, 0, 0, 0, 'a', 'b', 'c', 0};
    bytes.insert(bytes.begin() + 36, list.begin(), list.end());
    CHECK(parse_wav(bytes).samples == std::vector<double>{0.5});
  }
}

TEST_CASE("mel filterbank") {
  const MfccConfig cfg;
  const Tensor bank = mel_filterbank(cfg, 512);
  REQUIRE(bank.rows() == 40);
  REQUIRE(bank.cols() == 257);
  std::vector<std::size_t> peaks;
  std::vector<std::pair<std::size_t, std::size_t>> support;
  for (std::size_t m = 0; m < bank.rows(); ++m) {
    auto row = bank.row(m);
    CHECK(std::all_of(row.begin(), row.end(), [](double w) { return w >= 0.0; }));
    const double mx = *std::max_element(row.begin(), row.end());
    CHECK(mx == 1.0);
    CHECK(std::count(row.begin(), row.end(), 1.0) == 1);
    peaks.push_back(static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()));
    std::size_t first = row.size(), last = 0;
    for (std::size_t k = 0; k < row.size(); ++k) {
      if (row[k] > 0) {
        first = std::min(first, k);
        last = k;
      }
    }
    for (std::size_t k = first; k <= last; ++k) CHECK(row[k] > 0.0);  // contiguous
    support.emplace_back(first, last);
  }
  for (std::size_t m = 0; m + 1 < peaks.size(); ++m) {
    CHECK(peaks[m] <= peaks[m + 1]);
    CHECK(support[m].second >= support[m + 1].first);  // overlap
  }
  CHECK(support.back().second < 256);

  MfccConfig crowded = cfg;
  crowded.n_mels = 128;
  crowded.n_ceps = 13;
  CHECK_THROWS_WITH_AS(mel_filterbank(crowded, 512), doctest::Contains("too large"), ConfigError);
  CHECK_THROWS_AS(mel_filterbank(cfg, 300), ConfigError);
}

TEST_CASE("DCT-II basis is orthonormal") {
  const Tensor d = dct_matrix(40);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 5.0);
  std::vector<double> v(40), c(40, 0.0), back(40, 0.0);
  for (double& x : v) x = n(rng);
  for (std::size_t k = 0; k < 40; ++k)
    for (std::size_t i = 0; i < 40; ++i) c[k] += d.at(k, i) * v[i];
  for (std::size_t i = 0; i < 40; ++i)
    for (std::size_t k = 0; k < 40; ++k) back[i] += d.at(k, i) * c[k];
  for (std::size_t i = 0; i < 40; ++i) CHECK(std::abs(back[i] - v[i]) < 1e-9);
}

TEST_CASE("extract_mfcc geometry") {
  const MfccMatrix m = extract_mfcc(noise(16000, 1));
  CHECK(m.num_frames() == 98);
  CHECK(m.num_ceps() == 13);
  CHECK(m.frames.all_finite());
  CHECK(frame_count(16000, MfccConfig{}) == 98);
  CHECK(frame_count(400, MfccConfig{}) == 1);
  CHECK(extract_mfcc(noise(400, 2)).num_frames() == 1);
  CHECK_THROWS_WITH(extract_mfcc(noise(399, 2)), doctest::Contains("shorter than one frame"));
  Waveform wrong = noise(16000, 1);
  wrong.sample_rate = 8000;
  CHECK_THROWS(extract_mfcc(wrong));
}

TEST_CASE("silence gives the analytic floor cepstrum") {
  Waveform w;
  w.samples.assign(16000, 0.0);
  const MfccConfig cfg;
  const MfccMatrix m = extract_mfcc(w, cfg);
  const double c0 = std::sqrt(1.0 / 40.0) * 40.0 * std::log(cfg.log_floor);
  for (std::size_t t = 0; t < m.num_frames(); ++t) {
    CHECK(m.frames.at(t, 0) == doctest::Approx(c0).epsilon(1e-12));
    for (std::size_t k = 1; k < 13; ++k) CHECK(std::abs(m.frames.at(t, k)) < 1e-9);
    for (std::size_t k = 0; k < 13; ++k) CHECK(m.frames.at(t, k) == m.frames.at(0, k));
  }
}

TEST_CASE("doubling the amplitude shifts only c0") {
  const Waveform w = noise(16000, 5);
  Waveform w2 = w;
  for (double& s : w2.samples) s *= 2.0;
  const MfccMatrix a = extract_mfcc(w);
  const MfccMatrix b = extract_mfcc(w2);
  const double shift = std::sqrt(1.0 / 40.0) * 40.0 * std::log(4.0);
  for (std::size_t t = 0; t < a.num_frames(); ++t) {
    CHECK(std::abs(b.frames.at(t, 0) - a.frames.at(t, 0) - shift) < 1e-9);
    for (std::size_t k = 1; k < 13; ++k) CHECK(std::abs(b.frames.at(t, k) - a.frames.at(t, k)) < 1e-9);
  }
}

TEST_CASE("prepending one frame shift of zeros shifts frames by one") {
  const Waveform w = noise(8000, 9);
  Waveform padded;
  padded.samples.assign(160, 0.0);
  padded.samples.insert(padded.samples.end(), w.samples.begin(), w.samples.end());
  const MfccMatrix a = extract_mfcc(w);
  const MfccMatrix b = extract_mfcc(padded);
  REQUIRE(b.num_frames() == a.num_frames() + 1);
  for (std::size_t t = 0; t < a.num_frames(); ++t) {
    for (std::size_t k = 0; k < 13; ++k) CHECK(std::abs(b.frames.at(t + 1, k) - a.frames.at(t, k)) < 1e-9);
  }
}

TEST_CASE("extraction is deterministic") {
  const Waveform w = noise(12345, 4);
  CHECK(extract_mfcc(w).frames == extract_mfcc(w).frames);
}

TEST_CASE("feature dump round trip and corruption") {
  const fs::path dir = temp_dir();
  const MfccMatrix m = extract_mfcc(noise(4000, 6));
  write_feature_dump(dir / "a.mfcc", m);
  CHECK(read_feature_dump(dir / "a.mfcc").frames == m.frames);

  std::ifstream in(dir / "a.mfcc", std::ios::binary);
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), {});
  REQUIRE(raw.size() == 16 + m.frames.size() * 8);
  CHECK(std::string(raw.begin(), raw.begin() + 4) == "MFCC");
  CHECK(raw[4] == 1);

  raw.resize(raw.size() - 5);
  std::ofstream(dir / "b.mfcc", std::ios::binary).write(raw.data(), static_cast<std::streamsize>(raw.size()));
  CHECK_THROWS_WITH_AS(read_feature_dump(dir / "b.mfcc"), doctest::Contains("truncated"), ParseError);
  raw[4] = 2;
  std::ofstream(dir / "c.mfcc", std::ios::binary).write(raw.data(), static_cast<std::streamsize>(raw.size()));
  CHECK_THROWS_WITH_AS(read_feature_dump(dir / "c.mfcc"), doctest::Contains("version"), ParseError);
}
