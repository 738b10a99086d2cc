#include "gemcl/audio.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <memory>
#include <mutex>
#include <numbers>
#include <string>
#include <unordered_map>

#include "bytes.hpp"
#include "gemcl/error.hpp"
#include "gemcl/kernels.hpp"

namespace gemcl::audio {
namespace {

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatFloat = 3;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// FFTW plans are cached per thread; only plan creation and destruction
// touch the planner, which is not thread-safe.
std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

class RealFft {
 public:
  explicit RealFft(std::size_t n) : n_(n) {
    std::lock_guard lock(planner_mutex());
    in_ = fftw_alloc_real(n);
    out_ = fftw_alloc_complex(n / 2 + 1);
    plan_ = fftw_plan_dft_r2c_1d(static_cast<int>(n), in_, out_, FFTW_ESTIMATE);
  }
  ~RealFft() {
    std::lock_guard lock(planner_mutex());
    fftw_destroy_plan(plan_);
    fftw_free(in_);
    fftw_free(out_);
  }
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

  std::span<double> input() { return {in_, n_}; }
  // |X_k|^2 for k = 0..n/2
  void power_spectrum(std::span<double> out) {
    fftw_execute(plan_);
    kernels::active().power(reinterpret_cast<const double*>(out_), out.data(), n_ / 2 + 1);
  }

 private:
  std::size_t n_;
  double* in_ = nullptr;
  fftw_complex* out_ = nullptr;
  fftw_plan plan_ = nullptr;
};

RealFft& fft_for(std::size_t n) {
  thread_local std::unordered_map<std::size_t, std::unique_ptr<RealFft>> cache;
  auto& slot = cache[n];
  if (!slot) slot = std::make_unique<RealFft>(n);
  return *slot;
}

bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

}  // namespace

// ---------------------------------------------------------------------------
// WAV

Waveform parse_wav(std::span<const unsigned char> bytes) {
  bytes::Reader r(bytes, "WAV");
  if (r.take_string(4) != "RIFF") throw ParseError("WAV: missing RIFF header");
  r.get<std::uint32_t>();
  if (r.take_string(4) != "WAVE") throw ParseError("WAV: not a WAVE file");

  bool have_fmt = false;
  std::uint16_t format = 0, channels = 0, bits = 0, block_align = 0;
  std::uint32_t rate = 0;
  while (true) {
    if (r.remaining() == 0) throw ParseError("WAV: no data chunk");
    const std::string id = r.take_string(4);
    const auto size = r.get<std::uint32_t>();
    if (id == "fmt ") {
      if (size < 16) throw ParseError("WAV: fmt chunk too short");
      bytes::Reader f(r.take(size), "WAV fmt chunk");
      format = f.get<std::uint16_t>();
      channels = f.get<std::uint16_t>();
      rate = f.get<std::uint32_t>();
      f.get<std::uint32_t>();
      block_align = f.get<std::uint16_t>();
      bits = f.get<std::uint16_t>();
      if (format == kFormatExtensible) {
        if (size < 40) throw ParseError("WAV: extensible fmt chunk too short");
        f.skip(2 + 2 + 4);
        format = f.get<std::uint16_t>();
      }
      have_fmt = true;
      if (size % 2) r.skip(1);
      continue;
    }
    if (id != "data") {
      r.skip(size + (size % 2));
      continue;
    }
    if (!have_fmt) throw ParseError("WAV: data chunk before fmt chunk");
    if (rate != static_cast<std::uint32_t>(kSampleRate)) {
      throw ParseError("WAV: unsupported sample rate " + std::to_string(rate) + " Hz (expected " +
                       std::to_string(kSampleRate) + ")");
    }
    if (channels != 1) {
      throw ParseError("WAV: unsupported channel count " + std::to_string(channels) +
                       " (expected mono)");
    }
    const bool int16 = format == kFormatPcm && bits == 16;
    const bool float32 = format == kFormatFloat && bits == 32;
    if (!int16 && !float32) {
      throw ParseError("WAV: unsupported codec (format " + std::to_string(format) + ", " +
                       std::to_string(bits) + " bits); expected 16-bit PCM or 32-bit float");
    }
    if (block_align != bits / 8) throw ParseError("WAV: inconsistent block alignment");
    if (size % block_align) throw ParseError("WAV: data chunk is not a whole number of samples");
    bytes::Reader d(r.take(size), "WAV data chunk");
    Waveform wave;
    wave.sample_rate = static_cast<int>(rate);
    wave.samples.resize(size / block_align);
    for (double& s : wave.samples) {
      if (int16) {
        s = static_cast<double>(d.get<std::int16_t>()) / 32768.0;
      } else {
        s = static_cast<double>(std::bit_cast<float>(d.get<std::uint32_t>()));
      }
    }
    return wave;
  }
}

Waveform load_wav(const std::filesystem::path& path) {
  const auto data = bytes::read_file(path.string());
  try {
    return parse_wav(data);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

void save_wav(const std::filesystem::path& path, const Waveform& wave, PcmFormat format) {
  const std::uint16_t bits = format == PcmFormat::Int16 ? 16 : 32;
  const std::uint32_t data_size = static_cast<std::uint32_t>(wave.samples.size() * bits / 8);
  bytes::Writer w;
  w.raw("RIFF");
  w.put<std::uint32_t>(36 + data_size);
  w.raw("WAVE");
  w.raw("fmt ");
  w.put<std::uint32_t>(16);
  w.put<std::uint16_t>(format == PcmFormat::Int16 ? kFormatPcm : kFormatFloat);
  w.put<std::uint16_t>(1);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(wave.sample_rate));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(wave.sample_rate) * bits / 8);
  w.put<std::uint16_t>(bits / 8);
  w.put<std::uint16_t>(bits);
  w.raw("data");
  w.put<std::uint32_t>(data_size);
  for (double s : wave.samples) {
    if (format == PcmFormat::Int16) {
      const double scaled = std::round(std::clamp(s, -1.0, 1.0) * 32768.0);
      w.put<std::int16_t>(static_cast<std::int16_t>(std::clamp(scaled, -32768.0, 32767.0)));
    } else {
      w.put(std::bit_cast<std::uint32_t>(static_cast<float>(s)));
    }
  }
  bytes::write_file(path.string(), w.buffer());
}

// ---------------------------------------------------------------------------
// MFCC

void MfccConfig::validate() const {
  if (frame_length == 0 || frame_shift == 0) throw ConfigError("frame length and shift must be positive");
  if (frame_shift > frame_length) throw ConfigError("frame_shift must not exceed frame_length");
  if (n_ceps == 0 || n_mels == 0) throw ConfigError("n_mels and n_ceps must be positive");
  if (n_ceps > n_mels) throw ConfigError("n_ceps must not exceed n_mels");
  if (!is_power_of_two(fft_size) || fft_size < frame_length) {
    throw ConfigError("fft_size must be a power of two >= frame_length");
  }
  if (!(log_floor > 0.0)) throw ConfigError("log_floor must be positive");
  if (!(low_hz >= 0.0 && low_hz < high_hz && high_hz <= kSampleRate / 2.0)) {
    throw ConfigError("mel band edges must satisfy 0 <= low < high <= Nyquist");
  }
}

std::size_t frame_count(std::size_t num_samples, const MfccConfig& config) {
  if (num_samples < config.frame_length) return 0;
  return (num_samples - config.frame_length) / config.frame_shift + 1;
}

Tensor mel_filterbank(const MfccConfig& config, std::size_t fft_size) {
  MfccConfig c = config;
  c.fft_size = fft_size;
  c.validate();
  const std::size_t bins = fft_size / 2 + 1;
  const double mel_lo = hz_to_mel(c.low_hz);
  const double mel_hi = hz_to_mel(c.high_hz);
  std::vector<double> edges(c.n_mels + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) /
                                      static_cast<double>(c.n_mels + 1));
  }
  edges.front() = c.low_hz;
  edges.back() = c.high_hz;
  Tensor bank(Shape{c.n_mels, bins});
  for (std::size_t m = 0; m < c.n_mels; ++m) {
    const double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
    auto row = bank.row(m);
    double peak = 0.0;
    for (std::size_t k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * kSampleRate / static_cast<double>(fft_size);
      const double w = std::max(0.0, std::min((f - lo) / (mid - lo), (hi - f) / (hi - mid)));
      row[k] = w;
      peak = std::max(peak, w);
    }
    if (peak <= 0.0) {
      throw ConfigError("n_mels = " + std::to_string(c.n_mels) +
                        " is too large for fft_size = " + std::to_string(fft_size) +
                        ": filter " + std::to_string(m) + " covers no FFT bin");
    }
    for (double& w : row) w /= peak;
  }
  for (std::size_t m = 0; m + 1 < c.n_mels; ++m) {
    bool overlap = false;
    for (std::size_t k = 0; k < bins && !overlap; ++k) overlap = bank.at(m, k) > 0 && bank.at(m + 1, k) > 0;
    if (!overlap) {
      throw ConfigError("n_mels = " + std::to_string(c.n_mels) +
                        " is too large for fft_size = " + std::to_string(fft_size) +
                        ": filters " + std::to_string(m) + " and " + std::to_string(m + 1) +
                        " do not overlap");
    }
  }
  return bank;
}

Tensor dct_matrix(std::size_t n) {
  Tensor basis(Shape{n, n});
  const double nd = static_cast<double>(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double s = k == 0 ? std::sqrt(1.0 / nd) : std::sqrt(2.0 / nd);
    for (std::size_t i = 0; i < n; ++i) {
      basis.at(k, i) = s * std::cos(std::numbers::pi * static_cast<double>(k) *
                                    (2.0 * static_cast<double>(i) + 1.0) / (2.0 * nd));
    }
  }
  return basis;
}

MfccMatrix extract_mfcc(const Waveform& wave, const MfccConfig& config) {
  config.validate();
  if (wave.sample_rate != kSampleRate) {
    throw Error("unsupported sample rate " + std::to_string(wave.sample_rate));
  }
  const std::size_t frames = frame_count(wave.samples.size(), config);
  if (frames == 0) {
    throw Error("clip of " + std::to_string(wave.samples.size()) +
                " samples is shorter than one frame (" + std::to_string(config.frame_length) + ")");
  }

  const Tensor bank = mel_filterbank(config, config.fft_size);
  const Tensor dct = dct_matrix(config.n_mels);
  std::vector<double> window(config.frame_length);
  for (std::size_t i = 0; i < window.size(); ++i) {
    window[i] = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) /
                                       static_cast<double>(config.frame_length - 1));
  }

  // Pre-emphasis over the whole clip, memory reset at the clip start.
  const auto& x = wave.samples;
  std::vector<double> emphasized(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    emphasized[i] = x[i] - config.pre_emphasis * (i ? x[i - 1] : 0.0);
  }

  RealFft& fft = fft_for(config.fft_size);
  std::vector<double> power(config.fft_size / 2 + 1);
  std::vector<double> log_mel(config.n_mels);
  MfccMatrix out{Tensor(Shape{frames, config.n_ceps})};
  auto in = fft.input();
  for (std::size_t t = 0; t < frames; ++t) {
    std::fill(in.begin(), in.end(), 0.0);
    kernels::mul(std::span<const double>(emphasized).subspan(t * config.frame_shift, config.frame_length),
                 window, in.first(config.frame_length));
    fft.power_spectrum(power);
    for (std::size_t m = 0; m < config.n_mels; ++m) {
      log_mel[m] = std::log(std::max(kernels::dot(bank.row(m), power), config.log_floor));
    }
    auto row = out.frames.row(t);
    for (std::size_t k = 0; k < config.n_ceps; ++k) row[k] = kernels::dot(dct.row(k), log_mel);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Feature dumps

void write_feature_dump(const std::filesystem::path& path, const MfccMatrix& mfcc) {
  bytes::Writer w;
  w.raw("MFCC");
  w.put<std::uint32_t>(1);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(mfcc.num_frames()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(mfcc.num_ceps()));
  w.put_f64s(mfcc.frames.data());
  bytes::write_file(path.string(), w.buffer());
}

MfccMatrix read_feature_dump(const std::filesystem::path& path) {
  const auto data = bytes::read_file(path.string());
  bytes::Reader r(data, path.string());
  if (r.take_string(4) != "MFCC") throw ParseError(path.string() + ": bad feature dump magic");
  const auto version = r.get<std::uint32_t>();
  if (version != 1) {
    throw ParseError(path.string() + ": unsupported feature dump version " + std::to_string(version));
  }
  const auto frames = r.get<std::uint32_t>();
  const auto ceps = r.get<std::uint32_t>();
  if (frames == 0 || ceps == 0) throw ParseError(path.string() + ": empty feature dump");
  r.need(static_cast<std::size_t>(frames) * ceps * 8);
  std::vector<double> values(static_cast<std::size_t>(frames) * ceps);
  for (double& v : values) v = r.get_f64();
  if (r.remaining() != 0) throw ParseError(path.string() + ": trailing bytes after feature data");
  return MfccMatrix{Tensor(Shape{frames, ceps}, std::move(values))};
}

}  // namespace gemcl::audio
