#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include "gemcl/tensor.hpp"

namespace gemcl::audio {

inline constexpr int kSampleRate = 16000;

struct Waveform {
  std::vector<double> samples;  // in [-1, 1]
  int sample_rate = kSampleRate;
};

enum class PcmFormat { Int16, Float32 };

// Reads a RIFF/WAVE file: mono, 16 kHz, 16-bit integer or 32-bit float PCM.
// Integer samples are divided by 32768.
Waveform load_wav(const std::filesystem::path& path);
Waveform parse_wav(std::span<const unsigned char> bytes);
void save_wav(const std::filesystem::path& path, const Waveform& wave,
              PcmFormat format = PcmFormat::Int16);

struct MfccConfig {
  std::size_t frame_length = 400;  // 25 ms
  std::size_t frame_shift = 160;   // 10 ms
  std::size_t n_mels = 40;
  std::size_t n_ceps = 13;
  std::size_t fft_size = 512;
  double pre_emphasis = 0.97;
  double log_floor = 1e-10;
  double low_hz = 0.0;
  double high_hz = 8000.0;

  void validate() const;
};

// T x n_ceps.
struct MfccMatrix {
  Tensor frames;
  std::size_t num_frames() const { return frames.rows(); }
  std::size_t num_ceps() const { return frames.cols(); }
};

std::size_t frame_count(std::size_t num_samples, const MfccConfig& config);

// n_mels x (fft_size / 2 + 1) triangular filters on the HTK mel scale, each
// row peak-normalised to 1.
Tensor mel_filterbank(const MfccConfig& config, std::size_t fft_size);

// Orthonormal DCT-II basis, n x n, row k holding coefficient k.
Tensor dct_matrix(std::size_t n);

// pre-emphasis -> framing -> Hamming -> |FFT|^2 -> mel -> log(max(e, floor))
// -> DCT-II -> first n_ceps coefficients.
MfccMatrix extract_mfcc(const Waveform& wave, const MfccConfig& config = {});

// Feature dump: "MFCC", u32 version (1), u32 T, u32 n_ceps, then T*n_ceps
// little-endian doubles.
void write_feature_dump(const std::filesystem::path& path, const MfccMatrix& mfcc);
MfccMatrix read_feature_dump(const std::filesystem::path& path);

}  // namespace gemcl::audio
