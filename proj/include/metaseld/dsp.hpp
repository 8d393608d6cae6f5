#pragma once

#include <complex>
#include <string>
#include <vector>

#include "metaseld/tensor.hpp"

namespace metaseld::dsp {

constexpr int kSampleRate = 24000;
constexpr int kWindowLen = 1024;
constexpr int kHop = 320;
constexpr int kBins = kWindowLen / 2 + 1;  // 513
constexpr int kMels = 64;
constexpr double kMelFmin = 50.0;
constexpr double kMelFmax = 12000.0;
constexpr double kLogFloor = 1e-10;
constexpr int kSegmentSamples = 5 * kSampleRate;  // fixed 5 s segments
constexpr int kSegmentFrames = (kSegmentSamples - kWindowLen) / kHop + 1;  // 372

/// 4-channel first-order-ambisonics clip, ACN order (W, Y, Z, X), SN3D.
struct FoaClip {
  std::vector<std::vector<float>> channels;  // 4 x n_samples, in [-1, 1]
  int sample_rate = kSampleRate;
  std::string room_id;
  std::string clip_id;

  int64_t n_samples() const { return channels.empty() ? 0 : static_cast<int64_t>(channels[0].size()); }
};

/// Model input: channels 0-3 log-mel of W,Y,Z,X; channels 4-6 mel intensity
/// (x, y, z), each intensity value in [-1, 1].
struct FeatureTensor {
  nn::Tensor<float> values;  // [7, T, 64]
  int frame_hop = kHop;
};

/// One-sided complex spectrogram, [channels][frames][bins].
struct Spectrogram {
  std::vector<std::vector<std::vector<std::complex<double>>>> data;
  int64_t channels() const { return static_cast<int64_t>(data.size()); }
  int64_t frames() const { return data.empty() ? 0 : static_cast<int64_t>(data[0].size()); }
};

/// In-place iterative radix-2 FFT; size must be a power of two.
void fft(std::vector<std::complex<double>>& buf, bool inverse = false);

/// Periodic Hann window STFT, no padding: T = floor((n - win)/hop) + 1.
/// Spectrum uses the unnormalized forward DFT, one-sided (513 bins); with
/// this scaling sum_n |x_w[n]|^2 = (|X_0|^2 + |X_512|^2 + 2*sum_{1..511} |X_k|^2) / N.
Spectrogram stft(const FoaClip& clip, int window_len = kWindowLen, int hop = kHop);

/// HTK-mel triangular filterbank [n_mels x bins], 50 Hz - 12 kHz,
/// each row normalized to sum 1.
const std::vector<std::vector<double>>& mel_filterbank();

/// 10*log10(mel_power + eps) per channel/frame/band: [4, T, 64].
nn::Tensor<float> logmel(const Spectrogram& spec, int n_mels = kMels);

/// Per-TF-bin acoustic intensity Re(conj(W) * (X, Y, Z)), mel-pooled, then
/// normalized per (frame, band) by its Euclidean norm + eps. Output order
/// (x, y, z): [3, T, 64].
nn::Tensor<float> intensity_vectors(const Spectrogram& spec);

/// Raw (unnormalized) mel-pooled intensity, same layout as intensity_vectors.
/// Exposed for direction-of-arrival estimation, where energy weighting
/// across bands matters.
nn::Tensor<float> intensity_vectors_raw(const Spectrogram& spec);

/// Full front end for a 5 s segment: log-mel (4 ch) + intensity (3 ch),
/// concatenated to [7, 372, 64]. Pure function of the clip.
FeatureTensor extract_features(const FoaClip& clip);

// Feature cache: magic "MSLD", version u32, dims 3 x u32, float32 payload
// (little-endian, row-major).
void save_features(const FeatureTensor& feat, const std::string& path);
FeatureTensor load_features(const std::string& path);

}  // namespace metaseld::dsp
