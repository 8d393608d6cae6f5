#include "metaseld/dsp.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "metaseld/common.hpp"

namespace metaseld::dsp {

void fft(std::vector<std::complex<double>>& buf, bool inverse) {
  const size_t n = buf.size();
  if (n == 0 || (n & (n - 1)) != 0) fail_config("fft: size must be a power of two");
  // bit reversal
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(buf[i], buf[j]);
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    double ang = 2.0 * M_PI / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
    std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (size_t k = 0; k < len / 2; ++k) {
        std::complex<double> u = buf[i + k];
        std::complex<double> v = buf[i + k + len / 2] * w;
        buf[i + k] = u + v;
        buf[i + k + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
  if (inverse)
    for (auto& x : buf) x /= static_cast<double>(n);
}

Spectrogram stft(const FoaClip& clip, int window_len, int hop) {
  if (clip.channels.size() != 4) fail_data("stft: expected 4 FOA channels");
  const int64_t n = clip.n_samples();
  if (n < window_len) fail_data("clip too short: " + std::to_string(n) + " samples < one window");
  const int64_t frames = (n - window_len) / hop + 1;
  const int bins = window_len / 2 + 1;

  std::vector<double> window(static_cast<size_t>(window_len));
  for (int i = 0; i < window_len; ++i)
    window[static_cast<size_t>(i)] =
        0.5 * (1.0 - std::cos(2.0 * M_PI * i / static_cast<double>(window_len)));

  Spectrogram out;
  out.data.resize(4);
  std::vector<std::complex<double>> buf(static_cast<size_t>(window_len));
  for (int c = 0; c < 4; ++c) {
    out.data[c].resize(static_cast<size_t>(frames));
    const float* x = clip.channels[static_cast<size_t>(c)].data();
    for (int64_t t = 0; t < frames; ++t) {
      const float* seg = x + t * hop;
      for (int i = 0; i < window_len; ++i)
        buf[static_cast<size_t>(i)] = {static_cast<double>(seg[i]) * window[static_cast<size_t>(i)], 0.0};
      fft(buf);
      auto& row = out.data[c][static_cast<size_t>(t)];
      row.assign(buf.begin(), buf.begin() + bins);
    }
  }
  return out;
}

namespace {
double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

std::vector<std::vector<double>> build_filterbank() {
  std::vector<std::vector<double>> fb(kMels, std::vector<double>(kBins, 0.0));
  const double mel_lo = hz_to_mel(kMelFmin), mel_hi = hz_to_mel(kMelFmax);
  std::vector<double> edges(kMels + 2);
  for (int i = 0; i < kMels + 2; ++i)
    edges[static_cast<size_t>(i)] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (kMels + 1));
  const double bin_hz = static_cast<double>(kSampleRate) / kWindowLen;
  for (int m = 0; m < kMels; ++m) {
    const double f0 = edges[static_cast<size_t>(m)], f1 = edges[static_cast<size_t>(m + 1)],
                 f2 = edges[static_cast<size_t>(m + 2)];
    double sum = 0.0;
    for (int k = 0; k < kBins; ++k) {
      const double f = k * bin_hz;
      double w = 0.0;
      if (f > f0 && f < f2) w = (f <= f1) ? (f - f0) / (f1 - f0) : (f2 - f) / (f2 - f1);
      fb[static_cast<size_t>(m)][static_cast<size_t>(k)] = w;
      sum += w;
    }
    if (sum <= 0.0) fail_config("mel filterbank: empty band " + std::to_string(m));
    for (int k = 0; k < kBins; ++k) fb[static_cast<size_t>(m)][static_cast<size_t>(k)] /= sum;
  }
  return fb;
}
}  // namespace

const std::vector<std::vector<double>>& mel_filterbank() {
  static const std::vector<std::vector<double>> fb = build_filterbank();
  return fb;
}

nn::Tensor<float> logmel(const Spectrogram& spec, int n_mels) {
  if (n_mels != kMels) fail_config("logmel: n_mels must be 64");
  const auto& fb = mel_filterbank();
  const int64_t C = spec.channels(), T = spec.frames();
  nn::Tensor<float> out({C, T, kMels});
  for (int64_t c = 0; c < C; ++c)
    for (int64_t t = 0; t < T; ++t) {
      const auto& row = spec.data[static_cast<size_t>(c)][static_cast<size_t>(t)];
      for (int m = 0; m < kMels; ++m) {
        double e = 0.0;
        const auto& w = fb[static_cast<size_t>(m)];
        for (int k = 0; k < kBins; ++k) e += w[static_cast<size_t>(k)] * std::norm(row[static_cast<size_t>(k)]);
        out.at(c, t, m) = static_cast<float>(10.0 * std::log10(e + kLogFloor));
      }
    }
  return out;
}

namespace {
// Mel-pooled intensity; normalized=false leaves the raw pooled vectors.
nn::Tensor<float> intensity_impl(const Spectrogram& spec, bool normalized) {
  if (spec.channels() != 4) fail_data("intensity_vectors: expected 4 FOA channels (W,Y,Z,X)");
  const auto& fb = mel_filterbank();
  const int64_t T = spec.frames();
  nn::Tensor<float> out({3, T, kMels});
  std::vector<double> ix(kBins), iy(kBins), iz(kBins);
  for (int64_t t = 0; t < T; ++t) {
    const auto& w = spec.data[0][static_cast<size_t>(t)];
    const auto& y = spec.data[1][static_cast<size_t>(t)];
    const auto& z = spec.data[2][static_cast<size_t>(t)];
    const auto& x = spec.data[3][static_cast<size_t>(t)];
    for (int k = 0; k < kBins; ++k) {
      const std::complex<double> wc = std::conj(w[static_cast<size_t>(k)]);
      ix[static_cast<size_t>(k)] = (wc * x[static_cast<size_t>(k)]).real();
      iy[static_cast<size_t>(k)] = (wc * y[static_cast<size_t>(k)]).real();
      iz[static_cast<size_t>(k)] = (wc * z[static_cast<size_t>(k)]).real();
    }
    for (int m = 0; m < kMels; ++m) {
      const auto& wrow = fb[static_cast<size_t>(m)];
      double mx = 0, my = 0, mz = 0;
      for (int k = 0; k < kBins; ++k) {
        const double g = wrow[static_cast<size_t>(k)];
        mx += g * ix[static_cast<size_t>(k)];
        my += g * iy[static_cast<size_t>(k)];
        mz += g * iz[static_cast<size_t>(k)];
      }
      if (normalized) {
        const double norm = std::sqrt(mx * mx + my * my + mz * mz) + kLogFloor;
        mx /= norm;
        my /= norm;
        mz /= norm;
      }
      out.at(0, t, m) = static_cast<float>(mx);
      out.at(1, t, m) = static_cast<float>(my);
      out.at(2, t, m) = static_cast<float>(mz);
    }
  }
  return out;
}
}  // namespace

nn::Tensor<float> intensity_vectors(const Spectrogram& spec) { return intensity_impl(spec, true); }

nn::Tensor<float> intensity_vectors_raw(const Spectrogram& spec) {
  return intensity_impl(spec, false);
}

FeatureTensor extract_features(const FoaClip& clip) {
  if (clip.sample_rate != kSampleRate)
    fail_data("extract_features: sample rate must be 24000, got " + std::to_string(clip.sample_rate));
  if (clip.n_samples() != kSegmentSamples)
    fail_data("extract_features: expected a 5 s segment (" + std::to_string(kSegmentSamples) +
              " samples), got " + std::to_string(clip.n_samples()));
  Spectrogram spec = stft(clip);
  nn::Tensor<float> lm = logmel(spec);
  nn::Tensor<float> iv = intensity_vectors(spec);
  const int64_t T = spec.frames();
  FeatureTensor feat;
  feat.values = nn::Tensor<float>({7, T, kMels});
  std::copy(lm.data(), lm.data() + lm.numel(), feat.values.data());
  std::copy(iv.data(), iv.data() + iv.numel(), feat.values.data() + lm.numel());
  return feat;
}

namespace {
constexpr char kCacheMagic[4] = {'M', 'S', 'L', 'D'};
constexpr uint32_t kCacheVersion = 1;
}  // namespace

void save_features(const FeatureTensor& feat, const std::string& path) {
  if (feat.values.rank() != 3) fail_config("save_features: rank != 3");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail_data("cannot open feature cache for writing: " + path);
  os.write(kCacheMagic, 4);
  uint32_t v = kCacheVersion;
  os.write(reinterpret_cast<const char*>(&v), 4);
  for (int d = 0; d < 3; ++d) {
    uint32_t dim = static_cast<uint32_t>(feat.values.dim(static_cast<size_t>(d)));
    os.write(reinterpret_cast<const char*>(&dim), 4);
  }
  os.write(reinterpret_cast<const char*>(feat.values.data()),
           static_cast<std::streamsize>(sizeof(float) * feat.values.numel()));
  if (!os) fail_data("write failed for feature cache: " + path);
}

FeatureTensor load_features(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail_data("cannot open feature cache: " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kCacheMagic, 4) != 0)
    fail_data("not a feature cache file (bad magic): " + path);
  uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 4) || v != kCacheVersion)
    fail_data("unsupported feature cache version in " + path);
  uint32_t dims[3];
  if (!is.read(reinterpret_cast<char*>(dims), 12)) fail_data("truncated feature cache: " + path);
  FeatureTensor feat;
  feat.values = nn::Tensor<float>({dims[0], dims[1], dims[2]});
  if (!is.read(reinterpret_cast<char*>(feat.values.data()),
               static_cast<std::streamsize>(sizeof(float) * feat.values.numel())))
    fail_data("truncated feature cache: " + path);
  return feat;
}

}  // namespace metaseld::dsp
