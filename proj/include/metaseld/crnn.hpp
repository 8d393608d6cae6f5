#pragma once

#include <array>

#include "metaseld/gru.hpp"
#include "metaseld/init.hpp"
#include "metaseld/optim.hpp"
#include "metaseld/scene.hpp"

namespace metaseld::model {

constexpr int kClasses = scene::kNumClasses;  // 13
constexpr int kOutFrames = 46;                // model frames per 5 s segment
constexpr int kLabelFrames = 50;              // 100 ms frames per 5 s segment
constexpr double kActThreshold = 0.5;

/// Network dimensions. The default is the full CRNN; the tiny variant keeps
/// the same topology at gradient-check-able size.
struct CrnnConfig {
  int in_channels = 7;
  int in_frames = 372;
  int in_bins = 64;
  std::array<int, 4> conv_channels = {32, 64, 128, 256};
  std::array<std::pair<int, int>, 4> pools = {{{2, 2}, {2, 2}, {2, 2}, {1, 2}}};  // (time, freq)
  int gru_hidden = 128;
  int classes = kClasses;

  static CrnnConfig tiny() {
    CrnnConfig c;
    c.in_channels = 3;
    c.in_frames = 16;
    c.in_bins = 16;
    c.conv_channels = {2, 3, 4, 5};
    c.gru_hidden = 3;
    c.classes = 2;
    return c;
  }

  int out_frames() const {
    int t = in_frames;
    for (const auto& p : pools) t /= p.first;
    return t;
  }
  int out_dim() const { return classes * 3; }
};

/// Glorot-uniform conv/linear weights, orthogonal GRU recurrent blocks,
/// uniform GRU input weights, zero biases, BN affine at identity.
template <class S>
nn::ParamSet<S> init_params(const CrnnConfig& cfg, Rng& rng);

/// Table-1 pipeline: 4 x (conv3x3+BN+ReLU twice, avg pool), global average
/// pool over frequency, 1-layer BiGRU, linear to classes*3, tanh. Returns
/// [T_out, classes, 3]. mode is accepted for API symmetry; the network has
/// no dropout and BN always normalizes with the sample's own statistics, so
/// train and eval forward passes coincide.
enum class Mode { train, eval };

template <class S>
nn::Var<S> forward(const nn::Tensor<S>& feat, const nn::ParamSet<S>& params, const CrnnConfig& cfg,
                   Mode mode = Mode::eval);

/// Mean squared error over all T_out x classes x 3 entries.
template <class S>
nn::Var<S> seld_loss(const nn::Var<S>& pred, const nn::Var<S>& target) {
  return nn::mse_loss(pred, target);
}

/// Unit DOA vector from degrees: (cos el cos az, cos el sin az, sin el).
std::array<double, 3> doa_vector(double azimuth_deg, double elevation_deg);
/// Inverse of doa_vector; input need not be normalized (norm > 0).
std::pair<double, double> doa_angles(double x, double y, double z);

/// Label-grid <-> model-grid nearest-center maps. Model frames are treated
/// as a uniform partition of the segment, so the maps are fixed integers.
int model_frame_to_label(int model_frame, int out_frames = kOutFrames,
                         int label_frames = kLabelFrames);
int label_frame_to_model(int label_frame, int out_frames = kOutFrames,
                         int label_frames = kLabelFrames);

/// ACCDOA targets for one 5 s segment starting at absolute label frame
/// seg_start. Active (frame, class) cells get the unit DOA; when two events
/// of the same class overlap a frame the earlier track wins.
nn::Tensor<float> make_targets(const scene::Annotation& ann, int seg_start,
                               int classes = kClasses, int out_frames = kOutFrames);

/// Thresholded ACCDOA decoding back to the 100 ms grid. Frames in the result
/// are absolute (seg_start added); track is always 0.
scene::Annotation decode(const nn::Tensor<float>& pred, double act_threshold, int seg_start);

/// Number of parameters of the full Table-1 network.
int64_t param_count(const CrnnConfig& cfg = CrnnConfig());

// ---------------------------------------------------------------------------

template <class S>
nn::ParamSet<S> init_params(const CrnnConfig& cfg, Rng& rng) {
  using nn::Tensor;
  nn::ParamSet<S> p;
  int cin = cfg.in_channels;
  for (int b = 0; b < 4; ++b) {
    int cout = cfg.conv_channels[static_cast<size_t>(b)];
    for (int l = 0; l < 2; ++l) {
      std::string tag = "conv" + std::to_string(b + 1) + (l == 0 ? "a" : "b");
      int ci = l == 0 ? cin : cout;
      p.add(tag + ".w", nn::glorot_uniform<S>({cout, ci, 3, 3}, ci * 9, cout * 9, rng));
      p.add(tag + ".b", Tensor<S>({cout}));
      p.add(tag + ".bn_gamma", Tensor<S>::full({cout}, S(1)));
      p.add(tag + ".bn_beta", Tensor<S>({cout}));
    }
    cin = cout;
  }
  const int H = cfg.gru_hidden;
  const int I = cfg.conv_channels[3];
  for (const char* dir : {"fwd", "bwd"}) {
    std::string tag = std::string("gru.") + dir;
    // input weights per gate: [H, I] glorot; recurrent per gate: [H, H] orthogonal
    Tensor<S> w_ih({3 * H, I});
    for (int g = 0; g < 3; ++g) {
      Tensor<S> blk = nn::glorot_uniform<S>({H, I}, I, H, rng);
      std::copy(blk.data(), blk.data() + blk.numel(), w_ih.data() + g * H * I);
    }
    Tensor<S> w_hh({3 * H, H});
    for (int g = 0; g < 3; ++g) {
      Tensor<S> blk = nn::orthogonal<S>(H, rng);
      std::copy(blk.data(), blk.data() + blk.numel(), w_hh.data() + g * H * H);
    }
    p.add(tag + ".w_ih", std::move(w_ih));
    p.add(tag + ".w_hh", std::move(w_hh));
    p.add(tag + ".b_ih", Tensor<S>({3 * H}));
    p.add(tag + ".b_hh", Tensor<S>({3 * H}));
  }
  p.add("head.w", nn::glorot_uniform<S>({cfg.out_dim(), 2 * H}, 2 * H, cfg.out_dim(), rng));
  p.add("head.b", Tensor<S>({cfg.out_dim()}));
  return p;
}

template <class S>
nn::Var<S> forward(const nn::Tensor<S>& feat, const nn::ParamSet<S>& params, const CrnnConfig& cfg,
                   Mode) {
  using namespace metaseld::nn;
  if (feat.rank() != 3 || feat.dim(0) != cfg.in_channels || feat.dim(1) != cfg.in_frames ||
      feat.dim(2) != cfg.in_bins)
    fail_config("forward: input shape " + Tensor<S>::shape_str(feat.shape()) + ", expected [" +
                std::to_string(cfg.in_channels) + "," + std::to_string(cfg.in_frames) + "," +
                std::to_string(cfg.in_bins) + "]");
  Var<S> x = constant(feat);
  for (int b = 0; b < 4; ++b) {
    for (int l = 0; l < 2; ++l) {
      std::string tag = "conv" + std::to_string(b + 1) + (l == 0 ? "a" : "b");
      x = conv2d3x3(x, params.at(tag + ".w"), params.at(tag + ".b"));
      x = batchnorm2d(x, params.at(tag + ".bn_gamma"), params.at(tag + ".bn_beta"));
      x = relu(x);
    }
    const auto& pool = cfg.pools[static_cast<size_t>(b)];
    x = avgpool2d(x, pool.first, pool.second);
  }
  x = freq_mean(x);   // [C, T]
  x = transpose(x);   // [T, C]
  nn::GruDirParams<S> fwd{params.at("gru.fwd.w_ih"), params.at("gru.fwd.w_hh"),
                          params.at("gru.fwd.b_ih"), params.at("gru.fwd.b_hh")};
  nn::GruDirParams<S> bwd{params.at("gru.bwd.w_ih"), params.at("gru.bwd.w_hh"),
                          params.at("gru.bwd.b_ih"), params.at("gru.bwd.b_hh")};
  x = bigru(x, fwd, bwd, cfg.gru_hidden);                       // [T, 2H]
  x = tanh(linear(x, params.at("head.w"), params.at("head.b")));  // [T, classes*3]
  return reshape(x, {cfg.out_frames(), static_cast<int64_t>(cfg.classes), 3});
}

}  // namespace metaseld::model
