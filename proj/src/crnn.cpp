#include "metaseld/crnn.hpp"

#include <cmath>
#include <map>

namespace metaseld::model {

std::array<double, 3> doa_vector(double azimuth_deg, double elevation_deg) {
  const double az = azimuth_deg * M_PI / 180.0, el = elevation_deg * M_PI / 180.0;
  return {std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el)};
}

std::pair<double, double> doa_angles(double x, double y, double z) {
  const double norm = std::sqrt(x * x + y * y + z * z);
  if (norm < 1e-12) fail_config("doa_angles: zero vector");
  const double el = std::asin(std::clamp(z / norm, -1.0, 1.0)) * 180.0 / M_PI;
  const double az = std::atan2(y, x) * 180.0 / M_PI;
  return {az, el};
}

int model_frame_to_label(int model_frame, int out_frames, int label_frames) {
  int l = static_cast<int>(std::lround((model_frame + 0.5) * label_frames /
                                       static_cast<double>(out_frames) - 0.5));
  return std::clamp(l, 0, label_frames - 1);
}

int label_frame_to_model(int label_frame, int out_frames, int label_frames) {
  int m = static_cast<int>(std::lround((label_frame + 0.5) * out_frames /
                                       static_cast<double>(label_frames) - 0.5));
  return std::clamp(m, 0, out_frames - 1);
}

nn::Tensor<float> make_targets(const scene::Annotation& ann, int seg_start, int classes,
                               int out_frames) {
  nn::Tensor<float> target({out_frames, classes, 3});
  // per (label frame, class): the earliest-track row wins homogeneous overlap
  std::map<std::pair<int, int>, const scene::AnnRow*> best;
  for (const auto& r : ann.rows) {
    int rel = r.frame - seg_start;
    if (rel < 0 || rel >= kLabelFrames || r.class_id < 0 || r.class_id >= classes) continue;
    auto key = std::make_pair(rel, r.class_id);
    auto it = best.find(key);
    if (it == best.end() || r.track < it->second->track) best[key] = &r;
  }
  for (int t = 0; t < out_frames; ++t) {
    int l = model_frame_to_label(t, out_frames, kLabelFrames);
    for (int c = 0; c < classes; ++c) {
      auto it = best.find({l, c});
      if (it == best.end()) continue;
      auto v = doa_vector(it->second->azimuth, it->second->elevation);
      for (int k = 0; k < 3; ++k) target.at(t, c, k) = static_cast<float>(v[static_cast<size_t>(k)]);
    }
  }
  return target;
}

scene::Annotation decode(const nn::Tensor<float>& pred, double act_threshold, int seg_start) {
  if (pred.rank() != 3 || pred.dim(2) != 3) fail_config("decode: expected [T,classes,3]");
  if (act_threshold <= 0.0 || act_threshold >= 1.0) fail_config("decode: threshold not in (0,1)");
  const int out_frames = static_cast<int>(pred.dim(0));
  const int classes = static_cast<int>(pred.dim(1));
  scene::Annotation ann;
  for (int l = 0; l < kLabelFrames; ++l) {
    int t = label_frame_to_model(l, out_frames, kLabelFrames);
    for (int c = 0; c < classes; ++c) {
      const double x = pred.at(t, c, 0), y = pred.at(t, c, 1), z = pred.at(t, c, 2);
      const double norm = std::sqrt(x * x + y * y + z * z);
      if (norm <= act_threshold) continue;
      auto [az, el] = doa_angles(x, y, z);
      ann.rows.push_back({seg_start + l, c, 0, az, el});
    }
  }
  return ann;
}

int64_t param_count(const CrnnConfig& cfg) {
  int64_t n = 0;
  int cin = cfg.in_channels;
  for (int b = 0; b < 4; ++b) {
    int cout = cfg.conv_channels[static_cast<size_t>(b)];
    for (int l = 0; l < 2; ++l) {
      int ci = l == 0 ? cin : cout;
      n += static_cast<int64_t>(cout) * ci * 9 + cout + 2 * cout;
    }
    cin = cout;
  }
  const int H = cfg.gru_hidden, I = cfg.conv_channels[3];
  n += 2 * (3LL * H * I + 3LL * H * H + 6LL * H);
  n += static_cast<int64_t>(cfg.out_dim()) * 2 * H + cfg.out_dim();
  return n;
}

}  // namespace metaseld::model
