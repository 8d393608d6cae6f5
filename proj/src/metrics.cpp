#include "metaseld/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "metaseld/common.hpp"
#include "metaseld/crnn.hpp"

namespace fs = std::filesystem;

namespace metaseld::metrics {

double angular_distance(const std::array<double, 3>& u, const std::array<double, 3>& v) {
  const double nu = std::sqrt(u[0] * u[0] + u[1] * u[1] + u[2] * u[2]);
  const double nv = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
  if (nu < 1e-12 || nv < 1e-12) fail_config("angular_distance: zero vector");
  double dot = (u[0] * v[0] + u[1] * v[1] + u[2] * v[2]) / (nu * nv);
  dot = std::clamp(dot, -1.0, 1.0);
  return std::acos(dot) * 180.0 / M_PI;
}

double hungarian(const std::vector<std::vector<double>>& cost, std::vector<int>& row_to_col) {
  const int n = static_cast<int>(cost.size());
  row_to_col.assign(static_cast<size_t>(n), -1);
  if (n == 0) return 0.0;
  const int m = static_cast<int>(cost[0].size());
  if (m == 0) return 0.0;

  // Potentials method requires rows <= cols; flip if needed.
  if (n > m) {
    std::vector<std::vector<double>> t(static_cast<size_t>(m),
                                       std::vector<double>(static_cast<size_t>(n)));
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j) t[static_cast<size_t>(j)][static_cast<size_t>(i)] =
          cost[static_cast<size_t>(i)][static_cast<size_t>(j)];
    std::vector<int> col_to_row;
    double total = hungarian(t, col_to_row);
    for (int j = 0; j < m; ++j)
      if (col_to_row[static_cast<size_t>(j)] >= 0)
        row_to_col[static_cast<size_t>(col_to_row[static_cast<size_t>(j)])] = j;
    return total;
  }

  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<size_t>(n + 1)), v(static_cast<size_t>(m + 1));
  std::vector<int> p(static_cast<size_t>(m + 1)), way(static_cast<size_t>(m + 1));
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<size_t>(m + 1), kInf);
    std::vector<char> used(static_cast<size_t>(m + 1), 0);
    do {
      used[static_cast<size_t>(j0)] = 1;
      int i0 = p[static_cast<size_t>(j0)], j1 = -1;
      double delta = kInf;
      for (int j = 1; j <= m; ++j)
        if (!used[static_cast<size_t>(j)]) {
          double cur = cost[static_cast<size_t>(i0 - 1)][static_cast<size_t>(j - 1)] -
                       u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
          if (cur < minv[static_cast<size_t>(j)]) {
            minv[static_cast<size_t>(j)] = cur;
            way[static_cast<size_t>(j)] = j0;
          }
          if (minv[static_cast<size_t>(j)] < delta) {
            delta = minv[static_cast<size_t>(j)];
            j1 = j;
          }
        }
      for (int j = 0; j <= m; ++j) {
        if (used[static_cast<size_t>(j)]) {
          u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
          v[static_cast<size_t>(j)] -= delta;
        } else {
          minv[static_cast<size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<size_t>(j0)] != 0);
    do {
      int j1 = way[static_cast<size_t>(j0)];
      p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
      j0 = j1;
    } while (j0);
  }
  double total = 0;
  for (int j = 1; j <= m; ++j)
    if (p[static_cast<size_t>(j)] > 0) {
      row_to_col[static_cast<size_t>(p[static_cast<size_t>(j)] - 1)] = j - 1;
      total += cost[static_cast<size_t>(p[static_cast<size_t>(j)] - 1)][static_cast<size_t>(j - 1)];
    }
  return total;
}

void Accumulator::merge(const Accumulator& o) {
  if (per_class.size() != o.per_class.size()) fail_config("accumulator merge: class count mismatch");
  for (size_t c = 0; c < per_class.size(); ++c) {
    per_class[c].loc_tp += o.per_class[c].loc_tp;
    per_class[c].fp += o.per_class[c].fp;
    per_class[c].fn += o.per_class[c].fn;
    per_class[c].n_ref += o.per_class[c].n_ref;
    per_class[c].matched += o.per_class[c].matched;
    per_class[c].err_sum += o.per_class[c].err_sum;
  }
  sum_s += o.sum_s;
  sum_d += o.sum_d;
  sum_i += o.sum_i;
  sum_n += o.sum_n;
}

void match_frame(const FrameEvents& ref, const FrameEvents& pred, Accumulator& acc) {
  if (ref.by_class.size() != acc.per_class.size() || pred.by_class.size() != acc.per_class.size())
    fail_config("match_frame: class count mismatch");
  int64_t frame_fn = 0, frame_fp = 0, frame_n = 0;
  for (size_t c = 0; c < acc.per_class.size(); ++c) {
    const auto& R = ref.by_class[c];
    const auto& P = pred.by_class[c];
    auto& cc = acc.per_class[c];
    cc.n_ref += static_cast<int64_t>(R.size());
    frame_n += static_cast<int64_t>(R.size());
    if (R.empty() && P.empty()) continue;
    int64_t cls_fn = 0, cls_fp = 0;
    if (R.empty()) {
      cls_fp = static_cast<int64_t>(P.size());
    } else if (P.empty()) {
      cls_fn = static_cast<int64_t>(R.size());
    } else {
      std::vector<std::vector<double>> cost(R.size(), std::vector<double>(P.size()));
      for (size_t i = 0; i < R.size(); ++i)
        for (size_t j = 0; j < P.size(); ++j) cost[i][j] = angular_distance(R[i], P[j]);
      std::vector<int> row_to_col;
      hungarian(cost, row_to_col);
      int64_t matched = 0;
      for (size_t i = 0; i < R.size(); ++i) {
        int j = row_to_col[i];
        if (j < 0) continue;
        ++matched;
        const double d = cost[i][static_cast<size_t>(j)];
        cc.err_sum += d;
        cc.matched += 1;
        if (d <= kSpatialThresholdDeg) {
          cc.loc_tp += 1;
        } else {
          cls_fn += 1;  // a class match beyond the threshold misses both ways
          cls_fp += 1;
        }
      }
      cls_fn += static_cast<int64_t>(R.size()) - matched;
      cls_fp += static_cast<int64_t>(P.size()) - matched;
    }
    cc.fn += cls_fn;
    cc.fp += cls_fp;
    frame_fn += cls_fn;
    frame_fp += cls_fp;
  }
  acc.sum_s += std::min(frame_fn, frame_fp);
  acc.sum_d += std::max<int64_t>(0, frame_fn - frame_fp);
  acc.sum_i += std::max<int64_t>(0, frame_fp - frame_fn);
  acc.sum_n += frame_n;
}

MetricsReport finalize(const Accumulator& acc) {
  if (acc.sum_n == 0) fail_data("no reference events");
  MetricsReport rep;
  rep.per_class = acc.per_class;
  rep.er20 = static_cast<double>(acc.sum_s + acc.sum_d + acc.sum_i) / static_cast<double>(acc.sum_n);
  double f_sum = 0, lr_sum = 0, le_sum = 0;
  int64_t with_ref = 0;
  for (const auto& cc : acc.per_class) {
    if (cc.n_ref == 0) continue;
    ++with_ref;
    const double denom = static_cast<double>(2 * cc.loc_tp + cc.fp + cc.fn);
    f_sum += denom > 0 ? 2.0 * static_cast<double>(cc.loc_tp) / denom : 0.0;
    lr_sum += static_cast<double>(cc.matched) / static_cast<double>(cc.n_ref);
    le_sum += cc.matched > 0 ? cc.err_sum / static_cast<double>(cc.matched) : 180.0;
  }
  rep.f20 = f_sum / static_cast<double>(with_ref);
  rep.lr_cd = lr_sum / static_cast<double>(with_ref);
  rep.le_cd = le_sum / static_cast<double>(with_ref);
  rep.e_seld = e_seld(rep.er20, rep.f20, rep.le_cd, rep.lr_cd);
  return rep;
}

double e_seld(double er, double f, double le_deg, double lr) {
  if (le_deg < 0.0 || le_deg > 180.0)
    fail_config("e_seld: LE out of [0,180]: " + std::to_string(le_deg));
  return (er + (1.0 - f) + le_deg / 180.0 + (1.0 - lr)) / 4.0;
}

FrameStream annotation_to_stream(const std::string& clip_id, const scene::Annotation& ann,
                                 int classes) {
  FrameStream stream;
  for (const auto& r : ann.rows) {
    if (r.class_id < 0 || r.class_id >= classes)
      fail_data("annotation row with class out of range in clip " + clip_id);
    auto key = std::make_pair(clip_id, r.frame);
    auto it = stream.find(key);
    if (it == stream.end()) it = stream.emplace(key, FrameEvents(classes)).first;
    auto v = model::doa_vector(r.azimuth, r.elevation);
    it->second.add(r.class_id, v);
  }
  return stream;
}

void accumulate(const FrameStream& refs, const FrameStream& preds, Accumulator& acc) {
  const int classes = static_cast<int>(acc.per_class.size());
  auto ri = refs.begin();
  auto pi = preds.begin();
  const FrameEvents empty(classes);
  while (ri != refs.end() || pi != preds.end()) {
    if (pi == preds.end() || (ri != refs.end() && ri->first < pi->first)) {
      match_frame(ri->second, empty, acc);
      ++ri;
    } else if (ri == refs.end() || pi->first < ri->first) {
      match_frame(empty, pi->second, acc);
      ++pi;
    } else {
      match_frame(ri->second, pi->second, acc);
      ++ri;
      ++pi;
    }
  }
}

std::vector<std::pair<std::string, MetricsReport>> evaluate_dirs(
    const std::string& refs_dir, const std::string& preds_dir,
    const std::vector<scene::ManifestRow>& manifest) {
  std::map<std::string, std::string> room_of;
  for (const auto& r : manifest) room_of[r.clip_id] = r.room_id;

  std::map<std::string, Accumulator> by_room;
  std::vector<std::string> room_order;
  bool any_clip = false;
  std::vector<fs::path> pred_files;
  for (const auto& e : fs::directory_iterator(preds_dir))
    if (e.path().extension() == ".csv") pred_files.push_back(e.path());
  std::sort(pred_files.begin(), pred_files.end());
  for (const auto& pred_path : pred_files) {
    const std::string clip_id = pred_path.stem().string();
    auto it = room_of.find(clip_id);
    if (it == room_of.end()) fail_data("prediction clip not in manifest: " + clip_id);
    fs::path ref_path = fs::path(refs_dir) / (clip_id + ".csv");
    if (!fs::exists(ref_path)) fail_data("missing reference annotation: " + ref_path.string());
    auto refs = annotation_to_stream(clip_id, scene::load_annotation(ref_path.string()));
    auto preds = annotation_to_stream(clip_id, scene::load_annotation(pred_path.string()));
    auto acc_it = by_room.find(it->second);
    if (acc_it == by_room.end()) {
      acc_it = by_room.emplace(it->second, Accumulator()).first;
      room_order.push_back(it->second);
    }
    accumulate(refs, preds, acc_it->second);
    any_clip = true;
  }
  if (!any_clip) fail_data("no prediction files found in " + preds_dir);

  std::sort(room_order.begin(), room_order.end());
  std::vector<std::pair<std::string, MetricsReport>> out;
  Accumulator overall;
  for (const auto& room : room_order) {
    const Accumulator& acc = by_room.at(room);
    out.emplace_back(room, finalize(acc));
    overall.merge(acc);
  }
  out.emplace_back("Overall", finalize(overall));
  return out;
}

void save_metrics_csv(const std::vector<std::pair<std::string, MetricsReport>>& rows,
                      const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) fail_data("cannot open metrics CSV for writing: " + path);
  os << "room,er20,f20,le_cd,lr_cd,e_seld\n";
  os.setf(std::ios::fixed);
  os.precision(6);
  // The four metrics are rounded to the output precision and the aggregate is
  // recomputed from the rounded values, so e_seld in the file always equals
  // the formula applied to the other four columns bit-exactly.
  auto r6 = [](double v) { return std::round(v * 1e6) / 1e6; };
  for (const auto& [room, rep] : rows) {
    const double er = r6(rep.er20), f = r6(rep.f20), le = r6(rep.le_cd), lr = r6(rep.lr_cd);
    os << room << ',' << er << ',' << f << ',' << le << ',' << lr << ',' << e_seld(er, f, le, lr)
       << '\n';
  }
  if (!os) fail_data("write failed for metrics CSV: " + path);
}

std::vector<std::pair<std::string, MetricsReport>> load_metrics_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail_data("cannot open metrics CSV: " + path);
  std::vector<std::pair<std::string, MetricsReport>> rows;
  std::string line;
  bool first = true;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (first) {
      first = false;
      continue;  // header
    }
    std::istringstream ss(line);
    std::string room, field;
    if (!std::getline(ss, room, ',')) fail_data("bad metrics row in " + path);
    MetricsReport rep;
    double* slots[5] = {&rep.er20, &rep.f20, &rep.le_cd, &rep.lr_cd, &rep.e_seld};
    for (double* slot : slots) {
      if (!std::getline(ss, field, ',')) fail_data("bad metrics row in " + path);
      *slot = std::stod(field);
    }
    rows.emplace_back(room, rep);
  }
  return rows;
}

}  // namespace metaseld::metrics
