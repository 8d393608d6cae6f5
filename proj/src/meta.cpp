#include "metaseld/meta.hpp"

#include <algorithm>

#include "metaseld/dsp.hpp"

namespace metaseld::meta {

LossFn<float> crnn_loss_fn(const model::CrnnConfig& cfg) {
  return [cfg](const nn::ParamSet<float>& params, const Sample<float>& s) {
    nn::Var<float> pred = model::forward(s.input, params, cfg, model::Mode::train);
    return model::seld_loss(pred, nn::constant(s.target));
  };
}

RoomSamples<float> room_samples(const RoomSegments& room) {
  RoomSamples<float> rs;
  rs.room_id = room.room_id;
  rs.count = static_cast<int>(room.segments.size());
  const RoomSegments* ptr = &room;
  rs.get = [ptr](int i) {
    const SegmentRef& seg = ptr->segments.at(static_cast<size_t>(i));
    Sample<float> s;
    s.input = dsp::load_features(seg.feat_path).values;
    s.target = seg.target;
    return s;
  };
  return rs;
}

MetaTestResult meta_test(const nn::ParamSet<float>& theta, const RoomSegments& room,
                         const std::map<std::string, scene::Annotation>& refs,
                         const model::CrnnConfig& model_cfg, const MetaConfig& cfg,
                         double act_threshold) {
  const int k = cfg.k_support_test;
  if (static_cast<int>(room.segments.size()) <= k)
    fail_data("meta_test: room " + room.room_id + " has " +
              std::to_string(room.segments.size()) + " segments, needs more than " +
              std::to_string(k));

  auto loss_fn = crnn_loss_fn(model_cfg);
  auto loader = room_samples(room);
  std::vector<Sample<float>> support, query;
  for (int i = 0; i < k; ++i) support.push_back(loader.get(i));
  for (int i = k; i < loader.count; ++i) query.push_back(loader.get(i));

  MetaTestResult res;
  res.support_loss_before = batch_loss(loss_fn, theta, support);
  res.query_loss_before = batch_loss(loss_fn, theta, query);
  res.adapted = inner_adapt(loss_fn, theta, support, cfg.inner_lr, cfg.inner_steps, false);
  res.support_loss_after = batch_loss(loss_fn, res.adapted, support);
  res.query_loss_after = batch_loss(loss_fn, res.adapted, query);

  // decode query predictions and score against the reference rows that fall
  // inside the query segments
  metrics::FrameStream ref_stream, pred_stream;
  std::vector<scene::Annotation> decoded(query.size());
  parallel_for(static_cast<int64_t>(query.size()), [&](int64_t qi) {
    nn::NoGradGuard guard;
    const SegmentRef& seg = room.segments[static_cast<size_t>(k + qi)];
    nn::Var<float> pred = model::forward(query[static_cast<size_t>(qi)].input, res.adapted,
                                         model_cfg, model::Mode::eval);
    decoded[static_cast<size_t>(qi)] = model::decode(pred.value(), act_threshold, seg.seg_start_frame);
  });
  for (size_t qi = 0; qi < query.size(); ++qi) {
    const SegmentRef& seg = room.segments[k + qi];
    auto& pred_ann = decoded[qi];
    auto ref_it = refs.find(seg.clip_id);
    if (ref_it == refs.end()) fail_data("meta_test: missing reference annotation for " + seg.clip_id);
    scene::Annotation seg_refs;
    for (const auto& r : ref_it->second.rows)
      if (r.frame >= seg.seg_start_frame && r.frame < seg.seg_start_frame + model::kLabelFrames)
        seg_refs.rows.push_back(r);
    auto rs = metrics::annotation_to_stream(seg.clip_id, seg_refs, model_cfg.classes);
    auto ps = metrics::annotation_to_stream(seg.clip_id, pred_ann, model_cfg.classes);
    for (auto& kv : rs) ref_stream.insert(std::move(kv));
    for (auto& kv : ps) pred_stream.insert(std::move(kv));
    auto& dst = res.predictions[seg.clip_id];
    dst.rows.insert(dst.rows.end(), pred_ann.rows.begin(), pred_ann.rows.end());
  }

  metrics::Accumulator acc(model_cfg.classes);
  metrics::accumulate(ref_stream, pred_stream, acc);
  res.report = metrics::finalize(acc);
  res.acc = std::move(acc);
  return res;
}

}  // namespace metaseld::meta
