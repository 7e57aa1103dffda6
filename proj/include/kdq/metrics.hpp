// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kdq/detector.hpp"

namespace kdq {

/// Intersection-over-union for axis-aligned boxes; degenerate boxes give 0.
inline double iou(const GtBox& a, const GtBox& b) {
  return box_iou(a.x1, a.y1, a.x2, a.y2, b.x1, b.y1, b.x2, b.y2);
}
inline double iou(const Detection& a, const GtBox& b) {
  return box_iou(a.x1, a.y1, a.x2, a.y2, b.x1, b.y1, b.x2, b.y2);
}

// ---------------------------------------------------------------------------
// Matching
// ---------------------------------------------------------------------------

/// Greedy matching outcome for one image at one IoU threshold.
struct MatchResult {
  std::vector<int8_t> det_is_tp;
  std::vector<int> det_matched_gt;  // index into gts, -1 for FP
  std::vector<int8_t> gt_matched;
  double iou_threshold = 0.5;
  int tp = 0, fp = 0;
};

/**
 * Greedy matcher: detections in descending-confidence order each claim the
 * highest-IoU unmatched same-class ground truth with IoU >= threshold.
 */
inline MatchResult match_detections(const std::vector<Detection>& dets,
                                    const std::vector<GtBox>& gts, double iou_thresh) {
  for (size_t i = 1; i < dets.size(); ++i)
    if (dets[i].confidence > dets[i - 1].confidence)
      throw ContractError("match_detections expects detections sorted by descending confidence");
  MatchResult m;
  m.iou_threshold = iou_thresh;
  m.det_is_tp.assign(dets.size(), 0);
  m.det_matched_gt.assign(dets.size(), -1);
  m.gt_matched.assign(gts.size(), 0);
  for (size_t d = 0; d < dets.size(); ++d) {
    double best = 0.0;
    int best_g = -1;
    for (size_t g = 0; g < gts.size(); ++g) {
      if (m.gt_matched[g] || gts[g].class_id != dets[d].class_id) continue;
      const double v = iou(dets[d], gts[g]);
      if (v >= iou_thresh && v > best) {
        best = v;
        best_g = static_cast<int>(g);
      }
    }
    if (best_g >= 0) {
      m.det_is_tp[d] = 1;
      m.det_matched_gt[d] = best_g;
      m.gt_matched[size_t(best_g)] = 1;
      ++m.tp;
    } else {
      ++m.fp;
    }
  }
  return m;
}

struct PrRates {
  double precision = 1.0, recall = 1.0, far = 0.0;
};

/// Empty-case conventions: no detections -> precision 1, no ground truths ->
/// recall 1. FAR is defined as 1 - precision, always.
inline PrRates precision_recall(int tp, int fp, int total_gts) {
  if (tp + fp < 0 || total_gts < tp) throw ContractError("precision_recall: impossible counts");
  PrRates r;
  r.precision = (tp + fp) == 0 ? 1.0 : double(tp) / double(tp + fp);
  r.recall = total_gts == 0 ? 1.0 : double(tp) / double(total_gts);
  r.far = 1.0 - r.precision;
  return r;
}

inline PrRates precision_recall(const MatchResult& m, int total_gts) {
  return precision_recall(m.tp, m.fp, total_gts);
}

// ---------------------------------------------------------------------------
// Average precision
// ---------------------------------------------------------------------------

/// One evaluated image: decoded detections plus ground truth.
struct ImageEval {
  int image_id = 0;
  std::vector<Detection> dets;
  std::vector<GtBox> gts;
};

namespace detail {

struct RankedDet {
  float conf;
  int image;
  int index;  // detection index within the image
};

inline std::vector<RankedDet> ranked_class_dets(const std::vector<ImageEval>& images,
                                                int class_id) {
  std::vector<RankedDet> out;
  for (size_t i = 0; i < images.size(); ++i)
    for (size_t d = 0; d < images[i].dets.size(); ++d)
      if (images[i].dets[d].class_id == class_id)
        out.push_back({images[i].dets[d].confidence, int(i), int(d)});
  std::stable_sort(out.begin(), out.end(), [](const RankedDet& a, const RankedDet& b) {
    if (a.conf != b.conf) return a.conf > b.conf;
    if (a.image != b.image) return a.image < b.image;
    return a.index < b.index;
  });
  return out;
}

inline int count_class_gts(const std::vector<ImageEval>& images, int class_id) {
  int n = 0;
  for (const auto& im : images)
    for (const auto& g : im.gts) n += g.class_id == class_id ? 1 : 0;
  return n;
}

// All-point interpolation: integrate the monotone precision envelope over
// recall.
inline double envelope_integral(const std::vector<std::pair<double, double>>& recall_precision) {
  double ap = 0.0, prev_recall = 0.0;
  for (size_t k = 0; k < recall_precision.size(); ++k) {
    double p_env = 0.0;
    for (size_t j = k; j < recall_precision.size(); ++j)
      p_env = std::max(p_env, recall_precision[j].second);
    ap += (recall_precision[k].first - prev_recall) * p_env;
    prev_recall = recall_precision[k].first;
  }
  return ap;
}

}  // namespace detail

/**
 * All-point interpolated average precision for one class over a set of
 * images. Returns nullopt when the class has no ground truth anywhere
 * (undefined; the caller excludes it from means).
 */
inline std::optional<double> average_precision(const std::vector<ImageEval>& images, int class_id,
                                               double iou_thresh) {
  const int total_gts = detail::count_class_gts(images, class_id);
  if (total_gts == 0) return std::nullopt;
  auto ranked = detail::ranked_class_dets(images, class_id);
  if (ranked.empty()) return 0.0;

  // Greedy matching in global confidence order; per-image matched flags.
  std::vector<std::vector<int8_t>> matched(images.size());
  for (size_t i = 0; i < images.size(); ++i) matched[i].assign(images[i].gts.size(), 0);
  std::vector<std::pair<double, double>> pts;  // (recall, precision) per rank
  int tp = 0, fp = 0;
  for (const auto& rd : ranked) {
    const auto& im = images[size_t(rd.image)];
    const auto& det = im.dets[size_t(rd.index)];
    double best = 0.0;
    int best_g = -1;
    for (size_t g = 0; g < im.gts.size(); ++g) {
      if (matched[size_t(rd.image)][g] || im.gts[g].class_id != class_id) continue;
      const double v = iou(det, im.gts[g]);
      if (v >= iou_thresh && v > best) {
        best = v;
        best_g = int(g);
      }
    }
    if (best_g >= 0) {
      matched[size_t(rd.image)][size_t(best_g)] = 1;
      ++tp;
    } else {
      ++fp;
    }
    pts.emplace_back(double(tp) / total_gts, double(tp) / double(tp + fp));
  }
  return detail::envelope_integral(pts);
}

struct MapResult {
  double map50 = 0.0;
  double map50_95 = 0.0;
  std::map<int, std::optional<double>> per_class_ap50;
};

/// mAP at IoU 0.5 plus the mean over thresholds 0.50..0.95 step 0.05.
inline MapResult map_range(const std::vector<ImageEval>& images, int num_classes) {
  MapResult r;
  bool any_class = false;
  double sum_over_thresholds = 0.0;
  for (int step = 0; step < 10; ++step) {
    const double thr = 0.5 + 0.05 * step;
    double sum = 0.0;
    int counted = 0;
    for (int c = 0; c < num_classes; ++c) {
      auto ap = average_precision(images, c, thr);
      if (step == 0) r.per_class_ap50[c] = ap;
      if (ap) {
        sum += *ap;
        ++counted;
      }
    }
    if (counted == 0) throw EvalError("map_range: no annotated classes to evaluate");
    any_class = true;
    const double m = sum / counted;
    if (step == 0) r.map50 = m;
    sum_over_thresholds += m;
  }
  if (!any_class) throw EvalError("map_range: nothing evaluated");
  r.map50_95 = sum_over_thresholds / 10.0;
  return r;
}

// ---------------------------------------------------------------------------
// Group aggregation
// ---------------------------------------------------------------------------

/// Named groups of class ids; groups may share classes.
using GroupMapping = std::vector<std::pair<std::string, std::vector<int>>>;

inline GroupMapping default_vru_groups() {
  return {{"pedestrians", {1}}, {"cyclists", {3, 2}}, {"motorcyclists", {3, 4}}};
}

/// Group score = mean of member-class AP50s (classes without ground truth are
/// skipped; a group with no evaluable member is absent from the result).
inline std::map<std::string, double> group_map(
    const std::map<int, std::optional<double>>& per_class_ap50, const GroupMapping& groups) {
  std::map<std::string, double> out;
  for (const auto& [name, classes] : groups) {
    if (classes.empty()) throw ConfigError("group '" + name + "' has no classes");
    double sum = 0.0;
    int n = 0;
    for (int c : classes) {
      auto it = per_class_ap50.find(c);
      if (it == per_class_ap50.end())
        throw ConfigError("group '" + name + "' references unknown class " + std::to_string(c));
      if (it->second) {
        sum += *it->second;
        ++n;
      }
    }
    if (n > 0) out[name] = sum / n;
  }
  return out;
}

/// Alternative pooling rule: treat all member classes as one class and
/// re-run AP on the pooled detections/ground truths.
inline std::optional<double> pooled_group_ap(const std::vector<ImageEval>& images,
                                             const std::vector<int>& classes, double iou_thresh) {
  std::vector<ImageEval> pooled(images.size());
  auto member = [&](int c) {
    return std::find(classes.begin(), classes.end(), c) != classes.end();
  };
  for (size_t i = 0; i < images.size(); ++i) {
    pooled[i].image_id = images[i].image_id;
    for (auto d : images[i].dets)
      if (member(d.class_id)) {
        d.class_id = 0;
        pooled[i].dets.push_back(d);
      }
    for (auto g : images[i].gts)
      if (member(g.class_id)) {
        g.class_id = 0;
        pooled[i].gts.push_back(g);
      }
  }
  return average_precision(pooled, 0, iou_thresh);
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct EvalReport {
  double map50 = 0.0, map50_95 = 0.0;
  double precision = 1.0, recall = 1.0, far = 0.0;
  std::map<int, std::optional<double>> per_class_ap50;
  std::map<std::string, double> per_group_ap50;
  double vru_avg = 0.0;
  double fps = 0.0;
  std::string precision_level = "FP32";  // FP32 | INT8
  double conf_threshold = 0.25;
  // provenance
  std::string model_id;
  std::string config_digest;
  int64_t param_count = 0;
  std::string fps_note = "simulated CPU path; not comparable to accelerator throughput";
  std::string confidence_definition = "sigmoid(objectness) * max(softmax(class_logits))";

  void validate() const {
    auto in01 = [](double v) { return v >= 0.0 && v <= 1.0 + 1e-12; };
    if (!in01(map50) || !in01(map50_95) || !in01(precision) || !in01(recall) || !in01(far))
      throw EvalError("report validation: rate outside [0,1]");
    if (far != 1.0 - precision) throw EvalError("report validation: FAR != 1 - precision");
    if (map50_95 > map50 + 1e-12)
      throw EvalError("report validation: mAP50-95 exceeds mAP50");
  }

  nlohmann::json to_json() const {
    nlohmann::json pc;
    for (const auto& [c, ap] : per_class_ap50)
      pc[std::to_string(c)] = ap ? nlohmann::json(*ap) : nlohmann::json(nullptr);
    return {{"map50", map50},
            {"map50_95", map50_95},
            {"precision", precision},
            {"recall", recall},
            {"far", far},
            {"per_class_ap50", pc},
            {"per_group_ap50", per_group_ap50},
            {"vru_avg", vru_avg},
            {"fps", fps},
            {"precision_level", precision_level},
            {"conf_threshold", conf_threshold},
            {"model_id", model_id},
            {"config_digest", config_digest},
            {"param_count", param_count},
            {"fps_note", fps_note},
            {"confidence_definition", confidence_definition}};
  }

  static EvalReport from_json(const nlohmann::json& j) {
    EvalReport r;
    r.map50 = j.at("map50").get<double>();
    r.map50_95 = j.at("map50_95").get<double>();
    r.precision = j.at("precision").get<double>();
    r.recall = j.at("recall").get<double>();
    r.far = j.at("far").get<double>();
    for (const auto& [k, v] : j.at("per_class_ap50").items())
      r.per_class_ap50[std::stoi(k)] =
          v.is_null() ? std::nullopt : std::optional<double>(v.get<double>());
    r.per_group_ap50 = j.at("per_group_ap50").get<std::map<std::string, double>>();
    r.vru_avg = j.at("vru_avg").get<double>();
    r.fps = j.at("fps").get<double>();
    r.precision_level = j.at("precision_level").get<std::string>();
    r.conf_threshold = j.at("conf_threshold").get<double>();
    r.model_id = j.at("model_id").get<std::string>();
    r.config_digest = j.at("config_digest").get<std::string>();
    r.param_count = j.at("param_count").get<int64_t>();
    return r;
  }

  std::string csv_header() const {
    return "model,precision_level,map50,map50_95,precision,recall,far,vru_avg,fps";
  }
  std::string csv_row() const {
    char buf[320];
    std::snprintf(buf, sizeof buf, "%s,%s,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.2f", model_id.c_str(),
                  precision_level.c_str(), map50, map50_95, precision, recall, far, vru_avg, fps);
    return buf;
  }
};

struct EvalOptions {
  double conf_threshold = 0.25;  // operating point for precision/recall/FAR
  double match_iou = 0.5;
  GroupMapping groups = default_vru_groups();
  bool pooled_groups = false;
};

/// Counts TP/FP/GT at a fixed confidence threshold across all images.
struct ThresholdCounts {
  int tp = 0, fp = 0, total_gts = 0;
};

inline ThresholdCounts counts_at_threshold(const std::vector<ImageEval>& images, double thr,
                                           double match_iou) {
  ThresholdCounts c;
  for (const auto& im : images) {
    std::vector<Detection> kept;
    for (const auto& d : im.dets)
      if (d.confidence >= thr) kept.push_back(d);
    std::stable_sort(kept.begin(), kept.end(), [](const Detection& a, const Detection& b) {
      return a.confidence > b.confidence;
    });
    auto m = match_detections(kept, im.gts, match_iou);
    c.tp += m.tp;
    c.fp += m.fp;
    c.total_gts += static_cast<int>(im.gts.size());
  }
  return c;
}

/// Assemble the full metric suite from per-image detections + annotations.
inline EvalReport evaluate_detections(const std::vector<ImageEval>& images, int num_classes,
                                      const EvalOptions& opt = {}) {
  EvalReport r;
  auto mr = map_range(images, num_classes);
  r.map50 = mr.map50;
  r.map50_95 = mr.map50_95;
  r.per_class_ap50 = mr.per_class_ap50;
  const auto c = counts_at_threshold(images, opt.conf_threshold, opt.match_iou);
  const auto pr = precision_recall(c.tp, c.fp, c.total_gts);
  r.precision = pr.precision;
  r.recall = pr.recall;
  r.far = pr.far;
  r.conf_threshold = opt.conf_threshold;
  if (opt.pooled_groups) {
    for (const auto& [name, classes] : opt.groups) {
      auto ap = pooled_group_ap(images, classes, 0.5);
      if (ap) r.per_group_ap50[name] = *ap;
    }
  } else {
    r.per_group_ap50 = group_map(r.per_class_ap50, opt.groups);
  }
  if (!r.per_group_ap50.empty()) {
    double s = 0.0;
    for (const auto& [_, v] : r.per_group_ap50) s += v;
    r.vru_avg = s / double(r.per_group_ap50.size());
  }
  r.validate();
  return r;
}

// ---------------------------------------------------------------------------
// Degradation + throughput
// ---------------------------------------------------------------------------

struct Degradation {
  double delta_map = 0.0;                 // int8 - fp32
  std::optional<double> delta_pct;        // 100 * delta / fp32 (null when fp32 == 0)
};

inline Degradation degradation(const EvalReport& fp32, const EvalReport& int8) {
  Degradation d;
  d.delta_map = int8.map50 - fp32.map50;
  if (fp32.map50 != 0.0) d.delta_pct = 100.0 * d.delta_map / fp32.map50;
  return d;
}

/**
 * Wall-clock frames per second of `step` (one single-image inference per
 * call). Warmup iterations are excluded from timing.
 */
inline double throughput(const std::function<void()>& step, int iterations = 1000,
                         int warmup = 50) {
  if (iterations < 1) throw ParamError("throughput: iterations must be >= 1");
  for (int i = 0; i < warmup; ++i) step();
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < iterations; ++i) step();
  const auto t1 = std::chrono::steady_clock::now();
  const double secs = std::chrono::duration<double>(t1 - t0).count();
  return secs > 0.0 ? double(iterations) / secs : 0.0;
}

}  // namespace kdq
