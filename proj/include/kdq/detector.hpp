// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "kdq/ops.hpp"
#include "kdq/random.hpp"

namespace kdq {

/**
 * Compact anchor-free grid detector. A constant-width conv trunk (width
 * scaled by width_mult, block count by depth) feeds a two-layer 1x1 head
 * that emits, per grid cell, class logits, an objectness logit, and four
 * box deltas.
 */
struct DetectorConfig {
  int input_size = 64;  // square input, pixels
  int grid = 8;         // cells per side
  int num_classes = 5;
  float width_mult = 1.0f;
  int depth = 2;  // trunk blocks after the stem
  int head_channels = 184;

  static constexpr int kBaseTrunkWidth = 12;

  int trunk_channels() const {
    return std::max(2, static_cast<int>(std::lround(kBaseTrunkWidth * width_mult)));
  }

  int pools_needed() const {
    int s = input_size / grid, n = 0;
    while (s > 1) {
      s /= 2;
      ++n;
    }
    return n;
  }

  void validate() const {
    if (input_size <= 0 || grid <= 0) throw ConfigError("detector: sizes must be positive");
    if (input_size % grid != 0) throw ConfigError("detector: input_size must be divisible by grid");
    int ratio = input_size / grid;
    if ((ratio & (ratio - 1)) != 0)
      throw ConfigError("detector: input_size/grid must be a power of two (stride-2 pooling)");
    if (num_classes < 1) throw ConfigError("detector: num_classes must be >= 1");
    if (width_mult <= 0.0f) throw ConfigError("detector: width_mult must be > 0");
    if (depth < 1) throw ConfigError("detector: depth must be >= 1");
    if (depth < pools_needed() - 1)
      throw ConfigError("detector: depth too small to reach the grid resolution");
    if (head_channels < 1) throw ConfigError("detector: head_channels must be >= 1");
  }

  std::string canonical_string() const {
    char buf[160];
    std::snprintf(buf, sizeof buf, "detector{in=%d,grid=%d,classes=%d,width=%.6g,depth=%d,head=%d}",
                  input_size, grid, num_classes, double(width_mult), depth, head_channels);
    return buf;
  }
  uint64_t digest() const { return fnv1a64(canonical_string()); }
};

struct ConvLayerDef {
  std::string name;
  int in_c, out_c, k, pad;
  bool act;   // SiLU after the conv
  bool pool;  // 2x2 max pool after the activation
};

inline std::vector<ConvLayerDef> detector_layout(const DetectorConfig& cfg) {
  cfg.validate();
  const int c = cfg.trunk_channels();
  const int pools = cfg.pools_needed();
  std::vector<ConvLayerDef> L;
  L.push_back({"stem", 3, c, 3, 1, true, pools >= 1});
  for (int i = 1; i <= cfg.depth; ++i)
    L.push_back({"block" + std::to_string(i), c, c, 3, 1, true, i < pools});
  L.push_back({"head_conv", c, cfg.head_channels, 1, 0, true, false});
  L.push_back({"head_out", cfg.head_channels, cfg.num_classes + 5, 1, 0, false, false});
  return L;
}

/// Per-cell head outputs for a batch, NCHW. `input_size` rides along so
/// decode can map cells back to pixels.
struct RawPrediction {
  TensorPtr class_logits;  // [B, num_classes, G, G]
  TensorPtr objectness;    // [B, 1, G, G]
  TensorPtr box_deltas;    // [B, 4, G, G] as (tx, ty, tw, th)
  int input_size = 0;
  int batch() const { return class_logits->shape[0]; }
  int grid() const { return class_logits->shape[2]; }
  int classes() const { return class_logits->shape[1]; }
};

/// Hook for the quantizer's calibration pass; sees every activation site.
struct ActivationObserver {
  virtual void observe(const std::string& site, const float* data, int64_t n) = 0;
  virtual ~ActivationObserver() = default;
};

struct ForwardResult {
  RawPrediction pred;
  TensorPtr feature;  // final trunk stage, [B, C_trunk, G, G]
};

class DetectorModel {
 public:
  DetectorConfig cfg;
  std::vector<ConvLayerDef> layout;
  std::vector<TensorPtr> weights, biases;  // parallel to layout

  int64_t param_count() const {
    int64_t n = 0;
    for (const auto& w : weights) n += w->numel();
    for (const auto& b : biases) n += b->numel();
    return n;
  }

  std::vector<TensorPtr> parameters() const {
    std::vector<TensorPtr> ps;
    for (size_t i = 0; i < weights.size(); ++i) {
      ps.push_back(weights[i]);
      ps.push_back(biases[i]);
    }
    return ps;
  }

  void set_trainable(bool t) {
    for (auto& p : weights) p->requires_grad = t;
    for (auto& p : biases) p->requires_grad = t;
  }

  ForwardResult forward(Graph* g, const TensorPtr& images, ActivationObserver* obs = nullptr) const {
    if (images->shape.size() != 4 || images->shape[1] != 3 ||
        images->shape[2] != cfg.input_size || images->shape[3] != cfg.input_size)
      throw ShapeError("detector forward: expected [B,3," + std::to_string(cfg.input_size) + "," +
                       std::to_string(cfg.input_size) + "], got " + shape_str(images->shape));
    TensorPtr x = images;
    if (obs) obs->observe("input", x->data.data(), x->numel());
    TensorPtr feature;
    const size_t trunk_end = layout.size() - 2;
    for (size_t i = 0; i < layout.size(); ++i) {
      const auto& L = layout[i];
      x = conv2d(g, x, weights[i], biases[i], 1, L.pad);
      if (obs && L.act) obs->observe(L.name + ".pre", x->data.data(), x->numel());
      if (L.act) x = silu(g, x);
      if (obs && L.act) obs->observe(L.name + ".post", x->data.data(), x->numel());
      if (L.pool) x = maxpool2x2(g, x);
      if (i == trunk_end - 1) feature = x;
    }
    const int C = cfg.num_classes;
    RawPrediction pred;
    pred.class_logits = slice_channels(g, x, 0, C);
    pred.objectness = slice_channels(g, x, C, C + 1);
    pred.box_deltas = slice_channels(g, x, C + 1, C + 5);
    pred.input_size = cfg.input_size;
    return {pred, feature};
  }
};

/// Deterministic build: Kaiming-uniform fan-in weights, zero biases, one
/// RNG substream per layer derived from (seed, layer name).
inline DetectorModel build_model(const DetectorConfig& cfg, uint64_t seed) {
  DetectorModel m;
  m.cfg = cfg;
  m.layout = detector_layout(cfg);
  for (const auto& L : m.layout) {
    auto w = make_param(L.name + ".w", {L.out_c, L.in_c, L.k, L.k});
    auto b = make_param(L.name + ".b", {L.out_c});
    Pcg32 rng(derive_seed(seed, "init." + L.name));
    const double fan_in = double(L.in_c) * L.k * L.k;
    const float bound = static_cast<float>(std::sqrt(6.0 / fan_in));
    for (auto& v : w->data) v = rng.uniform_f(-bound, bound);
    m.weights.push_back(std::move(w));
    m.biases.push_back(std::move(b));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Detections: decode + NMS
// ---------------------------------------------------------------------------

struct Detection {
  float x1, y1, x2, y2;
  int class_id;
  float confidence;
};

struct GtBox {
  float x1, y1, x2, y2;
  int class_id;
};

inline double box_iou(float ax1, float ay1, float ax2, float ay2, float bx1, float by1, float bx2,
                      float by2) {
  const double iw = std::min(ax2, bx2) - std::max(ax1, bx1);
  const double ih = std::min(ay2, by2) - std::max(ay1, by1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double area_a = double(ax2 - ax1) * (ay2 - ay1);
  const double area_b = double(bx2 - bx1) * (by2 - by1);
  const double uni = area_a + area_b - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

inline double box_iou(const Detection& a, const Detection& b) {
  return box_iou(a.x1, a.y1, a.x2, a.y2, b.x1, b.y1, b.x2, b.y2);
}

namespace detail {

inline bool det_before(const Detection& a, const Detection& b) {
  if (a.confidence != b.confidence) return a.confidence > b.confidence;
  if (a.class_id != b.class_id) return a.class_id < b.class_id;
  if (a.y1 != b.y1) return a.y1 < b.y1;
  return a.x1 < b.x1;
}

}  // namespace detail

/// Greedy per-class NMS. Keeps a detection unless a higher-ranked kept
/// detection of the same class overlaps it with IoU > iou_nms.
inline std::vector<Detection> nms(std::vector<Detection> dets, double iou_nms) {
  std::stable_sort(dets.begin(), dets.end(), detail::det_before);
  std::vector<Detection> kept;
  for (const auto& d : dets) {
    bool suppressed = false;
    for (const auto& k : kept)
      if (k.class_id == d.class_id && box_iou(k, d) > iou_nms) {
        suppressed = true;
        break;
      }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

/**
 * Turn one batch element of raw head outputs into detections.
 * Cell confidence is sigmoid(objectness) * max softmax(class_logits); cells
 * below conf_threshold are dropped, survivors go through per-class NMS and
 * come back sorted by descending confidence.
 */
inline std::vector<Detection> decode(const RawPrediction& pred, int batch_index,
                                     double conf_threshold, double iou_nms) {
  if (conf_threshold < 0.0 || conf_threshold > 1.0 || iou_nms < 0.0 || iou_nms > 1.0)
    throw ParamError("decode thresholds must be within [0,1]");
  const int G = pred.grid(), C = pred.classes(), S = pred.input_size;
  const float cell = float(S) / float(G);
  const int64_t plane = int64_t(G) * G;
  const float* cls = pred.class_logits->data.data() + int64_t(batch_index) * C * plane;
  const float* obj = pred.objectness->data.data() + int64_t(batch_index) * plane;
  const float* dlt = pred.box_deltas->data.data() + int64_t(batch_index) * 4 * plane;
  std::vector<Detection> dets;
  for (int gy = 0; gy < G; ++gy)
    for (int gx = 0; gx < G; ++gx) {
      const int64_t at = int64_t(gy) * G + gx;
      const double o = 1.0 / (1.0 + std::exp(-double(obj[at])));
      // Stable softmax over the class logits of this cell.
      double m = cls[at];
      for (int c = 1; c < C; ++c) m = std::max(m, double(cls[c * plane + at]));
      double sum = 0.0, best_e = 0.0;
      int best_c = 0;
      for (int c = 0; c < C; ++c) {
        const double e = std::exp(double(cls[c * plane + at]) - m);
        sum += e;
        if (e > best_e) {
          best_e = e;
          best_c = c;
        }
      }
      const double conf = o * (best_e / sum);
      if (conf < conf_threshold) continue;
      const double tx = dlt[0 * plane + at], ty = dlt[1 * plane + at];
      const double tw = std::min(double(dlt[2 * plane + at]), 10.0);
      const double th = std::min(double(dlt[3 * plane + at]), 10.0);
      const double cx = (gx + 1.0 / (1.0 + std::exp(-tx))) * cell;
      const double cy = (gy + 1.0 / (1.0 + std::exp(-ty))) * cell;
      const double w = std::exp(tw) * cell, h = std::exp(th) * cell;
      Detection d;
      d.x1 = static_cast<float>(std::max(0.0, cx - w / 2));
      d.y1 = static_cast<float>(std::max(0.0, cy - h / 2));
      d.x2 = static_cast<float>(std::min(double(S), cx + w / 2));
      d.y2 = static_cast<float>(std::min(double(S), cy + h / 2));
      if (d.x2 - d.x1 <= 0.0f || d.y2 - d.y1 <= 0.0f) continue;
      d.class_id = best_c;
      d.confidence = static_cast<float>(conf);
      dets.push_back(d);
    }
  return nms(std::move(dets), iou_nms);
}

// ---------------------------------------------------------------------------
// Ground-truth encoding
// ---------------------------------------------------------------------------

/**
 * Per-image training targets. Each ground-truth box is assigned to the grid
 * cell containing its center; when two centers collide the larger-area box
 * wins and `collision_warnings` counts the loss.
 */
struct TargetGrids {
  int grid = 0, num_classes = 0, input_size = 0;
  std::vector<float> objectness;               // G*G in {0,1}
  std::vector<int> cls;                        // G*G, -1 where no object
  std::vector<GtBox> cell_box;                 // valid where objectness == 1
  std::vector<std::array<float, 4>> cell_delta;  // encode-space (tx,ty,tw,th)
  int collision_warnings = 0;

  int positives() const {
    int n = 0;
    for (float v : objectness) n += v > 0.5f ? 1 : 0;
    return n;
  }
};

inline TargetGrids encode_targets(const std::vector<GtBox>& boxes, const DetectorConfig& cfg) {
  cfg.validate();
  const int G = cfg.grid;
  const float cell = float(cfg.input_size) / float(G);
  TargetGrids t;
  t.grid = G;
  t.num_classes = cfg.num_classes;
  t.input_size = cfg.input_size;
  t.objectness.assign(size_t(G) * G, 0.0f);
  t.cls.assign(size_t(G) * G, -1);
  t.cell_box.assign(size_t(G) * G, GtBox{0, 0, 0, 0, -1});
  t.cell_delta.assign(size_t(G) * G, {0, 0, 0, 0});
  for (const auto& b : boxes) {
    if (b.x1 < 0 || b.y1 < 0 || b.x2 > cfg.input_size || b.y2 > cfg.input_size || b.x1 >= b.x2 ||
        b.y1 >= b.y2)
      throw ParamError("encode_targets: box outside image bounds");
    if (b.class_id < 0 || b.class_id >= cfg.num_classes)
      throw ParamError("encode_targets: class id out of range");
    const double cx = 0.5 * (double(b.x1) + b.x2), cy = 0.5 * (double(b.y1) + b.y2);
    const int gx = std::min(G - 1, static_cast<int>(cx / cell));
    const int gy = std::min(G - 1, static_cast<int>(cy / cell));
    const size_t at = size_t(gy) * G + gx;
    if (t.objectness[at] > 0.5f) {
      ++t.collision_warnings;
      const auto& old = t.cell_box[at];
      const double old_area = double(old.x2 - old.x1) * (old.y2 - old.y1);
      const double new_area = double(b.x2 - b.x1) * (b.y2 - b.y1);
      if (new_area <= old_area) continue;  // keep the larger box
    }
    double fx = cx / cell - gx, fy = cy / cell - gy;
    fx = std::clamp(fx, 1e-6, 1.0 - 1e-6);
    fy = std::clamp(fy, 1e-6, 1.0 - 1e-6);
    t.objectness[at] = 1.0f;
    t.cls[at] = b.class_id;
    t.cell_box[at] = b;
    t.cell_delta[at] = {static_cast<float>(std::log(fx / (1.0 - fx))),
                        static_cast<float>(std::log(fy / (1.0 - fy))),
                        static_cast<float>(std::log(double(b.x2 - b.x1) / cell)),
                        static_cast<float>(std::log(double(b.y2 - b.y1) / cell))};
  }
  return t;
}

}  // namespace kdq
