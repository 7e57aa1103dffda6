// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cfenv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "kdq/checkpoint.hpp"
#include "kdq/dataset.hpp"
#include "kdq/detector.hpp"
#include "kdq/ops.hpp"

namespace kdq {

enum class RangePolicy { minmax, percentile_999 };

inline const char* to_string(RangePolicy p) {
  return p == RangePolicy::minmax ? "minmax" : "percentile_999";
}
inline RangePolicy range_policy_from_string(const std::string& s) {
  if (s == "minmax") return RangePolicy::minmax;
  if (s == "percentile_999") return RangePolicy::percentile_999;
  throw ConfigError("unknown range policy '" + s + "'");
}

// ---------------------------------------------------------------------------
// Calibration statistics
// ---------------------------------------------------------------------------

/**
 * Running range of one activation site. min/max merging is exact and
 * order-independent; the fixed 2048-bin |x| histogram (for the percentile
 * policy) is filled in a second pass once the range is known.
 */
struct CalibrationStats {
  double min_v = std::numeric_limits<double>::infinity();
  double max_v = -std::numeric_limits<double>::infinity();
  int64_t count = 0;
  std::vector<uint64_t> hist;  // 2048 bins over [0, hist_range]
  double hist_range = 0.0;

  static constexpr int kBins = 2048;

  void observe_range(const float* data, int64_t n) {
    for (int64_t i = 0; i < n; ++i) {
      const double v = data[i];
      min_v = std::min(min_v, v);
      max_v = std::max(max_v, v);
    }
    count += n;
  }

  void prepare_histogram() {
    hist_range = std::max(std::abs(min_v), std::abs(max_v));
    hist.assign(kBins, 0);
  }

  void observe_histogram(const float* data, int64_t n) {
    if (hist.empty() || hist_range <= 0.0) return;
    for (int64_t i = 0; i < n; ++i) {
      const double a = std::abs(double(data[i]));
      int bin = static_cast<int>(a / hist_range * kBins);
      if (bin >= kBins) bin = kBins - 1;
      ++hist[size_t(bin)];
    }
  }

  double abs_max() const { return std::max(std::abs(min_v), std::abs(max_v)); }

  /// Smallest |x| bound covering the requested fraction of samples.
  double percentile_abs(double fraction) const {
    if (hist.empty() || hist_range <= 0.0) return abs_max();
    uint64_t total = 0;
    for (uint64_t h : hist) total += h;
    if (total == 0) return abs_max();
    const auto want = static_cast<uint64_t>(std::ceil(fraction * double(total)));
    uint64_t seen = 0;
    for (int b = 0; b < kBins; ++b) {
      seen += hist[size_t(b)];
      if (seen >= want) return hist_range * double(b + 1) / kBins;
    }
    return hist_range;
  }
};

/// Symmetric INT8 parameters: representable range is [-127*scale, 127*scale],
/// zero point fixed at 0, reserved -128 unused.
struct QuantParams {
  double scale = 1.0;
};

inline QuantParams derive_scale(const CalibrationStats& stats, RangePolicy policy) {
  if (stats.count <= 0) throw CalibrationError("derive_scale: no samples observed");
  if (!std::isfinite(stats.min_v) || !std::isfinite(stats.max_v))
    throw CalibrationError("derive_scale: non-finite calibration range");
  double bound = policy == RangePolicy::minmax ? stats.abs_max() : stats.percentile_abs(0.999);
  if (bound <= 0.0) return {1.0};  // constant-zero activation: any scale works
  return {bound / 127.0};
}

// ---------------------------------------------------------------------------
// Quantize / dequantize
// ---------------------------------------------------------------------------

/// Round-half-to-even (the process default FP rounding mode).
inline int32_t rne(double x) { return static_cast<int32_t>(std::nearbyint(x)); }

inline int8_t quantize_value(double x, double scale) {
  const int32_t q = rne(x / scale);
  return static_cast<int8_t>(std::clamp(q, -127, 127));
}

inline std::vector<int8_t> quantize_tensor(const std::vector<float>& x, const QuantParams& qp) {
  if (qp.scale <= 0.0) throw ParamError("quantize_tensor: scale must be > 0");
  std::vector<int8_t> q(x.size());
  for (size_t i = 0; i < x.size(); ++i) q[i] = quantize_value(x[i], qp.scale);
  return q;
}

inline double dequantize_value(int8_t q, double scale) { return double(q) * scale; }

// ---------------------------------------------------------------------------
// INT8 convolution: INT8 x INT8 -> INT32 accumulation
// ---------------------------------------------------------------------------

namespace qdetail {

inline void im2col_i8(const int8_t* x, int C, int H, int W, int kh, int kw, int pad, int OH,
                      int OW, int8_t* col) {
  const int K = C * kh * kw;
  for (int oy = 0; oy < OH; ++oy)
    for (int ox = 0; ox < OW; ++ox) {
      int8_t* dst = col + (int64_t(oy) * OW + ox) * K;
      for (int c = 0; c < C; ++c) {
        const int8_t* plane = x + int64_t(c) * H * W;
        for (int ky = 0; ky < kh; ++ky) {
          const int iy = oy - pad + ky;
          if (iy < 0 || iy >= H) {
            for (int kx = 0; kx < kw; ++kx) *dst++ = 0;
            continue;
          }
          for (int kx = 0; kx < kw; ++kx) {
            const int ix = ox - pad + kx;
            *dst++ = (ix >= 0 && ix < W) ? plane[int64_t(iy) * W + ix] : int8_t(0);
          }
        }
      }
    }
}

}  // namespace qdetail

/**
 * Reference integer path: plain INT32 accumulation loops. Slow but obviously
 * correct; the GEMM path below must agree bit for bit.
 */
inline std::vector<int32_t> int8_conv2d_ref(const std::vector<int8_t>& x, int C, int H, int W,
                                            const std::vector<int8_t>& w, int OC, int kh, int kw,
                                            int pad) {
  const int OH = H + 2 * pad - kh + 1, OW = W + 2 * pad - kw + 1;
  std::vector<int32_t> acc(size_t(OC) * OH * OW, 0);
  for (int oc = 0; oc < OC; ++oc)
    for (int oy = 0; oy < OH; ++oy)
      for (int ox = 0; ox < OW; ++ox) {
        int32_t s = 0;
        for (int c = 0; c < C; ++c)
          for (int ky = 0; ky < kh; ++ky) {
            const int iy = oy - pad + ky;
            if (iy < 0 || iy >= H) continue;
            for (int kx = 0; kx < kw; ++kx) {
              const int ix = ox - pad + kx;
              if (ix < 0 || ix >= W) continue;
              s += int32_t(x[(size_t(c) * H + iy) * W + ix]) *
                   int32_t(w[((size_t(oc) * C + c) * kh + ky) * kw + kx]);
            }
          }
        acc[(size_t(oc) * OH + oy) * OW + ox] = s;
      }
  return acc;
}

/**
 * Fast integer path: im2col + float GEMM. Every intermediate value is an
 * integer below 2^24, so float arithmetic is exact and the result equals the
 * reference INT32 path bit for bit. The caller guarantees
 * C*kh*kw * 127^2 < 2^24 (checked at conversion time).
 */
inline std::vector<int32_t> int8_conv2d(const std::vector<int8_t>& x, int C, int H, int W,
                                        const std::vector<int8_t>& w, int OC, int kh, int kw,
                                        int pad) {
  const int OH = H + 2 * pad - kh + 1, OW = W + 2 * pad - kw + 1;
  const int K = C * kh * kw;
  const int64_t M = int64_t(OH) * OW;
  std::vector<int8_t> col(size_t(M) * K);
  qdetail::im2col_i8(x.data(), C, H, W, kh, kw, pad, OH, OW, col.data());
  std::vector<float> colf(col.begin(), col.end());
  std::vector<float> wf(w.begin(), w.end());
  std::vector<float> out(size_t(M) * OC);
  {
    CMapMat A(colf.data(), M, K), B(wf.data(), OC, K);
    MapMat O(out.data(), M, OC);
    O.noalias() = A * B.transpose();
  }
  std::vector<int32_t> acc(size_t(OC) * M);
  for (int oc = 0; oc < OC; ++oc)
    for (int64_t i = 0; i < M; ++i)
      acc[size_t(oc) * M + i] = static_cast<int32_t>(std::lrintf(out[size_t(i) * OC + oc]));
  return acc;
}

/// 256-entry INT8->INT8 activation table; index is q + 128.
inline std::array<int8_t, 256> build_silu_lut(double in_scale, double out_scale) {
  std::array<int8_t, 256> lut{};
  for (int q = -128; q <= 127; ++q) {
    const double x = double(q) * in_scale;
    const double y = x / (1.0 + std::exp(-x));
    lut[size_t(q + 128)] = static_cast<int8_t>(std::clamp(rne(y / out_scale), -127, 127));
  }
  return lut;
}

inline void int8_maxpool2x2(std::vector<int8_t>& x, int C, int& H, int& W) {
  const int OH = H / 2, OW = W / 2;
  std::vector<int8_t> y(size_t(C) * OH * OW);
  for (int c = 0; c < C; ++c)
    for (int oy = 0; oy < OH; ++oy)
      for (int ox = 0; ox < OW; ++ox) {
        const int8_t* p = x.data() + size_t(c) * H * W;
        int8_t m = p[(oy * 2) * W + ox * 2];
        m = std::max(m, p[(oy * 2) * W + ox * 2 + 1]);
        m = std::max(m, p[(oy * 2 + 1) * W + ox * 2]);
        m = std::max(m, p[(oy * 2 + 1) * W + ox * 2 + 1]);
        y[(size_t(c) * OH + oy) * OW + ox] = m;
      }
  x = std::move(y);
  H = OH;
  W = OW;
}

// ---------------------------------------------------------------------------
// Calibration over a model
// ---------------------------------------------------------------------------

using StatsMap = std::map<std::string, CalibrationStats>;

namespace qdetail {

struct RangeObserver final : ActivationObserver {
  StatsMap* stats;
  void observe(const std::string& site, const float* data, int64_t n) override {
    (*stats)[site].observe_range(data, n);
  }
};

struct HistObserver final : ActivationObserver {
  StatsMap* stats;
  void observe(const std::string& site, const float* data, int64_t n) override {
    stats->at(site).observe_histogram(data, n);
  }
};

}  // namespace qdetail

/**
 * Run FP32 forward passes over the calibration images and collect per-site
 * ranges. Images are processed one at a time, so the statistics are exactly
 * the merge of per-image statistics in any order. The percentile policy adds
 * a second pass to fill histograms over the measured range.
 */
inline StatsMap calibrate(const DetectorModel& model, const Dataset& ds,
                          const std::vector<int>& calib_ids, RangePolicy policy) {
  if (calib_ids.empty()) throw CalibrationError("calibrate: empty calibration set");
  StatsMap stats;
  qdetail::RangeObserver range_obs;
  range_obs.stats = &stats;
  for (int id : calib_ids) {
    auto batch = make_batch(ds, {id});
    model.forward(nullptr, batch, &range_obs);
  }
  if (policy == RangePolicy::percentile_999) {
    for (auto& [_, s] : stats) s.prepare_histogram();
    qdetail::HistObserver hist_obs;
    hist_obs.stats = &stats;
    for (int id : calib_ids) {
      auto batch = make_batch(ds, {id});
      model.forward(nullptr, batch, &hist_obs);
    }
  }
  return stats;
}

// ---------------------------------------------------------------------------
// Quantized model
// ---------------------------------------------------------------------------

struct QuantLayer {
  std::string name;
  int in_c = 0, out_c = 0, k = 1, pad = 0;
  bool act = false, pool = false;
  bool quantized = true;
  // integer path
  std::vector<int8_t> w_q;
  std::vector<double> w_scale;   // size 1 (per-tensor) or out_c (per-channel)
  std::vector<int32_t> bias_q;   // scale s_w * s_x
  double in_scale = 1.0, pre_scale = 1.0, post_scale = 1.0;
  std::array<int8_t, 256> silu_lut{};
  bool fast_gemm_ok = true;
  // float fallback (head kept in FP32 when quantize_head is off)
  std::vector<float> w_f, b_f;

  double wscale(int oc) const { return w_scale.size() == 1 ? w_scale[0] : w_scale[size_t(oc)]; }
};

struct ConversionRow {
  std::string layer;
  double weight_scale = 0.0;     // per-channel: max over channels
  double activation_scale = 0.0; // post-activation scale (0 for the final layer)
  double max_weight_error = 0.0; // max |dequant(q_w) - w|
};

struct ConversionReport {
  std::vector<ConversionRow> rows;
  void write_csv(const std::filesystem::path& path) const {
    std::ofstream os(path);
    os << "layer,weight_scale,activation_scale,max_weight_error\n";
    for (const auto& r : rows) {
      char buf[256];
      std::snprintf(buf, sizeof buf, "%s,%.12g,%.12g,%.12g\n", r.layer.c_str(), r.weight_scale,
                    r.activation_scale, r.max_weight_error);
      os << buf;
    }
  }
};

struct QuantOptions {
  RangePolicy policy = RangePolicy::minmax;
  bool per_channel = false;
  bool quantize_head = true;
};

struct QuantModel {
  DetectorConfig cfg;
  std::vector<QuantLayer> layers;
  double input_scale = 1.0;
  QuantOptions options;
  uint64_t config_digest = 0;

  RawPrediction forward(const TensorPtr& image) const;
  int64_t weight_bytes() const {
    int64_t n = 0;
    for (const auto& L : layers) n += int64_t(L.quantized ? L.w_q.size() : L.w_f.size() * 4);
    return n;
  }
};

/**
 * Post-training conversion: per-tensor (or per-channel) symmetric weight
 * quantization, INT32 biases at scale s_w*s_x, activation scales from the
 * calibration statistics. Layers run INT8 x INT8 -> INT32 with
 * requantization into each SiLU's input scale; SiLU itself becomes a
 * 256-entry INT8 table.
 */
inline QuantModel convert(const DetectorModel& model, const StatsMap& stats,
                          const QuantOptions& opt = {}) {
  QuantModel qm;
  qm.cfg = model.cfg;
  qm.options = opt;
  qm.config_digest = model.cfg.digest();
  auto need = [&](const std::string& site) -> const CalibrationStats& {
    auto it = stats.find(site);
    if (it == stats.end()) throw ConversionError("missing calibration stats for site '" + site + "'");
    return it->second;
  };
  qm.input_scale = derive_scale(need("input"), opt.policy).scale;

  double carry_scale = qm.input_scale;  // scale of the current INT8 activation
  const size_t head_start = model.layout.size() - 2;
  for (size_t i = 0; i < model.layout.size(); ++i) {
    const auto& def = model.layout[i];
    const auto& w = *model.weights[i];
    const auto& b = *model.biases[i];
    QuantLayer L;
    L.name = def.name;
    L.in_c = def.in_c;
    L.out_c = def.out_c;
    L.k = def.k;
    L.pad = def.pad;
    L.act = def.act;
    L.pool = def.pool;
    L.quantized = opt.quantize_head || i < head_start;
    if (!L.quantized) {
      L.w_f = w.data;
      L.b_f = b.data;
      qm.layers.push_back(std::move(L));
      continue;
    }

    const int64_t terms = int64_t(def.in_c) * def.k * def.k;
    if (terms > (int64_t(1) << 31) / (127 * 127))
      throw ConversionError("layer '" + def.name + "' could overflow the INT32 accumulator");

    const int64_t per_oc = int64_t(def.in_c) * def.k * def.k;
    L.in_scale = carry_scale;
    const int n_groups = opt.per_channel ? def.out_c : 1;
    L.w_scale.assign(size_t(n_groups), 1.0);
    for (int g = 0; g < n_groups; ++g) {
      double amax = 0.0;
      const int64_t lo = opt.per_channel ? g * per_oc : 0;
      const int64_t hi = opt.per_channel ? (g + 1) * per_oc : w.numel();
      for (int64_t j = lo; j < hi; ++j) amax = std::max(amax, std::abs(double(w.data[size_t(j)])));
      L.w_scale[size_t(g)] = amax > 0.0 ? amax / 127.0 : 1.0;
    }
    L.w_q.resize(size_t(w.numel()));
    for (int oc = 0; oc < def.out_c; ++oc) {
      const double s = L.wscale(oc);
      for (int64_t j = oc * per_oc; j < (oc + 1) * per_oc; ++j)
        L.w_q[size_t(j)] = quantize_value(w.data[size_t(j)], s);
    }
    L.bias_q.resize(size_t(def.out_c));
    int64_t max_bias = 0;
    for (int oc = 0; oc < def.out_c; ++oc) {
      const double bscale = L.wscale(oc) * L.in_scale;
      const double q = std::nearbyint(double(b.data[size_t(oc)]) / bscale);
      if (std::abs(q) > double(std::numeric_limits<int32_t>::max()) / 2)
        throw ConversionError("layer '" + def.name + "' bias overflows the INT32 range");
      L.bias_q[size_t(oc)] = static_cast<int32_t>(q);
      max_bias = std::max(max_bias, int64_t(std::abs(q)));
    }
    // The float-GEMM shortcut is exact only while |acc| stays below 2^24.
    L.fast_gemm_ok = terms * 127 * 127 + max_bias < (int64_t(1) << 24);

    if (L.act) {
      L.pre_scale = derive_scale(need(def.name + ".pre"), opt.policy).scale;
      L.post_scale = derive_scale(need(def.name + ".post"), opt.policy).scale;
      L.silu_lut = build_silu_lut(L.pre_scale, L.post_scale);
      carry_scale = L.post_scale;
    }
    qm.layers.push_back(std::move(L));
  }
  return qm;
}

inline ConversionReport conversion_report(const DetectorModel& model, const QuantModel& qm) {
  ConversionReport rep;
  for (size_t i = 0; i < qm.layers.size(); ++i) {
    const auto& L = qm.layers[i];
    ConversionRow row;
    row.layer = L.name;
    if (L.quantized) {
      const auto& w = *model.weights[i];
      const int64_t per_oc = int64_t(L.in_c) * L.k * L.k;
      double max_err = 0.0, max_scale = 0.0;
      for (int oc = 0; oc < L.out_c; ++oc) {
        const double s = L.wscale(oc);
        max_scale = std::max(max_scale, s);
        for (int64_t j = oc * per_oc; j < (oc + 1) * per_oc; ++j)
          max_err = std::max(max_err,
                             std::abs(double(L.w_q[size_t(j)]) * s - double(w.data[size_t(j)])));
      }
      row.weight_scale = max_scale;
      row.max_weight_error = max_err;
      row.activation_scale = L.act ? L.post_scale : 0.0;
    }
    rep.rows.push_back(row);
  }
  return rep;
}

inline RawPrediction QuantModel::forward(const TensorPtr& image) const {
  if (image->shape.size() != 4 || image->shape[0] != 1 || image->shape[1] != 3 ||
      image->shape[2] != cfg.input_size || image->shape[3] != cfg.input_size)
    throw ShapeError("quantized forward expects [1,3," + std::to_string(cfg.input_size) + "," +
                     std::to_string(cfg.input_size) + "], got " + shape_str(image->shape));
  int H = cfg.input_size, W = cfg.input_size;
  int C = 3;
  std::vector<int8_t> xq(image->data.size());
  for (size_t i = 0; i < xq.size(); ++i) xq[i] = quantize_value(image->data[i], input_scale);
  double cur_scale = input_scale;  // scale of the live INT8 activation

  TensorPtr xf;       // set once the pipeline drops to float (unquantized head)
  TensorPtr final_out;  // final head output, float
  for (size_t li = 0; li < layers.size(); ++li) {
    const auto& L = layers[li];
    const bool last = li + 1 == layers.size();
    if (!L.quantized && !xf) {
      // Dequantize once and stay in float until the end.
      xf = make_tensor({1, C, H, W});
      for (size_t i = 0; i < xq.size(); ++i) xf->data[i] = float(double(xq[i]) * cur_scale);
    }
    if (xf) {
      auto w = make_tensor({L.out_c, L.in_c, L.k, L.k}, L.w_f);
      auto b = make_tensor({L.out_c}, L.b_f);
      xf = conv2d(nullptr, xf, w, b, 1, L.pad);
      if (L.act) xf = silu(nullptr, xf);
      if (L.pool) xf = maxpool2x2(nullptr, xf);
      C = L.out_c;
      H = xf->shape[2];
      W = xf->shape[3];
      if (last) final_out = xf;
      continue;
    }

    auto acc = L.fast_gemm_ok
                   ? int8_conv2d(xq, C, H, W, L.w_q, L.out_c, L.k, L.k, L.pad)
                   : int8_conv2d_ref(xq, C, H, W, L.w_q, L.out_c, L.k, L.k, L.pad);
    const int OH = H + 2 * L.pad - L.k + 1, OW = W + 2 * L.pad - L.k + 1;
    const int64_t plane = int64_t(OH) * OW;
    for (int oc = 0; oc < L.out_c; ++oc)
      for (int64_t i = 0; i < plane; ++i) acc[size_t(oc) * plane + i] += L.bias_q[size_t(oc)];

    if (last || !L.act) {
      // Final head output: dequantize the INT32 accumulator directly.
      auto out = make_tensor({1, L.out_c, OH, OW});
      for (int oc = 0; oc < L.out_c; ++oc) {
        const double s = L.wscale(oc) * L.in_scale;
        for (int64_t i = 0; i < plane; ++i)
          out->data[size_t(oc) * plane + i] = float(double(acc[size_t(oc) * plane + i]) * s);
      }
      C = L.out_c;
      H = OH;
      W = OW;
      final_out = out;
      if (!last) {  // unusual layout; continue in float
        xf = out;
        continue;
      }
      break;
    }

    // Requantize into the SiLU input scale, apply the table, pool.
    std::vector<int8_t> next(size_t(L.out_c) * plane);
    for (int oc = 0; oc < L.out_c; ++oc) {
      const double mult = L.wscale(oc) * L.in_scale / L.pre_scale;
      for (int64_t i = 0; i < plane; ++i) {
        const int32_t q =
            std::clamp(rne(double(acc[size_t(oc) * plane + i]) * mult), -127, 127);
        next[size_t(oc) * plane + i] = L.silu_lut[size_t(q + 128)];
      }
    }
    C = L.out_c;
    H = OH;
    W = OW;
    if (L.pool) int8_maxpool2x2(next, C, H, W);
    xq = std::move(next);
    cur_scale = L.post_scale;
  }

  const int Cn = cfg.num_classes;
  RawPrediction pred;
  pred.class_logits = slice_channels(nullptr, final_out, 0, Cn);
  pred.objectness = slice_channels(nullptr, final_out, Cn, Cn + 1);
  pred.box_deltas = slice_channels(nullptr, final_out, Cn + 1, Cn + 5);
  pred.input_size = cfg.input_size;
  return pred;
}

// ---------------------------------------------------------------------------
// Quantized checkpoint
// ---------------------------------------------------------------------------

inline constexpr char kQuantMagic[8] = {'K', 'D', 'Q', 'Q', 'N', 'T', '\0', '\0'};
inline constexpr uint32_t kQuantVersion = 1;

inline void save_quant_model(const QuantModel& qm, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open quantized checkpoint for writing: " + path.string());
  io::write_bytes(os, kQuantMagic, 8);
  io::write_le<uint32_t>(os, kQuantVersion);
  io::write_le<uint64_t>(os, qm.config_digest);
  io::write_string(os, qm.cfg.canonical_string());
  io::write_le<int32_t>(os, qm.cfg.input_size);
  io::write_le<int32_t>(os, qm.cfg.grid);
  io::write_le<int32_t>(os, qm.cfg.num_classes);
  io::write_f32_le(os, qm.cfg.width_mult);
  io::write_le<int32_t>(os, qm.cfg.depth);
  io::write_le<int32_t>(os, qm.cfg.head_channels);
  io::write_le<uint8_t>(os, qm.options.policy == RangePolicy::minmax ? 0 : 1);
  io::write_le<uint8_t>(os, qm.options.per_channel ? 1 : 0);
  io::write_le<uint8_t>(os, qm.options.quantize_head ? 1 : 0);
  io::write_f64_le(os, qm.input_scale);
  io::write_le<uint32_t>(os, static_cast<uint32_t>(qm.layers.size()));
  for (const auto& L : qm.layers) {
    io::write_string(os, L.name);
    io::write_le<int32_t>(os, L.in_c);
    io::write_le<int32_t>(os, L.out_c);
    io::write_le<int32_t>(os, L.k);
    io::write_le<int32_t>(os, L.pad);
    io::write_le<uint8_t>(os, L.act);
    io::write_le<uint8_t>(os, L.pool);
    io::write_le<uint8_t>(os, L.quantized);
    if (L.quantized) {
      io::write_le<uint32_t>(os, static_cast<uint32_t>(L.w_scale.size()));
      for (double s : L.w_scale) io::write_f64_le(os, s);
      io::write_le<uint32_t>(os, static_cast<uint32_t>(L.w_q.size()));
      io::write_bytes(os, L.w_q.data(), L.w_q.size());
      for (int32_t b : L.bias_q) io::write_le<int32_t>(os, b);
      io::write_f64_le(os, L.in_scale);
      io::write_f64_le(os, L.pre_scale);
      io::write_f64_le(os, L.post_scale);
    } else {
      io::write_le<uint32_t>(os, static_cast<uint32_t>(L.w_f.size()));
      for (float v : L.w_f) io::write_f32_le(os, v);
      io::write_le<uint32_t>(os, static_cast<uint32_t>(L.b_f.size()));
      for (float v : L.b_f) io::write_f32_le(os, v);
    }
  }
  if (!os) throw FormatError("short write on quantized checkpoint: " + path.string());
}

inline QuantModel load_quant_model(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open quantized checkpoint: " + path.string());
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kQuantMagic, 8) != 0)
    throw FormatError("not a quantized checkpoint: " + path.string());
  uint32_t version = 0;
  if (!io::read_le(is, version) || version != kQuantVersion)
    throw FormatError("unsupported quantized checkpoint version in " + path.string());
  QuantModel qm;
  std::string canon;
  uint8_t pol = 0, pchan = 0, qhead = 0;
  uint32_t n_layers = 0;
  if (!io::read_le(is, qm.config_digest) || !io::read_string(is, canon) ||
      !io::read_le(is, qm.cfg.input_size) || !io::read_le(is, qm.cfg.grid) ||
      !io::read_le(is, qm.cfg.num_classes) || !io::read_f32_le(is, qm.cfg.width_mult) ||
      !io::read_le(is, qm.cfg.depth) || !io::read_le(is, qm.cfg.head_channels) ||
      !io::read_le(is, pol) || !io::read_le(is, pchan) || !io::read_le(is, qhead) ||
      !io::read_f64_le(is, qm.input_scale) || !io::read_le(is, n_layers))
    throw FormatError("truncated quantized checkpoint header: " + path.string());
  qm.options.policy = pol == 0 ? RangePolicy::minmax : RangePolicy::percentile_999;
  qm.options.per_channel = pchan != 0;
  qm.options.quantize_head = qhead != 0;
  qm.layers.resize(n_layers);
  for (auto& L : qm.layers) {
    uint8_t act = 0, pool = 0, quant = 0;
    uint32_t n = 0;
    if (!io::read_string(is, L.name) || !io::read_le(is, L.in_c) || !io::read_le(is, L.out_c) ||
        !io::read_le(is, L.k) || !io::read_le(is, L.pad) || !io::read_le(is, act) ||
        !io::read_le(is, pool) || !io::read_le(is, quant))
      throw FormatError("truncated quantized layer header: " + path.string());
    L.act = act;
    L.pool = pool;
    L.quantized = quant;
    if (L.quantized) {
      if (!io::read_le(is, n)) throw FormatError("truncated scales: " + path.string());
      L.w_scale.resize(n);
      for (auto& s : L.w_scale)
        if (!io::read_f64_le(is, s)) throw FormatError("truncated scales: " + path.string());
      if (!io::read_le(is, n)) throw FormatError("truncated weights: " + path.string());
      L.w_q.resize(n);
      if (!is.read(reinterpret_cast<char*>(L.w_q.data()), n))
        throw FormatError("truncated weights: " + path.string());
      L.bias_q.resize(size_t(L.out_c));
      for (auto& b : L.bias_q)
        if (!io::read_le(is, b)) throw FormatError("truncated biases: " + path.string());
      if (!io::read_f64_le(is, L.in_scale) || !io::read_f64_le(is, L.pre_scale) ||
          !io::read_f64_le(is, L.post_scale))
        throw FormatError("truncated activation scales: " + path.string());
      if (L.act) L.silu_lut = build_silu_lut(L.pre_scale, L.post_scale);
      const int64_t terms = int64_t(L.in_c) * L.k * L.k;
      int64_t max_bias = 0;
      for (int32_t b : L.bias_q) max_bias = std::max(max_bias, int64_t(std::abs(b)));
      L.fast_gemm_ok = terms * 127 * 127 + max_bias < (int64_t(1) << 24);
    } else {
      if (!io::read_le(is, n)) throw FormatError("truncated float weights: " + path.string());
      L.w_f.resize(n);
      for (auto& v : L.w_f)
        if (!io::read_f32_le(is, v)) throw FormatError("truncated float weights: " + path.string());
      if (!io::read_le(is, n)) throw FormatError("truncated float biases: " + path.string());
      L.b_f.resize(n);
      for (auto& v : L.b_f)
        if (!io::read_f32_le(is, v)) throw FormatError("truncated float biases: " + path.string());
    }
  }
  return qm;
}

}  // namespace kdq
