// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "kdq/checkpoint.hpp"
#include "kdq/detector.hpp"
#include "kdq/random.hpp"

namespace kdq {

/**
 * Synthetic long-tail detection scenes: a handful of shape classes whose
 * instance frequencies follow a heavily skewed weight vector, rendered with
 * per-object color jitter and Gaussian pixel noise. Shapes are picked to be
 * separable but confusable (rectangle vs rounded rectangle, ellipse vs
 * triangle) so soft teacher distributions carry inter-class structure.
 */
enum class ShapeKind { rect, rounded_rect, ellipse, triangle, ring };

struct ShapeSpec {
  ShapeKind kind = ShapeKind::rect;
  float min_w = 8, max_w = 16, min_h = 8, max_h = 16;
  std::array<float, 3> base_color = {0.5f, 0.5f, 0.5f};
};

struct SceneSpec {
  int image_size = 64;
  std::vector<double> class_weights = {714, 91, 7, 5, 3};
  int min_objects = 1, max_objects = 3;
  std::vector<ShapeSpec> palette;  // one entry per class
  float noise_level = 0.08f;
  float color_jitter = 0.15f;
  int collision_grid = 8;  // object centers avoid sharing a cell of this grid

  static SceneSpec defaults() {
    SceneSpec s;
    s.palette = {
        {ShapeKind::rect, 16, 28, 10, 16, {0.55f, 0.55f, 0.62f}},          // vehicle
        {ShapeKind::ellipse, 4, 8, 10, 18, {0.62f, 0.50f, 0.45f}},         // pedestrian
        {ShapeKind::ring, 8, 14, 8, 14, {0.45f, 0.60f, 0.50f}},            // bicycle
        {ShapeKind::triangle, 5, 9, 10, 16, {0.60f, 0.55f, 0.42f}},        // rider
        {ShapeKind::rounded_rect, 10, 16, 6, 10, {0.52f, 0.50f, 0.60f}},   // motorcycle
    };
    return s;
  }

  int num_classes() const { return static_cast<int>(class_weights.size()); }

  void validate() const {
    if (image_size < 8) throw ConfigError("scene: image_size too small");
    if (class_weights.empty() || palette.size() != class_weights.size())
      throw ConfigError("scene: palette and class_weights must align");
    for (double w : class_weights)
      if (w <= 0.0) throw ConfigError("scene: class weights must be strictly positive");
    if (min_objects < 0 || max_objects < min_objects)
      throw ConfigError("scene: bad objects-per-image range");
    for (const auto& p : palette) {
      if (p.min_w <= 0 || p.min_h <= 0 || p.max_w < p.min_w || p.max_h < p.min_h)
        throw ConfigError("scene: bad shape size range");
      if (p.max_w >= image_size - 2 || p.max_h >= image_size - 2)
        throw ConfigError("scene: shape does not fit inside the image");
    }
  }

  std::string canonical_string() const {
    std::string s = "scene{size=" + std::to_string(image_size);
    for (size_t i = 0; i < class_weights.size(); ++i) {
      char buf[160];
      std::snprintf(buf, sizeof buf, ";c%zu:w=%.6g,k=%d,%.3g-%.3g,%.3g-%.3g", i, class_weights[i],
                    int(palette[i].kind), double(palette[i].min_w), double(palette[i].max_w),
                    double(palette[i].min_h), double(palette[i].max_h));
      s += buf;
    }
    char buf[120];
    std::snprintf(buf, sizeof buf, ";obj=%d-%d;noise=%.4g;jit=%.4g;grid=%d}", min_objects,
                  max_objects, double(noise_level), double(color_jitter), collision_grid);
    s += buf;
    return s;
  }
  uint64_t digest() const { return fnv1a64(canonical_string()); }
};

struct LabeledImage {
  int id = 0;
  std::vector<float> pixels;  // 3 * S * S, CHW, values in [0,1]
  std::vector<GtBox> boxes;
};

struct Dataset {
  SceneSpec spec;
  uint64_t seed = 0;
  std::vector<LabeledImage> images;

  std::vector<int64_t> per_class_counts() const {
    std::vector<int64_t> counts(spec.num_classes(), 0);
    for (const auto& im : images)
      for (const auto& b : im.boxes) ++counts[size_t(b.class_id)];
    return counts;
  }
};

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

namespace detail {

inline bool inside_shape(ShapeKind k, double dx, double dy, double hw, double hh) {
  switch (k) {
    case ShapeKind::rect:
      return std::abs(dx) <= hw && std::abs(dy) <= hh;
    case ShapeKind::rounded_rect: {
      const double r = 0.4 * std::min(hw, hh);
      const double qx = std::abs(dx) - (hw - r), qy = std::abs(dy) - (hh - r);
      if (qx <= 0.0 && std::abs(dy) <= hh) return std::abs(dx) <= hw;
      if (qy <= 0.0 && std::abs(dx) <= hw) return std::abs(dy) <= hh;
      return qx > 0.0 && qy > 0.0 && qx * qx + qy * qy <= r * r;
    }
    case ShapeKind::ellipse: {
      const double u = dx / hw, v = dy / hh;
      return u * u + v * v <= 1.0;
    }
    case ShapeKind::triangle: {
      // apex at the top, base at the bottom
      const double v = (dy + hh) / (2.0 * hh);
      return v >= 0.0 && v <= 1.0 && std::abs(dx) <= v * hw;
    }
    case ShapeKind::ring: {
      const double r2 = dx * dx + dy * dy;
      const double ro = std::min(hw, hh);
      const double ri = 0.55 * ro;
      return r2 <= ro * ro && r2 >= ri * ri;
    }
  }
  return false;
}

// 2x2 supersampled coverage in [0,1].
inline float coverage(ShapeKind k, double px, double py, double cx, double cy, double hw,
                      double hh) {
  int hits = 0;
  for (double oy : {0.25, 0.75})
    for (double ox : {0.25, 0.75})
      if (inside_shape(k, px + ox - cx, py + oy - cy, hw, hh)) ++hits;
  return float(hits) * 0.25f;
}

}  // namespace detail

/// Render one image deterministically from (spec, seed, id).
inline LabeledImage generate_image(const SceneSpec& spec, uint64_t seed, int id) {
  const int S = spec.image_size;
  Pcg32 rng(derive_seed(seed, "image", static_cast<uint64_t>(id)));
  LabeledImage im;
  im.id = id;
  im.pixels.assign(size_t(3) * S * S, 0.0f);

  // Background: flat base with a mild vertical ramp.
  const float base = rng.uniform_f(0.15f, 0.40f);
  const float ramp = rng.uniform_f(-0.05f, 0.05f);
  for (int ch = 0; ch < 3; ++ch) {
    const float chroma = rng.uniform_f(-0.03f, 0.03f);
    for (int y = 0; y < S; ++y) {
      const float v = base + chroma + ramp * (float(y) / S - 0.5f);
      float* row = im.pixels.data() + (size_t(ch) * S + y) * S;
      for (int x = 0; x < S; ++x) row[x] = v;
    }
  }

  // Class draw is multinomial over the (normalized) weight vector.
  const double wsum = std::accumulate(spec.class_weights.begin(), spec.class_weights.end(), 0.0);
  auto draw_class = [&] {
    double u = rng.uniform() * wsum;
    for (size_t c = 0; c < spec.class_weights.size(); ++c) {
      u -= spec.class_weights[c];
      if (u < 0.0) return static_cast<int>(c);
    }
    return spec.num_classes() - 1;
  };

  const int n_objects =
      spec.min_objects + int(rng.below(uint32_t(spec.max_objects - spec.min_objects + 1)));
  const double cell = double(S) / spec.collision_grid;
  std::vector<uint8_t> cell_used(size_t(spec.collision_grid) * spec.collision_grid, 0);

  for (int obj = 0; obj < n_objects; ++obj) {
    const int cls = draw_class();
    const auto& ps = spec.palette[size_t(cls)];
    const double hw = 0.5 * rng.uniform(ps.min_w, ps.max_w);
    const double hh = 0.5 * rng.uniform(ps.min_h, ps.max_h);
    double cx = 0, cy = 0;
    int cell_idx = -1;
    bool placed = false;
    for (int attempt = 0; attempt < 20 && !placed; ++attempt) {
      cx = rng.uniform(hw + 1.0, S - hw - 1.0);
      cy = rng.uniform(hh + 1.0, S - hh - 1.0);
      const int gx = std::min(spec.collision_grid - 1, int(cx / cell));
      const int gy = std::min(spec.collision_grid - 1, int(cy / cell));
      cell_idx = gy * spec.collision_grid + gx;
      if (cell_used[size_t(cell_idx)]) continue;
      bool overlaps = false;
      for (const auto& b : im.boxes)
        if (box_iou(float(cx - hw), float(cy - hh), float(cx + hw), float(cy + hh), b.x1, b.y1,
                    b.x2, b.y2) > 0.5)
          overlaps = true;
      if (!overlaps) placed = true;
    }
    if (cell_idx >= 0) cell_used[size_t(cell_idx)] = 1;

    std::array<float, 3> color;
    for (int ch = 0; ch < 3; ++ch)
      color[size_t(ch)] = std::clamp(
          ps.base_color[size_t(ch)] + rng.uniform_f(-spec.color_jitter, spec.color_jitter), 0.05f,
          0.95f);

    const int x_lo = std::max(0, int(cx - hw) - 1), x_hi = std::min(S - 1, int(cx + hw) + 1);
    const int y_lo = std::max(0, int(cy - hh) - 1), y_hi = std::min(S - 1, int(cy + hh) + 1);
    for (int y = y_lo; y <= y_hi; ++y)
      for (int x = x_lo; x <= x_hi; ++x) {
        const float a = detail::coverage(ps.kind, x, y, cx, cy, hw, hh);
        if (a <= 0.0f) continue;
        for (int ch = 0; ch < 3; ++ch) {
          float& px = im.pixels[(size_t(ch) * S + y) * S + x];
          px = (1.0f - a) * px + a * color[size_t(ch)];
        }
      }
    im.boxes.push_back(GtBox{float(cx - hw), float(cy - hh), float(cx + hw), float(cy + hh), cls});
  }

  // Pixel noise last; annotation geometry is exact.
  if (spec.noise_level > 0.0f) {
    for (auto& v : im.pixels)
      v = std::clamp(v + float(rng.normal()) * spec.noise_level, 0.0f, 1.0f);
  }
  return im;
}

/// Deterministic dataset generation; image i depends only on (seed, i), so
/// any parallel schedule produces identical bytes.
inline Dataset generate(const SceneSpec& spec, int count, uint64_t seed) {
  spec.validate();
  if (count < 1) throw ConfigError("generate: count must be >= 1");
  Dataset ds;
  ds.spec = spec;
  ds.seed = seed;
  ds.images.resize(size_t(count));
  for (int i = 0; i < count; ++i) ds.images[size_t(i)] = generate_image(spec, seed, i);
  return ds;
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

struct SplitManifest {
  std::vector<int> train, val, calibration;
  uint64_t generation_seed = 0;
  uint64_t calibration_seed = 0;

  void check_disjoint() const {
    auto overlap = [](std::vector<int> a, std::vector<int> b) {
      std::sort(a.begin(), a.end());
      std::sort(b.begin(), b.end());
      std::vector<int> inter;
      std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(inter));
      return !inter.empty();
    };
    if (overlap(train, val) || overlap(train, calibration) || overlap(val, calibration))
      throw ContractError("split manifest: train/val/calibration ids overlap");
  }

  nlohmann::json to_json() const {
    return {{"version", 1},
            {"generation_seed", generation_seed},
            {"calibration_seed", calibration_seed},
            {"splits",
             {{"train", train}, {"val", val}, {"calibration", calibration}}}};
  }

  static SplitManifest from_json(const nlohmann::json& j) {
    SplitManifest m;
    m.generation_seed = j.at("generation_seed").get<uint64_t>();
    m.calibration_seed = j.at("calibration_seed").get<uint64_t>();
    m.train = j.at("splits").at("train").get<std::vector<int>>();
    m.val = j.at("splits").at("val").get<std::vector<int>>();
    m.calibration = j.at("splits").at("calibration").get<std::vector<int>>();
    m.check_disjoint();
    return m;
  }
};

/**
 * Shuffle image ids and cut train/val off the front; the calibration split
 * is then sampled from the held-out remainder with its own seed, so it can
 * never leak into train or val.
 */
inline SplitManifest make_splits_counts(int n_images, int n_train, int n_val, int n_calib,
                                        uint64_t seed) {
  if (n_train < 0 || n_val < 0 || n_calib < 0 || n_train + n_val + n_calib > n_images)
    throw ConfigError("make_splits: split sizes exceed the dataset");
  std::vector<int> ids(static_cast<size_t>(n_images));
  std::iota(ids.begin(), ids.end(), 0);
  Pcg32 rng(derive_seed(seed, "splits"));
  rng.shuffle(ids);
  SplitManifest m;
  m.generation_seed = seed;
  m.train.assign(ids.begin(), ids.begin() + n_train);
  m.val.assign(ids.begin() + n_train, ids.begin() + n_train + n_val);
  std::vector<int> remainder(ids.begin() + n_train + n_val, ids.end());
  m.calibration_seed = derive_seed(seed, "calibration");
  Pcg32 crng(m.calibration_seed);
  crng.shuffle(remainder);
  m.calibration.assign(remainder.begin(), remainder.begin() + n_calib);
  m.check_disjoint();
  return m;
}

inline SplitManifest make_splits(int n_images, double train_frac, double val_frac,
                                 double calib_frac, uint64_t seed) {
  if (train_frac < 0 || val_frac < 0 || calib_frac < 0 ||
      train_frac + val_frac + calib_frac > 1.0 + 1e-12)
    throw ConfigError("make_splits: fractions must be non-negative and sum to <= 1");
  // floor() with a tiny nudge so exact fractions of n give exact counts
  auto count = [&](double f) { return static_cast<int>(f * n_images + 1e-9); };
  return make_splits_counts(n_images, count(train_frac), count(val_frac), count(calib_frac),
                            seed);
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline constexpr char kDatasetMagic[8] = {'K', 'D', 'Q', 'D', 'A', 'T', 'A', '\0'};
inline constexpr uint32_t kDatasetVersion = 1;

inline void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open dataset file for writing: " + path.string());
  io::write_bytes(os, kDatasetMagic, 8);
  io::write_le<uint32_t>(os, kDatasetVersion);
  io::write_le<uint64_t>(os, ds.spec.digest());
  io::write_le<uint64_t>(os, ds.seed);
  io::write_le<uint32_t>(os, static_cast<uint32_t>(ds.images.size()));
  io::write_le<uint16_t>(os, static_cast<uint16_t>(ds.spec.image_size));
  io::write_le<uint8_t>(os, 3);
  io::write_le<uint8_t>(os, static_cast<uint8_t>(ds.spec.num_classes()));
  for (const auto& im : ds.images) {
    io::write_le<uint32_t>(os, static_cast<uint32_t>(im.id));
    io::write_le<uint16_t>(os, static_cast<uint16_t>(im.boxes.size()));
    for (const auto& b : im.boxes) {
      io::write_f32_le(os, b.x1);
      io::write_f32_le(os, b.y1);
      io::write_f32_le(os, b.x2);
      io::write_f32_le(os, b.y2);
      io::write_le<uint16_t>(os, static_cast<uint16_t>(b.class_id));
    }
    for (float v : im.pixels) io::write_f32_le(os, v);
  }
  if (!os) throw FormatError("short write on dataset file: " + path.string());
}

/// Load a dataset (pixels and annotations only; `spec` keeps just the fields
/// stored in the header). The caller may verify spec_digest against its own.
inline Dataset load_dataset(const std::filesystem::path& path, uint64_t* spec_digest = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open dataset file: " + path.string());
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kDatasetMagic, 8) != 0)
    throw FormatError("not a dataset file: " + path.string());
  uint32_t version = 0, count = 0;
  uint64_t digest = 0, seed = 0;
  uint16_t size = 0;
  uint8_t channels = 0, classes = 0;
  if (!io::read_le(is, version) || version != kDatasetVersion)
    throw FormatError("unsupported dataset version in " + path.string());
  if (!io::read_le(is, digest) || !io::read_le(is, seed) || !io::read_le(is, count) ||
      !io::read_le(is, size) || !io::read_le(is, channels) || !io::read_le(is, classes) ||
      channels != 3)
    throw FormatError("corrupt dataset header in " + path.string());
  if (spec_digest) *spec_digest = digest;
  Dataset ds;
  ds.seed = seed;
  ds.spec.image_size = size;
  ds.spec.class_weights.assign(classes, 1.0);
  ds.spec.palette.assign(classes, ShapeSpec{});
  ds.images.resize(count);
  const size_t n_px = size_t(3) * size * size;
  for (auto& im : ds.images) {
    uint32_t id = 0;
    uint16_t n_ann = 0;
    if (!io::read_le(is, id) || !io::read_le(is, n_ann))
      throw FormatError("truncated dataset image header in " + path.string());
    im.id = static_cast<int>(id);
    im.boxes.resize(n_ann);
    for (auto& b : im.boxes) {
      uint16_t cid = 0;
      if (!io::read_f32_le(is, b.x1) || !io::read_f32_le(is, b.y1) || !io::read_f32_le(is, b.x2) ||
          !io::read_f32_le(is, b.y2) || !io::read_le(is, cid))
        throw FormatError("truncated annotation in " + path.string());
      b.class_id = cid;
    }
    im.pixels.resize(n_px);
    for (auto& v : im.pixels)
      if (!io::read_f32_le(is, v)) throw FormatError("truncated pixel data in " + path.string());
  }
  return ds;
}

/// Stack selected images into an NCHW batch tensor.
inline TensorPtr make_batch(const Dataset& ds, const std::vector<int>& ids) {
  if (ids.empty()) throw ContractError("make_batch: empty id list");
  const int S = ds.spec.image_size;
  auto t = make_tensor({static_cast<int>(ids.size()), 3, S, S});
  const size_t n_px = size_t(3) * S * S;
  for (size_t i = 0; i < ids.size(); ++i) {
    const auto& im = ds.images.at(size_t(ids[i]));
    std::copy_n(im.pixels.data(), n_px, t->data.data() + i * n_px);
  }
  return t;
}

}  // namespace kdq
