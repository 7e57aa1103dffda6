// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include "kdq/dataset.hpp"
#include "kdq/detector.hpp"
#include "kdq/random.hpp"

using namespace kdq;

namespace {

DetectorConfig student_cfg() { return DetectorConfig{}; }
DetectorConfig teacher_cfg() {
  DetectorConfig c;
  c.width_mult = 2.0f;
  c.depth = 4;
  return c;
}

}  // namespace

TEST_CASE("teacher/student parameter ratio lands near 3.9x", "[detector]") {
  auto s = build_model(student_cfg(), 1);
  auto t = build_model(teacher_cfg(), 1);
  const double ratio = double(t.param_count()) / double(s.param_count());
  INFO("student=" << s.param_count() << " teacher=" << t.param_count() << " ratio=" << ratio);
  REQUIRE(ratio >= 3.9 * 0.9);
  REQUIRE(ratio <= 3.9 * 1.1);
}

TEST_CASE("identical config and seed build identical parameters", "[detector]") {
  auto a = build_model(student_cfg(), 42);
  auto b = build_model(student_cfg(), 42);
  for (size_t i = 0; i < a.weights.size(); ++i) {
    REQUIRE(a.weights[i]->data == b.weights[i]->data);
    REQUIRE(a.biases[i]->data == b.biases[i]->data);
  }
  auto c = build_model(student_cfg(), 43);
  bool any_diff = false;
  for (size_t i = 0; i < a.weights.size() && !any_diff; ++i)
    any_diff = a.weights[i]->data != c.weights[i]->data;
  REQUIRE(any_diff);
}

TEST_CASE("doubling width grows parameters superlinearly", "[detector]") {
  auto cfg1 = student_cfg();
  auto cfg2 = student_cfg();
  cfg2.width_mult = 2.0f;
  const auto n1 = build_model(cfg1, 1).param_count();
  const auto n2 = build_model(cfg2, 1).param_count();
  REQUIRE(double(n2) > 2.0 * double(n1));
}

TEST_CASE("invalid detector configs are rejected", "[detector]") {
  auto bad = student_cfg();
  bad.input_size = 60;  // not divisible by grid=8
  REQUIRE_THROWS_AS(build_model(bad, 1), ConfigError);
  bad = student_cfg();
  bad.grid = 0;
  REQUIRE_THROWS_AS(build_model(bad, 1), ConfigError);
  bad = student_cfg();
  bad.depth = 1;  // cannot reach 8x8 from 64 with stem + 1 pooled block
  REQUIRE_THROWS_AS(build_model(bad, 1), ConfigError);
}

TEST_CASE("forward shapes, finiteness, determinism", "[detector]") {
  auto m = build_model(student_cfg(), 7);
  SECTION("batch of two produces leading dim two") {
    auto x = make_tensor({2, 3, 64, 64}, 0.25f);
    auto out = m.forward(nullptr, x);
    REQUIRE(out.pred.class_logits->shape == std::vector<int>{2, 5, 8, 8});
    REQUIRE(out.pred.objectness->shape == std::vector<int>{2, 1, 8, 8});
    REQUIRE(out.pred.box_deltas->shape == std::vector<int>{2, 4, 8, 8});
    REQUIRE(out.feature->shape == std::vector<int>{2, m.cfg.trunk_channels(), 8, 8});
  }
  SECTION("all-zero image stays finite") {
    auto x = make_tensor({1, 3, 64, 64}, 0.0f);
    auto out = m.forward(nullptr, x);
    REQUIRE(out.pred.class_logits->all_finite());
    REQUIRE(out.pred.objectness->all_finite());
    REQUIRE(out.pred.box_deltas->all_finite());
  }
  SECTION("fixed seed and image give bit-identical outputs") {
    Pcg32 rng(5);
    auto x = make_tensor({1, 3, 64, 64});
    for (auto& v : x->data) v = rng.uniform_f(0.0f, 1.0f);
    auto o1 = m.forward(nullptr, x);
    auto o2 = m.forward(nullptr, x);
    REQUIRE(o1.pred.class_logits->data == o2.pred.class_logits->data);
    REQUIRE(o1.pred.box_deltas->data == o2.pred.box_deltas->data);
  }
  SECTION("wrong input size is a shape error") {
    auto x = make_tensor({1, 3, 32, 32});
    REQUIRE_THROWS_AS(m.forward(nullptr, x), ShapeError);
  }
}

namespace {

// Independent quadratic-scan NMS used as the oracle.
std::vector<Detection> nms_oracle(std::vector<Detection> dets, double thr) {
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    if (a.class_id != b.class_id) return a.class_id < b.class_id;
    if (a.y1 != b.y1) return a.y1 < b.y1;
    return a.x1 < b.x1;
  });
  std::vector<char> removed(dets.size(), 0);
  for (size_t i = 0; i < dets.size(); ++i) {
    if (removed[i]) continue;
    for (size_t j = i + 1; j < dets.size(); ++j) {
      if (removed[j] || dets[j].class_id != dets[i].class_id) continue;
      if (box_iou(dets[i], dets[j]) > thr) removed[j] = 1;
    }
  }
  std::vector<Detection> kept;
  for (size_t i = 0; i < dets.size(); ++i)
    if (!removed[i]) kept.push_back(dets[i]);
  return kept;
}

RawPrediction prediction_from_targets(const TargetGrids& t) {
  const int G = t.grid, C = t.num_classes;
  RawPrediction p;
  p.class_logits = make_tensor({1, C, G, G}, 0.0f);
  p.objectness = make_tensor({1, 1, G, G}, -12.0f);
  p.box_deltas = make_tensor({1, 4, G, G}, 0.0f);
  p.input_size = t.input_size;
  const int64_t plane = int64_t(G) * G;
  for (int64_t at = 0; at < plane; ++at) {
    if (t.objectness[size_t(at)] <= 0.5f) continue;
    p.objectness->data[at] = 12.0f;
    p.class_logits->data[t.cls[size_t(at)] * plane + at] = 12.0f;
    for (int k = 0; k < 4; ++k) p.box_deltas->data[k * plane + at] = t.cell_delta[size_t(at)][k];
  }
  return p;
}

}  // namespace

TEST_CASE("decode basics", "[detector]") {
  SECTION("hopeless objectness yields an empty list") {
    RawPrediction p;
    p.class_logits = make_tensor({1, 5, 8, 8}, 0.0f);
    p.objectness = make_tensor({1, 1, 8, 8}, -1e6f);
    p.box_deltas = make_tensor({1, 4, 8, 8}, 0.0f);
    p.input_size = 64;
    REQUIRE(decode(p, 0, 0.25, 0.7).empty());
  }
  SECTION("NMS keeps the higher-confidence duplicate") {
    std::vector<Detection> dets = {{10, 10, 20, 20, 1, 0.9f}, {10, 10, 20, 20, 1, 0.8f}};
    auto kept = nms(dets, 0.5);
    REQUIRE(kept.size() == 1);
    REQUIRE(kept[0].confidence == 0.9f);
  }
  SECTION("thresholds outside [0,1] rejected") {
    RawPrediction p;
    p.class_logits = make_tensor({1, 5, 8, 8});
    p.objectness = make_tensor({1, 1, 8, 8});
    p.box_deltas = make_tensor({1, 4, 8, 8});
    p.input_size = 64;
    REQUIRE_THROWS_AS(decode(p, 0, -0.1, 0.7), ParamError);
    REQUIRE_THROWS_AS(decode(p, 0, 0.25, 1.5), ParamError);
  }
}

TEST_CASE("NMS matches the exhaustive-suppression oracle", "[detector]") {
  Pcg32 rng(99);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 3 + int(rng.below(6));
    std::vector<Detection> dets;
    for (int i = 0; i < n; ++i) {
      const float x = rng.uniform_f(0, 40), y = rng.uniform_f(0, 40);
      const float w = rng.uniform_f(5, 20), h = rng.uniform_f(5, 20);
      dets.push_back({x, y, x + w, y + h, int(rng.below(2)), rng.uniform_f(0.05f, 1.0f)});
    }
    const double thr = 0.3 + 0.4 * rng.uniform();
    auto a = nms(dets, thr);
    auto b = nms_oracle(dets, thr);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
      REQUIRE(a[i].confidence == b[i].confidence);
      REQUIRE(a[i].class_id == b[i].class_id);
      REQUIRE(a[i].x1 == b[i].x1);
    }
    // structural properties: output subset of input, no surviving same-class
    // pair above the threshold, sorted by descending confidence
    for (size_t i = 1; i < a.size(); ++i) REQUIRE(a[i - 1].confidence >= a[i].confidence);
    for (size_t i = 0; i < a.size(); ++i)
      for (size_t j = i + 1; j < a.size(); ++j)
        if (a[i].class_id == a[j].class_id) REQUIRE(box_iou(a[i], a[j]) <= thr);
  }
}

TEST_CASE("encode_targets geometry", "[detector]") {
  auto cfg = student_cfg();
  SECTION("a centered box lands in the center cell") {
    // center at (32.5, 32.5) -> cell (4,4) on the 8x8 grid
    auto t = encode_targets({GtBox{25, 25, 40, 40, 2}}, cfg);
    REQUIRE(t.positives() == 1);
    REQUIRE(t.objectness[size_t(4) * 8 + 4] == 1.0f);
    REQUIRE(t.cls[size_t(4) * 8 + 4] == 2);
  }
  SECTION("empty image encodes to all-zero targets") {
    auto t = encode_targets({}, cfg);
    REQUIRE(t.positives() == 0);
    for (float v : t.objectness) REQUIRE(v == 0.0f);
  }
  SECTION("two centers in one cell keep the larger box and count a warning") {
    auto t = encode_targets({GtBox{30, 30, 34, 34, 0}, GtBox{28, 28, 38, 38, 1}}, cfg);
    REQUIRE(t.positives() == 1);
    REQUIRE(t.collision_warnings == 1);
    REQUIRE(t.cls[size_t(4) * 8 + 4] == 1);  // larger-area box won
  }
  SECTION("out-of-bounds boxes are rejected") {
    REQUIRE_THROWS_AS(encode_targets({GtBox{-1, 0, 10, 10, 0}}, cfg), ParamError);
    REQUIRE_THROWS_AS(encode_targets({GtBox{0, 0, 70, 10, 0}}, cfg), ParamError);
  }
}

TEST_CASE("decode(encode(gt)) recovers ground truth boxes", "[detector]") {
  auto cfg = student_cfg();
  auto spec = SceneSpec::defaults();
  int scenes_checked = 0;
  for (int i = 0; i < 100; ++i) {
    auto im = generate_image(spec, 4242, i);
    auto t = encode_targets(im.boxes, cfg);
    auto pred = prediction_from_targets(t);
    auto dets = decode(pred, 0, 0.5, 0.7);
    REQUIRE(int(dets.size()) == t.positives());
    for (const auto& d : dets) {
      const int gx = std::min(7, int((d.x1 + d.x2) / 2 / 8.0f));
      const int gy = std::min(7, int((d.y1 + d.y2) / 2 / 8.0f));
      const auto& gt = t.cell_box[size_t(gy) * 8 + gx];
      REQUIRE(gt.class_id == d.class_id);
      const double tol = 1e-5 * cfg.input_size;
      REQUIRE(std::abs(d.x1 - gt.x1) <= tol);
      REQUIRE(std::abs(d.y1 - gt.y1) <= tol);
      REQUIRE(std::abs(d.x2 - gt.x2) <= tol);
      REQUIRE(std::abs(d.y2 - gt.y2) <= tol);
    }
    ++scenes_checked;
  }
  REQUIRE(scenes_checked == 100);
}
