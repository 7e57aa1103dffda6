// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>
#include <chrono>

#include "fixtures.hpp"
#include "kdq/losses.hpp"
#include "kdq/random.hpp"
#include "oracle_detector.hpp"

using namespace kdq;

namespace {

RawPrediction perfect_prediction(const TargetGrids& t) {
  const int G = t.grid, C = t.num_classes;
  RawPrediction p;
  p.class_logits = make_tensor({1, C, G, G}, 0.0f);
  p.objectness = make_tensor({1, 1, G, G}, -14.0f);
  p.box_deltas = make_tensor({1, 4, G, G}, 0.0f);
  p.input_size = t.input_size;
  const int64_t plane = int64_t(G) * G;
  for (int64_t at = 0; at < plane; ++at) {
    if (t.objectness[size_t(at)] <= 0.5f) continue;
    p.objectness->data[at] = 14.0f;
    for (int c = 0; c < C; ++c)
      p.class_logits->data[c * plane + at] = (c == t.cls[size_t(at)]) ? 14.0f : -14.0f;
    for (int k = 0; k < 4; ++k) p.box_deltas->data[k * plane + at] = t.cell_delta[size_t(at)][k];
  }
  return p;
}

RawPrediction random_prediction(int G, int C, int input_size, uint64_t seed) {
  Pcg32 rng(seed);
  RawPrediction p;
  p.class_logits = make_tensor({1, C, G, G});
  p.objectness = make_tensor({1, 1, G, G});
  p.box_deltas = make_tensor({1, 4, G, G});
  p.input_size = input_size;
  for (auto& v : p.class_logits->data) v = rng.uniform_f(-3, 3);
  for (auto& v : p.objectness->data) v = rng.uniform_f(-3, 3);
  for (auto& v : p.box_deltas->data) v = rng.uniform_f(-1.5f, 1.5f);
  return p;
}

BatchTargets targets_for(const std::vector<GtBox>& boxes, const DetectorConfig& cfg) {
  return assemble_targets({encode_targets(boxes, cfg)});
}

}  // namespace

TEST_CASE("task loss saturates near zero on perfect predictions", "[losses]") {
  DetectorConfig cfg;
  auto t = targets_for({GtBox{10, 12, 30, 28, 1}, GtBox{40, 40, 56, 52, 0}}, cfg);
  auto pred = perfect_prediction({});  // placeholder replaced below
  // rebuild a perfect prediction from the encoded grids
  std::vector<TargetGrids> gs = {encode_targets({GtBox{10, 12, 30, 28, 1}, GtBox{40, 40, 56, 52, 0}}, cfg)};
  pred = perfect_prediction(gs[0]);
  auto lv = task_loss(nullptr, pred, t);
  REQUIRE(lv.value >= 0.0);
  REQUIRE(lv.value <= 1e-3);
}

TEST_CASE("task loss on an empty scene with confident negatives", "[losses]") {
  DetectorConfig cfg;
  auto t = targets_for({}, cfg);
  RawPrediction p;
  p.class_logits = make_tensor({1, 5, 8, 8}, 0.0f);
  p.objectness = make_tensor({1, 1, 8, 8}, -14.0f);
  p.box_deltas = make_tensor({1, 4, 8, 8}, 0.0f);
  p.input_size = 64;
  auto lv = task_loss(nullptr, p, t);
  REQUIRE(lv.value >= 0.0);
  REQUIRE(lv.value <= 1e-3);
}

TEST_CASE("task loss equals an independently assembled sum of sub-terms", "[losses]") {
  DetectorConfig cfg;
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    auto boxes = std::vector<GtBox>{GtBox{8, 8, 24, 20, 2}, GtBox{36, 30, 58, 46, 0}};
    auto t = targets_for(boxes, cfg);
    auto pred = random_prediction(8, 5, 64, seed);
    auto lv = task_loss(nullptr, pred, t);

    twin::DetOut p;
    p.cls = twin::to_ref(pred.class_logits);
    p.obj = twin::to_ref(pred.objectness);
    p.dlt = twin::to_ref(pred.box_deltas);
    const double expected = twin::task_loss(p, t, nullptr);
    REQUIRE(lv.value == Catch::Approx(expected).epsilon(1e-4));
  }
}

TEST_CASE("logit KD of identical logits is zero", "[losses]") {
  Pcg32 rng(3);
  auto z = make_tensor({4, 6});
  for (auto& v : z->data) v = rng.uniform_f(-4, 4);
  auto zt = make_tensor({4, 6}, z->data);
  for (double T : {1.0, 2.0, 10.0}) {
    auto lv = logit_kd_loss(nullptr, z, zt, T, KlDirection::student_first);
    REQUIRE(lv.value == 0.0);
  }
}

TEST_CASE("logit KD matches the closed form on a two-class pair", "[losses]") {
  auto zs = make_tensor({1, 2}, std::vector<float>{1.0f, 0.0f});
  auto zt = make_tensor({1, 2}, std::vector<float>{0.0f, 1.0f});
  // Expected value computed here from first principles in double precision:
  // q = softmax([1,0]), p = softmax([0,1]), KL(q || p) = q1 - q2 (log ratios
  // are exactly +-1).
  const double e = std::exp(1.0);
  const double q1 = e / (e + 1.0), q2 = 1.0 / (e + 1.0);
  const double expected = q1 * 1.0 + q2 * (-1.0);
  REQUIRE(expected == Catch::Approx(0.4621).margin(5e-5));
  auto lv = logit_kd_loss(nullptr, zs, zt, 1.0, KlDirection::student_first);
  REQUIRE(lv.value == Catch::Approx(expected).margin(1e-12));

  SECTION("teacher_first reverses the arguments") {
    auto rev = logit_kd_loss(nullptr, zs, zt, 1.0, KlDirection::teacher_first);
    // KL(p || q) with the same pair; by symmetry of this construction the
    // value is identical.
    REQUIRE(rev.value == Catch::Approx(expected).margin(1e-12));
    auto zs2 = make_tensor({1, 2}, std::vector<float>{2.0f, 0.0f});
    auto a = logit_kd_loss(nullptr, zs2, zt, 1.0, KlDirection::student_first);
    auto b = logit_kd_loss(nullptr, zs2, zt, 1.0, KlDirection::teacher_first);
    REQUIRE(a.value != Catch::Approx(b.value).margin(1e-6));
  }
}

TEST_CASE("temperature factor: two-path equality at T in {1,2,10}", "[losses]") {
  Pcg32 rng(17);
  auto zs = make_tensor({1, 5, 4, 4});
  auto zt = make_tensor({1, 5, 4, 4});
  for (auto& v : zs->data) v = rng.uniform_f(-5, 5);
  for (auto& v : zt->data) v = rng.uniform_f(-5, 5);
  for (double T : {1.0, 2.0, 10.0}) {
    auto lv = logit_kd_loss(nullptr, zs, zt, T, KlDirection::student_first);
    const double oracle =
        refd::kl_tempered(twin::to_ref(zs), twin::to_ref(zt), T, /*student_first=*/true);
    REQUIRE(std::abs(lv.value - oracle) <= 1e-9);
  }
}

TEST_CASE("logit KD rejects bad inputs", "[losses]") {
  auto zs = make_tensor({1, 4});
  auto zt = make_tensor({1, 4});
  REQUIRE_THROWS_AS(logit_kd_loss(nullptr, zs, zt, 0.0, KlDirection::student_first), ParamError);
  REQUIRE_THROWS_AS(logit_kd_loss(nullptr, zs, zt, -2.0, KlDirection::student_first), ParamError);
  auto bad = make_tensor({1, 5});
  REQUIRE_THROWS_AS(logit_kd_loss(nullptr, zs, bad, 1.0, KlDirection::student_first), ShapeError);
  auto hot = make_tensor({1, 4});
  hot->requires_grad = true;
  REQUIRE_THROWS_AS(logit_kd_loss(nullptr, zs, hot, 1.0, KlDirection::student_first),
                    ContractError);
}

TEST_CASE("logit KD is non-negative over a thousand random pairs", "[losses]") {
  Pcg32 rng(23);
  double min_seen = 1e30;
  for (int i = 0; i < 1000; ++i) {
    auto zs = make_tensor({2, 4});
    auto zt = make_tensor({2, 4});
    for (auto& v : zs->data) v = rng.uniform_f(-8, 8);
    for (auto& v : zt->data) v = rng.uniform_f(-8, 8);
    const double T = rng.uniform(0.5, 20.0);
    const auto dir = rng.below(2) ? KlDirection::student_first : KlDirection::teacher_first;
    auto lv = logit_kd_loss(nullptr, zs, zt, T, dir);
    min_seen = std::min(min_seen, lv.value);
  }
  REQUIRE(min_seen >= -1e-9);
}

TEST_CASE("pre-T^2 KL fades monotonically to zero at high temperature", "[losses]") {
  Pcg32 rng(31);
  auto zs = make_tensor({3, 5});
  auto zt = make_tensor({3, 5});
  for (auto& v : zs->data) v = rng.uniform_f(-3, 3);
  for (auto& v : zt->data) v = rng.uniform_f(-3, 3);
  const std::vector<double> temps = {1, 2, 5, 10, 50, 100};
  std::vector<double> pre_t2;
  for (double T : temps) {
    auto lv = logit_kd_loss(nullptr, zs, zt, T, KlDirection::student_first);
    pre_t2.push_back(lv.value / (T * T));
  }
  size_t peak = 0;
  for (size_t i = 1; i < pre_t2.size(); ++i)
    if (pre_t2[i] > pre_t2[peak]) peak = i;
  for (size_t i = std::max<size_t>(peak, 1); i + 1 < pre_t2.size(); ++i)
    REQUIRE(pre_t2[i + 1] < pre_t2[i]);
  REQUIRE(pre_t2.back() < 1e-3);
  REQUIRE(pre_t2.back() < pre_t2.front());
}

TEST_CASE("feature KD basics", "[losses]") {
  SECTION("equal features give zero") {
    auto s = make_tensor({1, 4, 2, 2}, 0.7f);
    auto t = make_tensor({1, 4, 2, 2}, 0.7f);
    auto lv = feature_kd_loss(nullptr, s, t, FeatureProjection{});
    REQUIRE(lv.value == 0.0);
  }
  SECTION("unit difference over four elements gives exactly one") {
    auto s = make_tensor({1, 1, 2, 2}, 2.0f);
    auto t = make_tensor({1, 1, 2, 2}, 1.0f);
    auto lv = feature_kd_loss(nullptr, s, t, FeatureProjection{});
    REQUIRE(lv.value == 1.0);
  }
  SECTION("random pair equals independent sum of squares over N") {
    Pcg32 rng(5);
    auto s = make_tensor({2, 3, 4, 4});
    auto t = make_tensor({2, 3, 4, 4});
    for (auto& v : s->data) v = rng.uniform_f(-2, 2);
    for (auto& v : t->data) v = rng.uniform_f(-2, 2);
    auto lv = feature_kd_loss(nullptr, s, t, FeatureProjection{});
    double acc = 0.0;
    for (size_t i = 0; i < s->data.size(); ++i) {
      const double d = double(s->data[i]) - double(t->data[i]);
      acc += d * d;
    }
    REQUIRE(lv.value == Catch::Approx(acc / double(s->numel())).epsilon(1e-12));
  }
  SECTION("spatial mismatch is a shape error") {
    auto s = make_tensor({1, 4, 2, 2});
    auto t = make_tensor({1, 4, 4, 4});
    REQUIRE_THROWS_AS(feature_kd_loss(nullptr, s, t, FeatureProjection{}), ShapeError);
  }
  SECTION("projection bridges channel mismatch and its parameters train") {
    auto proj = make_feature_projection(3, 5, 11);
    REQUIRE_FALSE(proj.identity());
    REQUIRE(proj.w->requires_grad);
    auto s = make_tensor({1, 3, 2, 2}, 0.4f);
    auto t = make_tensor({1, 5, 2, 2}, 0.1f);
    Graph g;
    auto lv = feature_kd_loss(&g, s, t, proj);
    g.backward(lv.node);
    REQUIRE(proj.w->has_grad());
    bool nonzero = false;
    for (float gv : proj.w->grad) nonzero |= gv != 0.0f;
    REQUIRE(nonzero);
    REQUIRE(make_feature_projection(4, 4, 1).identity());
  }
}

TEST_CASE("combined loss arithmetic", "[losses]") {
  auto mk = [](double v) { return LossValue{make_scalar(float(v)), v}; };
  SECTION("paper weights on (1,2,3) give 1.16") {
    auto out = combined_loss(nullptr, mk(1.0), mk(2.0), mk(3.0), KDConfig::form_a());
    REQUIRE(out.breakdown.total == Catch::Approx(1.16).margin(1e-12));
  }
  SECTION("alpha=1, beta=gamma=0 reduces exactly to the task loss") {
    KDConfig cfg;
    cfg.alpha = 1.0;
    cfg.beta = 0.0;
    cfg.gamma = 0.0;
    auto out = combined_loss(nullptr, mk(0.731058), mk(2.0), mk(3.0), cfg);
    REQUIRE(out.breakdown.total == 0.731058);  // exact
  }
  SECTION("Form B on (1,1,1) gives 1.32") {
    auto out = combined_loss(nullptr, mk(1.0), mk(1.0), mk(1.0), KDConfig::form_b());
    REQUIRE(out.breakdown.total == Catch::Approx(1.32).margin(1e-12));
  }
  SECTION("breakdown identity holds to 1e-9 on random components") {
    Pcg32 rng(9);
    for (int i = 0; i < 100; ++i) {
      KDConfig cfg;
      cfg.alpha = rng.uniform(0, 1);
      cfg.beta = rng.uniform(0, 1);
      cfg.gamma = rng.uniform(0, 1);
      auto out = combined_loss(nullptr, mk(rng.uniform(0, 5)), mk(rng.uniform(0, 5)),
                               mk(rng.uniform(0, 5)), cfg);
      const double rhs = cfg.alpha * out.breakdown.task + cfg.beta * out.breakdown.logit_kd +
                         cfg.gamma * out.breakdown.feature_kd;
      REQUIRE(std::abs(out.breakdown.total - rhs) <= 1e-9);
    }
  }
  SECTION("KDConfig presets match the published hyperparameters") {
    const auto a = KDConfig::form_a();
    REQUIRE(a.alpha == 0.5);
    REQUIRE(a.beta == 0.3);
    REQUIRE(a.gamma == 0.02);
    REQUIRE(a.temperature == 10.0);
    REQUIRE(a.kl_direction == KlDirection::student_first);
    REQUIRE_FALSE(a.foreground_only_logit_kd);
    const auto b = KDConfig::form_b();
    REQUIRE(b.alpha == 1.0);
    REQUIRE(b.beta == a.beta);
    REQUIRE(b.gamma == a.gamma);
    REQUIRE(b.temperature == a.temperature);
  }
}

TEST_CASE("teacher stays frozen through a full KD backward", "[losses]") {
  auto f = fixtures::make_micro_kd(21);
  Graph g;
  auto out = fixtures::run_kd_loss(&g, f);
  g.backward(out.node);
  for (const auto& p : f.teacher.parameters()) {
    REQUIRE_FALSE(p->requires_grad);
    REQUIRE_FALSE(p->has_grad());  // grad slot never allocated
  }
  bool student_has_grads = true;
  for (const auto& p : f.student.parameters()) student_has_grads &= p->has_grad();
  REQUIRE(student_has_grads);
}

TEST_CASE("combined KD gradient matches finite differences on a micro model",
          "[losses][fd]") {
  // Central differences at step 1e-3 approximate the gradient only where the
  // objective is locally smooth. Each coordinate's FD interval is checked
  // against the twin's selection trace (pool argmax, min/max branches); the
  // few coordinates whose perturbation flips a selection are excluded and
  // counted, every other coordinate must match within 1e-4.
  const auto t0 = std::chrono::steady_clock::now();
  const double h = 1e-3;
  auto f = fixtures::make_micro_kd(104);
  twin::KdTwinSetup tw;
  tw.s_layout = f.student.layout;
  tw.images = twin::to_ref(f.images);
  tw.targets = f.targets;
  tw.kd = f.kd;
  tw.has_projection = !f.proj.identity();
  std::vector<refd::DT> tparams;
  for (size_t i = 0; i < f.teacher.layout.size(); ++i) {
    tparams.push_back(twin::to_ref(f.teacher.weights[i]));
    tparams.push_back(twin::to_ref(f.teacher.biases[i]));
  }
  tw.teacher_out =
      twin::forward(f.teacher.layout, tparams, tw.images, f.teacher.cfg.num_classes, nullptr);

  std::vector<refd::DT> params;
  for (size_t i = 0; i < f.student.layout.size(); ++i) {
    params.push_back(twin::to_ref(f.student.weights[i]));
    params.push_back(twin::to_ref(f.student.biases[i]));
  }
  if (tw.has_projection) {
    params.push_back(twin::to_ref(f.proj.w));
    params.push_back(twin::to_ref(f.proj.b));
  }

  Graph g;
  auto out = fixtures::run_kd_loss(&g, f);
  g.backward(out.node);
  auto live = f.trainable_params();
  int64_t n_params = 0;
  for (const auto& p : live) n_params += p->numel();
  REQUIRE(n_params <= 5000);
  double gmax = 0.0;
  for (const auto& p : live)
    for (float gv : p->grad) gmax = std::max(gmax, double(std::abs(gv)));
  REQUIRE(gmax > 0.0);

  double worst = 0.0;
  int64_t crossings = 0, compared = 0;
  for (size_t i = 0; i < live.size(); ++i) {
    for (size_t j = 0; j < params[i].v.size(); ++j) {
      const double keep = params[i].v[j];
      twin::SelectionTrace tp, tm;
      params[i].v[j] = keep + h;
      const double fp = tw.total_loss(params, &tp);
      params[i].v[j] = keep - h;
      const double fm = tw.total_loss(params, &tm);
      params[i].v[j] = keep;
      if (!(tp == tm)) {
        ++crossings;  // kink inside the FD interval: derivative undefined here
        continue;
      }
      const double fd = (fp - fm) / (2 * h);
      const double ad = live[i]->grad[j];
      worst = std::max(worst,
                       std::abs(ad - fd) / std::max({std::abs(ad), std::abs(fd), 0.01 * gmax}));
      ++compared;
    }
  }
  const double elapsed =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  INFO("params=" << n_params << " compared=" << compared << " kink-crossings=" << crossings
                 << " worst=" << worst << " (" << elapsed << " s)");
  REQUIRE(compared >= (n_params * 90) / 100);  // exclusions must stay rare
  REQUIRE(worst <= 1e-4);
  REQUIRE(elapsed < 60.0);
}
