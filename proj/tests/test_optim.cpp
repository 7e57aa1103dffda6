// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include "kdq/optim.hpp"
#include "kdq/ops.hpp"
#include "kdq/random.hpp"

using namespace kdq;

TEST_CASE("adamw fixed point: zero grads, zero decay", "[optim]") {
  auto w = make_param("w", {3});
  w->data = {0.5f, -1.0f, 2.0f};
  const auto before = w->data;
  AdamW opt({w});
  opt.zero_grad();
  opt.step(0.1);
  REQUIRE(w->data == before);
}

TEST_CASE("adamw first step moves against the gradient", "[optim]") {
  auto w = make_param("w", {1});
  w->data = {1.0f};
  AdamW opt({w});
  w->ensure_grad();
  w->grad[0] = 1.0f;
  opt.step(0.01);
  REQUIRE(w->data[0] < 1.0f);
  REQUIRE(opt.step_count() == 1);
}

TEST_CASE("adamw requires populated gradients", "[optim]") {
  auto w = make_param("w", {2});
  AdamW opt({w});
  w->grad.clear();  // simulate a parameter that never saw backward
  REQUIRE_THROWS_AS(opt.step(0.01), ContractError);
}

TEST_CASE("ten adamw steps strictly decrease a convex quadratic", "[optim]") {
  // Direct-evaluation oracle: f(w) = sum((w - c)^2), computed in double.
  auto w = make_param("w", {4});
  w->data = {2.0f, -3.0f, 0.5f, 4.0f};
  const std::vector<double> c = {0.1, 0.2, -0.4, 1.0};
  auto f = [&] {
    double s = 0.0;
    for (int i = 0; i < 4; ++i) {
      const double d = double(w->data[i]) - c[i];
      s += d * d;
    }
    return s;
  };
  AdamW opt({w});
  double prev = f();
  for (int step = 0; step < 10; ++step) {
    w->zero_grad();
    for (int i = 0; i < 4; ++i) w->grad[i] = 2.0f * (w->data[i] - float(c[i]));
    opt.step(0.05);
    const double now = f();
    REQUIRE(now < prev);
    prev = now;
  }
}

TEST_CASE("gradient clipping caps the global norm", "[optim]") {
  auto a = make_param("a", {2});
  auto b = make_param("b", {2});
  a->ensure_grad();
  b->ensure_grad();
  a->grad = {30.0f, 0.0f};
  b->grad = {0.0f, 40.0f};
  const double pre = clip_grad_norm({a, b}, 10.0);
  REQUIRE(pre == Catch::Approx(50.0));
  double post = 0.0;
  for (float g : a->grad) post += double(g) * g;
  for (float g : b->grad) post += double(g) * g;
  REQUIRE(std::sqrt(post) == Catch::Approx(10.0).epsilon(1e-5));
}

TEST_CASE("cosine schedule boundaries", "[optim]") {
  SECTION("warmup boundary hits base_lr exactly") {
    REQUIRE(cosine_lr(3, 50, 0.004, 3) == Catch::Approx(0.004).epsilon(1e-12));
  }
  SECTION("final epoch decays to the floor (<= base/50)") {
    const double last = cosine_lr(49, 50, 0.004, 3);
    REQUIRE(last <= 0.004 / 50.0);
    REQUIRE(last == Catch::Approx(0.004 / 100.0).epsilon(1e-9));
  }
  SECTION("warmup epochs strictly increase") {
    const double l0 = cosine_lr(0, 50, 0.004, 3);
    const double l1 = cosine_lr(1, 50, 0.004, 3);
    const double l2 = cosine_lr(2, 50, 0.004, 3);
    REQUIRE(l0 < l1);
    REQUIRE(l1 < l2);
    REQUIRE(l2 <= 0.004);
  }
  SECTION("degenerate config rejected") {
    REQUIRE_THROWS_AS(cosine_lr(0, 3, 0.004, 3), ConfigError);
    REQUIRE_THROWS_AS(cosine_lr(0, 2, 0.004, 3), ConfigError);
  }
  SECTION("schedule stays within (0, base]") {
    for (int e = 0; e < 50; ++e) {
      const double lr = cosine_lr(e, 50, 0.004, 3);
      REQUIRE(lr > 0.0);
      REQUIRE(lr <= 0.004 + 1e-15);
    }
  }
}

TEST_CASE("identical seeds give a bit-identical loss trajectory", "[optim]") {
  auto run = [](uint64_t seed) {
    Pcg32 rng(seed);
    auto w = make_param("w", {4, 4});
    for (auto& v : w->data) v = rng.uniform_f(-0.5f, 0.5f);
    auto x = make_tensor({4, 4});
    for (auto& v : x->data) v = rng.uniform_f(-1.0f, 1.0f);
    AdamW opt({w});
    std::vector<float> losses;
    for (int step = 0; step < 20; ++step) {
      opt.zero_grad();
      Graph g;
      auto y = silu(&g, matmul(&g, x, w));
      auto loss = mean_all(&g, mul(&g, y, y));
      g.backward(loss);
      clip_grad_norm({w}, 10.0);
      opt.step(0.01);
      losses.push_back(loss->data[0]);
    }
    return losses;
  };
  auto a = run(123), b = run(123);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    REQUIRE(std::bit_cast<uint32_t>(a[i]) == std::bit_cast<uint32_t>(b[i]));
  }
}
