// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include "kdq/ops.hpp"
#include "kdq/random.hpp"
#include "oracle_ref.hpp"

using namespace kdq;

TEST_CASE("matmul of ones matrices", "[tensor]") {
  auto a = make_tensor({2, 3}, 1.0f);
  auto b = make_tensor({3, 2}, 1.0f);
  auto y = matmul(nullptr, a, b);
  REQUIRE(y->shape == std::vector<int>{2, 2});
  for (float v : y->data) REQUIRE(v == Catch::Approx(3.0).margin(1e-7));
}

TEST_CASE("matmul shape mismatch names the primitive", "[tensor]") {
  auto a = make_tensor({2, 3});
  auto b = make_tensor({4, 2});
  try {
    matmul(nullptr, a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    REQUIRE(msg.find("matmul") != std::string::npos);
    REQUIRE(msg.find("[2,3]") != std::string::npos);
    REQUIRE(msg.find("[4,2]") != std::string::npos);
  }
}

TEST_CASE("conv2d all-ones 3x3 kernel on 4x4 image, pad 1", "[tensor]") {
  auto x = make_tensor({1, 1, 4, 4}, 1.0f);
  auto w = make_tensor({1, 1, 3, 3}, 1.0f);
  auto y = conv2d(nullptr, x, w, nullptr, 1, 1);
  REQUIRE(y->shape == std::vector<int>{1, 1, 4, 4});
  // center elements see the full 3x3 window
  REQUIRE(y->data[1 * 4 + 1] == Catch::Approx(9.0));
  REQUIRE(y->data[2 * 4 + 2] == Catch::Approx(9.0));
  REQUIRE(y->data[0] == Catch::Approx(4.0));      // corner
  REQUIRE(y->data[1] == Catch::Approx(6.0));      // edge
}

TEST_CASE("conv2d channel mismatch", "[tensor]") {
  auto x = make_tensor({1, 2, 4, 4});
  auto w = make_tensor({1, 3, 3, 3});
  REQUIRE_THROWS_AS(conv2d(nullptr, x, w, nullptr, 1, 1), ShapeError);
}

TEST_CASE("relu", "[tensor]") {
  auto x = make_tensor({3}, std::vector<float>{-1.0f, 0.0f, 2.0f});
  auto y = relu(nullptr, x);
  REQUIRE(y->data == std::vector<float>{0.0f, 0.0f, 2.0f});
}

TEST_CASE("softmax examples", "[tensor]") {
  SECTION("symmetric logits, T=1") {
    auto y = softmax_t(nullptr, make_tensor({2}, std::vector<float>{0.0f, 0.0f}), 1.0);
    REQUIRE(y->data[0] == Catch::Approx(0.5));
    REQUIRE(y->data[1] == Catch::Approx(0.5));
  }
  SECTION("[2,0] at T=2 equals the closed form") {
    // Expected values computed here in double precision from first principles.
    const double e = std::exp(1.0);
    auto y = softmax_t(nullptr, make_tensor({2}, std::vector<float>{2.0f, 0.0f}), 2.0);
    REQUIRE(y->data[0] == Catch::Approx(e / (e + 1.0)).epsilon(1e-6));
    REQUIRE(y->data[1] == Catch::Approx(1.0 / (e + 1.0)).epsilon(1e-6));
  }
  SECTION("T=10 equals softmax of logits/10") {
    Pcg32 rng(7);
    std::vector<float> z(6);
    for (auto& v : z) v = rng.uniform_f(-5.0f, 5.0f);
    std::vector<float> z10(z);
    for (auto& v : z10) v /= 10.0f;
    auto a = softmax_t(nullptr, make_tensor({2, 3}, z), 10.0);
    auto b = softmax_t(nullptr, make_tensor({2, 3}, z10), 1.0);
    for (size_t i = 0; i < a->data.size(); ++i)
      REQUIRE(a->data[i] == Catch::Approx(b->data[i]).margin(1e-7));
  }
  SECTION("non-positive temperature rejected") {
    REQUIRE_THROWS_AS(softmax_t(nullptr, make_tensor({2}), 0.0), ParamError);
    REQUIRE_THROWS_AS(softmax_t(nullptr, make_tensor({2}), -1.0), ParamError);
  }
}

TEST_CASE("softmax rows sum to one under extreme logits", "[tensor]") {
  Pcg32 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<float> z(8);
    for (auto& v : z) v = rng.uniform_f(-1e4f, 1e4f);
    auto y = softmax_t(nullptr, make_tensor({2, 4}, z), trial % 2 ? 1.0 : 10.0);
    for (int r = 0; r < 2; ++r) {
      double s = 0.0;
      for (int c = 0; c < 4; ++c) s += y->data[r * 4 + c];
      REQUIRE(s == Catch::Approx(1.0).margin(1e-6));
      for (int c = 0; c < 4; ++c) REQUIRE(std::isfinite(y->data[r * 4 + c]));
    }
  }
}

TEST_CASE("backward: linear and quadratic analytic cases", "[tensor]") {
  SECTION("loss = sum(w) gives unit gradients") {
    auto w = make_param("w", {4});
    for (int i = 0; i < 4; ++i) w->data[i] = float(i) - 1.5f;
    Graph g;
    auto loss = sum_all(&g, w);
    g.backward(loss);
    for (float gv : w->grad) REQUIRE(gv == 1.0f);
  }
  SECTION("loss = sum(w^2) at [1,-2] gives [2,-4]") {
    auto w = make_param("w", {2}, 0.0f);
    w->data = {1.0f, -2.0f};
    Graph g;
    auto loss = sum_all(&g, mul(&g, w, w));
    g.backward(loss);
    REQUIRE(w->grad[0] == Catch::Approx(2.0));
    REQUIRE(w->grad[1] == Catch::Approx(-4.0));
  }
  SECTION("non-scalar loss is a contract error") {
    auto w = make_param("w", {2});
    Graph g;
    auto y = mul(&g, w, w);
    REQUIRE_THROWS_AS(g.backward(y), ContractError);
  }
  SECTION("unused parameter keeps an exactly zero gradient") {
    auto w = make_param("w", {3}, 1.0f);
    auto unused = make_param("u", {3}, 1.0f);
    unused->ensure_grad();
    Graph g;
    auto loss = sum_all(&g, mul(&g, w, w));
    g.backward(loss);
    for (float gv : unused->grad) REQUIRE(gv == 0.0f);
  }
}

TEST_CASE("maxpool routes gradient to the argmax", "[tensor]") {
  auto x = make_param("x", {1, 1, 2, 2});
  x->data = {1.0f, 5.0f, 3.0f, 2.0f};
  Graph g;
  auto y = maxpool2x2(&g, x);
  REQUIRE(y->data[0] == 5.0f);
  auto loss = sum_all(&g, y);
  g.backward(loss);
  REQUIRE(x->grad == std::vector<float>{0.0f, 1.0f, 0.0f, 0.0f});
}

// ---------------------------------------------------------------------------
// Finite-difference oracle over random small graphs.
//
// The same randomly generated program runs through the library (float32,
// autodiff) and through the double-precision reference in oracle_ref.hpp;
// central differences on the reference play the role of ground truth.
// Seeds whose evaluation point sits too close to a max-pool tie are skipped,
// since finite differences are meaningless across a kink.
// ---------------------------------------------------------------------------

namespace {

struct RandomProgram {
  bool conv_family = false;
  int n_layers = 1;
  std::vector<int> widths;
  std::vector<int> acts;  // 0 silu, 1 sigmoid
  bool use_pool = false;
  bool use_softmax = false;
  bool use_logexp = false;
  std::vector<std::vector<float>> params;
  std::vector<std::vector<int>> param_shapes;
  std::vector<float> x0;
  std::vector<int> x0_shape;
  std::vector<float> wfinal;  // random const weighting before the mean
};

RandomProgram generate_program(uint64_t seed) {
  Pcg32 rng(derive_seed(seed, "fd-graph"));
  RandomProgram p;
  p.conv_family = rng.below(2) == 0;
  auto add_param = [&](std::vector<int> shape, double scale) {
    std::vector<float> data(size_t(numel_of(shape)));
    for (auto& v : data) v = static_cast<float>(rng.uniform(-scale, scale));
    p.param_shapes.push_back(std::move(shape));
    p.params.push_back(std::move(data));
  };
  if (p.conv_family) {
    const int C = 2 + int(rng.below(3));
    const int S = 8;
    p.x0_shape = {1, C, S, S};
    p.n_layers = 1 + int(rng.below(2));
    p.use_pool = rng.below(2) == 0;
    int c_in = C;
    for (int l = 0; l < p.n_layers; ++l) {
      const int c_out = 2 + int(rng.below(4));
      add_param({c_out, c_in, 3, 3}, std::sqrt(2.0 / (c_in * 9.0)));
      add_param({c_out}, 0.1);
      p.acts.push_back(int(rng.below(2)));
      c_in = c_out;
    }
  } else {
    const int R = 2 + int(rng.below(3));
    int k = 3 + int(rng.below(5));
    p.x0_shape = {R, k};
    p.n_layers = 1 + int(rng.below(3));
    p.use_softmax = rng.below(2) == 0;
    p.use_logexp = rng.below(2) == 0;
    for (int l = 0; l < p.n_layers; ++l) {
      const int k2 = 3 + int(rng.below(6));
      add_param({k, k2}, std::sqrt(2.0 / k));
      add_param({R, k2}, 0.1);  // full-shape bias (no broadcasting primitive)
      p.acts.push_back(int(rng.below(2)));
      k = k2;
    }
  }
  p.x0.resize(size_t(numel_of(p.x0_shape)));
  for (auto& v : p.x0) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  return p;
}

// Library (float32 + tape) interpretation. Fills wfinal on the first call.
TensorPtr run_library(RandomProgram& p, std::vector<TensorPtr>& out_params, Graph& g) {
  out_params.clear();
  for (size_t i = 0; i < p.params.size(); ++i) {
    auto t = make_param("p" + std::to_string(i), p.param_shapes[i]);
    t->data = p.params[i];
    out_params.push_back(t);
  }
  TensorPtr x = make_tensor(p.x0_shape, p.x0);
  size_t pi = 0;
  for (int l = 0; l < p.n_layers; ++l) {
    if (p.conv_family) {
      x = conv2d(&g, x, out_params[pi], out_params[pi + 1], 1, 1);
    } else {
      x = matmul(&g, x, out_params[pi]);
      x = add(&g, x, out_params[pi + 1]);
    }
    pi += 2;
    x = p.acts[l] == 0 ? silu(&g, x) : sigmoid(&g, x);
  }
  if (p.conv_family && p.use_pool) x = maxpool2x2(&g, x);
  if (!p.conv_family && p.use_softmax) x = softmax_t(&g, x, 2.0);
  if (!p.conv_family && p.use_logexp) x = log(&g, add_const(&g, sigmoid(&g, x), 0.5f));
  if (p.wfinal.empty()) {
    Pcg32 rng(derive_seed(fnv1a64("wfinal"), "fd-graph"));
    p.wfinal.resize(x->data.size());
    for (auto& v : p.wfinal) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  }
  x = mul(&g, x, make_tensor(x->shape, p.wfinal));
  return mean_all(&g, x);
}

// Double-precision reference. Returns the loss; reports the smallest
// max-pool top-2 margin seen so kink-adjacent seeds can be rejected.
double run_reference(const RandomProgram& p, const std::vector<std::vector<double>>& params,
                     double* min_pool_margin = nullptr) {
  refd::DT x;
  x.shape = p.x0_shape;
  x.v.assign(p.x0.begin(), p.x0.end());
  size_t pi = 0;
  auto P = [&](size_t i) {
    refd::DT t;
    t.shape = p.param_shapes[i];
    t.v = params[i];
    return t;
  };
  for (int l = 0; l < p.n_layers; ++l) {
    if (p.conv_family) {
      x = refd::conv2d(x, P(pi), P(pi + 1), 1, 1);
    } else {
      x = refd::matmul(x, P(pi));
      x = refd::add(x, P(pi + 1));
    }
    pi += 2;
    x = p.acts[l] == 0 ? refd::silu(x) : refd::sigmoid(x);
  }
  if (p.conv_family && p.use_pool) {
    if (min_pool_margin) {
      const int B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
          for (int oy = 0; oy < H / 2; ++oy)
            for (int ox = 0; ox < W / 2; ++ox) {
              std::array<double, 4> w = {
                  x.v[((size_t(b) * C + c) * H + oy * 2) * W + ox * 2],
                  x.v[((size_t(b) * C + c) * H + oy * 2) * W + ox * 2 + 1],
                  x.v[((size_t(b) * C + c) * H + oy * 2 + 1) * W + ox * 2],
                  x.v[((size_t(b) * C + c) * H + oy * 2 + 1) * W + ox * 2 + 1]};
              std::sort(w.begin(), w.end());
              *min_pool_margin = std::min(*min_pool_margin, w[3] - w[2]);
            }
    }
    x = refd::maxpool2x2(x);
  }
  if (!p.conv_family && p.use_softmax) x = refd::softmax_t(x, 2.0);
  if (!p.conv_family && p.use_logexp) {
    x = refd::sigmoid(x);
    for (auto& v : x.v) v = std::log(v + 0.5);
  }
  refd::DT wf;
  wf.shape = x.shape;
  wf.v.assign(p.wfinal.begin(), p.wfinal.end());
  return refd::mean_all(refd::mul(x, wf));
}

}  // namespace

TEST_CASE("gradients match central finite differences on random graphs", "[tensor][fd]") {
  const double h = 1e-3;
  int checked = 0;
  uint64_t seed = 0;
  double worst = 0.0;
  while (checked < 20 && seed < 200) {
    RandomProgram prog = generate_program(seed++);
    std::vector<TensorPtr> params;
    Graph g;
    TensorPtr loss = run_library(prog, params, g);

    std::vector<std::vector<double>> dparams;
    for (const auto& p : prog.params) dparams.emplace_back(p.begin(), p.end());
    double margin = 1e30;
    run_reference(prog, dparams, &margin);
    if (prog.conv_family && prog.use_pool && margin < 0.02) continue;  // kink-adjacent point

    g.backward(loss);
    double gmax = 0.0;
    for (const auto& p : params)
      for (float gv : p->grad) gmax = std::max(gmax, double(std::abs(gv)));
    REQUIRE(gmax > 0.0);

    int64_t total = 0;
    for (const auto& p : params) total += p->numel();
    REQUIRE(total <= 5000);

    for (size_t i = 0; i < params.size(); ++i) {
      for (size_t j = 0; j < dparams[i].size(); ++j) {
        const double keep = dparams[i][j];
        dparams[i][j] = keep + h;
        const double fp = run_reference(prog, dparams);
        dparams[i][j] = keep - h;
        const double fm = run_reference(prog, dparams);
        dparams[i][j] = keep;
        const double fd = (fp - fm) / (2.0 * h);
        const double ad = params[i]->grad[j];
        const double rel = std::abs(ad - fd) / std::max({std::abs(ad), std::abs(fd), 0.01 * gmax});
        worst = std::max(worst, rel);
      }
    }
    ++checked;
  }
  INFO("seeds checked: " << checked << ", worst relative error: " << worst);
  REQUIRE(checked == 20);
  REQUIRE(worst <= 1e-4);
}

TEST_CASE("forward pass is deterministic and finite", "[tensor]") {
  RandomProgram prog = generate_program(3);
  std::vector<TensorPtr> p1, p2;
  Graph g1, g2;
  auto l1 = run_library(prog, p1, g1);
  auto l2 = run_library(prog, p2, g2);
  REQUIRE(l1->data[0] == l2->data[0]);  // bitwise
  REQUIRE(std::isfinite(l1->data[0]));
}
