// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <vector>

#include "kdq/detector.hpp"
#include "kdq/ops.hpp"

namespace kdq {

enum class KlDirection { student_first, teacher_first };

/**
 * Distillation hyperparameters. `form_a` is the task-dampened preset
 * (alpha 0.5); `form_b` keeps full task-loss weight with everything else
 * identical.
 */
struct KDConfig {
  double alpha = 0.5;
  double beta = 0.3;
  double gamma = 0.02;
  double temperature = 10.0;
  KlDirection kl_direction = KlDirection::student_first;
  bool foreground_only_logit_kd = false;

  static KDConfig form_a() { return KDConfig{}; }
  static KDConfig form_b() {
    KDConfig c;
    c.alpha = 1.0;
    return c;
  }
};

/// A differentiable scalar plus its double-precision forward value. The tape
/// node carries float32 like every tensor; the double value is what gets
/// logged and checked.
struct LossValue {
  TensorPtr node;
  double value = 0.0;
};

struct LossBreakdown {
  double total = 0.0;
  double task = 0.0;
  double logit_kd = 0.0;
  double feature_kd = 0.0;
};

// ---------------------------------------------------------------------------
// Batch targets
// ---------------------------------------------------------------------------

/// Training targets for a batch, assembled from per-image TargetGrids.
struct BatchTargets {
  int batch = 0, grid = 0, num_classes = 0, input_size = 0;
  TensorPtr objectness;                          // [B,1,G,G] constants in {0,1}
  std::vector<std::array<int, 3>> pos_cells;     // (b, gy, gx) of positive cells
  std::vector<int> pos_class;
  std::vector<GtBox> pos_box;
  std::vector<uint8_t> fg_mask;                  // B*G*G foreground flags
  int collision_warnings = 0;
};

inline BatchTargets assemble_targets(const std::vector<TargetGrids>& per_image) {
  if (per_image.empty()) throw ContractError("assemble_targets: empty batch");
  BatchTargets t;
  const int B = static_cast<int>(per_image.size());
  const int G = per_image[0].grid;
  t.batch = B;
  t.grid = G;
  t.num_classes = per_image[0].num_classes;
  t.input_size = per_image[0].input_size;
  t.objectness = make_tensor({B, 1, G, G});
  t.fg_mask.assign(size_t(B) * G * G, 0);
  for (int b = 0; b < B; ++b) {
    const auto& tg = per_image[b];
    if (tg.grid != G) throw ShapeError("assemble_targets: mixed grid sizes in batch");
    t.collision_warnings += tg.collision_warnings;
    for (int gy = 0; gy < G; ++gy)
      for (int gx = 0; gx < G; ++gx) {
        const size_t at = size_t(gy) * G + gx;
        if (tg.objectness[at] > 0.5f) {
          t.objectness->data[size_t(b) * G * G + at] = 1.0f;
          t.fg_mask[size_t(b) * G * G + at] = 1;
          t.pos_cells.push_back({b, gy, gx});
          t.pos_class.push_back(tg.cls[at]);
          t.pos_box.push_back(tg.cell_box[at]);
        }
      }
  }
  return t;
}

// ---------------------------------------------------------------------------
// Task loss: objectness BCE + class CE + IoU box loss at positive cells
// ---------------------------------------------------------------------------

namespace detail {

/// Differentiable IoU of decoded boxes at positive cells, composed from
/// elementwise primitives so the tape handles the gradient.
inline TensorPtr box_iou_loss(Graph* g, const TensorPtr& box_deltas, const BatchTargets& t,
                              double* value_out) {
  const int P = static_cast<int>(t.pos_cells.size());
  const float cell = float(t.input_size) / float(t.grid);
  auto gathered = gather_cells(g, box_deltas, t.pos_cells);  // [P,4]
  auto tx = slice_cols(g, gathered, 0, 1);
  auto ty = slice_cols(g, gathered, 1, 2);
  auto tw = slice_cols(g, gathered, 2, 3);
  auto th = slice_cols(g, gathered, 3, 4);

  auto gxc = make_tensor({P, 1});
  auto gyc = make_tensor({P, 1});
  auto gx1 = make_tensor({P, 1});
  auto gy1 = make_tensor({P, 1});
  auto gx2 = make_tensor({P, 1});
  auto gy2 = make_tensor({P, 1});
  auto garea = make_tensor({P, 1});
  for (int p = 0; p < P; ++p) {
    gxc->data[p] = float(t.pos_cells[p][2]);
    gyc->data[p] = float(t.pos_cells[p][1]);
    const auto& b = t.pos_box[p];
    gx1->data[p] = b.x1;
    gy1->data[p] = b.y1;
    gx2->data[p] = b.x2;
    gy2->data[p] = b.y2;
    garea->data[p] = (b.x2 - b.x1) * (b.y2 - b.y1);
  }

  auto cx = scale(g, add(g, sigmoid(g, tx), gxc), cell);
  auto cy = scale(g, add(g, sigmoid(g, ty), gyc), cell);
  // Log-size clamp keeps exp() finite if a step goes wild early on.
  auto w = scale(g, exp(g, min_const(g, tw, 8.0f)), cell);
  auto h = scale(g, exp(g, min_const(g, th, 8.0f)), cell);
  auto x1 = sub(g, cx, scale(g, w, 0.5f));
  auto x2 = add(g, cx, scale(g, w, 0.5f));
  auto y1 = sub(g, cy, scale(g, h, 0.5f));
  auto y2 = add(g, cy, scale(g, h, 0.5f));

  auto iw = max_const(g, sub(g, emin(g, x2, gx2), emax(g, x1, gx1)), 0.0f);
  auto ih = max_const(g, sub(g, emin(g, y2, gy2), emax(g, y1, gy1)), 0.0f);
  auto inter = mul(g, iw, ih);
  auto uni = sub(g, add(g, mul(g, w, h), garea), inter);
  auto iou = div(g, inter, uni);
  auto loss = sub(g, make_scalar(1.0f), mean_all(g, iou));
  if (value_out) *value_out = double(loss->data[0]);
  return loss;
}

}  // namespace detail

/**
 * Detection task loss: mean objectness BCE over all cells, plus class
 * cross-entropy and (1 - IoU) averaged over positive cells. With no
 * positives only the objectness term remains.
 */
inline LossValue task_loss(Graph* g, const RawPrediction& pred, const BatchTargets& targets) {
  if (pred.batch() != targets.batch || pred.grid() != targets.grid ||
      pred.classes() != targets.num_classes)
    throw ShapeError("task_loss: prediction/target shape mismatch");
  double obj_v = 0.0, cls_v = 0.0, box_v = 0.0;
  TensorPtr node = bce_with_logits_mean(g, pred.objectness, targets.objectness, &obj_v);
  if (!targets.pos_cells.empty()) {
    auto cls_logits = gather_cells(g, pred.class_logits, targets.pos_cells);
    auto ce = cross_entropy_rows_mean(g, cls_logits, targets.pos_class, &cls_v);
    auto box = detail::box_iou_loss(g, pred.box_deltas, targets, &box_v);
    node = add(g, node, add(g, ce, box));
  }
  return {node, obj_v + cls_v + box_v};
}

// ---------------------------------------------------------------------------
// Logit distillation: T^2-weighted tempered KL, mean over cells
// ---------------------------------------------------------------------------

namespace detail {

struct RowLayout {
  int64_t rows;     // number of class vectors
  int classes;      // vector length
  int64_t stride;   // element stride within a vector
  // base offset of row r
  std::function<int64_t(int64_t)> base;
};

inline RowLayout class_rows(const TensorPtr& t) {
  if (t->shape.size() == 4) {
    const int B = t->shape[0], C = t->shape[1], H = t->shape[2], W = t->shape[3];
    const int64_t plane = int64_t(H) * W;
    return {int64_t(B) * plane, C, plane, [C, plane](int64_t r) {
              const int64_t b = r / plane, cell = r % plane;
              return b * C * plane + cell;
            }};
  }
  if (t->shape.size() == 2) {
    const int C = t->shape[1];
    return {t->shape[0], C, 1, [C](int64_t r) { return r * C; }};
  }
  if (t->shape.size() == 1)
    return {1, t->shape[0], 1, [](int64_t) { return int64_t(0); }};
  throw ShapeError("logit KD: expected 1-d, 2-d, or 4-d logits, got " + shape_str(t->shape));
}

}  // namespace detail

/**
 * T^2 * mean-over-cells KL between tempered class distributions.
 * `student_first` puts the student distribution as the first KL argument;
 * `teacher_first` is the classical ordering. The teacher tensor must be
 * frozen (no gradient). Forward value accumulates in double.
 */
inline LossValue logit_kd_loss(Graph* g, const TensorPtr& student_logits,
                               const TensorPtr& teacher_logits, double temperature,
                               KlDirection direction,
                               const std::vector<uint8_t>* fg_mask = nullptr) {
  if (temperature <= 0.0) throw ParamError("logit KD temperature must be > 0");
  if (teacher_logits->requires_grad)
    throw ContractError("teacher logits must be frozen (requires_grad == false)");
  if (student_logits->shape != teacher_logits->shape)
    throw ShapeError("logit KD: student " + shape_str(student_logits->shape) + " vs teacher " +
                     shape_str(teacher_logits->shape));
  const auto L = detail::class_rows(student_logits);
  if (fg_mask && static_cast<int64_t>(fg_mask->size()) != L.rows)
    throw ShapeError("logit KD: foreground mask size mismatch");

  const int C = L.classes;
  std::vector<int64_t> active;
  active.reserve(static_cast<size_t>(L.rows));
  for (int64_t r = 0; r < L.rows; ++r)
    if (!fg_mask || (*fg_mask)[static_cast<size_t>(r)]) active.push_back(r);
  const int64_t N = static_cast<int64_t>(active.size());
  if (N == 0) return {make_scalar(0.0f), 0.0};

  // Saved for backward: per active row, q (student), and the direction-
  // dependent per-class factor.
  auto q_save = std::make_shared<std::vector<float>>(size_t(N) * C);
  auto f_save = std::make_shared<std::vector<float>>(size_t(N) * C);
  double acc = 0.0;
  std::vector<double> logq(C), logp(C), q(C), p(C);
  for (int64_t a = 0; a < N; ++a) {
    const int64_t base = L.base(active[size_t(a)]);
    const float* zs = student_logits->data.data() + base;
    const float* zt = teacher_logits->data.data() + base;
    double ms = zs[0] * 1.0, mt = zt[0] * 1.0;
    for (int c = 1; c < C; ++c) {
      ms = std::max(ms, double(zs[c * L.stride]));
      mt = std::max(mt, double(zt[c * L.stride]));
    }
    double sums = 0.0, sumt = 0.0;
    for (int c = 0; c < C; ++c) {
      logq[c] = (double(zs[c * L.stride]) - ms) / temperature;
      logp[c] = (double(zt[c * L.stride]) - mt) / temperature;
      sums += std::exp(logq[c]);
      sumt += std::exp(logp[c]);
    }
    const double lss = std::log(sums), lst = std::log(sumt);
    double row_kl = 0.0;
    for (int c = 0; c < C; ++c) {
      logq[c] -= lss;
      logp[c] -= lst;
      q[c] = std::exp(logq[c]);
      p[c] = std::exp(logp[c]);
      row_kl += direction == KlDirection::student_first ? q[c] * (logq[c] - logp[c])
                                                        : p[c] * (logp[c] - logq[c]);
    }
    acc += row_kl;
    for (int c = 0; c < C; ++c) {
      (*q_save)[size_t(a) * C + c] = static_cast<float>(q[c]);
      (*f_save)[size_t(a) * C + c] =
          direction == KlDirection::student_first
              ? static_cast<float>(q[c] * ((logq[c] - logp[c]) - row_kl))
              : static_cast<float>(q[c] - p[c]);
    }
  }
  const double value = temperature * temperature * acc / double(N);
  auto y = make_scalar(static_cast<float>(value));
  if (wants_grad(g, {&student_logits})) {
    y->requires_grad = true;
    auto rows = std::make_shared<std::vector<int64_t>>(std::move(active));
    const auto layout = L;
    const float coeff = static_cast<float>(temperature / double(N));
    g->record(y, [student_logits, y, q_save, f_save, rows, layout, coeff, C] {
      if (y->grad.empty()) return;
      student_logits->ensure_grad();
      const float go = y->grad[0] * coeff;
      for (size_t a = 0; a < rows->size(); ++a) {
        const int64_t base = layout.base((*rows)[a]);
        float* gz = student_logits->grad.data() + base;
        const float* f = f_save->data() + a * C;
        for (int c = 0; c < C; ++c) gz[c * layout.stride] += go * f[c];
      }
    });
  }
  return {y, value};
}

// ---------------------------------------------------------------------------
// Feature distillation: L2 after an optional learned 1x1 projection
// ---------------------------------------------------------------------------

/// 1x1 conv mapping student channels onto teacher channels; identity when
/// the channel counts already agree. The projection weights train with the
/// student.
struct FeatureProjection {
  TensorPtr w, b;  // null for identity
  bool identity() const { return w == nullptr; }
  std::vector<TensorPtr> parameters() const {
    if (identity()) return {};
    return {w, b};
  }
};

inline FeatureProjection make_feature_projection(int student_channels, int teacher_channels,
                                                 uint64_t seed) {
  if (student_channels == teacher_channels) return {};
  FeatureProjection p;
  p.w = make_param("kd_proj.w", {teacher_channels, student_channels, 1, 1});
  p.b = make_param("kd_proj.b", {teacher_channels});
  Pcg32 rng(derive_seed(seed, "init.kd_proj"));
  const float bound = static_cast<float>(std::sqrt(6.0 / double(student_channels)));
  for (auto& v : p.w->data) v = rng.uniform_f(-bound, bound);
  return p;
}

/// Mean squared distance between (projected) student features and frozen
/// teacher features.
inline LossValue feature_kd_loss(Graph* g, const TensorPtr& student_feat,
                                 const TensorPtr& teacher_feat, const FeatureProjection& proj) {
  if (teacher_feat->requires_grad)
    throw ContractError("teacher features must be frozen (requires_grad == false)");
  if (student_feat->shape.size() != 4 || teacher_feat->shape.size() != 4)
    throw ShapeError("feature KD: expected 4-d feature maps");
  if (student_feat->shape[0] != teacher_feat->shape[0] ||
      student_feat->shape[2] != teacher_feat->shape[2] ||
      student_feat->shape[3] != teacher_feat->shape[3])
    throw ShapeError("feature KD: spatial mismatch " + shape_str(student_feat->shape) + " vs " +
                     shape_str(teacher_feat->shape));
  TensorPtr s = student_feat;
  if (!proj.identity()) s = conv2d(g, s, proj.w, proj.b, 1, 0);
  if (s->shape[1] != teacher_feat->shape[1])
    throw ShapeError("feature KD: channel mismatch after projection");
  double v = 0.0;
  auto node = mse_mean(g, s, teacher_feat, &v);
  return {node, v};
}

// ---------------------------------------------------------------------------
// Combined objective
// ---------------------------------------------------------------------------

struct CombinedLoss {
  TensorPtr node;
  LossBreakdown breakdown;
};

/**
 * total = alpha*task + beta*logit + gamma*feat. Zero-weighted terms are left
 * out of the tape entirely, so a KD run with beta = gamma = 0 produces the
 * exact gradient stream of direct training. The breakdown is computed in
 * double from the component values.
 */
inline CombinedLoss combined_loss(Graph* g, const LossValue& task, const LossValue& logit,
                                  const LossValue& feat, const KDConfig& cfg) {
  LossBreakdown bd;
  bd.task = task.value;
  bd.logit_kd = logit.value;
  bd.feature_kd = feat.value;
  bd.total = cfg.alpha * bd.task + cfg.beta * bd.logit_kd + cfg.gamma * bd.feature_kd;
  TensorPtr node = scale(g, task.node, static_cast<float>(cfg.alpha));
  if (cfg.beta != 0.0 && logit.node)
    node = add(g, node, scale(g, logit.node, static_cast<float>(cfg.beta)));
  if (cfg.gamma != 0.0 && feat.node)
    node = add(g, node, scale(g, feat.node, static_cast<float>(cfg.gamma)));
  return {node, bd};
}

}  // namespace kdq
