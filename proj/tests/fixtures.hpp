// SPDX-License-Identifier: Apache-2.0
//
// Shared miniature fixtures for loss/gradient tests and the acceptance suite.
#pragma once

#include "kdq/dataset.hpp"
#include "kdq/detector.hpp"
#include "kdq/losses.hpp"

namespace fixtures {

inline kdq::DetectorConfig micro_student_cfg() {
  kdq::DetectorConfig c;
  c.input_size = 16;
  c.grid = 4;
  c.num_classes = 3;
  c.width_mult = 0.5f;
  c.depth = 1;
  c.head_channels = 10;
  return c;
}

inline kdq::DetectorConfig micro_teacher_cfg() {
  auto c = micro_student_cfg();
  c.width_mult = 1.0f;
  c.depth = 2;
  return c;
}

inline kdq::SceneSpec micro_scene_spec() {
  kdq::SceneSpec s;
  s.image_size = 16;
  s.class_weights = {5, 3, 2};
  s.min_objects = 1;
  s.max_objects = 2;
  s.collision_grid = 4;
  s.noise_level = 0.05f;
  s.palette = {
      {kdq::ShapeKind::rect, 4, 7, 4, 7, {0.6f, 0.55f, 0.5f}},
      {kdq::ShapeKind::ellipse, 4, 6, 5, 7, {0.5f, 0.6f, 0.55f}},
      {kdq::ShapeKind::triangle, 4, 6, 4, 7, {0.55f, 0.5f, 0.6f}},
  };
  return s;
}

/// A tiny KD training step's worth of state: frozen micro teacher, trainable
/// micro student (~656 params) plus feature projection (~84 params), one
/// two-image batch with encoded targets.
struct MicroKd {
  kdq::DetectorModel student, teacher;
  kdq::FeatureProjection proj;
  kdq::TensorPtr images;
  kdq::BatchTargets targets;
  kdq::KDConfig kd = kdq::KDConfig::form_a();

  std::vector<kdq::TensorPtr> trainable_params() const {
    auto ps = student.parameters();
    for (const auto& p : proj.parameters()) ps.push_back(p);
    return ps;
  }
};

inline MicroKd make_micro_kd(uint64_t seed) {
  MicroKd f;
  f.student = kdq::build_model(micro_student_cfg(), kdq::derive_seed(seed, "student"));
  f.teacher = kdq::build_model(micro_teacher_cfg(), kdq::derive_seed(seed, "teacher"));
  f.teacher.set_trainable(false);
  f.proj = kdq::make_feature_projection(f.student.cfg.trunk_channels(),
                                        f.teacher.cfg.trunk_channels(), seed);
  auto spec = micro_scene_spec();
  std::vector<kdq::TargetGrids> grids;
  const int B = 2, S = spec.image_size;
  f.images = kdq::make_tensor({B, 3, S, S});
  for (int b = 0; b < B; ++b) {
    auto im = kdq::generate_image(spec, kdq::derive_seed(seed, "scene"), b);
    std::copy_n(im.pixels.data(), im.pixels.size(),
                f.images->data.data() + size_t(b) * im.pixels.size());
    grids.push_back(kdq::encode_targets(im.boxes, f.student.cfg));
  }
  f.targets = kdq::assemble_targets(grids);
  return f;
}

/// Run the full Form-A objective through the library tape.
inline kdq::CombinedLoss run_kd_loss(kdq::Graph* g, const MicroKd& f) {
  auto t_out = f.teacher.forward(nullptr, f.images);
  auto s_out = f.student.forward(g, f.images);
  auto task = kdq::task_loss(g, s_out.pred, f.targets);
  const std::vector<uint8_t>* mask = f.kd.foreground_only_logit_kd ? &f.targets.fg_mask : nullptr;
  auto logit = kdq::logit_kd_loss(g, s_out.pred.class_logits, t_out.pred.class_logits,
                                  f.kd.temperature, f.kd.kl_direction, mask);
  auto feat = kdq::feature_kd_loss(g, s_out.feature, t_out.feature, f.proj);
  return kdq::combined_loss(g, task, logit, feat, f.kd);
}

}  // namespace fixtures
