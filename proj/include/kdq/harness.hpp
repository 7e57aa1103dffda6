// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "kdq/checkpoint.hpp"
#include "kdq/dataset.hpp"
#include "kdq/detector.hpp"
#include "kdq/losses.hpp"
#include "kdq/metrics.hpp"
#include "kdq/optim.hpp"
#include "kdq/quant.hpp"

namespace kdq {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

struct TrainingConfig {
  int epochs = 50;
  int warmup_epochs = 3;
  int patience = 30;
  int teacher_batch = 64;
  int student_batch = 256;
  double teacher_lr = 0.00283;
  double student_lr = 0.004;
  double weight_decay = 0.0005;
  double grad_clip_norm = 10.0;
};

struct DatasetConfig {
  int image_size = 64;
  int train_images = 2000;
  int val_images = 500;
  int calib_images = 128;
  std::vector<double> class_weights = {714, 91, 7, 5, 3};
  int min_objects = 1, max_objects = 3;
  float noise_level = 0.08f;
  float color_jitter = 0.15f;

  SceneSpec scene_spec() const {
    auto s = SceneSpec::defaults();
    s.image_size = image_size;
    s.class_weights = class_weights;
    s.min_objects = min_objects;
    s.max_objects = max_objects;
    s.noise_level = noise_level;
    s.color_jitter = color_jitter;
    return s;
  }
};

struct QuantConfig {
  RangePolicy policy = RangePolicy::minmax;
  bool per_channel = false;
  bool quantize_head = true;

  QuantOptions options() const { return {policy, per_channel, quantize_head}; }
};

struct EvalConfig {
  double conf_threshold = 0.25;
  double decode_conf_threshold = 0.05;
  double nms_iou = 0.7;
  int fps_iterations = 1000;
  int fps_warmup = 50;
  bool pooled_groups = false;
};

struct RunConfig {
  uint64_t seed = 42;
  std::string out_dir = "runs/out";
  int threads = 1;
  DatasetConfig dataset;
  DetectorConfig teacher;
  DetectorConfig student;
  TrainingConfig training;
  KDConfig kd;
  QuantConfig quant;
  EvalConfig eval;

  RunConfig() {
    teacher.width_mult = 2.0f;
    teacher.depth = 4;
    student.width_mult = 1.0f;
    student.depth = 2;
  }

  /// Desk-scale profile: 2000/500/128 images, 30 epochs, batches 32/64.
  /// Learning rates stay at the published 0.00283 / 0.004.
  static RunConfig desk_default() {
    RunConfig c;
    c.training.epochs = 30;
    c.training.teacher_batch = 32;
    c.training.student_batch = 64;
    return c;
  }

  /// Tiny end-to-end profile for smoke runs: 200 training images, 3 epochs.
  static RunConfig smoke() {
    auto c = desk_default();
    c.dataset.train_images = 200;
    c.dataset.val_images = 60;
    c.dataset.calib_images = 32;
    c.training.epochs = 3;
    c.training.warmup_epochs = 1;
    c.eval.fps_iterations = 60;
    c.eval.fps_warmup = 10;
    return c;
  }

  int total_images() const {
    return dataset.train_images + dataset.val_images + dataset.calib_images;
  }

  void validate() const {
    teacher.validate();
    student.validate();
    if (teacher.input_size != dataset.image_size || student.input_size != dataset.image_size)
      throw ConfigError("detector input_size must match dataset image_size");
    if (teacher.num_classes != student.num_classes)
      throw ConfigError("teacher and student must agree on num_classes");
    if (int(dataset.class_weights.size()) != teacher.num_classes)
      throw ConfigError("class_weights length must equal num_classes");
    if (dataset.train_images < 1 || dataset.val_images < 1 || dataset.calib_images < 1)
      throw ConfigError("all dataset splits must be non-empty");
    if (training.epochs <= training.warmup_epochs)
      throw ConfigError("epochs must exceed warmup_epochs");
    if (training.teacher_batch < 1 || training.student_batch < 1)
      throw ConfigError("batch sizes must be >= 1");
    if (training.teacher_lr <= 0 || training.student_lr <= 0)
      throw ConfigError("learning rates must be > 0");
    if (kd.temperature <= 0) throw ConfigError("kd temperature must be > 0");
    if (eval.conf_threshold < 0 || eval.conf_threshold > 1 || eval.nms_iou < 0 ||
        eval.nms_iou > 1 || eval.decode_conf_threshold < 0 || eval.decode_conf_threshold > 1)
      throw ConfigError("eval thresholds must lie in [0,1]");
    if (eval.fps_iterations < 1) throw ConfigError("fps_iterations must be >= 1");
    if (threads < 1) throw ConfigError("threads must be >= 1");
    dataset.scene_spec().validate();
  }

  json to_json() const {
    return json{
        {"seed", seed},
        {"out_dir", out_dir},
        {"threads", threads},
        {"dataset",
         {{"image_size", dataset.image_size},
          {"train_images", dataset.train_images},
          {"val_images", dataset.val_images},
          {"calib_images", dataset.calib_images},
          {"class_weights", dataset.class_weights},
          {"min_objects", dataset.min_objects},
          {"max_objects", dataset.max_objects},
          {"noise_level", dataset.noise_level},
          {"color_jitter", dataset.color_jitter}}},
        {"teacher", detector_json(teacher)},
        {"student", detector_json(student)},
        {"training",
         {{"epochs", training.epochs},
          {"warmup_epochs", training.warmup_epochs},
          {"patience", training.patience},
          {"teacher_batch", training.teacher_batch},
          {"student_batch", training.student_batch},
          {"teacher_lr", training.teacher_lr},
          {"student_lr", training.student_lr},
          {"weight_decay", training.weight_decay},
          {"grad_clip_norm", training.grad_clip_norm}}},
        {"kd",
         {{"alpha", kd.alpha},
          {"beta", kd.beta},
          {"gamma", kd.gamma},
          {"temperature", kd.temperature},
          {"kl_direction",
           kd.kl_direction == KlDirection::student_first ? "student_first" : "teacher_first"},
          {"foreground_only_logit_kd", kd.foreground_only_logit_kd}}},
        {"quant",
         {{"policy", to_string(quant.policy)},
          {"per_channel", quant.per_channel},
          {"quantize_head", quant.quantize_head}}},
        {"eval",
         {{"conf_threshold", eval.conf_threshold},
          {"decode_conf_threshold", eval.decode_conf_threshold},
          {"nms_iou", eval.nms_iou},
          {"fps_iterations", eval.fps_iterations},
          {"fps_warmup", eval.fps_warmup},
          {"pooled_groups", eval.pooled_groups}}}};
  }

  static json detector_json(const DetectorConfig& d) {
    return {{"input_size", d.input_size}, {"grid", d.grid},
            {"num_classes", d.num_classes}, {"width_mult", d.width_mult},
            {"depth", d.depth},           {"head_channels", d.head_channels}};
  }

  static void reject_unknown_keys(const json& j, const std::set<std::string>& allowed,
                                  const std::string& ctx) {
    for (const auto& [key, _] : j.items())
      if (!allowed.count(key))
        throw ConfigError("unknown key '" + key + "' in " + ctx);
  }

  static DetectorConfig detector_from_json(const json& j, const std::string& ctx,
                                           const DetectorConfig& base) {
    reject_unknown_keys(j, {"input_size", "grid", "num_classes", "width_mult", "depth",
                            "head_channels"},
                        ctx);
    DetectorConfig d = base;
    if (j.contains("input_size")) d.input_size = j["input_size"].get<int>();
    if (j.contains("grid")) d.grid = j["grid"].get<int>();
    if (j.contains("num_classes")) d.num_classes = j["num_classes"].get<int>();
    if (j.contains("width_mult")) d.width_mult = j["width_mult"].get<float>();
    if (j.contains("depth")) d.depth = j["depth"].get<int>();
    if (j.contains("head_channels")) d.head_channels = j["head_channels"].get<int>();
    return d;
  }

  /// Strict parse on top of the desk-scale defaults: unknown keys anywhere
  /// are config errors.
  static RunConfig from_json(const json& j) {
    reject_unknown_keys(
        j, {"seed", "out_dir", "threads", "dataset", "teacher", "student", "training", "kd",
            "quant", "eval"},
        "run config");
    RunConfig c = desk_default();
    if (j.contains("seed")) c.seed = j["seed"].get<uint64_t>();
    if (j.contains("out_dir")) c.out_dir = j["out_dir"].get<std::string>();
    if (j.contains("threads")) c.threads = j["threads"].get<int>();
    if (j.contains("dataset")) {
      const auto& d = j["dataset"];
      reject_unknown_keys(d,
                          {"image_size", "train_images", "val_images", "calib_images",
                           "class_weights", "min_objects", "max_objects", "noise_level",
                           "color_jitter"},
                          "dataset");
      if (d.contains("image_size")) c.dataset.image_size = d["image_size"].get<int>();
      if (d.contains("train_images")) c.dataset.train_images = d["train_images"].get<int>();
      if (d.contains("val_images")) c.dataset.val_images = d["val_images"].get<int>();
      if (d.contains("calib_images")) c.dataset.calib_images = d["calib_images"].get<int>();
      if (d.contains("class_weights"))
        c.dataset.class_weights = d["class_weights"].get<std::vector<double>>();
      if (d.contains("min_objects")) c.dataset.min_objects = d["min_objects"].get<int>();
      if (d.contains("max_objects")) c.dataset.max_objects = d["max_objects"].get<int>();
      if (d.contains("noise_level")) c.dataset.noise_level = d["noise_level"].get<float>();
      if (d.contains("color_jitter")) c.dataset.color_jitter = d["color_jitter"].get<float>();
    }
    if (j.contains("teacher")) c.teacher = detector_from_json(j["teacher"], "teacher", c.teacher);
    if (j.contains("student")) c.student = detector_from_json(j["student"], "student", c.student);
    if (j.contains("training")) {
      const auto& t = j["training"];
      reject_unknown_keys(t,
                          {"epochs", "warmup_epochs", "patience", "teacher_batch",
                           "student_batch", "teacher_lr", "student_lr", "weight_decay",
                           "grad_clip_norm"},
                          "training");
      if (t.contains("epochs")) c.training.epochs = t["epochs"].get<int>();
      if (t.contains("warmup_epochs")) c.training.warmup_epochs = t["warmup_epochs"].get<int>();
      if (t.contains("patience")) c.training.patience = t["patience"].get<int>();
      if (t.contains("teacher_batch")) c.training.teacher_batch = t["teacher_batch"].get<int>();
      if (t.contains("student_batch")) c.training.student_batch = t["student_batch"].get<int>();
      if (t.contains("teacher_lr")) c.training.teacher_lr = t["teacher_lr"].get<double>();
      if (t.contains("student_lr")) c.training.student_lr = t["student_lr"].get<double>();
      if (t.contains("weight_decay")) c.training.weight_decay = t["weight_decay"].get<double>();
      if (t.contains("grad_clip_norm"))
        c.training.grad_clip_norm = t["grad_clip_norm"].get<double>();
    }
    if (j.contains("kd")) {
      const auto& k = j["kd"];
      reject_unknown_keys(
          k, {"alpha", "beta", "gamma", "temperature", "kl_direction", "foreground_only_logit_kd"},
          "kd");
      if (k.contains("alpha")) c.kd.alpha = k["alpha"].get<double>();
      if (k.contains("beta")) c.kd.beta = k["beta"].get<double>();
      if (k.contains("gamma")) c.kd.gamma = k["gamma"].get<double>();
      if (k.contains("temperature")) c.kd.temperature = k["temperature"].get<double>();
      if (k.contains("kl_direction")) {
        const auto s = k["kl_direction"].get<std::string>();
        if (s == "student_first")
          c.kd.kl_direction = KlDirection::student_first;
        else if (s == "teacher_first")
          c.kd.kl_direction = KlDirection::teacher_first;
        else
          throw ConfigError("kl_direction must be student_first or teacher_first");
      }
      if (k.contains("foreground_only_logit_kd"))
        c.kd.foreground_only_logit_kd = k["foreground_only_logit_kd"].get<bool>();
    }
    if (j.contains("quant")) {
      const auto& q = j["quant"];
      reject_unknown_keys(q, {"policy", "per_channel", "quantize_head"}, "quant");
      if (q.contains("policy")) c.quant.policy = range_policy_from_string(q["policy"]);
      if (q.contains("per_channel")) c.quant.per_channel = q["per_channel"].get<bool>();
      if (q.contains("quantize_head")) c.quant.quantize_head = q["quantize_head"].get<bool>();
    }
    if (j.contains("eval")) {
      const auto& e = j["eval"];
      reject_unknown_keys(e,
                          {"conf_threshold", "decode_conf_threshold", "nms_iou",
                           "fps_iterations", "fps_warmup", "pooled_groups"},
                          "eval");
      if (e.contains("conf_threshold")) c.eval.conf_threshold = e["conf_threshold"].get<double>();
      if (e.contains("decode_conf_threshold"))
        c.eval.decode_conf_threshold = e["decode_conf_threshold"].get<double>();
      if (e.contains("nms_iou")) c.eval.nms_iou = e["nms_iou"].get<double>();
      if (e.contains("fps_iterations")) c.eval.fps_iterations = e["fps_iterations"].get<int>();
      if (e.contains("fps_warmup")) c.eval.fps_warmup = e["fps_warmup"].get<int>();
      if (e.contains("pooled_groups")) c.eval.pooled_groups = e["pooled_groups"].get<bool>();
    }
    c.validate();
    return c;
  }

  static RunConfig from_file(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file: " + path.string());
    json j;
    try {
      is >> j;
    } catch (const json::exception& e) {
      throw ConfigError("config parse failure in " + path.string() + ": " + e.what());
    }
    return from_json(j);
  }

  /// Digest over everything that affects results (out_dir and thread count
  /// deliberately excluded: they change where work lands, not what it is).
  uint64_t digest() const {
    json j = to_json();
    j.erase("out_dir");
    j.erase("threads");
    return fnv1a64(j.dump());
  }
};

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

enum class TrainMode { direct, kd_a, kd_b };

inline const char* to_string(TrainMode m) {
  switch (m) {
    case TrainMode::direct: return "direct";
    case TrainMode::kd_a: return "kd_a";
    case TrainMode::kd_b: return "kd_b";
  }
  return "?";
}

struct TrainSettings {
  int epochs, warmup_epochs, patience, batch;
  double lr, weight_decay, grad_clip;
  uint64_t seed;
  std::string stage_tag;  // RNG stream + log naming
};

struct TrainResult {
  double best_val_map50 = 0.0;
  int best_epoch = -1;
  int epochs_run = 0;
  int64_t steps = 0;
  std::vector<double> val_map50;  // per epoch
};

/// Decode + evaluate a model over a list of image ids (batch size 1 keeps
/// the arithmetic identical to calibration and throughput paths).
inline std::vector<ImageEval> collect_detections(
    const std::function<RawPrediction(const TensorPtr&)>& infer, const Dataset& ds,
    const std::vector<int>& ids, double decode_conf, double nms_iou, int threads = 1) {
  std::vector<ImageEval> out(ids.size());
  auto work = [&](size_t i) {
    auto img = make_batch(ds, {ids[i]});
    auto pred = infer(img);
    out[i].image_id = ids[i];
    out[i].dets = decode(pred, 0, decode_conf, nms_iou);
    out[i].gts = ds.images[size_t(ids[i])].boxes;
  };
  if (threads <= 1) {
    for (size_t i = 0; i < ids.size(); ++i) work(i);
  } else {
    // Pre-sized output slots make the result independent of scheduling.
    std::vector<std::thread> pool;
    std::atomic<size_t> next{0};
    for (int t = 0; t < threads; ++t)
      pool.emplace_back([&] {
        for (size_t i = next.fetch_add(1); i < ids.size(); i = next.fetch_add(1)) work(i);
      });
    for (auto& th : pool) th.join();
  }
  return out;
}

inline std::vector<ImageEval> collect_detections_fp32(const DetectorModel& model,
                                                      const Dataset& ds,
                                                      const std::vector<int>& ids,
                                                      const EvalConfig& ev, int threads = 1) {
  return collect_detections(
      [&](const TensorPtr& img) { return model.forward(nullptr, img).pred; }, ds, ids,
      ev.decode_conf_threshold, ev.nms_iou, threads);
}

inline std::vector<ImageEval> collect_detections_int8(const QuantModel& qm, const Dataset& ds,
                                                      const std::vector<int>& ids,
                                                      const EvalConfig& ev, int threads = 1) {
  return collect_detections([&](const TensorPtr& img) { return qm.forward(img); }, ds, ids,
                            ev.decode_conf_threshold, ev.nms_iou, threads);
}

inline double val_map50(const DetectorModel& model, const Dataset& ds,
                        const std::vector<int>& val_ids, const EvalConfig& ev) {
  auto images = collect_detections_fp32(model, ds, val_ids, ev);
  try {
    return map_range(images, model.cfg.num_classes).map50;
  } catch (const EvalError&) {
    return 0.0;  // val slice without annotations (tiny smoke runs)
  }
}

/**
 * Train a detector. `teacher` non-null selects distillation (the combined
 * objective); otherwise the plain task loss trains the model. Zero-weighted
 * KD terms stay off the tape, so a KD run with beta=gamma=0 follows the
 * direct path bit for bit. Early stopping tracks validation mAP50 and the
 * best-epoch parameters are restored at the end.
 */
inline TrainResult train_detector(DetectorModel& model, const DetectorModel* teacher,
                                  FeatureProjection* proj, const Dataset& ds,
                                  const SplitManifest& splits, const TrainSettings& ts,
                                  const KDConfig& kd, const EvalConfig& ev,
                                  const fs::path& log_path) {
  std::ofstream log(log_path);
  if (!log) throw StageError("cannot open training log: " + log_path.string());
  log << "step,lr,task,logit_kd,feature_kd,total\n";
  log.precision(17);

  std::vector<TensorPtr> params = model.parameters();
  if (teacher && proj && kd.gamma != 0.0)
    for (const auto& p : proj->parameters()) params.push_back(p);
  AdamW::Settings as;
  as.weight_decay = ts.weight_decay;
  AdamW opt(params, as);

  // Targets are static; encode once.
  std::vector<TargetGrids> grids(ds.images.size());
  for (int id : splits.train)
    grids[size_t(id)] = encode_targets(ds.images[size_t(id)].boxes, model.cfg);

  TrainResult res;
  std::vector<std::vector<float>> best_params;
  int64_t step = 0;
  for (int epoch = 0; epoch < ts.epochs; ++epoch) {
    const double lr = cosine_lr(epoch, ts.epochs, ts.lr, ts.warmup_epochs);
    std::vector<int> order = splits.train;
    Pcg32 shuffle_rng(derive_seed(ts.seed, ts.stage_tag + ".shuffle", uint64_t(epoch)));
    shuffle_rng.shuffle(order);
    for (size_t at = 0; at < order.size(); at += size_t(ts.batch)) {
      const size_t hi = std::min(order.size(), at + size_t(ts.batch));
      std::vector<int> ids(order.begin() + long(at), order.begin() + long(hi));
      auto images = make_batch(ds, ids);
      std::vector<TargetGrids> batch_grids;
      batch_grids.reserve(ids.size());
      for (int id : ids) batch_grids.push_back(grids[size_t(id)]);
      auto targets = assemble_targets(batch_grids);

      Graph g;
      auto s_out = model.forward(&g, images);
      auto task = task_loss(&g, s_out.pred, targets);
      LossValue logit{nullptr, 0.0}, feat{nullptr, 0.0};
      LossBreakdown bd;
      TensorPtr loss_node;
      if (teacher) {
        auto t_out = teacher->forward(nullptr, images);
        const std::vector<uint8_t>* mask =
            kd.foreground_only_logit_kd ? &targets.fg_mask : nullptr;
        logit = logit_kd_loss(kd.beta != 0.0 ? &g : nullptr, s_out.pred.class_logits,
                              t_out.pred.class_logits, kd.temperature, kd.kl_direction, mask);
        feat = feature_kd_loss(kd.gamma != 0.0 ? &g : nullptr, s_out.feature, t_out.feature,
                               proj ? *proj : FeatureProjection{});
        auto combined = combined_loss(&g, task, logit, feat, kd);
        loss_node = combined.node;
        bd = combined.breakdown;
      } else {
        loss_node = task.node;
        bd.task = task.value;
        bd.total = task.value;
      }
      if (!std::isfinite(bd.total))
        throw StageError("non-finite loss at step " + std::to_string(step));

      opt.zero_grad();
      g.backward(loss_node);
      const double gnorm = clip_grad_norm(params, ts.grad_clip);
      if (!std::isfinite(gnorm))
        throw StageError("non-finite gradients at step " + std::to_string(step));
      opt.step(lr);

      log << step << ',' << lr << ',' << bd.task << ',' << bd.logit_kd << ',' << bd.feature_kd
          << ',' << bd.total << '\n';
      ++step;
    }
    const double m = val_map50(model, ds, splits.val, ev);
    res.val_map50.push_back(m);
    res.epochs_run = epoch + 1;
    if (res.best_epoch < 0 || m > res.best_val_map50) {
      res.best_val_map50 = m;
      res.best_epoch = epoch;
      best_params.clear();
      for (const auto& p : params) best_params.push_back(p->data);
    }
    if (epoch - res.best_epoch >= ts.patience) break;
  }
  res.steps = step;
  if (!best_params.empty())
    for (size_t i = 0; i < params.size(); ++i) params[i]->data = best_params[i];
  return res;
}

// ---------------------------------------------------------------------------
// Matched-recall comparison
// ---------------------------------------------------------------------------

struct MatchedRecallResult {
  double target_recall = 0.0;
  bool reachable = false;
  double threshold = 0.0;
  double achieved_recall = 0.0;
  double precision = 0.0;
  double precision_delta = 0.0;  // subject precision - reference precision

  json to_json() const {
    return {{"target_recall", target_recall}, {"reachable", reachable},
            {"threshold", threshold},         {"achieved_recall", achieved_recall},
            {"precision", precision},         {"precision_delta", precision_delta}};
  }
  static MatchedRecallResult from_json(const json& j) {
    MatchedRecallResult r;
    r.target_recall = j.at("target_recall").get<double>();
    r.reachable = j.at("reachable").get<bool>();
    r.threshold = j.at("threshold").get<double>();
    r.achieved_recall = j.at("achieved_recall").get<double>();
    r.precision = j.at("precision").get<double>();
    r.precision_delta = j.at("precision_delta").get<double>();
    return r;
  }
};

/**
 * Find the subject's confidence threshold whose recall matches the
 * reference report's recall within +-0.02 (bisection over the sorted
 * candidate thresholds; the sweep's monotonicity is verified on the way).
 * Reports the subject's precision at that operating point.
 */
inline MatchedRecallResult matched_recall_comparison(const EvalReport& reference,
                                                     const std::vector<ImageEval>& subject,
                                                     double match_iou = 0.5) {
  MatchedRecallResult out;
  out.target_recall = reference.recall;
  std::vector<float> cand;
  for (const auto& im : subject)
    for (const auto& d : im.dets) cand.push_back(d.confidence);
  if (cand.empty()) return out;  // unreachable: no detections at all
  std::sort(cand.begin(), cand.end());
  cand.erase(std::unique(cand.begin(), cand.end()), cand.end());

  auto recall_at = [&](double thr) {
    const auto c = counts_at_threshold(subject, thr, match_iou);
    return precision_recall(c.tp, c.fp, c.total_gts);
  };

  // Monotonicity oracle: recall never increases with the threshold. Checked
  // on an evenly spaced subsample of the candidate grid.
  const size_t stride = std::max<size_t>(1, cand.size() / 64);
  double prev = 2.0;
  for (size_t i = 0; i < cand.size(); i += stride) {  // ascending thresholds
    const double r = recall_at(double(cand[i])).recall;
    if (r > prev + 1e-12)
      throw ContractError("recall increased with threshold during matched-recall search");
    prev = r;
  }

  const double max_recall = recall_at(double(cand.front())).recall;
  if (max_recall < out.target_recall - 0.02) {
    out.reachable = false;
    out.achieved_recall = max_recall;
    return out;
  }
  // Bisect for the highest threshold whose recall still reaches
  // target - 0.02, then take the closest candidate in a small window.
  size_t lo = 0, hi = cand.size() - 1;  // recall(cand[lo]) >= ... >= recall(cand[hi])
  while (lo < hi) {
    const size_t mid = (lo + hi + 1) / 2;
    if (recall_at(double(cand[mid])).recall >= out.target_recall - 0.02)
      lo = mid;
    else
      hi = mid - 1;
  }
  double best_gap = 1e30;
  size_t best = lo;
  const size_t w_lo = lo > 4 ? lo - 4 : 0;
  const size_t w_hi = std::min(lo + 4, cand.size() - 1);
  for (size_t i = w_lo; i <= w_hi; ++i) {
    const double gap = std::abs(recall_at(double(cand[i])).recall - out.target_recall);
    if (gap < best_gap) {
      best_gap = gap;
      best = i;
    }
  }
  const auto pr = recall_at(double(cand[best]));
  out.reachable = std::abs(pr.recall - out.target_recall) <= 0.02 + 1e-12;
  out.threshold = double(cand[best]);
  out.achieved_recall = pr.recall;
  out.precision = pr.precision;
  out.precision_delta = pr.precision - reference.precision;
  return out;
}

}  // namespace kdq
