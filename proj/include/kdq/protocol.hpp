// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "kdq/harness.hpp"

namespace kdq {

// ---------------------------------------------------------------------------
// Run ledger
// ---------------------------------------------------------------------------

struct StageRecord {
  std::string status;  // "done" | "failed"
  double duration_s = 0.0;
  std::map<std::string, std::string> outputs;  // relative path -> content hash
  json detail;
};

struct Ledger {
  std::string run_id;
  std::string config_digest;
  std::map<std::string, StageRecord> stages;

  bool done(const std::string& stage) const {
    auto it = stages.find(stage);
    return it != stages.end() && it->second.status == "done";
  }

  json to_json() const {
    json s;
    for (const auto& [name, rec] : stages)
      s[name] = {{"status", rec.status},
                 {"duration_s", rec.duration_s},
                 {"outputs", rec.outputs},
                 {"detail", rec.detail}};
    return {{"run_id", run_id}, {"config_digest", config_digest}, {"stages", s}};
  }

  static Ledger from_json(const json& j) {
    Ledger l;
    l.run_id = j.at("run_id").get<std::string>();
    l.config_digest = j.at("config_digest").get<std::string>();
    for (const auto& [name, rec] : j.at("stages").items()) {
      StageRecord r;
      r.status = rec.at("status").get<std::string>();
      r.duration_s = rec.at("duration_s").get<double>();
      r.outputs = rec.at("outputs").get<std::map<std::string, std::string>>();
      r.detail = rec.value("detail", json::object());
      l.stages[name] = r;
    }
    return l;
  }

  void save(const fs::path& path) const {
    std::ofstream os(path);
    os << to_json().dump(2) << '\n';
    if (!os) throw StageError("cannot write ledger: " + path.string());
  }
  static Ledger load(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw StageError("cannot open ledger: " + path.string());
    json j;
    is >> j;
    return from_json(j);
  }
};

// ---------------------------------------------------------------------------
// Calibration stats persistence
// ---------------------------------------------------------------------------

inline json stats_to_json(const StatsMap& stats) {
  json sites;
  for (const auto& [name, s] : stats) {
    json e = {{"min", s.min_v}, {"max", s.max_v}, {"count", s.count}};
    if (!s.hist.empty()) {
      e["hist_range"] = s.hist_range;
      e["hist"] = s.hist;
    }
    sites[name] = e;
  }
  return {{"sites", sites}};
}

inline StatsMap stats_from_json(const json& j) {
  StatsMap stats;
  for (const auto& [name, e] : j.at("sites").items()) {
    CalibrationStats s;
    s.min_v = e.at("min").get<double>();
    s.max_v = e.at("max").get<double>();
    s.count = e.at("count").get<int64_t>();
    if (e.contains("hist")) {
      s.hist = e["hist"].get<std::vector<uint64_t>>();
      s.hist_range = e["hist_range"].get<double>();
    }
    stats[name] = s;
  }
  return stats;
}

// ---------------------------------------------------------------------------
// Protocol
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& protocol_stages() {
  static const std::vector<std::string> order = {
      "gen-data",   "train-teacher", "train-direct", "train-kd-a",    "train-kd-b",
      "calibrate",  "quantize",      "evaluate-fp32", "evaluate-int8", "report"};
  return order;
}

inline const std::vector<std::string>& model_ids() {
  static const std::vector<std::string> ids = {"teacher", "student_direct", "student_kd_a",
                                               "student_kd_b"};
  return ids;
}

/**
 * Orchestrates the full experiment: data generation, teacher-first training,
 * both KD formulations, calibration on the held-out split, INT8 conversion,
 * dual-precision evaluation, and report emission. Every stage writes its
 * outputs into the run directory and records their content hashes in the
 * ledger, so an interrupted run resumes without recomputation.
 */
class Protocol {
 public:
  explicit Protocol(RunConfig cfg) : cfg_(std::move(cfg)), out_(cfg_.out_dir) {
    cfg_.validate();
    fs::create_directories(out_ / "reports");
    fs::create_directories(out_ / "tables");
    const auto cfg_path = out_ / "run_config.json";
    if (fs::exists(out_ / "ledger.json")) {
      ledger_ = Ledger::load(out_ / "ledger.json");
      if (ledger_.config_digest != hex64(cfg_.digest()))
        throw ConfigError("config digest mismatch with existing run at " + out_.string() +
                          "; refusing to resume");
    } else {
      ledger_.run_id = hex64(cfg_.digest() ^ cfg_.seed);
      ledger_.config_digest = hex64(cfg_.digest());
      std::ofstream os(cfg_path);
      os << cfg_.to_json().dump(2) << '\n';
      write_conventions();
      ledger_.save(out_ / "ledger.json");
    }
  }

  /// Reopen an existing run directory for resumption. A config supplied by
  /// the caller must match the recorded one.
  static Protocol resume(const fs::path& out_dir, const std::optional<RunConfig>& override_cfg) {
    const auto cfg_path = out_dir / "run_config.json";
    if (!fs::exists(cfg_path))
      throw ConfigError("no run to resume at " + out_dir.string());
    auto cfg = RunConfig::from_file(cfg_path);
    cfg.out_dir = out_dir.string();
    if (override_cfg && override_cfg->digest() != cfg.digest())
      throw ConfigError("config digest mismatch; refusing to resume " + out_dir.string());
    return Protocol(cfg);
  }

  const RunConfig& config() const { return cfg_; }
  const Ledger& ledger() const { return ledger_; }
  const fs::path& out() const { return out_; }

  void run_all() {
    for (const auto& stage : protocol_stages()) {
      if (stage_complete(stage)) continue;
      run_stage(stage);
    }
  }

  void run_stage(const std::string& stage) {
    const auto t0 = std::chrono::steady_clock::now();
    StageRecord rec;
    try {
      if (stage == "gen-data") rec = stage_gen_data();
      else if (stage == "train-teacher") rec = stage_train_teacher();
      else if (stage == "train-direct") rec = stage_train_student(TrainMode::direct);
      else if (stage == "train-kd-a") rec = stage_train_student(TrainMode::kd_a);
      else if (stage == "train-kd-b") rec = stage_train_student(TrainMode::kd_b);
      else if (stage == "calibrate") rec = stage_calibrate();
      else if (stage == "quantize") rec = stage_quantize();
      else if (stage == "evaluate-fp32") rec = stage_evaluate("FP32");
      else if (stage == "evaluate-int8") rec = stage_evaluate("INT8");
      else if (stage == "report") rec = stage_report();
      else throw ConfigError("unknown stage '" + stage + "'");
    } catch (...) {
      StageRecord failed;
      failed.status = "failed";
      failed.duration_s =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      ledger_.stages[stage] = failed;
      ledger_.save(out_ / "ledger.json");
      throw;
    }
    rec.status = "done";
    rec.duration_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    ledger_.stages[stage] = rec;
    ledger_.save(out_ / "ledger.json");
  }

  /// A stage counts as complete only if the ledger says so and every
  /// recorded output still exists with the recorded content hash.
  bool stage_complete(const std::string& stage) const {
    auto it = ledger_.stages.find(stage);
    if (it == ledger_.stages.end() || it->second.status != "done") return false;
    for (const auto& [rel, hash] : it->second.outputs) {
      const auto p = out_ / rel;
      if (!fs::exists(p) || hex64(file_content_hash(p)) != hash) return false;
    }
    return true;
  }

  // -- artifact access (used by stages and by tests) ----------------------

  const Dataset& dataset() {
    if (!ds_) {
      const auto p = out_ / "dataset.kdq";
      if (!fs::exists(p)) throw StageError("dataset not generated yet (run gen-data)");
      ds_ = load_dataset(p);
    }
    return *ds_;
  }

  const SplitManifest& splits() {
    if (!splits_) {
      const auto p = out_ / "splits.json";
      if (!fs::exists(p)) throw StageError("splits not generated yet (run gen-data)");
      std::ifstream is(p);
      json j;
      is >> j;
      splits_ = SplitManifest::from_json(j);
    }
    return *splits_;
  }

  DetectorModel load_trained(const std::string& model_id) {
    const auto path = out_ / ("ckpt_" + model_id + ".bin");
    if (!fs::exists(path))
      throw StageError("missing checkpoint for " + model_id + " (train it first)");
    const bool is_teacher = model_id == "teacher";
    auto model = build_model(is_teacher ? cfg_.teacher : cfg_.student, init_seed(model_id));
    load_into_params(load_checkpoint(path), model.parameters());
    return model;
  }

  QuantModel load_quantized(const std::string& model_id) {
    const auto path = out_ / ("quant_" + model_id + ".bin");
    if (!fs::exists(path))
      throw StageError("missing quantized model for " + model_id + " (run quantize)");
    return load_quant_model(path);
  }

  EvalReport load_report(const std::string& model_id, const std::string& precision) const {
    const auto path = report_path(model_id, precision);
    if (!fs::exists(path))
      throw StageError("missing evaluation report for " + model_id + "/" + precision);
    std::ifstream is(path);
    json j;
    is >> j;
    return EvalReport::from_json(j);
  }

  fs::path report_path(const std::string& model_id, const std::string& precision) const {
    std::string p = precision;
    for (auto& ch : p) ch = char(std::tolower(ch));
    return out_ / "reports" / ("eval_" + model_id + "_" + p + ".json");
  }

 private:
  uint64_t init_seed(const std::string& model_id) const {
    // Both students share one init stream: supervision is the only
    // difference between the direct and KD runs.
    return derive_seed(cfg_.seed, model_id == "teacher" ? "init.teacher" : "init.student");
  }

  void write_conventions() const {
    const json conv = {
        {"weight_init", "kaiming uniform (fan-in), zero biases"},
        {"lr_schedule", "linear warmup to base_lr, half-cosine decay to base_lr/100"},
        {"optimizer", "AdamW, beta1 0.9, beta2 0.999, eps 1e-8, decoupled weight decay"},
        {"rounding", "round half to even"},
        {"quantization", "symmetric per-tensor INT8, zero point 0, reserved -128 unused"},
        {"confidence_definition", "sigmoid(objectness) * max(softmax(class_logits))"},
        {"feature_projection", "learned 1x1 conv when student/teacher channels differ"},
        {"desk_scale_overrides",
         {{"epochs", "30 (reference configuration: 50)"},
          {"batches", "teacher 32 / students 64 (reference: 64 / 256)"},
          {"images", "2000 train / 500 val / 128 calibration"}}},
        {"fps", "simulated CPU inference; absolute numbers are not hardware throughput"}};
    std::ofstream os(out_ / "run_conventions.json");
    os << conv.dump(2) << '\n';
  }

  StageRecord with_outputs(std::initializer_list<std::string> rels, json detail = {}) const {
    StageRecord rec;
    for (const auto& rel : rels) rec.outputs[rel] = hex64(file_content_hash(out_ / rel));
    rec.detail = std::move(detail);
    return rec;
  }

  // -- stages --------------------------------------------------------------

  StageRecord stage_gen_data() {
    auto ds = generate(cfg_.dataset.scene_spec(), cfg_.total_images(),
                       derive_seed(cfg_.seed, "dataset"));
    auto splits = make_splits_counts(cfg_.total_images(), cfg_.dataset.train_images,
                                     cfg_.dataset.val_images, cfg_.dataset.calib_images,
                                     derive_seed(cfg_.seed, "splits"));
    splits.check_disjoint();
    save_dataset(ds, out_ / "dataset.kdq");
    {
      std::ofstream os(out_ / "splits.json");
      os << splits.to_json().dump(2) << '\n';
    }
    ds_ = std::move(ds);
    splits_ = std::move(splits);
    json detail;
    detail["per_class_instances"] = ds_->per_class_counts();
    return with_outputs({"dataset.kdq", "splits.json"}, detail);
  }

  TrainSettings teacher_settings() const {
    return {cfg_.training.epochs,      cfg_.training.warmup_epochs, cfg_.training.patience,
            cfg_.training.teacher_batch, cfg_.training.teacher_lr,  cfg_.training.weight_decay,
            cfg_.training.grad_clip_norm, cfg_.seed,                "train.teacher"};
  }

  TrainSettings student_settings() const {
    // One shuffle stream for every student mode: batches are identical
    // across direct / kd-a / kd-b runs.
    return {cfg_.training.epochs,      cfg_.training.warmup_epochs, cfg_.training.patience,
            cfg_.training.student_batch, cfg_.training.student_lr,  cfg_.training.weight_decay,
            cfg_.training.grad_clip_norm, cfg_.seed,                "train.student"};
  }

  StageRecord stage_train_teacher() {
    auto model = build_model(cfg_.teacher, init_seed("teacher"));
    auto res = train_detector(model, nullptr, nullptr, dataset(), splits(), teacher_settings(),
                              cfg_.kd, cfg_.eval, out_ / "trainlog_teacher.csv");
    save_checkpoint(out_ / "ckpt_teacher.bin", model.parameters(), cfg_.teacher.digest());
    return with_outputs({"ckpt_teacher.bin", "trainlog_teacher.csv"},
                        {{"best_val_map50", res.best_val_map50},
                         {"best_epoch", res.best_epoch},
                         {"epochs_run", res.epochs_run},
                         {"steps", res.steps},
                         {"param_count", model.param_count()}});
  }

  StageRecord stage_train_student(TrainMode mode) {
    std::unique_ptr<DetectorModel> teacher;
    FeatureProjection proj;
    KDConfig kd = cfg_.kd;
    if (mode != TrainMode::direct) {
      // Stage ordering: no student distillation without a frozen teacher.
      teacher = std::make_unique<DetectorModel>(load_trained("teacher"));
      teacher->set_trainable(false);
      if (mode == TrainMode::kd_b) kd.alpha = 1.0;  // Form B: only alpha changes
      if (kd.gamma != 0.0)
        proj = make_feature_projection(cfg_.student.trunk_channels(),
                                       cfg_.teacher.trunk_channels(), cfg_.seed);
    }
    auto model = build_model(cfg_.student, init_seed("student"));
    const std::string id = mode == TrainMode::direct  ? "student_direct"
                           : mode == TrainMode::kd_a ? "student_kd_a"
                                                     : "student_kd_b";
    auto res = train_detector(model, teacher.get(), &proj, dataset(), splits(),
                              student_settings(), kd, cfg_.eval,
                              out_ / ("trainlog_" + id + ".csv"));
    save_checkpoint(out_ / ("ckpt_" + id + ".bin"), model.parameters(), cfg_.student.digest());
    return with_outputs({"ckpt_" + id + ".bin", "trainlog_" + id + ".csv"},
                        {{"mode", to_string(mode)},
                         {"alpha", kd.alpha},
                         {"best_val_map50", res.best_val_map50},
                         {"best_epoch", res.best_epoch},
                         {"epochs_run", res.epochs_run},
                         {"steps", res.steps},
                         {"param_count", model.param_count()}});
  }

  StageRecord stage_calibrate() {
    std::initializer_list<std::string> outs = {
        "calib_teacher.json", "calib_student_direct.json", "calib_student_kd_a.json",
        "calib_student_kd_b.json"};
    for (const auto& id : model_ids()) {
      auto model = load_trained(id);
      auto stats = calibrate(model, dataset(), splits().calibration, cfg_.quant.policy);
      std::ofstream os(out_ / ("calib_" + id + ".json"));
      os << stats_to_json(stats).dump() << '\n';
    }
    return with_outputs(outs, {{"calibration_images", splits().calibration.size()},
                               {"policy", to_string(cfg_.quant.policy)}});
  }

  StageRecord stage_quantize() {
    StageRecord rec;
    for (const auto& id : model_ids()) {
      const auto stats_path = out_ / ("calib_" + id + ".json");
      if (!fs::exists(stats_path))
        throw StageError("missing calibration stats for " + id + " (run calibrate)");
      std::ifstream is(stats_path);
      json j;
      is >> j;
      auto model = load_trained(id);
      auto qm = convert(model, stats_from_json(j), cfg_.quant.options());
      save_quant_model(qm, out_ / ("quant_" + id + ".bin"));
      conversion_report(model, qm).write_csv(out_ / ("conversion_" + id + ".csv"));
      rec.outputs["quant_" + id + ".bin"] =
          hex64(file_content_hash(out_ / ("quant_" + id + ".bin")));
      rec.outputs["conversion_" + id + ".csv"] =
          hex64(file_content_hash(out_ / ("conversion_" + id + ".csv")));
    }
    return rec;
  }

  StageRecord stage_evaluate(const std::string& precision) {
    StageRecord rec;
    EvalOptions opt;
    opt.conf_threshold = cfg_.eval.conf_threshold;
    opt.groups = default_vru_groups();
    opt.pooled_groups = cfg_.eval.pooled_groups;
    std::map<std::string, std::vector<ImageEval>> collected;
    for (const auto& id : model_ids()) {
      auto model = load_trained(id);
      std::vector<ImageEval> images;
      double fps = 0.0;
      auto probe = make_batch(dataset(), {splits().val.front()});
      if (precision == "FP32") {
        images = collect_detections_fp32(model, dataset(), splits().val, cfg_.eval,
                                         cfg_.threads);
        fps = throughput([&] { model.forward(nullptr, probe); }, cfg_.eval.fps_iterations,
                         cfg_.eval.fps_warmup);
      } else {
        auto qm = load_quantized(id);
        images = collect_detections_int8(qm, dataset(), splits().val, cfg_.eval, cfg_.threads);
        fps = throughput([&] { qm.forward(probe); }, cfg_.eval.fps_iterations,
                         cfg_.eval.fps_warmup);
      }
      auto report = evaluate_detections(images, cfg_.student.num_classes, opt);
      report.fps = fps;
      report.precision_level = precision;
      report.model_id = id;
      report.config_digest = hex64(cfg_.digest());
      report.param_count = model.param_count();
      report.validate();
      const auto path = report_path(id, precision);
      {
        std::ofstream os(path);
        os << report.to_json().dump(2) << '\n';
      }
      rec.outputs[fs::relative(path, out_).string()] = hex64(file_content_hash(path));
      collected[id] = std::move(images);
    }
    // Matched-recall comparison: KD Form A against the direct student.
    const auto ref = load_report("student_direct", precision);
    auto mr = matched_recall_comparison(ref, collected["student_kd_a"]);
    std::string lower = precision == "FP32" ? "fp32" : "int8";
    const auto mr_path = out_ / "reports" / ("matched_recall_" + lower + ".json");
    {
      json j = mr.to_json();
      j["reference"] = "student_direct";
      j["subject"] = "student_kd_a";
      j["reference_precision"] = ref.precision;
      std::ofstream os(mr_path);
      os << j.dump(2) << '\n';
    }
    rec.outputs[fs::relative(mr_path, out_).string()] = hex64(file_content_hash(mr_path));
    return rec;
  }

  StageRecord stage_report();

  RunConfig cfg_;
  fs::path out_;
  Ledger ledger_;
  std::optional<Dataset> ds_;
  std::optional<SplitManifest> splits_;
};

// ---------------------------------------------------------------------------
// Tables and trends (report stage)
// ---------------------------------------------------------------------------

namespace report_detail {

inline std::string fmt(double v, int prec = 3) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

/// Percentage delta relative to a baseline, rounded to the nearest percent
/// and rendered with an explicit sign ("+20%", "-44%").
inline std::string pct_delta(double value, double baseline) {
  if (baseline == 0.0) return "n/a";
  const double pct = 100.0 * (value - baseline) / baseline;
  const long r = std::lround(pct);
  return (r >= 0 ? "+" : "") + std::to_string(r) + "%";
}

struct TableWriter {
  std::string title;
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  void write(const fs::path& txt, const fs::path& csv) const {
    std::vector<size_t> width(columns.size());
    for (size_t c = 0; c < columns.size(); ++c) width[c] = columns[c].size();
    for (const auto& r : rows)
      for (size_t c = 0; c < r.size(); ++c) width[c] = std::max(width[c], r[c].size());
    std::ofstream os(txt);
    os << title << '\n';
    auto line = [&](const std::vector<std::string>& cells) {
      for (size_t c = 0; c < cells.size(); ++c) {
        os << cells[c];
        if (c + 1 < cells.size()) os << std::string(width[c] - cells[c].size() + 2, ' ');
      }
      os << '\n';
    };
    line(columns);
    size_t total = 0;
    for (size_t c = 0; c < columns.size(); ++c) total += width[c] + 2;
    os << std::string(total, '-') << '\n';
    for (const auto& r : rows) line(r);

    std::ofstream cs(csv);
    auto csv_line = [&](const std::vector<std::string>& cells) {
      for (size_t c = 0; c < cells.size(); ++c) cs << cells[c] << (c + 1 < cells.size() ? "," : "");
      cs << '\n';
    };
    csv_line(columns);
    for (const auto& r : rows) csv_line(r);
  }
};

}  // namespace report_detail

inline StageRecord Protocol::stage_report() {
  using report_detail::fmt;
  using report_detail::pct_delta;
  using report_detail::TableWriter;

  // Gather every input up front; a missing report aborts before any file is
  // written.
  std::map<std::string, EvalReport> fp32, int8;
  for (const auto& id : model_ids()) {
    fp32[id] = load_report(id, "FP32");
    int8[id] = load_report(id, "INT8");
    fp32[id].validate();
    int8[id].validate();
    if (fp32[id].far != 1.0 - fp32[id].precision || int8[id].far != 1.0 - int8[id].precision)
      throw StageError("FAR identity violated in stored reports for " + id);
  }
  MatchedRecallResult mr_int8, mr_fp32;
  {
    std::ifstream is(out_ / "reports" / "matched_recall_int8.json");
    if (!is) throw StageError("missing matched-recall record (run evaluate-int8)");
    json j;
    is >> j;
    mr_int8 = MatchedRecallResult::from_json(j);
    std::ifstream is2(out_ / "reports" / "matched_recall_fp32.json");
    if (!is2) throw StageError("missing matched-recall record (run evaluate-fp32)");
    json j2;
    is2 >> j2;
    mr_fp32 = MatchedRecallResult::from_json(j2);
  }

  std::ofstream prov(out_ / "tables" / "provenance.csv");
  prov << "table,row,column,value,model_id,precision_level,config_digest\n";
  auto provenance = [&](const std::string& table, const std::string& row, const std::string& col,
                        const std::string& value, const std::string& model,
                        const std::string& precision) {
    prov << table << ',' << row << ',' << col << ',' << value << ',' << model << ','
         << precision << ',' << ledger_.config_digest << '\n';
  };

  const std::map<std::string, std::string> label = {{"teacher", "Teacher (L)"},
                                                    {"student_direct", "Direct (S)"},
                                                    {"student_kd_a", "KD (S)"},
                                                    {"student_kd_b", "KD Form B (S)"}};
  const std::vector<std::string> trio = {"teacher", "student_direct", "student_kd_a"};

  {  // Table 1: FP32 results
    TableWriter t;
    t.title = "Table 1: FP32 detection performance (validation split)";
    t.columns = {"Model", "Params", "mAP50", "mAP50-95", "Precision", "Recall", "FAR"};
    for (const auto& id : trio) {
      const auto& r = fp32[id];
      t.rows.push_back({label.at(id), std::to_string(r.param_count), fmt(r.map50),
                        fmt(r.map50_95), fmt(r.precision), fmt(r.recall), fmt(r.far)});
      for (const auto& col : {"mAP50", "Precision", "Recall", "FAR"})
        provenance("table1", label.at(id), col,
                   col == std::string("mAP50") ? fmt(r.map50)
                   : col == std::string("Precision")
                       ? fmt(r.precision)
                       : col == std::string("Recall") ? fmt(r.recall) : fmt(r.far),
                   id, "FP32");
    }
    t.write(out_ / "tables" / "table1_fp32.txt", out_ / "tables" / "table1_fp32.csv");
  }

  {  // Table 2: group performance at FP32
    TableWriter t;
    t.title = "Table 2: minority-group detection performance (mAP50, FP32)";
    t.columns = {"Model", "Pedestrians", "Cyclists", "Motorcyclists", "VRU Avg"};
    for (const auto& id : trio) {
      const auto& r = fp32[id];
      auto g = [&](const char* name) {
        auto it = r.per_group_ap50.find(name);
        return it == r.per_group_ap50.end() ? std::string("n/a") : fmt(it->second);
      };
      t.rows.push_back(
          {label.at(id), g("pedestrians"), g("cyclists"), g("motorcyclists"), fmt(r.vru_avg)});
      provenance("table2", label.at(id), "VRU Avg", fmt(r.vru_avg), id, "FP32");
    }
    t.write(out_ / "tables" / "table2_vru_groups.txt", out_ / "tables" / "table2_vru_groups.csv");
  }

  {  // Table 3: quantization impact
    TableWriter t;
    t.title = "Table 3: quantization impact, FP32 -> INT8 (mAP50)";
    t.columns = {"Model", "FP32", "INT8", "dMAP", "d%"};
    for (const auto& id : trio) {
      const auto d = degradation(fp32[id], int8[id]);
      t.rows.push_back({label.at(id), fmt(fp32[id].map50), fmt(int8[id].map50),
                        fmt(d.delta_map), d.delta_pct ? fmt(*d.delta_pct, 1) + "%" : "n/a"});
      provenance("table3", label.at(id), "d%", d.delta_pct ? fmt(*d.delta_pct, 1) : "n/a", id,
                 "INT8");
    }
    t.write(out_ / "tables" / "table3_quant_impact.txt",
            out_ / "tables" / "table3_quant_impact.csv");
  }

  {  // Table 4: precision and FAR at INT8 versus the teacher baseline
    TableWriter t;
    t.title = "Table 4: precision and false alarm rate at INT8";
    t.columns = {"Model", "mAP50", "Precision", "dPrec", "Recall", "FAR", "dFAR"};
    const auto& base = int8["teacher"];
    for (const auto& id : trio) {
      const auto& r = int8[id];
      const bool is_base = id == "teacher";
      t.rows.push_back({label.at(id), fmt(r.map50), fmt(r.precision),
                        is_base ? "baseline" : pct_delta(r.precision, base.precision),
                        fmt(r.recall), fmt(r.far),
                        is_base ? "baseline" : pct_delta(r.far, base.far)});
      if (!is_base) {
        provenance("table4", label.at(id), "dPrec", pct_delta(r.precision, base.precision), id,
                   "INT8");
        provenance("table4", label.at(id), "dFAR", pct_delta(r.far, base.far), id, "INT8");
      }
    }
    t.write(out_ / "tables" / "table4_int8_precision_far.txt",
            out_ / "tables" / "table4_int8_precision_far.csv");
  }

  {  // Table 5: task-loss-weight ablation at INT8
    TableWriter t;
    t.title = "Table 5: task loss weight ablation at INT8";
    t.columns = {"Formulation", "alpha", "mAP50", "Precision", "Recall", "FAR"};
    auto row = [&](const std::string& id, const std::string& name, const std::string& alpha) {
      const auto& r = int8.at(id);
      t.rows.push_back({name, alpha, fmt(r.map50), fmt(r.precision), fmt(r.recall), fmt(r.far)});
      provenance("table5", name, "Precision", fmt(r.precision), id, "INT8");
    };
    row("student_direct", "Direct (baseline)", "-");
    row("student_kd_b", "KD Form B", fmt(1.0, 1));
    row("student_kd_a", "KD Form A", fmt(cfg_.kd.alpha, 1));
    t.write(out_ / "tables" / "table5_ablation.txt", out_ / "tables" / "table5_ablation.csv");
  }

  {  // Figure series: grouped bars of FP32-vs-INT8, and deployment summary
    std::ofstream f2(out_ / "tables" / "fig2_series.csv");
    f2 << "model,precision_level,map50,precision,recall,far\n";
    for (const auto& id : trio)
      for (const auto* r : {&fp32[id], &int8[id]})
        f2 << id << ',' << r->precision_level << ',' << fmt(r->map50, 6) << ','
           << fmt(r->precision, 6) << ',' << fmt(r->recall, 6) << ',' << fmt(r->far, 6) << '\n';
    std::ofstream f3(out_ / "tables" / "fig3_series.csv");
    f3 << "model,precision_level,fps,precision,far\n";
    for (const auto& id : trio)
      for (const auto* r : {&fp32[id], &int8[id]})
        f3 << id << ',' << r->precision_level << ',' << fmt(r->fps, 2) << ','
           << fmt(r->precision, 6) << ',' << fmt(r->far, 6) << '\n';
  }

  {  // Summary CSV of every report row
    std::ofstream sum(out_ / "reports" / "summary.csv");
    sum << fp32["teacher"].csv_header() << '\n';
    for (const auto& id : model_ids()) {
      sum << fp32[id].csv_row() << '\n';
      sum << int8[id].csv_row() << '\n';
    }
  }

  // Directional trends; failures are highlighted loudly rather than hidden.
  const double drop_teacher = fp32["teacher"].map50 - int8["teacher"].map50;
  const double drop_direct = fp32["student_direct"].map50 - int8["student_direct"].map50;
  const double drop_kd = fp32["student_kd_a"].map50 - int8["student_kd_a"].map50;
  const bool trend_a = drop_teacher >= drop_kd;
  const bool trend_b =
      mr_int8.reachable && mr_int8.precision >= int8["student_direct"].precision - 0.01;
  {
    std::ofstream tr(out_ / "tables" / "trends.txt");
    tr << "Desk-scale directional trends (single run; aggregate across seeds before "
          "drawing conclusions)\n\n";
    tr << "[trend A] INT8 mAP50 drop under the " << to_string(cfg_.quant.policy)
       << " policy:\n";
    tr << "  teacher " << fmt(drop_teacher, 4) << "  direct " << fmt(drop_direct, 4)
       << "  kd-a " << fmt(drop_kd, 4) << '\n';
    tr << "  expectation teacher >= kd student: " << (trend_a ? "HOLDS" : "DOES NOT HOLD")
       << '\n';
    if (!trend_a)
      tr << "  !! ATTENTION: the larger model degraded less than the KD student on this "
            "run.\n";
    tr << "\n[trend B] precision at matched recall, INT8 (kd-a vs direct):\n";
    if (mr_int8.reachable) {
      tr << "  kd-a precision " << fmt(mr_int8.precision, 4) << " at recall "
         << fmt(mr_int8.achieved_recall, 4) << " (target " << fmt(mr_int8.target_recall, 4)
         << "), direct precision " << fmt(int8["student_direct"].precision, 4) << ", delta "
         << fmt(mr_int8.precision_delta, 4) << '\n';
    } else {
      tr << "  target recall " << fmt(mr_int8.target_recall, 4)
         << " unreachable by kd-a (max achieved " << fmt(mr_int8.achieved_recall, 4) << ")\n";
    }
    tr << "  expectation kd >= direct - 0.01: " << (trend_b ? "HOLDS" : "DOES NOT HOLD") << '\n';
    if (!trend_b)
      tr << "  !! ATTENTION: KD did not preserve the precision advantage on this run.\n";
    std::ofstream tj(out_ / "tables" / "trends.json");
    tj << json{{"trend_a_teacher_degrades_more", trend_a},
               {"trend_b_kd_precision_at_matched_recall", trend_b},
               {"drop_teacher", drop_teacher},
               {"drop_direct", drop_direct},
               {"drop_kd_a", drop_kd},
               {"matched_recall_int8", mr_int8.to_json()},
               {"matched_recall_fp32", mr_fp32.to_json()}}
              .dump(2)
       << '\n';
  }

  return with_outputs(
      {"tables/table1_fp32.txt", "tables/table1_fp32.csv", "tables/table2_vru_groups.txt",
       "tables/table2_vru_groups.csv", "tables/table3_quant_impact.txt",
       "tables/table3_quant_impact.csv", "tables/table4_int8_precision_far.txt",
       "tables/table4_int8_precision_far.csv", "tables/table5_ablation.txt",
       "tables/table5_ablation.csv", "tables/fig2_series.csv", "tables/fig3_series.csv",
       "tables/provenance.csv", "tables/trends.txt", "tables/trends.json",
       "reports/summary.csv"},
      {{"trend_a_teacher_degrades_more", trend_a},
       {"trend_b_kd_precision_at_matched_recall", trend_b}});
}

}  // namespace kdq
