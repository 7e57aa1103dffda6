// SPDX-License-Identifier: Apache-2.0
//
// kdq: train, distill, quantize, and evaluate compact grid detectors on the
// synthetic long-tail benchmark. See README.md for the config schema.
#include <CLI11.hpp>
#include <cstdio>
#include <exception>

#include "kdq/protocol.hpp"

namespace {

struct CliState {
  std::string config_path;
  std::string out_dir;
  int64_t seed = -1;
  int threads = 0;
};

kdq::RunConfig resolve_config(const CliState& s) {
  auto cfg = s.config_path.empty() ? kdq::RunConfig::desk_default()
                                   : kdq::RunConfig::from_file(s.config_path);
  if (s.seed >= 0) cfg.seed = static_cast<uint64_t>(s.seed);
  if (!s.out_dir.empty()) cfg.out_dir = s.out_dir;
  if (s.threads > 0) cfg.threads = s.threads;
  cfg.validate();
  return cfg;
}

void run_stages(const kdq::RunConfig& cfg, const std::vector<std::string>& stages) {
  kdq::Protocol p(cfg);
  for (const auto& st : stages) {
    if (p.stage_complete(st)) {
      std::printf("[kdq] %-14s already complete, skipping\n", st.c_str());
      continue;
    }
    std::printf("[kdq] %-14s running...\n", st.c_str());
    std::fflush(stdout);
    p.run_stage(st);
    std::printf("[kdq] %-14s done (%.1f s)\n", st.c_str(),
                p.ledger().stages.at(st).duration_s);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kdq: knowledge distillation + INT8 post-training quantization lab"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may appear after the subcommand
  CliState s;
  app.add_option("--config", s.config_path, "JSON run configuration file");
  app.add_option("--seed", s.seed, "override the config seed");
  app.add_option("--out", s.out_dir, "output directory for this run");
  app.add_option("--threads", s.threads,
                 "worker threads for evaluation (training is single-threaded)");

  auto* gen = app.add_subcommand("gen-data", "generate the dataset and split manifest");
  auto* teach = app.add_subcommand("train-teacher", "train the teacher on ground truth");
  auto* stud = app.add_subcommand("train-student", "train a student model");
  std::string mode = "direct";
  stud->add_option("--mode", mode, "direct | kd-a | kd-b")->required();
  auto* calib = app.add_subcommand("calibrate", "collect activation ranges on the calibration split");
  auto* quant = app.add_subcommand("quantize", "convert trained models to INT8");
  auto* eval = app.add_subcommand("evaluate", "evaluate all models at one precision");
  std::string precision = "fp32";
  eval->add_option("--precision", precision, "fp32 | int8")->required();
  auto* runall = app.add_subcommand("run-all", "execute the full protocol end to end");
  auto* report = app.add_subcommand("report", "emit tables, figures, and trend summaries");
  auto* resume = app.add_subcommand("resume", "continue an interrupted run");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) run_stages(resolve_config(s), {"gen-data"});
    if (teach->parsed()) run_stages(resolve_config(s), {"train-teacher"});
    if (stud->parsed()) {
      std::string stage;
      if (mode == "direct") stage = "train-direct";
      else if (mode == "kd-a") stage = "train-kd-a";
      else if (mode == "kd-b") stage = "train-kd-b";
      else throw kdq::ConfigError("--mode must be direct, kd-a, or kd-b");
      run_stages(resolve_config(s), {stage});
    }
    if (calib->parsed()) run_stages(resolve_config(s), {"calibrate"});
    if (quant->parsed()) run_stages(resolve_config(s), {"quantize"});
    if (eval->parsed()) {
      std::string stage;
      if (precision == "fp32") stage = "evaluate-fp32";
      else if (precision == "int8") stage = "evaluate-int8";
      else throw kdq::ConfigError("--precision must be fp32 or int8");
      run_stages(resolve_config(s), {stage});
    }
    if (report->parsed()) run_stages(resolve_config(s), {"report"});
    if (runall->parsed()) {
      auto cfg = resolve_config(s);
      kdq::Protocol p(cfg);
      for (const auto& st : kdq::protocol_stages()) {
        if (p.stage_complete(st)) {
          std::printf("[kdq] %-14s already complete, skipping\n", st.c_str());
          continue;
        }
        std::printf("[kdq] %-14s running...\n", st.c_str());
        std::fflush(stdout);
        p.run_stage(st);
        std::printf("[kdq] %-14s done (%.1f s)\n", st.c_str(),
                    p.ledger().stages.at(st).duration_s);
      }
      std::printf("[kdq] run complete; tables in %s/tables, reports in %s/reports\n",
                  cfg.out_dir.c_str(), cfg.out_dir.c_str());
    }
    if (resume->parsed()) {
      if (s.out_dir.empty()) throw kdq::ConfigError("resume requires --out <run directory>");
      std::optional<kdq::RunConfig> expect;
      if (!s.config_path.empty()) expect = kdq::RunConfig::from_file(s.config_path);
      auto p = kdq::Protocol::resume(s.out_dir, expect);
      for (const auto& st : kdq::protocol_stages()) {
        if (p.stage_complete(st)) {
          std::printf("[kdq] %-14s already complete, skipping\n", st.c_str());
          continue;
        }
        std::printf("[kdq] %-14s running...\n", st.c_str());
        std::fflush(stdout);
        p.run_stage(st);
      }
      std::printf("[kdq] resume complete\n");
    }
  } catch (const kdq::ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
  return 0;
}
