// store3d command-line tool: synthetic scenes, corridor labeling, detection
// metrics, the sparse pipeline, FLOP profiling, and gradient checks.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "store3d/config.hpp"
#include "store3d/corridor.hpp"
#include "store3d/io.hpp"
#include "store3d/jsonout.hpp"
#include "store3d/metrics.hpp"
#include "store3d/profiler.hpp"
#include "store3d/trainer.hpp"

namespace fs = std::filesystem;
using namespace store3d;

namespace {

std::vector<std::string> g_outputs;

std::string out_path(const std::string& dir, const std::string& file) {
  fs::create_directories(dir);
  std::string p = (fs::path(dir) / file).string();
  g_outputs.push_back(p);
  return p;
}

void remove_partial_outputs() {
  for (const auto& p : g_outputs) {
    std::error_code ec;
    fs::remove(p, ec);
  }
}

struct CliOptions {
  std::string config_path;
  std::string out_dir = "out";
  std::optional<uint64_t> seed;
  std::optional<double> tkr;
  std::optional<double> dmin;
  std::optional<double> ra_radius;
  std::string mode = "sparse_eval";
};

RunConfig resolve_config(const CliOptions& opt) {
  RunConfig cfg = opt.config_path.empty() ? RunConfig{} : load_config(opt.config_path);
  if (opt.seed) {
    cfg.seed = *opt.seed;
    cfg.dataset.seed = *opt.seed;
  }
  if (opt.tkr) cfg.schedule.tkr = *opt.tkr;
  if (opt.dmin) cfg.relevance.d_min_m = *opt.dmin;
  if (opt.ra_radius) cfg.metrics.ra_radius = *opt.ra_radius;
  cfg.validate();
  return cfg;
}

RunMode parse_mode(const std::string& mode) {
  if (mode == "dense") return RunMode::dense;
  if (mode == "sparse_eval") return RunMode::sparse_eval;
  if (mode == "sparse_train") return RunMode::sparse_train;
  throw ConfigError("mode must be dense|sparse_eval|sparse_train");
}

SceneDataset subset_dataset(const SceneDataset& ds, const std::vector<int>& idx) {
  SceneDataset out;
  out.meta = ds.meta;
  for (int i : idx) out.scenes.push_back(ds.scenes[i]);
  return out;
}

void print_line(const std::string& s) { std::cout << s << "\n"; }

// ---------------------------------------------------------------------------

int cmd_gen(const CliOptions& opt) {
  RunConfig cfg = resolve_config(opt);
  OutputStamp stamp{cfg.hash()};
  auto ds = gen_synthetic(cfg.dataset);
  write_dataset(out_path(opt.out_dir, cfg.io.dataset_file), ds, stamp);
  print_line("wrote " + cfg.io.dataset_file + " with " +
             std::to_string(ds.scenes.size()) + " scenes");
  return 0;
}

int cmd_calibrate(const CliOptions& opt) {
  RunConfig cfg = resolve_config(opt);
  OutputStamp stamp{cfg.hash()};
  auto ds = read_dataset((fs::path(opt.out_dir) / cfg.io.dataset_file).string());
  auto calib = calibrate_dmin(ds, cfg.relevance);
  write_cdf_csv(out_path(opt.out_dir, cfg.io.cdf_file), calib, stamp);
  JsonWriter w;
  w.begin_object();
  w.key("d_min");
  w.value(calib.d_min);
  w.key("pairs");
  w.value(static_cast<long>(calib.cdf.size()));
  w.key("percentile");
  w.value(cfg.relevance.percentile);
  w.end_object();
  print_line(w.str());
  return 0;
}

int cmd_label(const CliOptions& opt) {
  RunConfig cfg = resolve_config(opt);
  OutputStamp stamp{cfg.hash()};
  auto ds = read_dataset((fs::path(opt.out_dir) / cfg.io.dataset_file).string());
  auto labels = label_dataset(ds, cfg.relevance);
  write_labels_jsonl(out_path(opt.out_dir, cfg.io.labels_file), labels, stamp);
  long relevant = 0, total = 0;
  for (const auto& fl : labels) {
    for (const auto& l : fl.labels) {
      ++total;
      if (l.relevant) ++relevant;
    }
  }
  print_line("labeled " + std::to_string(total) + " (frame, agent) pairs, " +
             std::to_string(relevant) + " relevant");
  return 0;
}

int cmd_eval(const CliOptions& opt) {
  RunConfig cfg = resolve_config(opt);
  OutputStamp stamp{cfg.hash()};
  auto ds = read_dataset((fs::path(opt.out_dir) / cfg.io.dataset_file).string());
  auto labels = read_labels_jsonl((fs::path(opt.out_dir) / cfg.io.labels_file).string());
  auto dets = read_detections_jsonl(
      (fs::path(opt.out_dir) / cfg.io.detections_file).string());
  auto frames = build_eval_frames(ds, labels, dets);
  auto report = evaluate(frames, cfg.metrics);
  write_metrics_report(out_path(opt.out_dir, cfg.io.report_file), report, stamp);
  write_metrics_csv(out_path(opt.out_dir, cfg.io.report_csv_file), report, stamp);
  std::printf("mAP %.4f  mAP-RA %.4f  NDS %.4f  NDS-RA %.4f  NDS-RM %.4f\n",
              report.map, report.map_ra, report.nds, report.nds_ra,
              report.nds_rm);
  return 0;
}

int cmd_simulate(const CliOptions& opt) {
  RunConfig cfg = resolve_config(opt);
  OutputStamp stamp{cfg.hash()};
  RunMode mode = parse_mode(opt.mode);
  auto ds = read_dataset((fs::path(opt.out_dir) / cfg.io.dataset_file).string());
  auto labels = read_labels_jsonl((fs::path(opt.out_dir) / cfg.io.labels_file).string());

  auto params = ModelParams::init(cfg.model, cfg.seed);
  if (cfg.train.iterations > 0) {
    auto rel = train_relevance_head(params, cfg.model, cfg.schedule, cfg.loss,
                                    ds, labels, cfg.train);
    std::printf("relevance head trained: loss %.4f, held-out AUC %.3f\n",
                rel.final_loss, rel.auc);
  }
  if (cfg.train.det_iterations > 0) {
    auto det = train_detection_heads(params, cfg.model, cfg.schedule, cfg.loss,
                                     ds, labels, cfg.train,
                                     mode == RunMode::dense ? RunMode::dense
                                                            : RunMode::sparse_eval);
    std::printf("detection heads trained: loss %.4f\n", det.final_loss);
  }

  std::vector<int> all(ds.scenes.size());
  std::iota(all.begin(), all.end(), 0);
  auto sim = simulate(ds, all, params, cfg.model, cfg.schedule, mode, cfg.seed);
  write_detections_jsonl(out_path(opt.out_dir, cfg.io.detections_file),
                         sim.detections, stamp);
  write_traces_json(out_path(opt.out_dir, cfg.io.trace_file), sim.traces, stamp);
  print_line("simulated " + std::to_string(sim.traces.size()) + " frames, " +
             std::to_string(sim.detections.size()) + " detections");
  return 0;
}

int cmd_profile(const CliOptions& opt) {
  RunConfig cfg = resolve_config(opt);
  OutputStamp stamp{cfg.hash()};
  PipelineShape shape = PipelineShape::from_model(cfg.model);
  auto report = pipeline_flops(shape, cfg.schedule);
  write_flop_report(out_path(opt.out_dir, cfg.io.flops_file), report, stamp);

  std::vector<FlopSweepRow> rows;
  for (double tkr : {1.0, 0.5, 0.33, 0.1}) {
    ScheduleConfig s = cfg.schedule;
    s.tkr = tkr;
    auto r = pipeline_flops(shape, s);
    rows.push_back({tkr, r.total, r.ratio, r.mkr, r.buffer_bytes});
  }
  write_flops_csv(out_path(opt.out_dir, cfg.io.flops_csv_file), rows, stamp);
  std::printf("total %.3e FLOPs (ratio %.3f, MKR %.3f, buffer %.0f entries)\n",
              report.total, report.ratio, report.mkr, report.buffer_entries);
  return 0;
}

int cmd_gradcheck(const CliOptions& opt) {
  RunConfig cfg = resolve_config(opt);
  OutputStamp stamp{cfg.hash()};
  auto rows = run_gradient_suite(cfg);
  write_gradcheck_json(out_path(opt.out_dir, cfg.io.gradcheck_file), rows, stamp);
  bool all_pass = true;
  for (const auto& r : rows) {
    std::printf("%-28s %12.3e  %s\n", r.name.c_str(), r.max_rel_error,
                r.pass ? "pass" : "FAIL");
    all_pass = all_pass && r.pass;
  }
  if (!all_pass) throw CheckFailure("gradient suite exceeded tolerance");
  return 0;
}

int cmd_curve(const CliOptions& opt) {
  RunConfig cfg = resolve_config(opt);
  OutputStamp stamp{cfg.hash()};
  auto ds = read_dataset((fs::path(opt.out_dir) / cfg.io.dataset_file).string());

  auto calib = calibrate_dmin(ds, cfg.relevance);
  RelevanceConfig rel = cfg.relevance;
  rel.d_min_m = calib.d_min;
  auto labels = label_dataset(ds, rel);

  auto [train_idx, eval_idx] = split_scenes(ds, cfg.train.train_scene_fraction);
  auto eval_ds = subset_dataset(ds, eval_idx);
  PipelineShape shape = PipelineShape::from_model(cfg.model);

  std::vector<CurveRow> rows;
  for (double tkr : {1.0, 0.5, 0.33, 0.1}) {
    ScheduleConfig schedule = cfg.schedule;
    schedule.tkr = tkr;

    auto params = ModelParams::init(cfg.model, cfg.seed);
    train_relevance_head(params, cfg.model, schedule, cfg.loss, ds, labels,
                         cfg.train);
    train_detection_heads(params, cfg.model, schedule, cfg.loss, ds, labels,
                          cfg.train, RunMode::sparse_eval);

    auto sim = simulate(ds, eval_idx, params, cfg.model, schedule,
                        RunMode::sparse_eval, cfg.seed);
    auto frames = build_eval_frames(eval_ds, labels, sim.detections);
    auto report = evaluate(frames, cfg.metrics);
    auto flops = pipeline_flops(shape, schedule);
    rows.push_back({tkr, flops.total, flops.ratio, report.map, report.nds,
                    report.nds_rm});
    std::printf("tkr %.2f: flop ratio %.3f, mAP %.4f, NDS %.4f, NDS-RM %.4f\n",
                tkr, flops.ratio, report.map, report.nds, report.nds_rm);
  }
  write_curve_csv(out_path(opt.out_dir, cfg.io.curve_file), rows, stamp);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"store3d: relevance-aligned sparsity toolkit"};
  app.require_subcommand(1);

  CliOptions opt;
  app.add_option("--config", opt.config_path, "config JSON path");
  app.add_option("--seed", opt.seed, "seed override");
  app.add_option("--out", opt.out_dir, "output directory");
  app.add_option("--mode", opt.mode, "dense|sparse_eval|sparse_train");
  app.add_option("--tkr", opt.tkr, "total keep ratio override");
  app.add_option("--dmin", opt.dmin, "relevance distance threshold override");
  app.add_option("--ra-radius", opt.ra_radius, "relevant-area radius override");

  auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  auto* calibrate = app.add_subcommand("calibrate", "calibrate d_min from distances");
  auto* label = app.add_subcommand("label", "corridor relevance labels");
  auto* eval = app.add_subcommand("eval", "detection metrics incl. RA/RM");
  auto* simulate = app.add_subcommand("simulate", "run the pipeline over a dataset");
  auto* profile = app.add_subcommand("profile", "FLOP/memory model");
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference suites");
  auto* curve = app.add_subcommand("curve", "sparsity-compute trade-off sweep");
  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen(opt);
    if (calibrate->parsed()) return cmd_calibrate(opt);
    if (label->parsed()) return cmd_label(opt);
    if (eval->parsed()) return cmd_eval(opt);
    if (simulate->parsed()) return cmd_simulate(opt);
    if (profile->parsed()) return cmd_profile(opt);
    if (gradcheck->parsed()) return cmd_gradcheck(opt);
    if (curve->parsed()) return cmd_curve(opt);
  } catch (const Error& e) {
    remove_partial_outputs();
    write_error_json(e.code(), e.what());
    switch (e.kind()) {
      case ErrorKind::Config: return 2;
      case ErrorKind::Data: return 3;
      case ErrorKind::Check: return 4;
    }
  } catch (const std::exception& e) {
    remove_partial_outputs();
    write_error_json("InternalError", e.what());
    return 3;
  }
  return 0;
}
