#include "store3d/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "store3d/jsonout.hpp"
#include "store3d/rng.hpp"

namespace store3d {

using nlohmann::json;

namespace {

void check_keys(const json& obj, const std::set<std::string>& allowed,
                const std::string& section) {
  if (!obj.is_object()) throw ConfigError("section '" + section + "' must be an object");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (!allowed.count(it.key())) {
      throw ConfigError("unknown key '" + it.key() + "' in section '" + section + "'");
    }
  }
}

template <typename T>
void get_to(const json& obj, const char* key, T& out) {
  if (obj.contains(key)) {
    try {
      obj.at(key).get_to(out);
    } catch (const json::exception& e) {
      throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
    }
  }
}

void parse_dataset(const json& j, SyntheticSpec& spec) {
  check_keys(j, {"scenes", "agents_per_scene", "scene_duration_s", "frame_hz",
                 "ego_speed_min", "ego_speed_max", "agent_speed_min",
                 "agent_speed_max", "spawn_radius_m"},
             "dataset");
  get_to(j, "scenes", spec.scenes);
  get_to(j, "agents_per_scene", spec.agents_per_scene);
  get_to(j, "scene_duration_s", spec.scene_duration_s);
  get_to(j, "frame_hz", spec.frame_hz);
  get_to(j, "ego_speed_min", spec.ego_speed_min);
  get_to(j, "ego_speed_max", spec.ego_speed_max);
  get_to(j, "agent_speed_min", spec.agent_speed_min);
  get_to(j, "agent_speed_max", spec.agent_speed_max);
  get_to(j, "spawn_radius_m", spec.spawn_radius_m);
  if (spec.scenes < 1 || spec.agents_per_scene < 0 || !(spec.frame_hz > 0) ||
      !(spec.scene_duration_s > 0)) {
    throw ConfigError("dataset spec values out of range");
  }
}

void parse_relevance(const json& j, RelevanceConfig& cfg) {
  check_keys(j, {"horizon_s", "step_dt_s", "d_min_m", "percentile"}, "relevance");
  get_to(j, "horizon_s", cfg.horizon_s);
  get_to(j, "step_dt_s", cfg.step_dt_s);
  get_to(j, "d_min_m", cfg.d_min_m);
  get_to(j, "percentile", cfg.percentile);
  cfg.validate();
}

void parse_model(const json& j, ModelConfig& cfg) {
  check_keys(j, {"views", "grid_h", "grid_w", "embed_dim", "heads", "window",
                 "backbone_layout", "decoder_layers", "num_anchor_queries",
                 "num_propagated", "deform_points", "fpn_levels",
                 "input_channels", "head_hidden", "ego_embed_dim", "pe_freqs",
                 "relevance_topk_frac", "bev_range", "min_det_score",
                 "relevance_kind", "classes"},
             "model");
  get_to(j, "views", cfg.views);
  get_to(j, "grid_h", cfg.grid_h);
  get_to(j, "grid_w", cfg.grid_w);
  get_to(j, "embed_dim", cfg.embed_dim);
  get_to(j, "heads", cfg.heads);
  get_to(j, "window", cfg.window);
  get_to(j, "backbone_layout", cfg.backbone_layout);
  get_to(j, "decoder_layers", cfg.decoder_layers);
  get_to(j, "num_anchor_queries", cfg.num_anchor_queries);
  get_to(j, "num_propagated", cfg.num_propagated);
  get_to(j, "deform_points", cfg.deform_points);
  get_to(j, "fpn_levels", cfg.fpn_levels);
  get_to(j, "input_channels", cfg.input_channels);
  get_to(j, "head_hidden", cfg.head_hidden);
  get_to(j, "ego_embed_dim", cfg.ego_embed_dim);
  get_to(j, "pe_freqs", cfg.pe_freqs);
  get_to(j, "relevance_topk_frac", cfg.relevance_topk_frac);
  get_to(j, "bev_range", cfg.bev_range);
  get_to(j, "min_det_score", cfg.min_det_score);
  get_to(j, "classes", cfg.classes);
  if (j.contains("relevance_kind")) {
    std::string kind = j.at("relevance_kind").get<std::string>();
    if (kind == "plan") {
      cfg.relevance_kind = RelevanceKind::plan;
    } else if (kind == "det") {
      cfg.relevance_kind = RelevanceKind::det;
    } else {
      throw ConfigError("relevance_kind must be 'plan' or 'det'");
    }
  }
  cfg.validate();
}

void parse_schedule(const json& j, ScheduleConfig& cfg, const ModelConfig& model) {
  check_keys(j, {"tkr", "token_prune_layers", "token_reactivation_layer",
                 "query_prune_layers", "query_reactivation_layer",
                 "warmup_start", "warmup_end", "rho_img", "rho_qry"},
             "schedule");
  cfg.backbone_layers = static_cast<int>(model.backbone_layout.size());
  cfg.decoder_layers = model.decoder_layers;
  get_to(j, "tkr", cfg.tkr);
  get_to(j, "token_prune_layers", cfg.token_prune_layers);
  get_to(j, "token_reactivation_layer", cfg.token_reactivation_layer);
  get_to(j, "query_prune_layers", cfg.query_prune_layers);
  get_to(j, "query_reactivation_layer", cfg.query_reactivation_layer);
  get_to(j, "warmup_start", cfg.warmup_start);
  get_to(j, "warmup_end", cfg.warmup_end);
  if (j.contains("rho_img") && !j.at("rho_img").is_null()) {
    cfg.rho_img_override = j.at("rho_img").get<double>();
  }
  if (j.contains("rho_qry") && !j.at("rho_qry").is_null()) {
    cfg.rho_qry_override = j.at("rho_qry").get<double>();
  }
  cfg.validate();
}

void parse_metrics(const json& j, MetricsConfig& cfg) {
  check_keys(j, {"center_thresholds", "ra_radius", "min_recall", "min_precision",
                 "tp_error_threshold", "classes", "include_velocity",
                 "include_attribute"},
             "metrics");
  get_to(j, "center_thresholds", cfg.center_thresholds);
  get_to(j, "ra_radius", cfg.ra_radius);
  get_to(j, "min_recall", cfg.min_recall);
  get_to(j, "min_precision", cfg.min_precision);
  get_to(j, "tp_error_threshold", cfg.tp_error_threshold);
  get_to(j, "classes", cfg.classes);
  get_to(j, "include_velocity", cfg.include_velocity);
  get_to(j, "include_attribute", cfg.include_attribute);
  cfg.validate();
}

void parse_loss(const json& j, LossConfig& cfg) {
  check_keys(j, {"lambda_rel", "lambda_aux", "focal_alpha", "focal_gamma",
                 "gaussian_alpha", "gaussian_beta", "match_class_weight",
                 "match_l1_weight"},
             "loss");
  get_to(j, "lambda_rel", cfg.lambda_rel);
  get_to(j, "lambda_aux", cfg.lambda_aux);
  get_to(j, "focal_alpha", cfg.focal_alpha);
  get_to(j, "focal_gamma", cfg.focal_gamma);
  get_to(j, "gaussian_alpha", cfg.gaussian_alpha);
  get_to(j, "gaussian_beta", cfg.gaussian_beta);
  get_to(j, "match_class_weight", cfg.match_class_weight);
  get_to(j, "match_l1_weight", cfg.match_l1_weight);
  cfg.validate();
}

void parse_train(const json& j, TrainConfig& cfg) {
  check_keys(j, {"iterations", "lr", "batch_frames", "train_scene_fraction",
                 "det_iterations", "det_lr", "seed"},
             "train");
  get_to(j, "iterations", cfg.iterations);
  get_to(j, "lr", cfg.lr);
  get_to(j, "batch_frames", cfg.batch_frames);
  get_to(j, "train_scene_fraction", cfg.train_scene_fraction);
  get_to(j, "det_iterations", cfg.det_iterations);
  get_to(j, "det_lr", cfg.det_lr);
  get_to(j, "seed", cfg.seed);
  if (cfg.iterations < 0 || cfg.batch_frames < 1 ||
      !(cfg.train_scene_fraction > 0) || cfg.train_scene_fraction > 1) {
    throw ConfigError("train settings out of range");
  }
}

void parse_base(const json& j, BaseMirrorConfig& cfg) {
  check_keys(j, {"learning_rate", "lr_schedule", "optimizer", "weight_decay",
                 "batch_size", "epochs", "max_detections"},
             "base");
  get_to(j, "learning_rate", cfg.learning_rate);
  get_to(j, "lr_schedule", cfg.lr_schedule);
  get_to(j, "optimizer", cfg.optimizer);
  get_to(j, "weight_decay", cfg.weight_decay);
  get_to(j, "batch_size", cfg.batch_size);
  get_to(j, "epochs", cfg.epochs);
  get_to(j, "max_detections", cfg.max_detections);
}

void parse_io(const json& j, IoConfig& cfg) {
  check_keys(j, {"dataset_file", "labels_file", "cdf_file", "detections_file",
                 "trace_file", "report_file", "report_csv_file", "flops_file",
                 "flops_csv_file", "curve_file", "gradcheck_file"},
             "io");
  get_to(j, "dataset_file", cfg.dataset_file);
  get_to(j, "labels_file", cfg.labels_file);
  get_to(j, "cdf_file", cfg.cdf_file);
  get_to(j, "detections_file", cfg.detections_file);
  get_to(j, "trace_file", cfg.trace_file);
  get_to(j, "report_file", cfg.report_file);
  get_to(j, "report_csv_file", cfg.report_csv_file);
  get_to(j, "flops_file", cfg.flops_file);
  get_to(j, "flops_csv_file", cfg.flops_csv_file);
  get_to(j, "curve_file", cfg.curve_file);
  get_to(j, "gradcheck_file", cfg.gradcheck_file);
}

}  // namespace

void RunConfig::validate() const {
  relevance.validate();
  model.validate();
  schedule.validate();
  metrics.validate();
  loss.validate();
  if (static_cast<int>(model.backbone_layout.size()) != schedule.backbone_layers ||
      model.decoder_layers != schedule.decoder_layers) {
    throw ConfigError("schedule layer counts must match the model layout");
  }
}

RunConfig parse_config_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config parse failure: ") + e.what());
  }
  check_keys(j, {"seed", "dataset", "relevance", "model", "schedule", "metrics",
                 "loss", "train", "base", "io"},
             "<root>");

  RunConfig cfg;
  // Defaults for schedule depend on the model; parse model first.
  if (j.contains("model")) parse_model(j.at("model"), cfg.model);
  cfg.schedule.backbone_layers = static_cast<int>(cfg.model.backbone_layout.size());
  cfg.schedule.decoder_layers = cfg.model.decoder_layers;
  cfg.schedule.token_reactivation_layer = cfg.schedule.backbone_layers;
  cfg.schedule.query_reactivation_layer = cfg.schedule.decoder_layers;

  get_to(j, "seed", cfg.seed);
  cfg.dataset.seed = cfg.seed;
  if (j.contains("dataset")) parse_dataset(j.at("dataset"), cfg.dataset);
  cfg.dataset.seed = cfg.seed;
  if (j.contains("relevance")) parse_relevance(j.at("relevance"), cfg.relevance);
  if (j.contains("schedule")) parse_schedule(j.at("schedule"), cfg.schedule, cfg.model);
  if (j.contains("metrics")) parse_metrics(j.at("metrics"), cfg.metrics);
  if (j.contains("loss")) parse_loss(j.at("loss"), cfg.loss);
  if (j.contains("train")) parse_train(j.at("train"), cfg.train);
  if (j.contains("base")) parse_base(j.at("base"), cfg.base);
  if (j.contains("io")) parse_io(j.at("io"), cfg.io);
  cfg.metrics.classes = cfg.model.classes;
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_json(ss.str());
}

std::string RunConfig::canonical() const {
  JsonWriter w;
  w.begin_object();
  w.key("base");
  w.begin_object();
  w.key("batch_size"); w.value(base.batch_size);
  w.key("epochs"); w.value(base.epochs);
  w.key("learning_rate"); w.value(base.learning_rate);
  w.key("lr_schedule"); w.value(base.lr_schedule);
  w.key("max_detections"); w.value(base.max_detections);
  w.key("optimizer"); w.value(base.optimizer);
  w.key("weight_decay"); w.value(base.weight_decay);
  w.end_object();
  w.key("dataset");
  w.begin_object();
  w.key("agent_speed_max"); w.value(dataset.agent_speed_max);
  w.key("agent_speed_min"); w.value(dataset.agent_speed_min);
  w.key("agents_per_scene"); w.value(dataset.agents_per_scene);
  w.key("ego_speed_max"); w.value(dataset.ego_speed_max);
  w.key("ego_speed_min"); w.value(dataset.ego_speed_min);
  w.key("frame_hz"); w.value(dataset.frame_hz);
  w.key("scene_duration_s"); w.value(dataset.scene_duration_s);
  w.key("scenes"); w.value(dataset.scenes);
  w.key("spawn_radius_m"); w.value(dataset.spawn_radius_m);
  w.end_object();
  w.key("loss");
  w.begin_object();
  w.key("focal_alpha"); w.value(loss.focal_alpha);
  w.key("focal_gamma"); w.value(loss.focal_gamma);
  w.key("gaussian_alpha"); w.value(loss.gaussian_alpha);
  w.key("gaussian_beta"); w.value(loss.gaussian_beta);
  w.key("lambda_aux"); w.value(loss.lambda_aux);
  w.key("lambda_rel"); w.value(loss.lambda_rel);
  w.key("match_class_weight"); w.value(loss.match_class_weight);
  w.key("match_l1_weight"); w.value(loss.match_l1_weight);
  w.end_object();
  w.key("metrics");
  w.begin_object();
  w.key("center_thresholds");
  w.begin_array();
  for (double t : metrics.center_thresholds) w.value(t);
  w.end_array();
  w.key("include_attribute"); w.value(metrics.include_attribute);
  w.key("include_velocity"); w.value(metrics.include_velocity);
  w.key("min_precision"); w.value(metrics.min_precision);
  w.key("min_recall"); w.value(metrics.min_recall);
  w.key("ra_radius"); w.value(metrics.ra_radius);
  w.key("tp_error_threshold"); w.value(metrics.tp_error_threshold);
  w.end_object();
  w.key("model");
  w.begin_object();
  w.key("backbone_layout"); w.value(model.backbone_layout);
  w.key("bev_range"); w.value(model.bev_range);
  w.key("classes");
  w.begin_array();
  for (const auto& c : model.classes) w.value(c);
  w.end_array();
  w.key("decoder_layers"); w.value(model.decoder_layers);
  w.key("deform_points"); w.value(model.deform_points);
  w.key("ego_embed_dim"); w.value(model.ego_embed_dim);
  w.key("embed_dim"); w.value(model.embed_dim);
  w.key("fpn_levels"); w.value(model.fpn_levels);
  w.key("grid_h"); w.value(model.grid_h);
  w.key("grid_w"); w.value(model.grid_w);
  w.key("head_hidden"); w.value(model.head_hidden);
  w.key("heads"); w.value(model.heads);
  w.key("input_channels"); w.value(model.input_channels);
  w.key("min_det_score"); w.value(model.min_det_score);
  w.key("num_anchor_queries"); w.value(model.num_anchor_queries);
  w.key("num_propagated"); w.value(model.num_propagated);
  w.key("pe_freqs"); w.value(model.pe_freqs);
  w.key("relevance_kind");
  w.value(model.relevance_kind == RelevanceKind::plan ? "plan" : "det");
  w.key("relevance_topk_frac"); w.value(model.relevance_topk_frac);
  w.key("views"); w.value(model.views);
  w.key("window"); w.value(model.window);
  w.end_object();
  w.key("relevance");
  w.begin_object();
  w.key("d_min_m"); w.value(relevance.d_min_m);
  w.key("horizon_s"); w.value(relevance.horizon_s);
  w.key("percentile"); w.value(relevance.percentile);
  w.key("step_dt_s"); w.value(relevance.step_dt_s);
  w.end_object();
  w.key("schedule");
  w.begin_object();
  w.key("query_prune_layers");
  w.begin_array();
  for (int l : schedule.query_prune_layers) w.value(l);
  w.end_array();
  w.key("query_reactivation_layer"); w.value(schedule.query_reactivation_layer);
  w.key("rho_img");
  if (schedule.rho_img_override) w.value(*schedule.rho_img_override);
  else w.null();
  w.key("rho_qry");
  if (schedule.rho_qry_override) w.value(*schedule.rho_qry_override);
  else w.null();
  w.key("tkr"); w.value(schedule.tkr);
  w.key("token_prune_layers");
  w.begin_array();
  for (int l : schedule.token_prune_layers) w.value(l);
  w.end_array();
  w.key("token_reactivation_layer"); w.value(schedule.token_reactivation_layer);
  w.key("warmup_end"); w.value(schedule.warmup_end);
  w.key("warmup_start"); w.value(schedule.warmup_start);
  w.end_object();
  w.key("seed"); w.value(seed);
  w.key("train");
  w.begin_object();
  w.key("batch_frames"); w.value(train.batch_frames);
  w.key("det_iterations"); w.value(train.det_iterations);
  w.key("det_lr"); w.value(train.det_lr);
  w.key("iterations"); w.value(train.iterations);
  w.key("lr"); w.value(train.lr);
  w.key("seed"); w.value(train.seed);
  w.key("train_scene_fraction"); w.value(train.train_scene_fraction);
  w.end_object();
  w.end_object();
  return w.str();
}

std::string RunConfig::hash() const {
  uint64_t h = hash_string(canonical());
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace store3d
