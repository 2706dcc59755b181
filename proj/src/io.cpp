#include "store3d/io.hpp"

#include <fstream>
#include <iostream>

#include <json.hpp>

#include "store3d/jsonout.hpp"

namespace store3d {

using nlohmann::json;

namespace {

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Data, "IoError", "cannot write " + path);
  out << content;
}

void stamp_object(JsonWriter& w, const OutputStamp& stamp) {
  w.key("config_hash");
  w.value(stamp.config_hash);
  w.key("tool_version");
  w.value(stamp.tool_version);
}

std::string stamp_line(const OutputStamp& stamp) {
  JsonWriter w;
  w.begin_object();
  stamp_object(w, stamp);
  w.end_object();
  return w.str();
}

std::string csv_header(const OutputStamp& stamp) {
  return "# config_hash=" + stamp.config_hash + " tool_version=" +
         stamp.tool_version + "\n";
}

json parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Data, "IoError", "cannot read " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Data, "ParseError", path + ": " + e.what());
  }
}

void write_track(JsonWriter& w, const AgentTrack& track) {
  w.begin_object();
  w.key("agent_id");
  w.value(track.agent_id);
  w.key("class");
  w.value(track.class_name);
  w.key("attribute");
  w.value(track.attribute);
  w.key("z_center");
  w.value(track.z_center);
  w.key("height");
  w.value(track.height);
  w.key("boxes");
  w.begin_array();
  for (const auto& tp : track.boxes) {
    w.begin_array();
    w.value(tp.timestamp);
    w.value(tp.box.center.x);
    w.value(tp.box.center.y);
    w.value(tp.box.yaw);
    w.value(tp.box.length);
    w.value(tp.box.width);
    w.end_array();
  }
  w.end_array();
  w.key("velocity");
  w.begin_array();
  for (const auto& v : track.velocity) {
    w.begin_array();
    w.value(v.first);
    w.value(v.second);
    w.end_array();
  }
  w.end_array();
  w.end_object();
}

AgentTrack read_track(const json& j) {
  AgentTrack t;
  t.agent_id = j.at("agent_id").get<std::string>();
  t.class_name = j.at("class").get<std::string>();
  t.attribute = j.value("attribute", std::string());
  t.z_center = j.value("z_center", 0.0);
  t.height = j.value("height", 0.0);
  for (const auto& b : j.at("boxes")) {
    TrackPoint tp;
    tp.timestamp = b.at(0).get<double>();
    tp.box = OrientedBoxBEV({b.at(1).get<double>(), b.at(2).get<double>()},
                            b.at(3).get<double>(), b.at(4).get<double>(),
                            b.at(5).get<double>());
    t.boxes.push_back(tp);
  }
  if (j.contains("velocity")) {
    for (const auto& v : j.at("velocity")) {
      t.velocity.emplace_back(v.at(0).get<double>(), v.at(1).get<double>());
    }
  }
  t.validate();
  return t;
}

}  // namespace

void write_dataset(const std::string& path, const SceneDataset& ds,
                   const OutputStamp& stamp) {
  JsonWriter w;
  w.begin_object();
  w.key("meta");
  w.begin_object();
  stamp_object(w, stamp);
  w.key("classes");
  w.begin_array();
  for (const auto& c : ds.meta.classes) w.value(c);
  w.end_array();
  w.key("ego_length");
  w.value(ds.meta.ego_length);
  w.key("ego_width");
  w.value(ds.meta.ego_width);
  w.end_object();
  w.key("scenes");
  w.begin_array();
  for (const auto& scene : ds.scenes) {
    w.begin_object();
    w.key("scene_id");
    w.value(scene.scene_id);
    w.key("ego");
    write_track(w, scene.ego);
    w.key("agents");
    w.begin_array();
    for (const auto& a : scene.agents) write_track(w, a);
    w.end_array();
    w.key("frames");
    w.begin_array();
    for (const auto& f : scene.frames) {
      w.begin_object();
      w.key("frame_id");
      w.value(f.frame_id);
      w.key("timestamp");
      w.value(f.timestamp);
      w.end_object();
    }
    w.end_array();
    w.end_object();
  }
  w.end_array();
  w.end_object();
  write_file(path, w.str() + "\n");
}

SceneDataset read_dataset(const std::string& path) {
  json j = parse_file(path);
  SceneDataset ds;
  const auto& meta = j.at("meta");
  ds.meta.classes = meta.at("classes").get<std::vector<std::string>>();
  ds.meta.ego_length = meta.value("ego_length", 4.08);
  ds.meta.ego_width = meta.value("ego_width", 1.73);
  for (const auto& s : j.at("scenes")) {
    Scene scene;
    scene.scene_id = s.at("scene_id").get<std::string>();
    scene.ego = read_track(s.at("ego"));
    for (const auto& a : s.at("agents")) scene.agents.push_back(read_track(a));
    for (const auto& f : s.at("frames")) {
      scene.frames.push_back({f.at("frame_id").get<std::string>(),
                              f.at("timestamp").get<double>()});
    }
    ds.scenes.push_back(std::move(scene));
  }
  ds.validate();
  return ds;
}

void write_labels_jsonl(const std::string& path,
                        const std::vector<FrameLabels>& labels,
                        const OutputStamp& stamp) {
  std::string out = stamp_line(stamp) + "\n";
  for (const auto& fl : labels) {
    JsonWriter w;
    w.begin_object();
    w.key("frame_id");
    w.value(fl.frame_id);
    w.key("scene_id");
    w.value(fl.scene_id);
    w.key("labels");
    w.begin_array();
    for (const auto& label : fl.labels) {
      w.begin_object();
      w.key("agent_id");
      w.value(label.agent_id);
      w.key("relevant");
      w.value(label.relevant);
      w.key("d_c");
      w.value(label.closest_distance);  // infinity serializes as null
      w.key("uncovered");
      w.value(label.uncovered);
      w.end_object();
    }
    w.end_array();
    w.end_object();
    out += w.str() + "\n";
  }
  write_file(path, out);
}

std::vector<FrameLabels> read_labels_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Data, "IoError", "cannot read " + path);
  std::vector<FrameLabels> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    if (!j.contains("frame_id")) continue;  // stamp line
    FrameLabels fl;
    fl.frame_id = j.at("frame_id").get<std::string>();
    fl.scene_id = j.value("scene_id", std::string());
    for (const auto& l : j.at("labels")) {
      RelevanceLabel label;
      label.agent_id = l.at("agent_id").get<std::string>();
      label.relevant = l.at("relevant").get<bool>();
      label.uncovered = l.value("uncovered", false);
      if (l.contains("d_c") && !l.at("d_c").is_null()) {
        label.closest_distance = l.at("d_c").get<double>();
      } else {
        label.closest_distance = std::numeric_limits<double>::infinity();
      }
      fl.labels.push_back(std::move(label));
    }
    out.push_back(std::move(fl));
  }
  return out;
}

void write_detections_jsonl(const std::string& path,
                            const std::vector<Detection>& dets,
                            const OutputStamp& stamp) {
  std::string out = stamp_line(stamp) + "\n";
  for (const auto& d : dets) {
    JsonWriter w;
    w.begin_object();
    w.key("frame_id");
    w.value(d.frame_id);
    w.key("class");
    w.value(d.class_name);
    w.key("score");
    w.value(d.score);
    w.key("box");
    w.begin_object();
    w.key("x");
    w.value(d.box.center.x);
    w.key("y");
    w.value(d.box.center.y);
    w.key("z");
    w.value(d.z_center);
    w.key("yaw");
    w.value(d.box.yaw);
    w.key("l");
    w.value(d.box.length);
    w.key("w");
    w.value(d.box.width);
    w.key("h");
    w.value(d.height);
    w.end_object();
    w.key("velocity");
    w.begin_array();
    w.value(d.velocity.first);
    w.value(d.velocity.second);
    w.end_array();
    w.key("attribute");
    w.value(d.attribute);
    w.end_object();
    out += w.str() + "\n";
  }
  write_file(path, out);
}

std::vector<Detection> read_detections_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Data, "IoError", "cannot read " + path);
  std::vector<Detection> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    if (!j.contains("frame_id")) continue;
    Detection d;
    d.frame_id = j.at("frame_id").get<std::string>();
    d.class_name = j.at("class").get<std::string>();
    d.score = j.at("score").get<double>();
    const auto& b = j.at("box");
    d.box = OrientedBoxBEV({b.at("x").get<double>(), b.at("y").get<double>()},
                           b.at("yaw").get<double>(), b.at("l").get<double>(),
                           b.at("w").get<double>());
    d.z_center = b.at("z").get<double>();
    d.height = b.at("h").get<double>();
    if (j.contains("velocity")) {
      d.velocity = {j.at("velocity").at(0).get<double>(),
                    j.at("velocity").at(1).get<double>()};
    }
    d.attribute = j.value("attribute", std::string());
    out.push_back(std::move(d));
  }
  return out;
}

void write_cdf_csv(const std::string& path, const CalibrationResult& calib,
                   const OutputStamp& stamp) {
  std::string out = csv_header(stamp);
  out += "distance_m,cum_fraction\n";
  for (const auto& [d, f] : calib.cdf) {
    out += format_double(d) + "," + format_double(f) + "\n";
  }
  write_file(path, out);
}

namespace {

void write_variant(JsonWriter& w, const VariantResult& v, bool with_map) {
  w.begin_object();
  if (with_map) {
    w.key("map");
    w.value(v.mean_ap);
  }
  w.key("nds");
  w.value(v.nds);
  w.key("tp_errors");
  w.begin_object();
  w.key("ate");
  w.value(v.mean_errors.ate);
  w.key("ase");
  w.value(v.mean_errors.ase);
  w.key("aoe");
  w.value(v.mean_errors.aoe);
  w.key("ave");
  w.value(v.mean_errors.ave);
  w.key("aae");
  w.value(v.mean_errors.aae);
  w.end_object();
  w.key("counts");
  w.begin_object();
  w.key("tp");
  w.value(v.tp);
  w.key("fp");
  w.value(v.fp);
  w.key("gt");
  w.value(v.gt);
  w.end_object();
  w.key("per_class");
  w.begin_object();
  for (const auto& [cls, cr] : v.per_class) {
    w.key(cls);
    w.begin_object();
    if (with_map) {
      w.key("ap");
      w.begin_object();
      for (const auto& [thr, ap] : cr.ap_by_threshold) {
        w.key(format_double(thr));
        w.value(ap);
      }
      w.end_object();
    }
    w.key("ate");
    w.value(cr.errors.ate);
    w.key("ase");
    w.value(cr.errors.ase);
    w.key("aoe");
    w.value(cr.errors.aoe);
    w.key("ave");
    w.value(cr.errors.ave);
    w.key("aae");
    w.value(cr.errors.aae);
    w.key("tp");
    w.value(cr.tp);
    w.key("fp");
    w.value(cr.fp);
    w.key("gt");
    w.value(cr.gt);
    w.end_object();
  }
  w.end_object();
  w.end_object();
}

}  // namespace

void write_metrics_report(const std::string& path, const MetricsReport& report,
                          const OutputStamp& stamp) {
  JsonWriter w;
  w.begin_object();
  w.key("meta");
  w.begin_object();
  stamp_object(w, stamp);
  for (const auto& [k, v] : report.metadata) {
    w.key(k);
    w.value(v);
  }
  w.end_object();
  w.key("summary");
  w.begin_object();
  w.key("map");
  w.value(report.map);
  w.key("map_ra");
  w.value(report.map_ra);
  w.key("nds");
  w.value(report.nds);
  w.key("nds_ra");
  w.value(report.nds_ra);
  w.key("nds_rm");
  w.value(report.nds_rm);
  w.end_object();
  w.key("standard");
  write_variant(w, report.standard, true);
  w.key("ra");
  write_variant(w, report.ra, true);
  w.key("rm");
  write_variant(w, report.rm, false);  // mAP-RM intentionally unreported
  w.end_object();
  write_file(path, w.str() + "\n");
}

void write_metrics_csv(const std::string& path, const MetricsReport& report,
                       const OutputStamp& stamp) {
  std::string out = csv_header(stamp);
  out += "map,map_ra,nds,nds_ra,nds_rm,ate,ase,aoe,ave,aae\n";
  out += format_double(report.map) + "," + format_double(report.map_ra) + "," +
         format_double(report.nds) + "," + format_double(report.nds_ra) + "," +
         format_double(report.nds_rm) + "," +
         format_double(report.standard.mean_errors.ate) + "," +
         format_double(report.standard.mean_errors.ase) + "," +
         format_double(report.standard.mean_errors.aoe) + "," +
         format_double(report.standard.mean_errors.ave) + "," +
         format_double(report.standard.mean_errors.aae) + "\n";
  write_file(path, out);
}

void write_flop_report(const std::string& path, const FlopReport& report,
                       const OutputStamp& stamp) {
  JsonWriter w;
  w.begin_object();
  w.key("meta");
  w.begin_object();
  stamp_object(w, stamp);
  w.key("counting");
  w.value("1 MAC = 2 FLOPs; biases/nonlinearities/pooling ignored");
  w.end_object();
  w.key("backbone_total");
  w.value(report.backbone_total);
  w.key("decoder_total");
  w.value(report.decoder_total);
  w.key("total");
  w.value(report.total);
  w.key("dense_total");
  w.value(report.dense_total);
  w.key("ratio");
  w.value(report.ratio);
  w.key("mkr");
  w.value(report.mkr);
  w.key("buffer_entries");
  w.value(report.buffer_entries);
  w.key("buffer_bytes");
  w.value(report.buffer_bytes);
  w.key("buffer_bytes_fp16");
  w.value(report.buffer_bytes_fp16);
  w.key("buffer_bytes_fp32");
  w.value(report.buffer_bytes_fp32);
  w.key("stages");
  w.begin_array();
  for (const auto& s : report.stages) {
    w.begin_object();
    w.key("stage");
    w.value(s.stage);
    w.key("layer");
    w.value(s.layer);
    w.key("keep_ratio");
    w.value(s.keep_ratio);
    w.key("active");
    w.value(s.active);
    w.key("flops");
    w.value(s.flops);
    w.end_object();
  }
  w.end_array();
  w.end_object();
  write_file(path, w.str() + "\n");
}

void write_curve_csv(const std::string& path, const std::vector<CurveRow>& rows,
                     const OutputStamp& stamp) {
  std::string out = csv_header(stamp);
  out += "keep_ratio,total_flops,flop_ratio,map,nds,nds_rm\n";
  for (const auto& r : rows) {
    out += format_double(r.keep_ratio) + "," + format_double(r.total_flops) +
           "," + format_double(r.flop_ratio) + "," + format_double(r.map) +
           "," + format_double(r.nds) + "," + format_double(r.nds_rm) + "\n";
  }
  write_file(path, out);
}

void write_flops_csv(const std::string& path,
                     const std::vector<FlopSweepRow>& rows,
                     const OutputStamp& stamp) {
  std::string out = csv_header(stamp);
  out += "tkr,total_flops,ratio,mkr,buffer_bytes\n";
  for (const auto& r : rows) {
    out += format_double(r.tkr) + "," + format_double(r.total_flops) + "," +
           format_double(r.ratio) + "," + format_double(r.mkr) + "," +
           format_double(r.buffer_bytes) + "\n";
  }
  write_file(path, out);
}

void write_traces_json(const std::string& path,
                       const std::vector<std::pair<std::string, SparsityTrace>>& traces,
                       const OutputStamp& stamp) {
  JsonWriter w;
  w.begin_object();
  w.key("meta");
  w.begin_object();
  stamp_object(w, stamp);
  w.end_object();
  w.key("frames");
  w.begin_array();
  for (const auto& [frame_id, trace] : traces) {
    w.begin_object();
    w.key("frame_id");
    w.value(frame_id);
    w.key("initial_tokens");
    w.value(trace.initial_tokens);
    w.key("final_tokens");
    w.value(trace.final_tokens);
    w.key("initial_queries");
    w.value(trace.initial_queries);
    w.key("final_queries");
    w.value(trace.final_queries);
    w.key("total_token_rows");
    w.value(trace.total_token_rows);
    w.key("stages");
    w.begin_array();
    for (const auto& s : trace.stages) {
      w.begin_object();
      w.key("stage");
      w.value(s.stage);
      w.key("kind");
      w.value(s.kind == BufferKind::image ? "image" : "query");
      w.key("layer");
      w.value(s.layer);
      w.key("active_before");
      w.value(s.active_before);
      w.key("kept");
      w.value(s.kept);
      w.key("buffer_size");
      w.value(s.buffer_size);
      w.key("ratio");
      w.value(s.ratio);
      w.key("partition_ok");
      w.value(s.partition_ok);
      w.end_object();
    }
    w.end_array();
    w.end_object();
  }
  w.end_array();
  w.end_object();
  write_file(path, w.str() + "\n");
}

void write_gradcheck_json(const std::string& path,
                          const std::vector<GradcheckRow>& rows,
                          const OutputStamp& stamp) {
  JsonWriter w;
  w.begin_object();
  w.key("meta");
  w.begin_object();
  stamp_object(w, stamp);
  w.end_object();
  w.key("checks");
  w.begin_array();
  for (const auto& r : rows) {
    w.begin_object();
    w.key("name");
    w.value(r.name);
    w.key("max_rel_error");
    w.value(r.max_rel_error);
    w.key("tolerance");
    w.value(r.tolerance);
    w.key("pass");
    w.value(r.pass);
    w.end_object();
  }
  w.end_array();
  w.end_object();
  write_file(path, w.str() + "\n");
}

void write_error_json(const std::string& code, const std::string& message) {
  JsonWriter w;
  w.begin_object();
  w.key("error");
  w.begin_object();
  w.key("code");
  w.value(code);
  w.key("message");
  w.value(message);
  w.end_object();
  w.end_object();
  std::cerr << w.str() << std::endl;
}

}  // namespace store3d
