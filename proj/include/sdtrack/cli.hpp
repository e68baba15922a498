#pragma once

// Command-line surface: gen, aggregate, track, train-toy, energy, eval.
// Options resolve as defaults < config file < flags. Every command prints a
// reproducibility banner (seed + hash of the effective configuration) and
// removes its declared outputs if it fails partway.

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "sdtrack/core.hpp"
#include "sdtrack/eval.hpp"
#include "sdtrack/events.hpp"
#include "sdtrack/gtp.hpp"
#include "sdtrack/model.hpp"
#include "sdtrack/profiler.hpp"
#include "sdtrack/training.hpp"

namespace sdtrack::cli {

namespace fs = std::filesystem;

// key = value lines; '#' comments; [section] prefixes keys with "section.".
inline std::map<std::string, std::string> parse_config_file(const std::string& path) {
  std::map<std::string, std::string> out;
  if (path.empty()) return out;
  std::string text = read_text_file(path);
  std::string section;
  std::size_t pos = 0;
  int lineno = 0;
  while (pos < text.size()) {
    std::size_t eol = text.find('\n', pos);
    std::string line = text.substr(pos, eol == std::string::npos ? std::string::npos : eol - pos);
    pos = eol == std::string::npos ? text.size() : eol + 1;
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line = line.substr(0, h);
    auto trim = [](std::string s) {
      std::size_t a = s.find_first_not_of(" \t\r");
      if (a == std::string::npos) return std::string();
      std::size_t b = s.find_last_not_of(" \t\r");
      return s.substr(a, b - a + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[' && line.back() == ']') {
      section = trim(line.substr(1, line.size() - 2));
      if (!section.empty()) section += '.';
      continue;
    }
    auto eq = line.find('=');
    require(eq != std::string::npos, path, ": line ", lineno, ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string val = trim(line.substr(eq + 1));
    if (val.size() >= 2 && val.front() == '"' && val.back() == '"')
      val = val.substr(1, val.size() - 2);
    require(!key.empty(), path, ": line ", lineno, ": empty key");
    out[section + key] = val;
  }
  return out;
}

// defaults < file < flags resolution for one command's options.
class Options {
 public:
  explicit Options(CLI::App* app) : app_(app) {}

  void load_file(const std::string& path) { file_ = parse_config_file(path); }

  double num(const std::string& flag, const std::string& key, double dflt) {
    auto* opt = app_->get_option(flag);
    if (opt->count() > 0) return record(key, opt->as<double>());
    if (auto it = file_.find(key); it != file_.end()) return record(key, std::stod(it->second));
    return record(key, dflt);
  }

  std::int64_t integer(const std::string& flag, const std::string& key, std::int64_t dflt) {
    auto* opt = app_->get_option(flag);
    if (opt->count() > 0) return record(key, opt->as<std::int64_t>());
    if (auto it = file_.find(key); it != file_.end())
      return record(key, static_cast<std::int64_t>(std::stoll(it->second)));
    return record(key, dflt);
  }

  std::string str(const std::string& flag, const std::string& key, const std::string& dflt) {
    auto* opt = app_->get_option(flag);
    if (opt->count() > 0) return record_s(key, opt->as<std::string>());
    if (auto it = file_.find(key); it != file_.end()) return record_s(key, it->second);
    return record_s(key, dflt);
  }

  // file-only keys (no flag counterpart)
  double file_num(const std::string& key, double dflt) {
    if (auto it = file_.find(key); it != file_.end()) return record(key, std::stod(it->second));
    return record(key, dflt);
  }
  std::string file_str(const std::string& key, const std::string& dflt) {
    if (auto it = file_.find(key); it != file_.end()) return record_s(key, it->second);
    return record_s(key, dflt);
  }

  std::uint64_t config_hash() const {
    std::string canon;
    for (const auto& [k, v] : resolved_) canon += k + "=" + v + "\n";
    return fnv1a(canon);
  }

 private:
  double record(const std::string& key, double v) {
    resolved_[key] = strcat_msg(v);
    return v;
  }
  std::int64_t record(const std::string& key, std::int64_t v) {
    resolved_[key] = strcat_msg(v);
    return v;
  }
  std::string record_s(const std::string& key, std::string v) {
    resolved_[key] = v;
    return v;
  }

  CLI::App* app_;
  std::map<std::string, std::string> file_;
  std::map<std::string, std::string> resolved_;
};

struct CommandIo {
  std::vector<std::string> outputs;  // removed if the command fails
  void declare(const std::string& path) { outputs.push_back(path); }
};

inline void banner(const std::string& cmd, std::uint64_t seed, std::uint64_t hash) {
  std::printf("# sdtrack %s seed=%llu config_hash=%s\n", cmd.c_str(),
              static_cast<unsigned long long>(seed), hex64(hash).c_str());
}

// ---------------------------------------------------------------------------
// gen

inline void cmd_gen(Options& opts, CommandIo& io, const std::string& out_events,
                    const std::string& out_gt, std::uint64_t seed) {
  SynthConfig c;
  c.width = static_cast<int>(opts.integer("--width", "width", c.width));
  c.height = static_cast<int>(opts.integer("--height", "height", c.height));
  c.object_size = static_cast<int>(opts.file_num("object_size", c.object_size));
  c.start_cx = opts.file_num("start_cx", c.width / 2.0);
  c.start_cy = opts.file_num("start_cy", c.height / 2.0);
  c.vx = opts.num("--vx", "vx", 0.0);
  c.vy = opts.num("--vy", "vy", 0.0);
  c.num_frames = static_cast<int>(opts.integer("--frames", "frames", 40));
  c.ticks_per_frame = static_cast<int>(opts.file_num("ticks_per_frame", c.ticks_per_frame));
  c.frame_len_us = opts.integer("--window-us", "frame_len_us", c.frame_len_us);
  c.events_per_pixel = static_cast<int>(opts.file_num("events_per_pixel", c.events_per_pixel));
  c.noise_per_frame = opts.num("--noise", "noise_per_frame", 0.0);
  c.seed = seed;
  banner("gen", seed, opts.config_hash());

  io.declare(out_events);
  io.declare(out_gt);
  auto r = generate_synthetic_sequence(c);
  write_event_file(out_events, r.events, guess_event_format(out_events));
  write_gt_csv(out_gt, r.gt);
  for (const auto& w : r.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
  std::printf("wrote %zu events over %d frames to %s\n", r.events.size(), c.num_frames,
              out_events.c_str());
}

// ---------------------------------------------------------------------------
// aggregate

inline SotConfig sot_from_options(Options& opts) {
  SotConfig sot;
  sot.method = aggregation_method_from_string(opts.str("--method", "method", "gtp"));
  sot.alpha = opts.num("--alpha", "alpha", 30.0);
  sot.beta = opts.num("--beta", "beta", 0.8);
  require(sot.alpha > 0, "alpha must be > 0");
  require(sot.beta >= 0 && sot.beta <= 1, "beta must be in [0,1]");
  sot.sub_t = static_cast<int>(opts.integer("--T", "T", 1));
  require(sot.sub_t >= 1, "T must be >= 1");
  return sot;
}

inline void cmd_aggregate(Options& opts, CommandIo& io, const std::string& events_path,
                          const std::string& out_dir, bool preview, std::uint64_t seed) {
  int width = static_cast<int>(opts.integer("--width", "width", 64));
  int height = static_cast<int>(opts.integer("--height", "height", 64));
  std::int64_t window_us = opts.integer("--window-us", "window_us", 1000);
  int num_frames = static_cast<int>(opts.integer("--frames", "frames", -1));
  SotConfig sot = sot_from_options(opts);
  banner("aggregate", seed, opts.config_hash());

  auto events = parse_event_file(events_path, guess_event_format(events_path));
  auto windows = window_stream(events, width, height, window_us, sot.sub_t, 0, num_frames);
  fs::create_directories(out_dir);

  GtpState state = make_gtp_state(height, width, sot.alpha, sot.beta);
  for (std::size_t i = 0; i < windows.size(); ++i) {
    int frame = static_cast<int>(i) / sot.sub_t;
    EventImage img = sot.method == AggregationMethod::Gtp
                         ? aggregate_next(state, windows[i], frame)
                         : aggregate_baseline(windows[i], sot.method, frame);
    std::string base = strcat_msg(out_dir, "/img_", i);
    io.declare(base + ".raw");
    write_event_image_raw(base + ".raw", img);
    if (preview) {
      io.declare(base + ".ppm");
      write_event_image_preview(base + ".ppm", img);
    }
    std::int64_t nonzero = 0;
    for (const auto& ch : img.ch)
      for (double v : ch.v) nonzero += v != 0.0;
    std::printf("window %zu frame %d: nonzero %lld/%lld\n", i, frame,
                static_cast<long long>(nonzero), static_cast<long long>(3) * width * height);
  }
}

// ---------------------------------------------------------------------------
// track

inline void cmd_track(Options& opts, CommandIo& io, const std::string& weights,
                      const std::string& events_path, const std::string& gt_path,
                      const std::string& out_csv, std::uint64_t seed) {
  std::int64_t window_us = opts.integer("--window-us", "window_us", 1000);
  int width = static_cast<int>(opts.integer("--width", "width", 64));
  int height = static_cast<int>(opts.integer("--height", "height", 64));
  SotConfig sot = sot_from_options(opts);
  banner("track", seed, opts.config_hash());

  auto net = SDTrackNet<float>::load(weights);
  sot.sub_t = net.config().timesteps;
  sot.template_size = net.config().template_size;
  sot.search_size = net.config().search_size;
  auto events = parse_event_file(events_path, guess_event_format(events_path));
  auto gt = parse_gt_csv(gt_path);
  require(!gt.empty(), gt_path, ": no ground-truth rows");

  NetPredictor<float> pred(net);
  auto result = run_sequence(pred, events, gt, width, height, window_us, sot);
  io.declare(out_csv);
  write_results_csv(out_csv, result);
  std::printf("tracked %zu frames, mean IoU %.4f\n", result.frames.size(), mean_iou(result));
}

// ---------------------------------------------------------------------------
// train-toy

inline void cmd_train_toy(Options& opts, CommandIo& io, const std::string& out_dir,
                          std::uint64_t seed) {
  ModelConfig mc = ModelConfig::preset(opts.str("--model", "model", "toy"));
  ToyDatasetConfig dc;
  dc.train_sequences = static_cast<int>(opts.file_num("train_sequences", dc.train_sequences));
  dc.eval_sequences = static_cast<int>(opts.file_num("eval_sequences", dc.eval_sequences));
  dc.frames_per_seq = static_cast<int>(opts.file_num("frames_per_seq", dc.frames_per_seq));
  dc.sensor = static_cast<int>(opts.file_num("sensor", dc.sensor));
  dc.object_size = static_cast<int>(opts.file_num("object_size", dc.object_size));
  dc.max_speed = opts.file_num("max_speed", dc.max_speed);
  dc.noise_per_frame = opts.file_num("noise_per_frame", dc.noise_per_frame);
  dc.method = aggregation_method_from_string(opts.str("--method", "method", "gtp"));
  dc.alpha = opts.num("--alpha", "alpha", dc.alpha);
  dc.beta = opts.num("--beta", "beta", dc.beta);
  dc.seed = seed + 1;

  ToyTrainConfig tc;
  tc.steps = static_cast<int>(opts.integer("--steps", "steps", tc.steps));
  tc.batch = static_cast<int>(opts.file_num("batch", tc.batch));
  tc.optim.lr = opts.num("--lr", "lr", tc.optim.lr);
  tc.optim.weight_decay = opts.file_num("weight_decay", tc.optim.weight_decay);
  tc.jitter = opts.file_num("jitter", tc.jitter);
  tc.eval_every = static_cast<int>(opts.file_num("eval_every", tc.eval_every));
  tc.eval_sequences = static_cast<int>(opts.file_num("eval_subset", tc.eval_sequences));
  tc.seed = seed;
  banner("train-toy", seed, opts.config_hash());

  fs::create_directories(out_dir);
  SDTrackNet<float> net(mc, seed + 2);
  auto ds = build_toy_dataset(dc, net.config().timesteps);
  auto report = train_toy(net, ds, tc);

  std::string report_path = out_dir + "/report.jsonl";
  std::string weights_path = out_dir + "/weights.bin";
  std::string summary_path = out_dir + "/summary.json";
  io.declare(report_path);
  io.declare(weights_path);
  io.declare(summary_path);
  std::ofstream(report_path, std::ios::binary) << report.to_jsonl();
  net.save(weights_path);
  nlohmann::json summary{{"steps", tc.steps},
                         {"final_eval_iou", report.final_eval_iou},
                         {"model", mc.name},
                         {"method", to_string(dc.method)}};
  std::ofstream(summary_path, std::ios::binary) << summary.dump(2) << "\n";
  std::printf("trained %d steps, final eval IoU %.4f\n", tc.steps, report.final_eval_iou);
}

// ---------------------------------------------------------------------------
// energy

inline void cmd_energy(Options& opts, CommandIo& io, const std::string& weights,
                       const std::string& events_path, const std::string& gt_path,
                       const std::string& out_json, const std::string& out_csv, int max_frames,
                       std::uint64_t seed) {
  std::int64_t window_us = opts.integer("--window-us", "window_us", 1000);
  int width = static_cast<int>(opts.integer("--width", "width", 64));
  int height = static_cast<int>(opts.integer("--height", "height", 64));
  SotConfig sot = sot_from_options(opts);
  banner("energy", seed, opts.config_hash());

  auto net = SDTrackNet<float>::load(weights);
  sot.sub_t = net.config().timesteps;
  sot.template_size = net.config().template_size;
  sot.search_size = net.config().search_size;
  auto events = parse_event_file(events_path, guess_event_format(events_path));
  auto gt = parse_gt_csv(gt_path);
  require(!gt.empty(), gt_path, ": no ground-truth rows");
  if (max_frames > 0 && static_cast<int>(gt.size()) > max_frames)
    gt.resize(static_cast<std::size_t>(max_frames));

  SpikeRecorder<float> rec;
  NetPredictor<float> pred(net, &rec);
  run_sequence(pred, events, gt, width, height, window_us, sot);
  auto report = energy(count_flops(net.plan()), rec.firing_stats(), net.config().timesteps);

  io.declare(out_json);
  std::ofstream(out_json, std::ios::binary) << report.to_json().dump(2) << "\n";
  if (!out_csv.empty()) {
    io.declare(out_csv);
    std::ofstream(out_csv, std::ios::binary) << report.to_csv();
  }
  std::printf("energy: total %.6f mJ (MAC %.1f pJ/step, AC %.1f pJ/step, T=%d)\n",
              report.total_pj * 1e-9, report.mac_term_pj, report.ac_term_pj, report.t);
}

// ---------------------------------------------------------------------------
// eval

inline void cmd_eval(Options& opts, CommandIo& io, const std::string& results_path,
                     const std::string& gt_path, const std::string& out_json,
                     std::uint64_t seed) {
  banner("eval", seed, opts.config_hash());
  auto result = parse_results_csv(results_path);
  require(!result.frames.empty(), results_path, ": no result rows");
  if (!gt_path.empty()) {
    auto gt = parse_gt_csv(gt_path);
    std::map<int, GroundTruthBox> by_frame;
    for (const auto& b : gt) by_frame[b.frame] = b;
    for (auto& f : result.frames) {
      auto it = by_frame.find(f.frame);
      require(it != by_frame.end(), gt_path, ": no ground truth for frame ", f.frame);
      f.gt = Box{it->second.cx, it->second.cy, it->second.w, it->second.h};
      f.iou_v = iou(f.pred, f.gt);
      f.dist = center_distance(f.pred, f.gt);
    }
  }
  auto m = compute_metrics({result});
  if (!out_json.empty()) {
    io.declare(out_json);
    std::ofstream(out_json, std::ios::binary) << m.to_json().dump(2) << "\n";
  }
  std::printf("AUC %.4f PR %.4f over %zu frames\n", m.auc, m.pr, result.frames.size());
}

// ---------------------------------------------------------------------------
// driver

inline int run(std::vector<std::string> args) {
  CLI::App app{"spike-driven event-camera tracking toolkit"};
  app.require_subcommand(1);

  std::string config_path, events_path, gt_path, out_path, out_dir, weights_path, results_path;
  std::string method = "gtp", model = "toy", out_csv;
  std::uint64_t seed = 0;
  double alpha = 30.0, beta = 0.8, vx = 0.0, vy = 0.0, noise = 0.0, lr = 1e-3;
  std::int64_t window_us = 1000, frames = 40, sub_t = 1, width = 64, height = 64, steps = 2500;
  int max_frames = 0;
  bool preview = false;

  auto add_common = [&](CLI::App* c) {
    c->add_option("--config", config_path, "key = value config file");
    c->add_option("--seed", seed, "rng seed (reproducibility banner)");
  };
  auto add_gtp_flags = [&](CLI::App* c) {
    c->add_option("--method", method, "gtp|event_frame|event_count");
    c->add_option("--alpha", alpha, "GTP scale coefficient");
    c->add_option("--beta", beta, "GTP trajectory decay");
    c->add_option("--T", sub_t, "event-stream portions per frame");
    c->add_option("--window-us", window_us, "frame interval in microseconds");
    c->add_option("--width", width, "sensor width");
    c->add_option("--height", height, "sensor height");
  };

  CLI::App* gen = app.add_subcommand("gen", "generate a synthetic event sequence");
  add_common(gen);
  gen->add_option("--out", out_path, "output event file (.csv or packed)")->required();
  gen->add_option("--gt", gt_path, "output ground-truth CSV")->required();
  gen->add_option("--frames", frames, "number of frames");
  gen->add_option("--vx", vx, "x velocity, px/frame");
  gen->add_option("--vy", vy, "y velocity, px/frame");
  gen->add_option("--noise", noise, "background events per frame");
  gen->add_option("--width", width, "sensor width");
  gen->add_option("--height", height, "sensor height");
  gen->add_option("--window-us", window_us, "frame interval in microseconds");

  CLI::App* agg = app.add_subcommand("aggregate", "aggregate events into event images");
  add_common(agg);
  add_gtp_flags(agg);
  agg->add_option("--events", events_path, "input event file")->required();
  agg->add_option("--out", out_dir, "output directory")->required();
  agg->add_option("--frames", frames, "frame count (default: cover all events)");
  agg->add_flag("--preview", preview, "also write 8-bit previews");

  CLI::App* trk = app.add_subcommand("track", "run the tracker over a sequence");
  add_common(trk);
  add_gtp_flags(trk);
  trk->add_option("--weights", weights_path, "weight file")->required();
  trk->add_option("--events", events_path, "input event file")->required();
  trk->add_option("--gt", gt_path, "ground-truth CSV (first frame seeds the template)")
      ->required();
  trk->add_option("--out", out_path, "output results CSV")->required();

  CLI::App* tt = app.add_subcommand("train-toy", "train the toy model on synthetic sequences");
  add_common(tt);
  tt->add_option("--out", out_dir, "output directory")->required();
  tt->add_option("--steps", steps, "training steps");
  tt->add_option("--lr", lr, "learning rate");
  tt->add_option("--model", model, "model preset (toy|tiny|base)");
  tt->add_option("--method", method, "aggregation method for training data");
  tt->add_option("--alpha", alpha, "GTP scale coefficient");
  tt->add_option("--beta", beta, "GTP trajectory decay");

  CLI::App* en = app.add_subcommand("energy", "theoretical energy report over a sequence");
  add_common(en);
  add_gtp_flags(en);
  en->add_option("--weights", weights_path, "weight file")->required();
  en->add_option("--events", events_path, "input event file")->required();
  en->add_option("--gt", gt_path, "ground-truth CSV")->required();
  en->add_option("--out", out_path, "output report JSON")->required();
  en->add_option("--csv", out_csv, "also write a per-layer CSV table");
  en->add_option("--frames", max_frames, "limit instrumented frames");

  CLI::App* ev = app.add_subcommand("eval", "compute AUC / precision from results");
  add_common(ev);
  ev->add_option("--results", results_path, "results CSV from `track`")->required();
  ev->add_option("--gt", gt_path, "optional ground-truth CSV override");
  ev->add_option("--out", out_path, "output summary JSON");

  std::reverse(args.begin(), args.end());  // CLI11 consumes reversed argv-style input
  try {
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  CLI::App* active = app.get_subcommands().front();
  Options opts(active);
  CommandIo io;
  try {
    if (!config_path.empty()) opts.load_file(config_path);
    if (active == gen)
      cmd_gen(opts, io, out_path, gt_path, seed);
    else if (active == agg)
      cmd_aggregate(opts, io, events_path, out_dir, preview, seed);
    else if (active == trk)
      cmd_track(opts, io, weights_path, events_path, gt_path, out_path, seed);
    else if (active == tt)
      cmd_train_toy(opts, io, out_dir, seed);
    else if (active == en)
      cmd_energy(opts, io, weights_path, events_path, gt_path, out_path, out_csv, max_frames,
                 seed);
    else if (active == ev)
      cmd_eval(opts, io, results_path, gt_path, out_path, seed);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    for (const auto& p : io.outputs) {
      std::error_code ec;
      fs::remove(p, ec);
    }
    return 1;
  }
  return 0;
}

inline int run(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(std::move(args));
}

}  // namespace sdtrack::cli
