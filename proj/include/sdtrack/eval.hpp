#pragma once

// Tracking metrics (IoU success curve / AUC, center-distance precision) and
// the sequence harness: template cropped from the first annotated frame, each
// later frame searched around the previous prediction. No template updates,
// no window penalties.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "sdtrack/core.hpp"
#include "sdtrack/events.hpp"
#include "sdtrack/gtp.hpp"
#include "sdtrack/model.hpp"

namespace sdtrack {

struct Box {
  double cx = 0, cy = 0, w = 0, h = 0;
};

inline double iou(const Box& a, const Box& b) {
  double ax1 = a.cx - a.w / 2, ax2 = a.cx + a.w / 2;
  double ay1 = a.cy - a.h / 2, ay2 = a.cy + a.h / 2;
  double bx1 = b.cx - b.w / 2, bx2 = b.cx + b.w / 2;
  double by1 = b.cy - b.h / 2, by2 = b.cy + b.h / 2;
  double iw = std::max(0.0, std::min(ax2, bx2) - std::max(ax1, bx1));
  double ih = std::max(0.0, std::min(ay2, by2) - std::max(ay1, by1));
  double inter = iw * ih;
  double uni = a.w * a.h + b.w * b.h - inter;
  return uni > 0 ? inter / uni : 0.0;
}

inline double center_distance(const Box& a, const Box& b) {
  return std::hypot(a.cx - b.cx, a.cy - b.cy);
}

struct FrameEval {
  int frame = 0;
  Box pred, gt;  // pixel coordinates
  double iou_v = 0;
  double dist = 0;
};

struct SequenceResult {
  std::vector<FrameEval> frames;
  int width = 0, height = 0;
};

struct MetricSummary {
  double auc = 0;  // mean success rate over the 21-point threshold grid
  double pr = 0;   // fraction of frames with center distance strictly below 20 px
  std::vector<std::pair<double, double>> success_curve;    // threshold -> rate
  std::vector<std::pair<double, double>> precision_curve;  // distance -> rate

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["auc"] = auc;
    j["pr"] = pr;
    j["success_curve"] = nlohmann::json::array();
    for (auto [t, r] : success_curve) j["success_curve"].push_back({t, r});
    j["precision_curve"] = nlohmann::json::array();
    for (auto [t, r] : precision_curve) j["precision_curve"].push_back({t, r});
    return j;
  }
};

inline MetricSummary compute_metrics(const std::vector<SequenceResult>& results) {
  std::vector<const FrameEval*> frames;
  for (const auto& s : results)
    for (const auto& f : s.frames) frames.push_back(&f);
  require(!frames.empty(), "compute_metrics: no frames");

  MetricSummary m;
  for (int k = 0; k <= 20; ++k) {
    double thr = k * 0.05;
    std::int64_t ok = 0;
    for (const auto* f : frames) ok += f->iou_v >= thr;
    m.success_curve.emplace_back(thr, static_cast<double>(ok) / frames.size());
  }
  for (const auto& [thr, rate] : m.success_curve) m.auc += rate;
  m.auc /= static_cast<double>(m.success_curve.size());

  for (int d = 0; d <= 50; d += 2) {
    std::int64_t ok = 0;
    for (const auto* f : frames) ok += f->dist < d;
    m.precision_curve.emplace_back(d, static_cast<double>(ok) / frames.size());
  }
  std::int64_t hits = 0;
  for (const auto* f : frames) hits += f->dist < 20.0;  // strictly below 20 px
  m.pr = static_cast<double>(hits) / frames.size();
  return m;
}

// ---------------------------------------------------------------------------
// Crops

struct CropRect {
  double x0 = 0, y0 = 0, side = 1;
};

// Square crop centered on the box, side = context * sqrt(w*h).
inline CropRect crop_around(const Box& b, double context) {
  CropRect r;
  r.side = std::max(1.0, context * std::sqrt(std::max(1e-9, b.w * b.h)));
  r.x0 = b.cx - r.side / 2;
  r.y0 = b.cy - r.side / 2;
  return r;
}

// Pixel box -> coordinates normalized to the crop.
inline Box normalize_box(const Box& b, const CropRect& r) {
  return Box{(b.cx - r.x0) / r.side, (b.cy - r.y0) / r.side, b.w / r.side, b.h / r.side};
}

inline Box denormalize_box(const Box& nb, const CropRect& r) {
  return Box{r.x0 + nb.cx * r.side, r.y0 + nb.cy * r.side, nb.w * r.side, nb.h * r.side};
}

namespace detail {

inline double bilinear_at(const Plane& p, double x, double y) {
  // Zero outside the plane.
  int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
  double fx = x - x0, fy = y - y0;
  auto sample = [&](int yy, int xx) {
    if (xx < 0 || xx >= p.w || yy < 0 || yy >= p.h) return 0.0;
    return p.at(yy, xx);
  };
  return (1 - fy) * ((1 - fx) * sample(y0, x0) + fx * sample(y0, x0 + 1)) +
         fy * ((1 - fx) * sample(y0 + 1, x0) + fx * sample(y0 + 1, x0 + 1));
}

}  // namespace detail

inline EventImage crop_resize(const EventImage& img, const CropRect& r, int out_size) {
  EventImage out;
  out.frame_index = img.frame_index;
  out.method = img.method;
  double step = r.side / out_size;
  for (int ch = 0; ch < 3; ++ch) {
    out.ch[ch] = Plane(out_size, out_size);
    for (int i = 0; i < out_size; ++i)
      for (int j = 0; j < out_size; ++j) {
        double sx = r.x0 + (j + 0.5) * step - 0.5;
        double sy = r.y0 + (i + 0.5) * step - 0.5;
        out.ch[ch].at(i, j) = detail::bilinear_at(img.ch[ch], sx, sy);
      }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sequence harness

class TrackPredictor {
 public:
  struct Context {
    int frame = 0;
    CropRect search_rect;
    CropRect template_rect;
  };
  virtual ~TrackPredictor() = default;
  virtual TrackResult predict(const Context& ctx, const std::vector<EventImage>& z,
                              const std::vector<EventImage>& x) = 0;
};

struct SotConfig {
  double template_context = 2.0;
  double search_context = 4.0;
  AggregationMethod method = AggregationMethod::Gtp;
  double alpha = 30.0;
  double beta = 0.8;
  int sub_t = 1;  // event-stream portions per frame (T)
  int template_size = 128;
  int search_size = 256;
};

// Aggregates every frame of a sequence; frame i holds its sub_t images.
inline std::vector<std::vector<EventImage>> aggregate_sequence(
    const std::vector<Event>& events, int width, int height, std::int64_t window_len_us,
    int num_frames, const SotConfig& cfg) {
  auto windows = window_stream(events, width, height, window_len_us, cfg.sub_t, 0, num_frames);
  std::vector<std::vector<EventImage>> frames(static_cast<std::size_t>(num_frames));
  GtpState state = make_gtp_state(height, width, cfg.alpha, cfg.beta);
  for (std::size_t i = 0; i < windows.size(); ++i) {
    int frame = static_cast<int>(i) / cfg.sub_t;
    EventImage img = cfg.method == AggregationMethod::Gtp
                         ? aggregate_next(state, windows[i], frame)
                         : aggregate_baseline(windows[i], cfg.method, frame);
    frames[static_cast<std::size_t>(frame)].push_back(std::move(img));
  }
  return frames;
}

inline SequenceResult run_sequence(TrackPredictor& model, const std::vector<Event>& events,
                                   const std::vector<GroundTruthBox>& gt, int width, int height,
                                   std::int64_t window_len_us, const SotConfig& cfg) {
  require(!gt.empty(), "run_sequence: first frame must be annotated");
  const int num_frames = static_cast<int>(gt.size());
  auto frames = aggregate_sequence(events, width, height, window_len_us, num_frames, cfg);

  Box gt0{gt[0].cx, gt[0].cy, gt[0].w, gt[0].h};
  CropRect template_rect = crop_around(gt0, cfg.template_context);
  std::vector<EventImage> z;
  for (const auto& img : frames[0]) z.push_back(crop_resize(img, template_rect, cfg.template_size));

  SequenceResult out;
  out.width = width;
  out.height = height;
  // Frame 0 initializes the tracker; it scores as a given.
  out.frames.push_back(FrameEval{gt[0].frame, gt0, gt0, 1.0, 0.0});

  Box prev = gt0;
  for (int f = 1; f < num_frames; ++f) {
    CropRect rect = crop_around(prev, cfg.search_context);
    std::vector<EventImage> x;
    for (const auto& img : frames[static_cast<std::size_t>(f)])
      x.push_back(crop_resize(img, rect, cfg.search_size));
    TrackPredictor::Context ctx{gt[static_cast<std::size_t>(f)].frame, rect, template_rect};
    TrackResult tr = model.predict(ctx, z, x);
    Box pred = denormalize_box(Box{tr.cx, tr.cy, tr.w, tr.h}, rect);
    Box gt_f{gt[static_cast<std::size_t>(f)].cx, gt[static_cast<std::size_t>(f)].cy,
             gt[static_cast<std::size_t>(f)].w, gt[static_cast<std::size_t>(f)].h};
    FrameEval fe;
    fe.frame = gt[static_cast<std::size_t>(f)].frame;
    fe.pred = pred;
    fe.gt = gt_f;
    fe.iou_v = iou(pred, gt_f);
    fe.dist = center_distance(pred, gt_f);
    out.frames.push_back(fe);
    prev = pred;
  }
  return out;
}

// Mean IoU over the predicted frames (the initialization frame is excluded).
inline double mean_iou(const SequenceResult& r) {
  if (r.frames.size() <= 1) return 0.0;
  double s = 0;
  for (std::size_t i = 1; i < r.frames.size(); ++i) s += r.frames[i].iou_v;
  return s / static_cast<double>(r.frames.size() - 1);
}

template <typename T>
class NetPredictor : public TrackPredictor {
 public:
  explicit NetPredictor(const SDTrackNet<T>& net, SpikeRecorder<T>* rec = nullptr)
      : net_(net), rec_(rec) {}
  TrackResult predict(const Context&, const std::vector<EventImage>& z,
                      const std::vector<EventImage>& x) override {
    return net_.track(z, x, rec_);
  }

 private:
  const SDTrackNet<T>& net_;
  SpikeRecorder<T>* rec_;
};

// ---------------------------------------------------------------------------
// Results CSV: frame, predicted box, ground truth box, IoU, center distance.

inline void write_results_csv(const std::string& path, const SequenceResult& r) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "cannot open file for writing: ", path);
  out << "frame,pred_cx,pred_cy,pred_w,pred_h,gt_cx,gt_cy,gt_w,gt_h,iou,center_dist\n";
  char buf[320];
  for (const auto& f : r.frames) {
    std::snprintf(buf, sizeof(buf), "%d,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n",
                  f.frame, f.pred.cx, f.pred.cy, f.pred.w, f.pred.h, f.gt.cx, f.gt.cy, f.gt.w,
                  f.gt.h, f.iou_v, f.dist);
    out << buf;
  }
  require(out.good(), "write failed: ", path);
}

inline SequenceResult parse_results_csv(const std::string& path) {
  std::string text = read_text_file(path);
  SequenceResult r;
  std::size_t pos = 0;
  bool first = true;
  while (pos < text.size()) {
    std::size_t eol = text.find('\n', pos);
    std::string line = text.substr(pos, eol == std::string::npos ? std::string::npos : eol - pos);
    pos = eol == std::string::npos ? text.size() : eol + 1;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    FrameEval f;
    int n = std::sscanf(line.c_str(), "%d,%lf,%lf,%lf,%lf,%lf,%lf,%lf,%lf,%lf,%lf", &f.frame,
                        &f.pred.cx, &f.pred.cy, &f.pred.w, &f.pred.h, &f.gt.cx, &f.gt.cy, &f.gt.w,
                        &f.gt.h, &f.iou_v, &f.dist);
    if (n != 11) {
      require(first, path, ": malformed results row: ", line);
      first = false;
      continue;
    }
    first = false;
    r.frames.push_back(f);
  }
  return r;
}

}  // namespace sdtrack
