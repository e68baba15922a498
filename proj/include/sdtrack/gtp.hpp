#pragma once

// Global Trajectory Prompt aggregation. Channels 1 and 2 accumulate scaled
// per-pixel counts of positive and negative polarity events; channel 3 is a
// decayed accumulator that fires on zero-to-nonzero transitions of either
// polarity channel, tracing the object's path across frames. Event Frame and
// Event Count baselines are provided for comparison.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "sdtrack/core.hpp"
#include "sdtrack/events.hpp"

namespace sdtrack {

struct Plane {
  int h = 0, w = 0;
  std::vector<double> v;  // row-major

  Plane() = default;
  Plane(int height, int width) : h(height), w(width), v(static_cast<std::size_t>(height) * width, 0.0) {}
  double& at(int y, int x) { return v[static_cast<std::size_t>(y) * w + x]; }
  double at(int y, int x) const { return v[static_cast<std::size_t>(y) * w + x]; }
  bool same_dims(const Plane& o) const { return h == o.h && w == o.w; }
};

enum class AggregationMethod { Gtp, EventFrame, EventCount };

inline const char* to_string(AggregationMethod m) {
  switch (m) {
    case AggregationMethod::Gtp: return "gtp";
    case AggregationMethod::EventFrame: return "event_frame";
    case AggregationMethod::EventCount: return "event_count";
  }
  return "?";
}

inline AggregationMethod aggregation_method_from_string(const std::string& s) {
  if (s == "gtp") return AggregationMethod::Gtp;
  if (s == "event_frame") return AggregationMethod::EventFrame;
  if (s == "event_count") return AggregationMethod::EventCount;
  bail("unknown aggregation method: ", s, " (expected gtp|event_frame|event_count)");
}

struct EventImage {
  Plane ch[3];  // stacked (h1, h2, h3)
  int frame_index = 0;
  AggregationMethod method = AggregationMethod::Gtp;

  int height() const { return ch[0].h; }
  int width() const { return ch[0].w; }
};

struct GtpState {
  Plane prev_h1, prev_h2, prev_h3;
  double alpha = 30.0;
  double beta = 0.8;
};

inline GtpState make_gtp_state(int height, int width, double alpha = 30.0, double beta = 0.8) {
  require(alpha > 0, "gtp: alpha must be > 0");
  require(beta >= 0 && beta <= 1, "gtp: beta must be in [0,1]");
  GtpState s;
  s.prev_h1 = Plane(height, width);
  s.prev_h2 = Plane(height, width);
  s.prev_h3 = Plane(height, width);  // h3 starts as a zero matrix
  s.alpha = alpha;
  s.beta = beta;
  return s;
}

// h1 = alpha * per-pixel count of +1 events, h2 = alpha * count of -1 events.
inline void aggregate_polarity_channels(const EventWindow& win, double alpha, Plane& h1,
                                        Plane& h2) {
  require(alpha > 0, "gtp: alpha must be > 0");
  h1 = Plane(win.height, win.width);
  h2 = Plane(win.height, win.width);
  for (const Event& e : win.events) {
    require(e.x >= 0 && e.x < win.width && e.y >= 0 && e.y < win.height,
            "gtp: event at (", e.x, ",", e.y, ") outside ", win.width, "x", win.height, " window");
    (e.p > 0 ? h1 : h2).at(e.y, e.x) += alpha;
  }
}

// h3 = beta * prev_h3 + alpha * sum_j [prev_hj == 0][hj != 0], j in {1,2}.
inline Plane aggregate_trajectory_channel(const GtpState& s, const Plane& h1, const Plane& h2) {
  require(s.prev_h1.same_dims(h1) && s.prev_h2.same_dims(h2) && s.prev_h3.same_dims(h1),
          "gtp: state/plane dimension mismatch");
  Plane h3(h1.h, h1.w);
  for (std::size_t i = 0; i < h3.v.size(); ++i) {
    double onset = (s.prev_h1.v[i] == 0.0 && h1.v[i] != 0.0 ? 1.0 : 0.0) +
                   (s.prev_h2.v[i] == 0.0 && h2.v[i] != 0.0 ? 1.0 : 0.0);
    h3.v[i] = s.beta * s.prev_h3.v[i] + s.alpha * onset;
  }
  return h3;
}

// One GTP step: aggregates a window into a 3-channel image and advances the
// state. Channel-3 aggregation uses the previous frame's channels, so it runs
// after channels 1 and 2 for the current frame are complete.
inline EventImage aggregate_next(GtpState& s, const EventWindow& win, int frame_index = 0) {
  require(win.width == s.prev_h1.w && win.height == s.prev_h1.h,
          "gtp: window dims ", win.width, "x", win.height, " do not match state ",
          s.prev_h1.w, "x", s.prev_h1.h);
  EventImage img;
  img.frame_index = frame_index;
  img.method = AggregationMethod::Gtp;
  aggregate_polarity_channels(win, s.alpha, img.ch[0], img.ch[1]);
  img.ch[2] = aggregate_trajectory_channel(s, img.ch[0], img.ch[1]);
  s.prev_h1 = img.ch[0];
  s.prev_h2 = img.ch[1];
  s.prev_h3 = img.ch[2];
  return img;
}

// Recomputes the whole prefix from a fresh zero state. Used as the batch
// counterpart of streaming aggregation; the two must agree bit-exactly.
inline std::vector<EventImage> aggregate_batch(const std::vector<EventWindow>& windows,
                                               double alpha, double beta) {
  std::vector<EventImage> out;
  if (windows.empty()) return out;
  GtpState s = make_gtp_state(windows[0].height, windows[0].width, alpha, beta);
  out.reserve(windows.size());
  for (std::size_t i = 0; i < windows.size(); ++i)
    out.push_back(aggregate_next(s, windows[i], static_cast<int>(i)));
  return out;
}

inline EventImage aggregate_baseline(const EventWindow& win, AggregationMethod method,
                                     int frame_index = 0) {
  EventImage img;
  img.frame_index = frame_index;
  img.method = method;
  for (auto& p : img.ch) p = Plane(win.height, win.width);
  if (method == AggregationMethod::EventFrame) {
    // Only the latest polarity at each pixel survives.
    for (const Event& e : win.events) {
      img.ch[0].at(e.y, e.x) = e.p > 0 ? 1.0 : 0.0;
      img.ch[1].at(e.y, e.x) = e.p < 0 ? 1.0 : 0.0;
    }
  } else if (method == AggregationMethod::EventCount) {
    for (const Event& e : win.events) (e.p > 0 ? img.ch[0] : img.ch[1]).at(e.y, e.x) += 1.0;
  } else {
    bail("aggregate_baseline: method must be event_frame or event_count");
  }
  return img;
}

// ---------------------------------------------------------------------------
// Export. Planes are kept unclamped in memory; the raw format stores f32
// planar data behind an (H, W, 3) header, and the 8-bit preview clamps to
// [0, 255].

inline void write_event_image_raw(const std::string& path, const EventImage& img) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "cannot open file for writing: ", path);
  write_pod(out, static_cast<std::uint32_t>(img.height()));
  write_pod(out, static_cast<std::uint32_t>(img.width()));
  write_pod(out, static_cast<std::uint32_t>(3));
  for (const Plane& p : img.ch)
    for (double v : p.v) write_pod(out, static_cast<float>(v));
  require(out.good(), "write failed: ", path);
}

inline EventImage read_event_image_raw(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "cannot open file: ", path);
  std::uint32_t h, w, c;
  require(read_pod(in, h) && read_pod(in, w) && read_pod(in, c), path, ": truncated header");
  require(c == 3, path, ": expected 3 channels, got ", c);
  EventImage img;
  for (auto& p : img.ch) {
    p = Plane(static_cast<int>(h), static_cast<int>(w));
    for (double& v : p.v) {
      float f;
      require(read_pod(in, f), path, ": truncated plane data");
      v = f;
    }
  }
  return img;
}

// 8-bit preview (PPM, channels mapped to RGB), values clamped to [0,255].
inline void write_event_image_preview(const std::string& path, const EventImage& img) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "cannot open file for writing: ", path);
  out << "P6\n" << img.width() << " " << img.height() << "\n255\n";
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x)
      for (const Plane& p : img.ch) {
        double v = std::clamp(p.at(y, x), 0.0, 255.0);
        out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v))));
      }
  require(out.good(), "write failed: ", path);
}

}  // namespace sdtrack
