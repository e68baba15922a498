#pragma once

// Event data model: file I/O (CSV and packed binary), windowing of an event
// stream into per-frame sub-windows, and a synthetic moving-square generator
// used as a ground-truth source for tests and toy training.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "sdtrack/core.hpp"

namespace sdtrack {

struct Event {
  int x = 0;       // pixel column
  int y = 0;       // pixel row
  std::int64_t t = 0;  // microseconds, non-decreasing within a stream
  int p = 1;       // polarity, exactly +1 or -1

  bool operator==(const Event&) const = default;
};

struct EventWindow {
  std::vector<Event> events;  // sorted by t, ties keep input order
  std::int64_t t_start = 0;
  std::int64_t t_end = 0;  // window covers [t_start, t_end)
  int width = 0;
  int height = 0;
};

struct GroundTruthBox {
  double cx = 0, cy = 0;  // center, pixels
  double w = 0, h = 0;    // extent, pixels (> 0)
  int frame = 0;
};

enum class EventFileFormat { Csv, Packed };

inline constexpr char kPackedEventMagic[8] = {'S', 'D', 'T', 'E', 'V', 'T', '0', '1'};

// ---------------------------------------------------------------------------
// Parsing / writing

namespace detail {

inline bool parse_i64_field(const std::string& line, std::size_t& pos, std::int64_t& out) {
  while (pos < line.size() && (line[pos] == ' ' || line[pos] == '\t')) ++pos;
  std::size_t start = pos;
  if (pos < line.size() && (line[pos] == '-' || line[pos] == '+')) ++pos;
  std::size_t digits_from = pos;
  while (pos < line.size() && std::isdigit(static_cast<unsigned char>(line[pos]))) ++pos;
  if (pos == digits_from) return false;
  out = std::stoll(line.substr(start, pos - start));
  while (pos < line.size() && (line[pos] == ' ' || line[pos] == '\t')) ++pos;
  return true;
}

// Parses "x,y,t,p"; returns false on any malformed field.
inline bool parse_csv_event(const std::string& line, std::int64_t fields[4]) {
  std::size_t pos = 0;
  for (int i = 0; i < 4; ++i) {
    if (!parse_i64_field(line, pos, fields[i])) return false;
    if (i < 3) {
      if (pos >= line.size() || line[pos] != ',') return false;
      ++pos;
    }
  }
  return pos == line.size();
}

inline void check_event_fields(const std::int64_t f[4], std::size_t byte_offset,
                               const std::string& path) {
  require(f[0] >= 0 && f[0] <= 0xffff && f[1] >= 0 && f[1] <= 0xffff,
          path, ": coordinate out of range at byte offset ", byte_offset);
  require(f[2] >= 0, path, ": negative timestamp at byte offset ", byte_offset);
  require(f[3] == 1 || f[3] == -1,
          path, ": polarity must be +1 or -1 at byte offset ", byte_offset);
}

}  // namespace detail

// Reads a whole event file. Events are returned in file order; timestamps are
// validated non-decreasing (the offending event index is reported otherwise).
inline std::vector<Event> parse_event_file(const std::string& path, EventFileFormat format) {
  std::vector<Event> events;
  if (format == EventFileFormat::Csv) {
    std::string text = read_text_file(path);
    std::size_t pos = 0;
    bool first_line = true;
    while (pos < text.size()) {
      std::size_t line_start = pos;
      std::size_t eol = text.find('\n', pos);
      std::string line = text.substr(pos, eol == std::string::npos ? std::string::npos : eol - pos);
      pos = eol == std::string::npos ? text.size() : eol + 1;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      bool blank = line.find_first_not_of(" \t") == std::string::npos;
      if (blank) {
        first_line = false;
        continue;
      }
      std::int64_t f[4];
      if (!detail::parse_csv_event(line, f)) {
        if (first_line) {  // optional header row
          first_line = false;
          continue;
        }
        bail(path, ": malformed CSV record at byte offset ", line_start);
      }
      first_line = false;
      detail::check_event_fields(f, line_start, path);
      events.push_back(Event{static_cast<int>(f[0]), static_cast<int>(f[1]), f[2],
                             static_cast<int>(f[3])});
    }
  } else {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), "cannot open file: ", path);
    char magic[8];
    in.read(magic, 8);
    require(in.gcount() == 8 && std::equal(magic, magic + 8, kPackedEventMagic),
            path, ": bad packed-event magic header");
    std::size_t offset = 8;
    while (true) {
      std::uint16_t x, y;
      std::uint64_t t;
      std::int8_t p;
      if (!read_pod(in, x)) {
        require(in.gcount() == 0, path, ": truncated record at byte offset ", offset);
        break;
      }
      bool ok = read_pod(in, y) && read_pod(in, t) && read_pod(in, p);
      require(ok, path, ": truncated record at byte offset ", offset);
      require(p == 1 || p == -1, path, ": polarity must be +1 or -1 at byte offset ", offset);
      events.push_back(Event{x, y, static_cast<std::int64_t>(t), p});
      offset += 13;
    }
  }
  for (std::size_t i = 1; i < events.size(); ++i) {
    require(events[i].t >= events[i - 1].t,
            path, ": non-monotone timestamp at event index ", i);
  }
  return events;
}

inline void write_event_file(const std::string& path, const std::vector<Event>& events,
                             EventFileFormat format) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "cannot open file for writing: ", path);
  if (format == EventFileFormat::Csv) {
    out << "x,y,t,p\n";
    for (const Event& e : events) {
      out << e.x << ',' << e.y << ',' << e.t << ',' << e.p << '\n';
    }
  } else {
    out.write(kPackedEventMagic, 8);
    for (const Event& e : events) {
      write_pod(out, static_cast<std::uint16_t>(e.x));
      write_pod(out, static_cast<std::uint16_t>(e.y));
      write_pod(out, static_cast<std::uint64_t>(e.t));
      write_pod(out, static_cast<std::int8_t>(e.p));
    }
  }
  require(out.good(), "write failed: ", path);
}

inline EventFileFormat guess_event_format(const std::string& path) {
  if (path.size() >= 4 && path.substr(path.size() - 4) == ".csv") return EventFileFormat::Csv;
  return EventFileFormat::Packed;
}

// ---------------------------------------------------------------------------
// Ground-truth CSV: "frame,cx,cy,w,h"

inline void write_gt_csv(const std::string& path, const std::vector<GroundTruthBox>& gt) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "cannot open file for writing: ", path);
  out << "frame,cx,cy,w,h\n";
  char buf[160];
  for (const GroundTruthBox& b : gt) {
    std::snprintf(buf, sizeof(buf), "%d,%.6f,%.6f,%.6f,%.6f\n", b.frame, b.cx, b.cy, b.w, b.h);
    out << buf;
  }
  require(out.good(), "write failed: ", path);
}

inline std::vector<GroundTruthBox> parse_gt_csv(const std::string& path) {
  std::string text = read_text_file(path);
  std::vector<GroundTruthBox> gt;
  std::size_t pos = 0;
  bool first = true;
  while (pos < text.size()) {
    std::size_t eol = text.find('\n', pos);
    std::string line = text.substr(pos, eol == std::string::npos ? std::string::npos : eol - pos);
    pos = eol == std::string::npos ? text.size() : eol + 1;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    GroundTruthBox b;
    int n = std::sscanf(line.c_str(), "%d,%lf,%lf,%lf,%lf", &b.frame, &b.cx, &b.cy, &b.w, &b.h);
    if (n != 5) {
      require(first, path, ": malformed ground-truth row: ", line);
      first = false;
      continue;
    }
    first = false;
    gt.push_back(b);
  }
  return gt;
}

// ---------------------------------------------------------------------------
// Windowing

// Splits a stream into frame intervals of window_len_us (anchored at
// t_origin), each divided into T contiguous sub-windows. The first T-1
// sub-windows have length window_len_us / T; the remainder goes to the last.
// Every event lands in exactly one window.
inline std::vector<EventWindow> window_stream(const std::vector<Event>& events, int width,
                                              int height, std::int64_t window_len_us, int sub_t,
                                              std::int64_t t_origin = 0, int num_frames = -1) {
  require(window_len_us > 0, "window_stream: window length must be > 0");
  require(sub_t >= 1, "window_stream: T must be >= 1");
  std::vector<EventWindow> out;
  if (events.empty() && num_frames < 0) return out;

  if (num_frames < 0) {
    std::int64_t last_t = events.back().t;
    require(last_t >= t_origin, "window_stream: events precede the stream origin");
    num_frames = static_cast<int>((last_t - t_origin) / window_len_us) + 1;
  }
  std::int64_t sub_len = window_len_us / sub_t;
  require(sub_len > 0, "window_stream: window length shorter than T sub-windows");

  out.reserve(static_cast<std::size_t>(num_frames) * static_cast<std::size_t>(sub_t));
  for (int f = 0; f < num_frames; ++f) {
    std::int64_t frame_start = t_origin + f * window_len_us;
    for (int k = 0; k < sub_t; ++k) {
      EventWindow w;
      w.width = width;
      w.height = height;
      w.t_start = frame_start + k * sub_len;
      w.t_end = (k == sub_t - 1) ? frame_start + window_len_us : frame_start + (k + 1) * sub_len;
      out.push_back(std::move(w));
    }
  }
  std::int64_t span_end = t_origin + static_cast<std::int64_t>(num_frames) * window_len_us;
  for (const Event& e : events) {
    require(e.t >= t_origin, "window_stream: event before stream origin");
    if (e.t >= span_end) continue;  // only possible with an explicit num_frames
    std::int64_t f = (e.t - t_origin) / window_len_us;
    std::int64_t within = (e.t - t_origin) - f * window_len_us;
    std::int64_t k = sub_len == 0 ? 0 : std::min<std::int64_t>(within / sub_len, sub_t - 1);
    out[static_cast<std::size_t>(f * sub_t + k)].events.push_back(e);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic generator: a bright square translating across a dark sensor.
// Tick-based; per tick the occupancy mask is re-rasterized and every pixel
// turning on emits +1 events (leading edge), every pixel turning off emits
// -1 events (trailing edge). Uniform background noise is Poisson per tick.

struct SynthConfig {
  int width = 64;
  int height = 64;
  int object_size = 10;        // square side, pixels
  double start_cx = 32.0;
  double start_cy = 32.0;
  double vx = 0.0;             // pixels per frame
  double vy = 0.0;
  int num_frames = 40;
  int ticks_per_frame = 10;
  std::int64_t frame_len_us = 1000;
  int events_per_pixel = 1;    // events emitted per changed pixel per tick
  double noise_per_frame = 0.0;  // expected background events per frame
  std::uint64_t seed = 1;
};

struct SynthResult {
  std::vector<Event> events;
  std::vector<GroundTruthBox> gt;  // one box per frame
  std::vector<std::string> warnings;
};

namespace detail {

// Center position after `frames` frames of motion, clamped so the square stays
// on the sensor. Returns whether clamping occurred.
inline bool synth_center(const SynthConfig& c, double frames, double& cx, double& cy) {
  cx = c.start_cx + c.vx * frames;
  cy = c.start_cy + c.vy * frames;
  double half = c.object_size / 2.0;
  double cx0 = std::clamp(cx, half, c.width - half);
  double cy0 = std::clamp(cy, half, c.height - half);
  bool clamped = cx0 != cx || cy0 != cy;
  cx = cx0;
  cy = cy0;
  return clamped;
}

inline void synth_rasterize(const SynthConfig& c, double cx, double cy,
                            std::vector<std::uint8_t>& mask) {
  std::fill(mask.begin(), mask.end(), 0);
  int side = c.object_size;
  int x0 = static_cast<int>(std::lround(cx - side / 2.0));
  int y0 = static_cast<int>(std::lround(cy - side / 2.0));
  for (int y = std::max(0, y0); y < std::min(c.height, y0 + side); ++y)
    for (int x = std::max(0, x0); x < std::min(c.width, x0 + side); ++x)
      mask[static_cast<std::size_t>(y) * c.width + x] = 1;
}

}  // namespace detail

inline SynthResult generate_synthetic_sequence(const SynthConfig& c) {
  require(c.width > 0 && c.height > 0 && c.object_size > 0, "synthetic: bad sensor/object size");
  require(c.num_frames >= 0 && c.ticks_per_frame >= 1, "synthetic: bad frame/tick counts");
  require(c.object_size <= c.width && c.object_size <= c.height,
          "synthetic: object larger than sensor");

  SynthResult r;
  std::mt19937_64 rng(c.seed);
  std::vector<std::uint8_t> prev(static_cast<std::size_t>(c.width) * c.height, 0);
  std::vector<std::uint8_t> cur(prev.size(), 0);
  bool warned_clamp = false;

  for (int f = 0; f < c.num_frames; ++f) {
    for (int j = 0; j < c.ticks_per_frame; ++j) {
      double frames_done = f + static_cast<double>(j + 1) / c.ticks_per_frame;
      double cx, cy;
      bool clamped = detail::synth_center(c, frames_done, cx, cy);
      if (clamped && !warned_clamp) {
        r.warnings.push_back(strcat_msg("object path clamped to sensor bounds at frame ", f));
        warned_clamp = true;
      }
      detail::synth_rasterize(c, cx, cy, cur);
      std::int64_t t = f * c.frame_len_us + j * (c.frame_len_us / c.ticks_per_frame);
      for (int y = 0; y < c.height; ++y) {
        for (int x = 0; x < c.width; ++x) {
          std::size_t i = static_cast<std::size_t>(y) * c.width + x;
          if (cur[i] == prev[i]) continue;
          int p = cur[i] ? 1 : -1;
          for (int k = 0; k < c.events_per_pixel; ++k)
            r.events.push_back(Event{x, y, t, p});
        }
      }
      if (c.noise_per_frame > 0) {
        std::poisson_distribution<int> noise_n(c.noise_per_frame / c.ticks_per_frame);
        std::uniform_int_distribution<int> ux(0, c.width - 1), uy(0, c.height - 1), up(0, 1);
        int n = noise_n(rng);
        for (int k = 0; k < n; ++k)
          r.events.push_back(Event{ux(rng), uy(rng), t, up(rng) ? 1 : -1});
      }
      std::swap(prev, cur);
    }
    double cx, cy;
    detail::synth_center(c, f + 1.0, cx, cy);
    r.gt.push_back(GroundTruthBox{cx, cy, static_cast<double>(c.object_size),
                                  static_cast<double>(c.object_size), f});
  }
  return r;
}

}  // namespace sdtrack
