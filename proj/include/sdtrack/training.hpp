#pragma once

// Pair-matching training: weighted focal classification on the score map plus
// GIoU and L1 regression on the box read at the score argmax,
//
//   L = L_cls + lambda_iou * L_iou + lambda_L1 * L_1,   lambda_iou=2, lambda_L1=5,
//
// with an AdamW-style optimizer (decoupled weight decay, cosine decay) and a
// toy end-to-end run on synthetic moving-square sequences.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "sdtrack/core.hpp"
#include "sdtrack/eval.hpp"
#include "sdtrack/events.hpp"
#include "sdtrack/gtp.hpp"
#include "sdtrack/model.hpp"
#include "sdtrack/tensor.hpp"

namespace sdtrack {

struct LossWeights {
  double lambda_iou = 2.0;
  double lambda_l1 = 5.0;
};

// Gaussian classification target with an exact unit peak at the ground-truth
// center cell (sigma in cells).
inline Plane make_gaussian_target(int hs, int ws, double cx_norm, double cy_norm,
                                  double sigma = 1.0) {
  int c0 = std::clamp(static_cast<int>(cx_norm * ws), 0, ws - 1);
  int r0 = std::clamp(static_cast<int>(cy_norm * hs), 0, hs - 1);
  Plane y(hs, ws);
  for (int r = 0; r < hs; ++r)
    for (int c = 0; c < ws; ++c) {
      double d2 = double(r - r0) * (r - r0) + double(c - c0) * (c - c0);
      y.at(r, c) = std::exp(-d2 / (2 * sigma * sigma));
    }
  y.at(r0, c0) = 1.0;
  return y;
}

// CornerNet-style weighted focal loss. score_prob: (N,1,H,W) in (0,1);
// targets: one plane per sample with exactly one unit peak. Normalized by the
// number of positives.
template <typename T>
ad::Tensor<T> focal_loss(const ad::Tensor<T>& score_prob, const std::vector<Plane>& targets,
                         T alpha_pow = T(2), T beta_pow = T(4)) {
  require(score_prob.rank() == 4 && score_prob.dim(1) == 1, "focal_loss: (N,1,H,W) expected");
  const int n = score_prob.dim(0), hs = score_prob.dim(2), ws = score_prob.dim(3);
  require(static_cast<int>(targets.size()) == n, "focal_loss: target count mismatch");
  const std::int64_t cells = static_cast<std::int64_t>(hs) * ws;

  std::vector<T> pos_mask(static_cast<std::size_t>(n * cells), T(0));
  std::vector<T> neg_weight(static_cast<std::size_t>(n * cells), T(0));
  int n_pos = 0;
  for (int s = 0; s < n; ++s) {
    const Plane& y = targets[static_cast<std::size_t>(s)];
    require(y.h == hs && y.w == ws, "focal_loss: target plane size mismatch");
    for (std::int64_t i = 0; i < cells; ++i) {
      double yv = y.v[static_cast<std::size_t>(i)];
      require(yv >= 0.0 && yv <= 1.0, "focal_loss: target outside [0,1]");
      auto idx = static_cast<std::size_t>(s * cells + i);
      if (yv == 1.0) {
        pos_mask[idx] = T(1);
        ++n_pos;
      } else {
        double one_minus = 1.0 - yv;
        neg_weight[idx] = static_cast<T>(std::pow(one_minus, static_cast<double>(beta_pow)));
      }
    }
  }
  require(n_pos > 0, "focal_loss: no positive cell in targets");

  auto shape = score_prob.shape();
  auto p = ad::clamp(score_prob, T(1e-6), T(1) - T(1e-6));
  auto one = ad::Tensor<T>::full(shape, T(1));
  auto one_minus_p = ad::sub(one, p);
  auto pos_m = ad::constant_like<T>(shape, std::move(pos_mask));
  auto neg_w = ad::constant_like<T>(shape, std::move(neg_weight));

  auto pow_t = [](const ad::Tensor<T>& t, T e) {
    ad::Tensor<T> acc = t;
    for (int i = 1; i < static_cast<int>(e); ++i) acc = ad::mul(acc, t);
    return acc;
  };
  auto pos_term = ad::mul(pos_m, ad::mul(pow_t(one_minus_p, alpha_pow), ad::log(p)));
  auto neg_term = ad::mul(neg_w, ad::mul(pow_t(p, alpha_pow), ad::log(one_minus_p)));
  return ad::scale(ad::sum(ad::add(pos_term, neg_term)), T(-1) / static_cast<T>(n_pos));
}

// GIoU loss 1 - GIoU(pred, gt) on (cx, cy, w, h) boxes. gt is constant.
template <typename T>
ad::Tensor<T> giou_loss(const ad::Tensor<T>& pred_box, const Box& gt) {
  require(pred_box.numel() == 4, "giou_loss: box must have 4 components");
  require(gt.w > 0 && gt.h > 0, "giou_loss: degenerate ground-truth box");
  auto cx = ad::gather_flat(pred_box, 0);
  auto cy = ad::gather_flat(pred_box, 1);
  auto w = ad::gather_flat(pred_box, 2);
  auto h = ad::gather_flat(pred_box, 3);
  auto half = [](const ad::Tensor<T>& t) { return ad::scale(t, T(0.5)); };
  auto ax1 = ad::sub(cx, half(w)), ax2 = ad::add(cx, half(w));
  auto ay1 = ad::sub(cy, half(h)), ay2 = ad::add(cy, half(h));
  const T bx1 = static_cast<T>(gt.cx - gt.w / 2), bx2 = static_cast<T>(gt.cx + gt.w / 2);
  const T by1 = static_cast<T>(gt.cy - gt.h / 2), by2 = static_cast<T>(gt.cy + gt.h / 2);
  auto c1 = [](T v) { return ad::Tensor<T>::scalar(v); };

  auto zero = c1(T(0));
  auto iw = ad::maximum(ad::sub(ad::minimum(ax2, c1(bx2)), ad::maximum(ax1, c1(bx1))), zero);
  auto ih = ad::maximum(ad::sub(ad::minimum(ay2, c1(by2)), ad::maximum(ay1, c1(by1))), zero);
  auto inter = ad::mul(iw, ih);
  auto area_a = ad::mul(w, h);
  auto uni = ad::sub(ad::add_scalar(area_a, static_cast<T>(gt.w * gt.h)), inter);
  auto ew = ad::sub(ad::maximum(ax2, c1(bx2)), ad::minimum(ax1, c1(bx1)));
  auto eh = ad::sub(ad::maximum(ay2, c1(by2)), ad::minimum(ay1, c1(by1)));
  auto enc = ad::mul(ew, eh);
  auto giou = ad::sub(ad::div(inter, uni), ad::div(ad::sub(enc, uni), enc));
  return ad::add_scalar(ad::neg(giou), T(1));
}

// Mean absolute difference over the 4 box components.
template <typename T>
ad::Tensor<T> l1_loss(const ad::Tensor<T>& pred_box, const Box& gt) {
  require(pred_box.numel() == 4, "l1_loss: box must have 4 components");
  auto gt_t = ad::constant_like<T>({4}, {static_cast<T>(gt.cx), static_cast<T>(gt.cy),
                                         static_cast<T>(gt.w), static_cast<T>(gt.h)});
  auto d = ad::sub(pred_box, gt_t);
  return ad::mean(ad::maximum(d, ad::neg(d)));
}

// L = L_cls + lambda_iou * L_iou + lambda_L1 * L_1. Components must be finite.
template <typename T>
ad::Tensor<T> total_loss(const ad::Tensor<T>& cls, const ad::Tensor<T>& iou_term,
                         const ad::Tensor<T>& l1_term, const LossWeights& w = {}) {
  auto check = [](const ad::Tensor<T>& t, const char* name) {
    require(t.numel() == 1, "total_loss: ", name, " must be scalar");
    require(std::isfinite(static_cast<double>(t.item())), "total_loss: ", name,
            " term is not finite");
  };
  check(cls, "classification");
  check(iou_term, "iou");
  check(l1_term, "l1");
  return ad::add(cls, ad::add(ad::scale(iou_term, static_cast<T>(w.lambda_iou)),
                              ad::scale(l1_term, static_cast<T>(w.lambda_l1))));
}

// ---------------------------------------------------------------------------
// Optimizer: Adam with decoupled weight decay.

struct OptimConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

template <typename T>
class AdamW {
 public:
  explicit AdamW(OptimConfig cfg = {}) : cfg_(cfg) {}

  void step(WeightStore<T>& store, double lr_now) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (const auto& name : store.names()) {
      auto& e = store.at(name);
      if (!e.trainable || !e.tensor.defined()) continue;
      const auto& g = e.tensor.grad_view();
      if (g.empty()) continue;
      auto& m = m_[name];
      auto& v = v_[name];
      if (m.empty()) {
        m.assign(g.size(), 0.0);
        v.assign(g.size(), 0.0);
      }
      auto& p = e.tensor.value();
      for (std::size_t i = 0; i < g.size(); ++i) {
        double gi = static_cast<double>(g[i]);
        m[i] = cfg_.beta1 * m[i] + (1 - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (1 - cfg_.beta2) * gi * gi;
        double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
        p[i] -= static_cast<T>(lr_now * update + lr_now * cfg_.weight_decay * p[i]);
      }
    }
  }

 private:
  OptimConfig cfg_;
  int t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

inline double cosine_lr(double base_lr, int step, int total_steps, double floor_frac = 0.01) {
  if (total_steps <= 0) return base_lr;
  double min_lr = base_lr * floor_frac;
  double t = std::min(1.0, static_cast<double>(step) / total_steps);
  return min_lr + 0.5 * (base_lr - min_lr) * (1 + std::cos(t * 3.14159265358979323846));
}

// ---------------------------------------------------------------------------
// Toy dataset and training loop

struct ToyDatasetConfig {
  int train_sequences = 24;
  int eval_sequences = 20;
  int frames_per_seq = 24;
  int sensor = 64;
  int object_size = 12;
  double max_speed = 2.0;       // pixels per frame
  double noise_per_frame = 30;
  std::int64_t frame_len_us = 1000;
  std::uint64_t seed = 7;
  AggregationMethod method = AggregationMethod::Gtp;
  double alpha = 30.0;
  double beta = 0.8;
};

struct ToyTrainConfig {
  int steps = 2500;
  int batch = 8;
  OptimConfig optim;
  LossWeights weights;
  double jitter = 0.2;      // search-center jitter, fraction of the crop side
  int eval_every = 0;       // 0: evaluate only at init and at the end
  int eval_sequences = 6;   // held-out subset used for periodic eval
  std::uint64_t seed = 1;
};

struct ToySequence {
  std::vector<Event> events;
  std::vector<GroundTruthBox> gt;
  std::vector<std::vector<EventImage>> frames;  // per frame, sub_t images
};

struct ToyDataset {
  std::vector<ToySequence> train;
  std::vector<ToySequence> eval;
  ToyDatasetConfig cfg;
};

namespace detail {

inline ToySequence make_toy_sequence(const ToyDatasetConfig& cfg, std::uint64_t seed, int sub_t) {
  std::mt19937_64 rng(seed);
  SynthConfig sc;
  sc.width = cfg.sensor;
  sc.height = cfg.sensor;
  sc.object_size = cfg.object_size;
  sc.num_frames = cfg.frames_per_seq;
  sc.frame_len_us = cfg.frame_len_us;
  sc.noise_per_frame = cfg.noise_per_frame;
  sc.seed = seed;
  double margin = cfg.object_size / 2.0 + 2;
  std::uniform_real_distribution<double> upos(margin, cfg.sensor - margin);
  std::uniform_real_distribution<double> uspeed(0.0, cfg.max_speed);
  std::uniform_real_distribution<double> uangle(0.0, 2 * 3.14159265358979323846);
  sc.start_cx = upos(rng);
  sc.start_cy = upos(rng);
  double speed = uspeed(rng);
  if (speed < 0.15 * cfg.max_speed) speed = 0;  // keep some stationary targets
  double ang = uangle(rng);
  sc.vx = speed * std::cos(ang);
  sc.vy = speed * std::sin(ang);

  ToySequence seq;
  auto r = generate_synthetic_sequence(sc);
  seq.events = std::move(r.events);
  seq.gt = std::move(r.gt);
  SotConfig sot;
  sot.method = cfg.method;
  sot.alpha = cfg.alpha;
  sot.beta = cfg.beta;
  sot.sub_t = sub_t;
  seq.frames = aggregate_sequence(seq.events, cfg.sensor, cfg.sensor, cfg.frame_len_us,
                                  static_cast<int>(seq.gt.size()), sot);
  return seq;
}

}  // namespace detail

inline ToyDataset build_toy_dataset(const ToyDatasetConfig& cfg, int sub_t) {
  ToyDataset ds;
  ds.cfg = cfg;
  for (int i = 0; i < cfg.train_sequences; ++i)
    ds.train.push_back(detail::make_toy_sequence(cfg, cfg.seed * 1000003 + i, sub_t));
  for (int i = 0; i < cfg.eval_sequences; ++i)
    ds.eval.push_back(detail::make_toy_sequence(cfg, cfg.seed * 1000003 + 500 + i, sub_t));
  return ds;
}

struct TrainSample {
  std::vector<EventImage> z, x;  // sub_t images each
  Box gt_box;                    // normalized to the search crop
};

// Template from the sequence's first frame; search crop around the
// ground-truth center with uniform jitter so localization is learnable.
inline TrainSample sample_pair(const ToySequence& seq, const SotConfig& sot, double jitter,
                               std::mt19937_64& rng) {
  std::uniform_int_distribution<int> uframe(1, static_cast<int>(seq.gt.size()) - 1);
  int f = uframe(rng);
  Box gt0{seq.gt[0].cx, seq.gt[0].cy, seq.gt[0].w, seq.gt[0].h};
  Box gtf{seq.gt[static_cast<std::size_t>(f)].cx, seq.gt[static_cast<std::size_t>(f)].cy,
          seq.gt[static_cast<std::size_t>(f)].w, seq.gt[static_cast<std::size_t>(f)].h};

  TrainSample s;
  CropRect zr = crop_around(gt0, sot.template_context);
  for (const auto& img : seq.frames[0]) s.z.push_back(crop_resize(img, zr, sot.template_size));

  CropRect xr = crop_around(gtf, sot.search_context);
  std::uniform_real_distribution<double> uj(-jitter, jitter);
  xr.x0 += uj(rng) * xr.side;
  xr.y0 += uj(rng) * xr.side;
  for (const auto& img : seq.frames[static_cast<std::size_t>(f)])
    s.x.push_back(crop_resize(img, xr, sot.search_size));
  s.gt_box = normalize_box(gtf, xr);
  return s;
}

struct TrainRecord {
  int step = 0;
  double loss = 0, cls = 0, iou_term = 0, l1_term = 0, lr = 0;
  double eval_iou = -1;  // < 0: no eval at this record

  nlohmann::json to_json() const {
    nlohmann::json j{{"step", step}, {"loss", loss},          {"cls", cls},
                     {"iou", iou_term}, {"l1", l1_term},      {"lr", lr}};
    if (eval_iou >= 0) j["eval_iou"] = eval_iou;
    return j;
  }
};

struct TrainReport {
  std::vector<TrainRecord> records;
  double final_eval_iou = 0;

  std::string to_jsonl() const {
    std::string out;
    for (const auto& r : records) out += r.to_json().dump() + "\n";
    return out;
  }
};

template <typename T>
double evaluate_mean_iou(const SDTrackNet<T>& net, const std::vector<ToySequence>& seqs,
                         const ToyDatasetConfig& dcfg, const SotConfig& sot, int limit = -1) {
  NetPredictor<T> pred(const_cast<SDTrackNet<T>&>(net));
  double acc = 0;
  int n = 0;
  for (const auto& seq : seqs) {
    if (limit >= 0 && n >= limit) break;
    auto r = run_sequence(pred, seq.events, seq.gt, dcfg.sensor, dcfg.sensor, dcfg.frame_len_us,
                          sot);
    acc += mean_iou(r);
    ++n;
  }
  return n > 0 ? acc / n : 0.0;
}

template <typename T>
SotConfig toy_sot_config(const SDTrackNet<T>& net, const ToyDatasetConfig& dcfg) {
  SotConfig sot;
  sot.method = dcfg.method;
  sot.alpha = dcfg.alpha;
  sot.beta = dcfg.beta;
  sot.sub_t = net.config().timesteps;
  sot.template_size = net.config().template_size;
  sot.search_size = net.config().search_size;
  return sot;
}

// Runs pair-matching steps with AdamW and cosine decay; deterministic under
// the config seed. Aborts with the step index if the loss stops being finite.
template <typename T>
TrainReport train_toy(SDTrackNet<T>& net, const ToyDataset& ds, const ToyTrainConfig& cfg) {
  require(!ds.train.empty(), "train_toy: empty training set");
  const SotConfig sot = toy_sot_config(net, ds.cfg);
  const int hs = net.config().search_feat();
  std::mt19937_64 rng(cfg.seed);
  AdamW<T> opt(cfg.optim);
  TrainReport report;

  {
    TrainRecord r;
    r.step = 0;
    r.lr = cfg.optim.lr;
    r.eval_iou = evaluate_mean_iou(net, ds.eval, ds.cfg, sot, cfg.eval_sequences);
    report.records.push_back(r);
  }

  for (int step = 1; step <= cfg.steps; ++step) {
    std::uniform_int_distribution<std::size_t> useq(0, ds.train.size() - 1);
    std::vector<TrainSample> batch;
    for (int b = 0; b < cfg.batch; ++b)
      batch.push_back(sample_pair(ds.train[useq(rng)], sot, cfg.jitter, rng));

    // Stack the batch into (T, N, 3, H, W) tensors.
    auto stack = [&](bool search) {
      const int hw = search ? sot.search_size : sot.template_size;
      std::vector<T> data;
      data.reserve(static_cast<std::size_t>(sot.sub_t) * cfg.batch * 3 * hw * hw);
      for (int t = 0; t < sot.sub_t; ++t)
        for (int b = 0; b < cfg.batch; ++b) {
          const EventImage& img = search ? batch[static_cast<std::size_t>(b)].x[static_cast<std::size_t>(t)]
                                         : batch[static_cast<std::size_t>(b)].z[static_cast<std::size_t>(t)];
          for (const auto& ch : img.ch)
            for (double v : ch.v) data.push_back(static_cast<T>(v / 255.0));
        }
      return ad::Tensor<T>::from({sot.sub_t, cfg.batch, 3, hw, hw}, std::move(data));
    };
    auto z = stack(false);
    auto x = stack(true);

    ForwardOptions<T> fopt;
    fopt.training = true;
    auto out = net.forward(z, x, fopt);

    std::vector<Plane> targets;
    for (const auto& s : batch)
      targets.push_back(make_gaussian_target(hs, hs, s.gt_box.cx, s.gt_box.cy));
    auto cls = focal_loss(out.score_prob, targets);

    ad::Tensor<T> iou_acc, l1_acc;
    for (int b = 0; b < cfg.batch; ++b) {
      auto gl = giou_loss(out.boxes[static_cast<std::size_t>(b)], batch[static_cast<std::size_t>(b)].gt_box);
      auto ll = l1_loss(out.boxes[static_cast<std::size_t>(b)], batch[static_cast<std::size_t>(b)].gt_box);
      iou_acc = b == 0 ? gl : ad::add(iou_acc, gl);
      l1_acc = b == 0 ? ll : ad::add(l1_acc, ll);
    }
    auto iou_term = ad::scale(iou_acc, T(1) / cfg.batch);
    auto l1_term = ad::scale(l1_acc, T(1) / cfg.batch);
    ad::Tensor<T> loss;
    try {
      loss = total_loss(cls, iou_term, l1_term, cfg.weights);
    } catch (const std::runtime_error& e) {
      bail("train_toy: aborted at step ", step, ": ", e.what());
    }

    net.store().zero_grads();
    ad::backward(loss);
    double lr_now = cosine_lr(cfg.optim.lr, step, cfg.steps);
    opt.step(net.store(), lr_now);

    TrainRecord r;
    r.step = step;
    r.loss = static_cast<double>(loss.item());
    r.cls = static_cast<double>(cls.item());
    r.iou_term = static_cast<double>(iou_term.item());
    r.l1_term = static_cast<double>(l1_term.item());
    r.lr = lr_now;
    if (cfg.eval_every > 0 && step % cfg.eval_every == 0)
      r.eval_iou = evaluate_mean_iou(net, ds.eval, ds.cfg, sot, cfg.eval_sequences);
    report.records.push_back(r);
  }

  if (cfg.steps == 0) {  // report holds only the init eval
    report.final_eval_iou = report.records.front().eval_iou;
    return report;
  }
  report.final_eval_iou = evaluate_mean_iou(net, ds.eval, ds.cfg, sot);
  if (report.records.back().eval_iou < 0) {
    report.records.back().eval_iou = report.final_eval_iou;
  } else {
    TrainRecord fin;
    fin.step = cfg.steps;
    fin.eval_iou = report.final_eval_iou;
    report.records.push_back(fin);
  }
  return report;
}

}  // namespace sdtrack
