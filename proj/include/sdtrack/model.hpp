#pragma once

// The tracker network. Template and search event images are composed
// diagonally (intrinsic position learning), pushed through spike-driven conv
// stages to stride 16, split back, tokenized, run through spike self-attention
// transformer stages, and read out by a center head whose first four convs per
// branch are spike-based and whose final conv is floating point.

#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "sdtrack/core.hpp"
#include "sdtrack/gtp.hpp"
#include "sdtrack/neurons.hpp"
#include "sdtrack/profiler.hpp"
#include "sdtrack/tensor.hpp"

namespace sdtrack {

// ---------------------------------------------------------------------------
// Configuration

struct ModelConfig {
  std::string name = "custom";
  int channels = 64;  // C; conv stages run at 2C/4C/8C
  std::vector<int> conv_blocks = {2, 2, 4};
  int stage4_blocks = 12;
  int stage5_blocks = 6;
  int stage5_channel_mult = 10;
  int num_heads = 8;
  int mlp_ratio = 4;
  double ssa_scale = 0.0;  // 0 selects 1/sqrt(d_head)
  int timesteps = 1;       // T

  std::string neuron = "ilif";
  int neuron_d = 4;
  double tau = 2.0;
  double u_thr = 1.0;
  double surrogate_width = 0.5;
  bool soft_reset = false;

  int template_size = 128;
  int search_size = 256;
  int head_top_channels = 512;

  static constexpr int kStride = 16;

  static ModelConfig base() {
    ModelConfig c;
    c.name = "base";
    return c;
  }

  static ModelConfig tiny() {
    ModelConfig c;
    c.name = "tiny";
    c.channels = 32;
    c.stage4_blocks = 6;
    c.stage5_blocks = 2;
    c.head_top_channels = 256;
    return c;
  }

  // Small enough for desk-scale training: 2 conv blocks, 2 transformer blocks.
  static ModelConfig toy() {
    ModelConfig c;
    c.name = "toy";
    c.channels = 8;
    c.conv_blocks = {1, 1, 0};
    c.stage4_blocks = 1;
    c.stage5_blocks = 1;
    c.stage5_channel_mult = 8;
    c.num_heads = 2;
    c.template_size = 32;
    c.search_size = 64;
    c.head_top_channels = 64;
    return c;
  }

  int stage_channels(int i) const { return channels << (i + 1); }  // 2C, 4C, 8C
  int embed4() const { return 8 * channels; }
  int embed5() const { return stage5_channel_mult * channels; }
  int template_feat() const { return template_size / kStride; }
  int search_feat() const { return search_size / kStride; }
  int template_tokens() const { return template_feat() * template_feat(); }
  int search_tokens() const { return search_feat() * search_feat(); }

  template <typename T>
  NeuronConfig<T> neuron_config() const {
    NeuronConfig<T> n;
    n.kind = neuron_kind_from_string(neuron);
    n.tau = n.kind == NeuronKind::LIF ? static_cast<T>(tau) : T(1);
    n.u_thr = n.kind == NeuronKind::ILIF ? T(0) : static_cast<T>(u_thr);
    n.u_rest = T(0);
    n.d = n.kind == NeuronKind::ILIF ? neuron_d : 1;
    n.surrogate_width = static_cast<T>(surrogate_width);
    n.reset = soft_reset ? ResetMode::SoftSubtract : ResetMode::HardScaled;
    n.validate();
    return n;
  }

  void validate() const {
    require(channels >= 1, "config: channels must be >= 1");
    require(conv_blocks.size() == 3, "config: expected 3 conv-stage block counts");
    for (int b : conv_blocks) require(b >= 0, "config: negative block count");
    require(stage4_blocks >= 0 && stage5_blocks >= 0, "config: negative block count");
    require(template_size % kStride == 0 && search_size % kStride == 0,
            "config: input sizes must be divisible by ", kStride);
    require(embed4() % num_heads == 0 && embed5() % num_heads == 0,
            "config: embed dims must divide into heads");
    require(timesteps >= 1, "config: T must be >= 1");
    neuron_config<double>();
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"name", name},
                          {"channels", channels},
                          {"conv_blocks", conv_blocks},
                          {"stage4_blocks", stage4_blocks},
                          {"stage5_blocks", stage5_blocks},
                          {"stage5_channel_mult", stage5_channel_mult},
                          {"num_heads", num_heads},
                          {"mlp_ratio", mlp_ratio},
                          {"ssa_scale", ssa_scale},
                          {"timesteps", timesteps},
                          {"neuron", neuron},
                          {"neuron_d", neuron_d},
                          {"tau", tau},
                          {"u_thr", u_thr},
                          {"surrogate_width", surrogate_width},
                          {"soft_reset", soft_reset},
                          {"template_size", template_size},
                          {"search_size", search_size},
                          {"head_top_channels", head_top_channels}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.name = j.at("name").get<std::string>();
    c.channels = j.at("channels").get<int>();
    c.conv_blocks = j.at("conv_blocks").get<std::vector<int>>();
    c.stage4_blocks = j.at("stage4_blocks").get<int>();
    c.stage5_blocks = j.at("stage5_blocks").get<int>();
    c.stage5_channel_mult = j.at("stage5_channel_mult").get<int>();
    c.num_heads = j.at("num_heads").get<int>();
    c.mlp_ratio = j.at("mlp_ratio").get<int>();
    c.ssa_scale = j.at("ssa_scale").get<double>();
    c.timesteps = j.at("timesteps").get<int>();
    c.neuron = j.at("neuron").get<std::string>();
    c.neuron_d = j.at("neuron_d").get<int>();
    c.tau = j.at("tau").get<double>();
    c.u_thr = j.at("u_thr").get<double>();
    c.surrogate_width = j.at("surrogate_width").get<double>();
    c.soft_reset = j.at("soft_reset").get<bool>();
    c.template_size = j.at("template_size").get<int>();
    c.search_size = j.at("search_size").get<int>();
    c.head_top_channels = j.at("head_top_channels").get<int>();
    return c;
  }

  static ModelConfig preset(const std::string& n) {
    if (n == "base") return base();
    if (n == "tiny") return tiny();
    if (n == "toy") return toy();
    bail("unknown model preset: ", n, " (expected base|tiny|toy)");
  }
};

// ---------------------------------------------------------------------------
// Structural ops

// Diagonal composition [[X, 0], [0, Z]]: search block top-left, template
// block bottom-right.
template <typename T>
ad::Tensor<T> ipl_compose(const ad::Tensor<T>& x, const ad::Tensor<T>& z) {
  require(x.rank() == 4 && z.rank() == 4, "ipl_compose: rank-4 inputs expected");
  require(x.dim(0) == z.dim(0) && x.dim(1) == z.dim(1), "ipl_compose: batch/channel mismatch");
  std::vector<int> out{x.dim(0), x.dim(1), x.dim(2) + z.dim(2), x.dim(3) + z.dim(3)};
  return ad::add(ad::place(x, out, {0, 0, 0, 0}), ad::place(z, out, {0, 0, x.dim(2), x.dim(3)}));
}

// Returns (x_feat, z_feat); off-diagonal content is discarded.
template <typename T>
std::pair<ad::Tensor<T>, ad::Tensor<T>> ipl_split(const ad::Tensor<T>& u, int x_h, int x_w,
                                                  int z_h, int z_w) {
  require(u.rank() == 4, "ipl_split: rank-4 input expected");
  require(u.dim(2) == x_h + z_h && u.dim(3) == x_w + z_w,
          "ipl_split: extents do not cover the composed map (", u.dim(2), "x", u.dim(3), " vs ",
          x_h + z_h, "x", x_w + z_w, ")");
  auto xf = ad::slice(u, {0, 0, 0, 0}, {u.dim(0), u.dim(1), x_h, x_w});
  auto zf = ad::slice(u, {0, 0, x_h, x_w}, {u.dim(0), u.dim(1), z_h, z_w});
  return {xf, zf};
}

// (N, C, H, W) -> (N, H*W, C), spatial positions in row-major order.
template <typename T>
ad::Tensor<T> flatten_spatial(const ad::Tensor<T>& x) {
  require(x.rank() == 4, "flatten_spatial: rank-4 input expected");
  auto t = ad::transpose(x, {0, 2, 3, 1});
  return ad::reshape(t, {x.dim(0), x.dim(2) * x.dim(3), x.dim(1)});
}

template <typename T>
ad::Tensor<T> unflatten_spatial(const ad::Tensor<T>& tok, int h, int w) {
  require(tok.rank() == 3 && tok.dim(1) == h * w, "unflatten_spatial: token count mismatch");
  auto t = ad::reshape(tok, {tok.dim(0), h, w, tok.dim(2)});
  return ad::transpose(t, {0, 3, 1, 2});
}

// Spike self-attention Q (K^T V) * s over the last two axes. Strict mode
// requires the operands to sit on the spike grid.
template <typename T>
ad::Tensor<T> ssa(const ad::Tensor<T>& q, const ad::Tensor<T>& k, const ad::Tensor<T>& v, T s,
                  bool strict = false, int grid_d = 1) {
  require(q.rank() >= 2 && q.rank() == k.rank() && k.rank() == v.rank(), "ssa: rank mismatch");
  if (strict) {
    auto check = [&](const ad::Tensor<T>& t, const char* name) {
      SpikeTensor<T> st;
      st.shape = t.shape();
      st.values = t.value();
      st.coding = grid_d > 1 ? SpikeCoding::IntegerScaled : SpikeCoding::Binary;
      st.d = grid_d;
      require(on_spike_grid(st), "ssa: ", name, " is not a spike tensor");
    };
    check(q, "Q");
    check(k, "K");
    check(v, "V");
  }
  std::vector<int> perm(static_cast<std::size_t>(k.rank()));
  for (int i = 0; i < k.rank(); ++i) perm[static_cast<std::size_t>(i)] = i;
  std::swap(perm[static_cast<std::size_t>(k.rank() - 2)], perm[static_cast<std::size_t>(k.rank() - 1)]);
  return ad::scale(ad::matmul(q, ad::matmul(ad::transpose(k, perm), v)), s);
}

// ---------------------------------------------------------------------------
// Track result readout

struct TrackResult {
  double cx = 0, cy = 0, w = 0, h = 0;  // normalized to the search region
  double score = 0;                     // score-map maximum
  Plane score_map;
};

// First maximal element in row-major order.
template <typename T>
std::int64_t argmax_row_major(const std::vector<T>& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return static_cast<std::int64_t>(best);
}

// Box readout from post-activation maps: prob (hs*ws), off (2,hs,ws) centered
// in (-0.5, 0.5), size (2,hs,ws) in (0,1). The cell center convention adds
// half a cell before normalizing.
template <typename T>
TrackResult read_box(const std::vector<T>& prob, const std::vector<T>& off,
                     const std::vector<T>& size, int hs, int ws) {
  require(static_cast<int>(prob.size()) == hs * ws, "read_box: score map size mismatch");
  std::int64_t idx = argmax_row_major(prob);
  int r = static_cast<int>(idx) / ws;
  int c = static_cast<int>(idx) % ws;
  auto cell = [&](int ch) { return static_cast<std::size_t>(ch * hs * ws + idx); };
  TrackResult out;
  out.cx = std::clamp((c + 0.5 + static_cast<double>(off[cell(0)])) / ws, 0.0, 1.0);
  out.cy = std::clamp((r + 0.5 + static_cast<double>(off[cell(1)])) / hs, 0.0, 1.0);
  out.w = std::clamp(static_cast<double>(size[cell(0)]), 0.0, 1.0);
  out.h = std::clamp(static_cast<double>(size[cell(1)]), 0.0, 1.0);
  out.score = static_cast<double>(prob[static_cast<std::size_t>(idx)]);
  out.score_map = Plane(hs, ws);
  for (int i = 0; i < hs * ws; ++i)
    out.score_map.v[static_cast<std::size_t>(i)] = static_cast<double>(prob[static_cast<std::size_t>(i)]);
  return out;
}

// ---------------------------------------------------------------------------
// Weight store

template <typename T>
class WeightStore {
 public:
  struct Entry {
    ad::Tensor<T> tensor;  // undefined in shape-only mode
    std::vector<int> shape;
    bool trainable = true;
  };

  WeightStore() = default;
  WeightStore(bool shapes_only, std::uint64_t seed) : shapes_only_(shapes_only), rng_(seed) {}

  ad::Tensor<T> add_kaiming(const std::string& name, std::vector<int> shape, std::int64_t fan_in) {
    T bound = std::sqrt(T(6) / static_cast<T>(fan_in));
    return add_uniform(name, std::move(shape), -bound, bound, true);
  }

  ad::Tensor<T> add_uniform(const std::string& name, std::vector<int> shape, T lo, T hi,
                            bool trainable) {
    if (shapes_only_) return register_entry(name, std::move(shape), trainable, ad::Tensor<T>());
    std::uniform_real_distribution<double> ud(static_cast<double>(lo), static_cast<double>(hi));
    std::vector<T> data(static_cast<std::size_t>(ad::numel_of(shape)));
    for (auto& v : data) v = static_cast<T>(ud(rng_));
    auto t = ad::Tensor<T>::from(shape, std::move(data), trainable);
    return register_entry(name, std::move(shape), trainable, t);
  }

  ad::Tensor<T> add_const(const std::string& name, std::vector<int> shape, T value,
                          bool trainable) {
    if (shapes_only_) return register_entry(name, std::move(shape), trainable, ad::Tensor<T>());
    auto t = ad::Tensor<T>::full(shape, value, trainable);
    return register_entry(name, std::move(shape), trainable, t);
  }

  bool shapes_only() const { return shapes_only_; }
  const std::vector<std::string>& names() const { return order_; }
  bool contains(const std::string& name) const { return entries_.count(name) > 0; }
  Entry& at(const std::string& name) {
    auto it = entries_.find(name);
    require(it != entries_.end(), "weight store: unknown parameter ", name);
    return it->second;
  }
  const Entry& at(const std::string& name) const {
    auto it = entries_.find(name);
    require(it != entries_.end(), "weight store: unknown parameter ", name);
    return it->second;
  }

  std::int64_t parameter_count(bool trainable_only = true) const {
    std::int64_t n = 0;
    for (const auto& name : order_) {
      const Entry& e = entries_.at(name);
      if (!trainable_only || e.trainable) n += ad::numel_of(e.shape);
    }
    return n;
  }

  void zero_grads() {
    for (const auto& name : order_) {
      Entry& e = entries_.at(name);
      if (e.trainable && e.tensor.defined()) e.tensor.zero_grad();
    }
  }

 private:
  ad::Tensor<T> register_entry(const std::string& name, std::vector<int> shape, bool trainable,
                               ad::Tensor<T> t) {
    require(!entries_.count(name), "weight store: duplicate parameter ", name);
    order_.push_back(name);
    entries_.emplace(name, Entry{t, std::move(shape), trainable});
    return t;
  }

  bool shapes_only_ = false;
  std::mt19937_64 rng_{0};
  std::vector<std::string> order_;
  std::map<std::string, Entry> entries_;
};

// ---------------------------------------------------------------------------
// Runtime layers

template <typename T>
class SpikeRecorder;  // from profiler.hpp

template <typename T>
struct ForwardCtx {
  bool training = false;       // batch-norm mode
  bool expand_spikes = false;  // record I-LIF operands as binary trains
  SpikeRecorder<T>* rec = nullptr;
  NeuronConfig<T> neuron;
  std::unordered_map<std::string, ad::Tensor<T>> state;  // per-SN membrane

  SpikeTensor<T> as_spike(const ad::Tensor<T>& x) const {
    SpikeTensor<T> s;
    s.shape = x.shape();
    s.values = x.value();
    s.coding = neuron.coding();
    s.d = neuron.d;
    return s;
  }
};

template <typename T>
struct SpikeLayer {
  std::string id;
  NeuronConfig<T> cfg;

  ad::Tensor<T> forward(ForwardCtx<T>& ctx, const ad::Tensor<T>& x) const {
    ad::Tensor<T> h;
    auto it = ctx.state.find(id);
    if (it != ctx.state.end())
      h = it->second;
    else
      h = ad::Tensor<T>::zeros(x.shape());
    require(h.shape() == x.shape(), "spike layer ", id, ": state shape mismatch");
    auto u = ad::add(h, ad::scale(ad::sub(x, ad::add_scalar(h, -cfg.u_rest)), T(1) / cfg.tau));
    auto s = ad::spike_activation(ad::add_scalar(u, -cfg.u_thr), cfg);
    ad::Tensor<T> h_next = cfg.reset == ResetMode::HardScaled
                               ? ad::mul(u, ad::add_scalar(ad::neg(s), T(1)))
                               : ad::sub(u, ad::scale(s, T(cfg.d)));
    ctx.state[id] = h_next;
    return s;
  }
};

template <typename T>
struct ConvBn {
  std::string id;
  LayerKind kind = LayerKind::SpikeConv;
  int stride = 1, pad = 1, groups = 1;
  bool bn = true;
  ad::Tensor<T> w, bias, gamma, beta, rmean, rvar;

  ad::Tensor<T> forward(ForwardCtx<T>& ctx, const ad::Tensor<T>& x) const {
    if (kind == LayerKind::SpikeConv && ctx.rec)
      ctx.rec->record(id, kind, ctx.as_spike(x), ctx.expand_spikes);
    auto y = ad::conv2d(x, w, bias, stride, pad, groups);
    if (bn) {
      auto rm = rmean;  // running buffers, not graph parents
      auto rv = rvar;
      y = ad::batch_norm(y, gamma, beta, rm, rv, 1, ctx.training);
    }
    return y;
  }
};

template <typename T>
struct LinearBn {
  std::string id;
  bool bn = true;
  ad::Tensor<T> w, bias, gamma, beta, rmean, rvar;

  // x: (N, tokens, d_in)
  ad::Tensor<T> forward(ForwardCtx<T>& ctx, const ad::Tensor<T>& x) const {
    if (ctx.rec) ctx.rec->record(id, LayerKind::SpikeFc, ctx.as_spike(x), ctx.expand_spikes);
    const int n = x.dim(0), tok = x.dim(1), d_in = x.dim(2), d_out = w.dim(1);
    auto y = ad::matmul(ad::reshape(x, {n * tok, d_in}), w);
    if (bias.defined()) y = ad::add_channel(y, bias, 1);
    y = ad::reshape(y, {n, tok, d_out});
    if (bn) {
      auto rm = rmean;
      auto rv = rvar;
      y = ad::batch_norm(y, gamma, beta, rm, rv, 2, ctx.training);
    }
    return y;
  }
};

template <typename T>
struct ConvBlockLayers {
  SpikeLayer<T> sn1, sn2, sn3, sn4, sn5;
  ConvBn<T> pw1, dw, pw2, grp1, grp2;

  ad::Tensor<T> forward(ForwardCtx<T>& ctx, const ad::Tensor<T>& u) const {
    auto b = pw1.forward(ctx, sn1.forward(ctx, u));
    b = dw.forward(ctx, sn2.forward(ctx, b));
    b = pw2.forward(ctx, sn3.forward(ctx, b));
    auto u1 = ad::add(u, b);
    auto c = grp1.forward(ctx, sn4.forward(ctx, u1));
    c = grp2.forward(ctx, sn5.forward(ctx, c));
    return ad::add(u1, c);
  }
};

template <typename T>
struct ConvStage {
  SpikeLayer<T> sn_down;
  ConvBn<T> down;
  std::vector<ConvBlockLayers<T>> blocks;

  ad::Tensor<T> forward(ForwardCtx<T>& ctx, ad::Tensor<T> u) const {
    u = down.forward(ctx, sn_down.forward(ctx, u));
    for (const auto& b : blocks) u = b.forward(ctx, u);
    return u;
  }
};

template <typename T>
struct TransformerBlockLayers {
  std::string ssa_id;
  int heads = 1;
  T scale_s = T(1);
  int grid_d = 1;
  SpikeLayer<T> sn_in, sn_q, sn_k, sn_v, sn_attn, sn_m1, sn_m2;
  LinearBn<T> wq, wk, wv, wo, fc1, fc2;

  ad::Tensor<T> forward(ForwardCtx<T>& ctx, const ad::Tensor<T>& u) const {
    const int n = u.dim(0), tok = u.dim(1), e = u.dim(2), d = e / heads;
    auto s_in = sn_in.forward(ctx, u);
    auto q = sn_q.forward(ctx, wq.forward(ctx, s_in));
    auto k = sn_k.forward(ctx, wk.forward(ctx, s_in));
    auto v = sn_v.forward(ctx, wv.forward(ctx, s_in));
    auto to_heads = [&](const ad::Tensor<T>& t) {
      return ad::transpose(ad::reshape(t, {n, tok, heads, d}), {0, 2, 1, 3});
    };
    auto qh = to_heads(q), kh = to_heads(k), vh = to_heads(v);
    if (ctx.rec) ctx.rec->record_ssa(ssa_id, ctx.as_spike(qh), ctx.as_spike(kh), ctx.as_spike(vh));
    auto attn = ssa(qh, kh, vh, scale_s);
    attn = ad::reshape(ad::transpose(attn, {0, 2, 1, 3}), {n, tok, e});
    auto u1 = ad::add(u, wo.forward(ctx, sn_attn.forward(ctx, attn)));
    auto m = fc2.forward(ctx, sn_m2.forward(ctx, fc1.forward(ctx, sn_m1.forward(ctx, u1))));
    return ad::add(u1, m);
  }
};

template <typename T>
struct HeadBranchLayers {
  std::array<SpikeLayer<T>, 4> sn;
  std::array<ConvBn<T>, 4> conv;
  ConvBn<T> conv5;  // float conv, bias, no BN

  ad::Tensor<T> forward(ForwardCtx<T>& ctx, ad::Tensor<T> x) const {
    for (int i = 0; i < 4; ++i) x = conv[static_cast<std::size_t>(i)].forward(ctx, sn[static_cast<std::size_t>(i)].forward(ctx, x));
    return conv5.forward(ctx, x);
  }
};

// ---------------------------------------------------------------------------
// Network

inline constexpr char kWeightMagic[8] = {'S', 'D', 'T', 'W', 'G', 'T', '0', '1'};
inline constexpr std::uint32_t kWeightVersion = 1;

template <typename T>
struct ForwardResult {
  ad::Tensor<T> score_raw, offset_raw, size_raw;   // (N, 1/2/2, Hs, Ws)
  ad::Tensor<T> score_prob;                        // sigmoid(score_raw)
  std::vector<ad::Tensor<T>> boxes;                // per-sample {4} graph tensors
  std::vector<TrackResult> results;                // per-sample readouts
};

template <typename T>
struct ForwardOptions {
  bool training = false;
  bool expand_spikes = false;
  SpikeRecorder<T>* rec = nullptr;
};

template <typename T>
class SDTrackNet {
 public:
  explicit SDTrackNet(ModelConfig cfg, std::uint64_t seed = 1, bool shapes_only = false)
      : cfg_(std::move(cfg)), store_(shapes_only, seed) {
    cfg_.validate();
    neuron_ = cfg_.template neuron_config<T>();
    build();
  }

  const ModelConfig& config() const { return cfg_; }
  WeightStore<T>& store() { return store_; }
  const WeightStore<T>& store() const { return store_; }
  const LayerPlan& plan() const { return plan_; }
  bool folded() const { return folded_; }

  // z: (T, N, 3, Hz, Wz), x: (T, N, 3, Hx, Wx), values already scaled to ~[0,1].
  ForwardResult<T> forward(const ad::Tensor<T>& z, const ad::Tensor<T>& x,
                           const ForwardOptions<T>& opt = {}) const {
    require(!store_.shapes_only(), "forward: network was built shapes-only");
    require(!folded_ || !opt.training, "forward: batch norms are folded; training unavailable");
    require(z.rank() == 5 && x.rank() == 5, "forward: expected (T,N,3,H,W) inputs");
    const int t_steps = z.dim(0), n = z.dim(1);
    require(x.dim(0) == t_steps && x.dim(1) == n, "forward: timestep/batch mismatch");
    require(z.dim(2) == 3 && x.dim(2) == 3, "forward: expected 3 channels");
    require(z.dim(3) == cfg_.template_size && z.dim(4) == cfg_.template_size,
            "forward: template is ", z.dim(3), "x", z.dim(4), ", config wants ",
            cfg_.template_size);
    require(x.dim(3) == cfg_.search_size && x.dim(4) == cfg_.search_size,
            "forward: search is ", x.dim(3), "x", x.dim(4), ", config wants ", cfg_.search_size);
    require(t_steps == cfg_.timesteps, "forward: expected T=", cfg_.timesteps, ", got ", t_steps);

    ForwardCtx<T> ctx;
    ctx.training = opt.training;
    ctx.expand_spikes = opt.expand_spikes;
    ctx.rec = opt.rec;
    ctx.neuron = neuron_;

    const int fz = cfg_.template_feat(), fx = cfg_.search_feat();
    ad::Tensor<T> head_in;
    for (int t = 0; t < t_steps; ++t) {
      if (ctx.rec) ctx.rec->begin_step();
      auto zt = ad::reshape(ad::slice(z, {t, 0, 0, 0, 0},
                                      {1, n, 3, cfg_.template_size, cfg_.template_size}),
                            {n, 3, cfg_.template_size, cfg_.template_size});
      auto xt = ad::reshape(
          ad::slice(x, {t, 0, 0, 0, 0}, {1, n, 3, cfg_.search_size, cfg_.search_size}),
          {n, 3, cfg_.search_size, cfg_.search_size});
      auto u = ipl_compose(xt, zt);
      u = stem_.forward(ctx, u);
      for (const auto& st : conv_stages_) u = st.forward(ctx, u);
      auto [xf, zf] = ipl_split(u, fx, fx, fz, fz);
      auto tok = ad::concat(flatten_spatial(zf), flatten_spatial(xf), 1);
      tok = tokenize_.forward(ctx, sn_tokenize_.forward(ctx, tok));
      for (const auto& b : stage4_) tok = b.forward(ctx, tok);
      if (has_transition_) tok = transition_.forward(ctx, sn_transition_.forward(ctx, tok));
      for (const auto& b : stage5_) tok = b.forward(ctx, tok);
      auto search_tok = ad::slice(tok, {0, cfg_.template_tokens(), 0},
                                  {n, cfg_.search_tokens(), cfg_.embed5()});
      auto fmap = unflatten_spatial(search_tok, fx, fx);
      head_in = t == 0 ? fmap : ad::add(head_in, fmap);
    }
    if (t_steps > 1) head_in = ad::scale(head_in, T(1) / static_cast<T>(t_steps));

    ForwardResult<T> out;
    out.score_raw = head_score_.forward(ctx, head_in);
    out.offset_raw = head_offset_.forward(ctx, head_in);
    out.size_raw = head_size_.forward(ctx, head_in);
    out.score_prob = ad::sigmoid(out.score_raw);
    auto off = ad::add_scalar(ad::sigmoid(out.offset_raw), T(-0.5));
    auto sz = ad::sigmoid(out.size_raw);

    const int hs = fx, ws = fx, cells = hs * ws;
    for (int s = 0; s < n; ++s) {
      std::vector<T> prob(out.score_prob.value().begin() + s * cells,
                          out.score_prob.value().begin() + (s + 1) * cells);
      std::vector<T> offv(off.value().begin() + s * 2 * cells,
                          off.value().begin() + (s + 1) * 2 * cells);
      std::vector<T> szv(sz.value().begin() + s * 2 * cells,
                         sz.value().begin() + (s + 1) * 2 * cells);
      out.results.push_back(read_box(prob, offv, szv, hs, ws));

      std::int64_t idx = argmax_row_major(prob);
      int r = static_cast<int>(idx) / ws, c = static_cast<int>(idx) % ws;
      auto flat = [&](const ad::Tensor<T>& m, int ch) {
        return ad::gather_flat(m, (static_cast<std::int64_t>(s) * 2 + ch) * cells + idx);
      };
      auto cx = ad::add_scalar(ad::scale(flat(off, 0), T(1) / ws), static_cast<T>((c + 0.5) / ws));
      auto cy = ad::add_scalar(ad::scale(flat(off, 1), T(1) / hs), static_cast<T>((r + 0.5) / hs));
      out.boxes.push_back(ad::concat(ad::concat(cx, cy, 0),
                                     ad::concat(flat(sz, 0), flat(sz, 1), 0), 0));
    }
    return out;
  }

  // Single-sample inference from aggregated event images (one image per
  // timestep); planes are divided by 255 on the way in.
  TrackResult track(const std::vector<EventImage>& z_stack,
                    const std::vector<EventImage>& x_stack,
                    SpikeRecorder<T>* rec = nullptr) const {
    ad::NoGradGuard ng;
    ForwardOptions<T> opt;
    opt.expand_spikes = neuron_.kind == NeuronKind::ILIF;
    opt.rec = rec;
    auto r = forward(images_to_tensor(z_stack, cfg_.template_size),
                     images_to_tensor(x_stack, cfg_.search_size), opt);
    return r.results.at(0);
  }

  static ad::Tensor<T> images_to_tensor(const std::vector<EventImage>& stack, int expect_hw) {
    require(!stack.empty(), "images_to_tensor: empty stack");
    const int t_steps = static_cast<int>(stack.size());
    std::vector<T> data;
    data.reserve(static_cast<std::size_t>(t_steps) * 3 * expect_hw * expect_hw);
    for (const auto& img : stack) {
      require(img.height() == expect_hw && img.width() == expect_hw,
              "images_to_tensor: image is ", img.width(), "x", img.height(), ", expected ",
              expect_hw);
      for (const auto& ch : img.ch)
        for (double v : ch.v) data.push_back(static_cast<T>(v / 255.0));
    }
    return ad::Tensor<T>::from({t_steps, 1, 3, expect_hw, expect_hw}, std::move(data));
  }

  // -------------------------------------------------------------------------
  // Batch-norm folding (inference only); outputs must match unfolded eval
  // forward within tight tolerance.

  void fold_batch_norms() {
    require(!store_.shapes_only(), "fold: network was built shapes-only");
    require(!folded_, "fold: already folded");
    visit_conv([&](ConvBn<T>& cb) { fold_conv(cb); });
    visit_linear([&](LinearBn<T>& lb) { fold_linear(lb); });
    folded_ = true;
  }

  // -------------------------------------------------------------------------
  // Serialization

  void save(const std::string& path) const {
    require(!store_.shapes_only(), "save: network was built shapes-only");
    std::ofstream out(path, std::ios::binary);
    require(out.good(), "cannot open file for writing: ", path);
    out.write(kWeightMagic, 8);
    write_pod(out, kWeightVersion);
    std::string cfg_json = cfg_.to_json().dump();
    write_pod(out, static_cast<std::uint64_t>(cfg_json.size()));
    out.write(cfg_json.data(), static_cast<std::streamsize>(cfg_json.size()));
    write_pod(out, static_cast<std::uint64_t>(store_.names().size()));
    for (const auto& name : store_.names()) {
      const auto& e = store_.at(name);
      write_pod(out, static_cast<std::uint32_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      write_pod(out, static_cast<std::uint8_t>(e.trainable ? 1 : 0));
      write_pod(out, static_cast<std::uint8_t>(sizeof(T)));
      write_pod(out, static_cast<std::uint32_t>(e.shape.size()));
      for (int d : e.shape) write_pod(out, static_cast<std::int32_t>(d));
      const auto& vals = e.tensor.value();
      write_pod(out, static_cast<std::uint64_t>(vals.size() * sizeof(T)));
      out.write(reinterpret_cast<const char*>(vals.data()),
                static_cast<std::streamsize>(vals.size() * sizeof(T)));
    }
    require(out.good(), "write failed: ", path);
  }

  static ModelConfig read_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), "cannot open file: ", path);
    return read_header(in, path);
  }

  static SDTrackNet load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), "cannot open file: ", path);
    ModelConfig cfg = read_header(in, path);
    SDTrackNet net(cfg, 0);
    net.load_entries(in, path);
    return net;
  }

  // Loads parameters into this already-constructed network; the file's
  // parameter name set must match exactly.
  void load_weights(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), "cannot open file: ", path);
    read_header(in, path);
    load_entries(in, path);
  }

 private:
  static ModelConfig read_header(std::ifstream& in, const std::string& path) {
    char magic[8];
    in.read(magic, 8);
    require(in.gcount() == 8 && std::equal(magic, magic + 8, kWeightMagic),
            path, ": bad weight-file magic");
    std::uint32_t version = 0;
    require(read_pod(in, version), path, ": truncated header");
    require(version == kWeightVersion, path, ": unsupported weight-file version ", version);
    std::uint64_t json_len = 0;
    require(read_pod(in, json_len), path, ": truncated header");
    std::string cfg_json(json_len, '\0');
    in.read(cfg_json.data(), static_cast<std::streamsize>(json_len));
    require(static_cast<std::uint64_t>(in.gcount()) == json_len, path, ": truncated config blob");
    return ModelConfig::from_json(nlohmann::json::parse(cfg_json));
  }

  void load_entries(std::ifstream& in, const std::string& path) {
    struct Record {
      std::string name;
      std::vector<int> shape;
      std::vector<T> data;
    };
    std::uint64_t n_params = 0;
    require(read_pod(in, n_params), path, ": truncated parameter table");
    std::vector<Record> records;
    records.reserve(n_params);
    for (std::uint64_t i = 0; i < n_params; ++i) {
      Record rec;
      std::uint32_t name_len = 0;
      require(read_pod(in, name_len), path, ": truncated parameter record");
      rec.name.resize(name_len);
      in.read(rec.name.data(), name_len);
      require(static_cast<std::uint32_t>(in.gcount()) == name_len, path, ": truncated name");
      std::uint8_t trainable = 0, dtype = 0;
      std::uint32_t ndim = 0;
      require(read_pod(in, trainable) && read_pod(in, dtype) && read_pod(in, ndim),
              path, ": truncated record for ", rec.name);
      require(dtype == sizeof(T), path, ": dtype width ", int(dtype), " != built width ",
              sizeof(T), " for ", rec.name);
      rec.shape.resize(ndim);
      for (auto& d : rec.shape) {
        std::int32_t v;
        require(read_pod(in, v), path, ": truncated shape for ", rec.name);
        d = v;
      }
      std::uint64_t nbytes = 0;
      require(read_pod(in, nbytes), path, ": truncated record for ", rec.name);
      require(nbytes % sizeof(T) == 0, path, ": odd payload size for ", rec.name);
      rec.data.resize(nbytes / sizeof(T));
      in.read(reinterpret_cast<char*>(rec.data.data()), static_cast<std::streamsize>(nbytes));
      require(static_cast<std::uint64_t>(in.gcount()) == nbytes, path, ": truncated data for ",
              rec.name);
      records.push_back(std::move(rec));
    }
    // Validate the complete name set before assigning anything: no partial
    // loads, and a wrong-config file reports the full mismatch.
    std::map<std::string, int> have;
    for (const auto& r : records) have[r.name] = 1;
    std::string missing, extra;
    for (const auto& n : store_.names())
      if (!have.count(n)) missing += " " + n;
    for (const auto& r : records)
      if (!store_.contains(r.name)) extra += " " + r.name;
    if (!missing.empty() || !extra.empty())
      bail(path, ": parameter name-set mismatch; missing:[", missing, " ] extra:[", extra, " ]");
    for (const auto& r : records) {
      auto& e = store_.at(r.name);
      require(e.shape == r.shape, path, ": shape mismatch for ", r.name);
      require(r.data.size() == e.tensor.value().size(), path, ": size mismatch for ", r.name);
    }
    for (const auto& r : records) store_.at(r.name).tensor.value() = r.data;
  }

  // ---------------------------------------------------------------------
  // Construction

  SpikeLayer<T> make_sn(const std::string& id) { return SpikeLayer<T>{id, neuron_}; }

  ConvBn<T> make_conv(const std::string& id, LayerKind kind, int cin, int cout, int k, int stride,
                      int pad, int groups, bool bn, bool bias) {
    ConvBn<T> cb;
    cb.id = id;
    cb.kind = kind;
    cb.stride = stride;
    cb.pad = pad;
    cb.groups = groups;
    cb.bn = bn;
    cb.w = store_.add_kaiming(id + ".w", {cout, cin / groups, k, k},
                              static_cast<std::int64_t>(cin / groups) * k * k);
    if (bias) cb.bias = store_.add_const(id + ".b", {cout}, T(0), true);
    if (bn) {
      cb.gamma = store_.add_const(id + ".bn.gamma", {cout}, T(1), true);
      cb.beta = store_.add_const(id + ".bn.beta", {cout}, T(0), true);
      cb.rmean = store_.add_const(id + ".bn.rmean", {cout}, T(0), false);
      cb.rvar = store_.add_const(id + ".bn.rvar", {cout}, T(1), false);
    }
    cur_h_ = (cur_h_ + 2 * pad - k) / stride + 1;
    cur_w_ = (cur_w_ + 2 * pad - k) / stride + 1;
    LayerSpec spec;
    spec.id = id;
    spec.kind = kind;
    spec.k = k;
    spec.cin = cin;
    spec.cout = cout;
    spec.groups = groups;
    spec.out_h = cur_h_;
    spec.out_w = cur_w_;
    plan_.push_back(spec);
    return cb;
  }

  LinearBn<T> make_linear(const std::string& id, int d_in, int d_out, int tokens, bool bn) {
    LinearBn<T> lb;
    lb.id = id;
    lb.bn = bn;
    lb.w = store_.add_kaiming(id + ".w", {d_in, d_out}, d_in);
    if (bn) {
      lb.gamma = store_.add_const(id + ".bn.gamma", {d_out}, T(1), true);
      lb.beta = store_.add_const(id + ".bn.beta", {d_out}, T(0), true);
      lb.rmean = store_.add_const(id + ".bn.rmean", {d_out}, T(0), false);
      lb.rvar = store_.add_const(id + ".bn.rvar", {d_out}, T(1), false);
    }
    LayerSpec spec;
    spec.id = id;
    spec.kind = LayerKind::SpikeFc;
    spec.tokens = tokens;
    spec.d_in = d_in;
    spec.d_out = d_out;
    plan_.push_back(spec);
    return lb;
  }

  ConvBlockLayers<T> make_conv_block(const std::string& id, int c) {
    ConvBlockLayers<T> b;
    b.sn1 = make_sn(id + ".sep.sn1");
    b.pw1 = make_conv(id + ".sep.pw1", LayerKind::SpikeConv, c, 2 * c, 1, 1, 0, 1, true, false);
    b.sn2 = make_sn(id + ".sep.sn2");
    b.dw = make_conv(id + ".sep.dw", LayerKind::SpikeConv, 2 * c, 2 * c, 3, 1, 1, 2 * c, true, false);
    b.sn3 = make_sn(id + ".sep.sn3");
    b.pw2 = make_conv(id + ".sep.pw2", LayerKind::SpikeConv, 2 * c, c, 1, 1, 0, 1, true, false);
    b.sn4 = make_sn(id + ".grp.sn1");
    b.grp1 = make_conv(id + ".grp.conv1", LayerKind::SpikeConv, c, c, 3, 1, 1, 1, true, false);
    b.sn5 = make_sn(id + ".grp.sn2");
    b.grp2 = make_conv(id + ".grp.conv2", LayerKind::SpikeConv, c, c, 3, 1, 1, 1, true, false);
    return b;
  }

  TransformerBlockLayers<T> make_transformer_block(const std::string& id, int e, int tokens) {
    TransformerBlockLayers<T> b;
    b.ssa_id = id + ".ssa";
    b.heads = cfg_.num_heads;
    const int d = e / cfg_.num_heads;
    b.scale_s = cfg_.ssa_scale > 0 ? static_cast<T>(cfg_.ssa_scale)
                                   : T(1) / std::sqrt(static_cast<T>(d));
    b.grid_d = neuron_.d;
    b.sn_in = make_sn(id + ".sn_in");
    b.wq = make_linear(id + ".q", e, e, tokens, true);
    b.sn_q = make_sn(id + ".sn_q");
    b.wk = make_linear(id + ".k", e, e, tokens, true);
    b.sn_k = make_sn(id + ".sn_k");
    b.wv = make_linear(id + ".v", e, e, tokens, true);
    b.sn_v = make_sn(id + ".sn_v");
    LayerSpec ssa_spec;
    ssa_spec.id = b.ssa_id;
    ssa_spec.kind = LayerKind::Ssa;
    ssa_spec.heads = cfg_.num_heads;
    ssa_spec.n_tokens = tokens;
    ssa_spec.d_head = d;
    plan_.push_back(ssa_spec);
    b.sn_attn = make_sn(id + ".sn_attn");
    b.wo = make_linear(id + ".proj", e, e, tokens, true);
    b.sn_m1 = make_sn(id + ".mlp.sn1");
    b.fc1 = make_linear(id + ".mlp.fc1", e, cfg_.mlp_ratio * e, tokens, true);
    b.sn_m2 = make_sn(id + ".mlp.sn2");
    b.fc2 = make_linear(id + ".mlp.fc2", cfg_.mlp_ratio * e, e, tokens, true);
    return b;
  }

  HeadBranchLayers<T> make_head_branch(const std::string& id, int out_ch) {
    HeadBranchLayers<T> h;
    int c_in = cfg_.embed5();
    int c = cfg_.head_top_channels;
    for (int i = 0; i < 4; ++i) {
      h.sn[static_cast<std::size_t>(i)] = make_sn(strcat_msg(id, ".sn", i + 1));
      h.conv[static_cast<std::size_t>(i)] =
          make_conv(strcat_msg(id, ".conv", i + 1), LayerKind::SpikeConv, c_in, c, 3, 1, 1, 1,
                    true, false);
      c_in = c;
      c /= 2;  // output channels halve branch-deep
    }
    h.conv5 = make_conv(id + ".conv5", LayerKind::FloatConv, c_in, out_ch, 1, 1, 0, 1, false, true);
    return h;
  }

  void build() {
    const int composed = cfg_.search_size + cfg_.template_size;
    cur_h_ = cur_w_ = composed;
    stem_ = make_conv("stem", LayerKind::FloatConv, 3, cfg_.channels, 3, 2, 1, 1, true, false);
    int c_prev = cfg_.channels;
    for (int s = 0; s < 3; ++s) {
      ConvStage<T> stage;
      int c = cfg_.stage_channels(s);
      std::string sid = strcat_msg("stage", s + 1);
      stage.sn_down = make_sn(sid + ".down_sn");
      stage.down = make_conv(sid + ".down", LayerKind::SpikeConv, c_prev, c, 3, 2, 1, 1, true, false);
      for (int b = 0; b < cfg_.conv_blocks[static_cast<std::size_t>(s)]; ++b)
        stage.blocks.push_back(make_conv_block(strcat_msg(sid, ".block", b), c));
      conv_stages_.push_back(std::move(stage));
      c_prev = c;
    }
    const int tokens = cfg_.template_tokens() + cfg_.search_tokens();
    sn_tokenize_ = make_sn("tokenize.sn");
    tokenize_ = make_linear("tokenize", c_prev, cfg_.embed4(), tokens, true);
    for (int b = 0; b < cfg_.stage4_blocks; ++b)
      stage4_.push_back(make_transformer_block(strcat_msg("stage4.block", b), cfg_.embed4(), tokens));
    has_transition_ = cfg_.embed5() != cfg_.embed4();
    if (has_transition_) {
      sn_transition_ = make_sn("stage5.transition.sn");
      transition_ = make_linear("stage5.transition", cfg_.embed4(), cfg_.embed5(), tokens, true);
    }
    for (int b = 0; b < cfg_.stage5_blocks; ++b)
      stage5_.push_back(make_transformer_block(strcat_msg("stage5.block", b), cfg_.embed5(), tokens));

    cur_h_ = cur_w_ = cfg_.search_feat();
    head_score_ = make_head_branch("head.score", 1);
    cur_h_ = cur_w_ = cfg_.search_feat();
    head_offset_ = make_head_branch("head.offset", 2);
    cur_h_ = cur_w_ = cfg_.search_feat();
    head_size_ = make_head_branch("head.size", 2);
  }

  template <typename F>
  void visit_conv(F&& f) {
    f(stem_);
    for (auto& st : conv_stages_) {
      f(st.down);
      for (auto& b : st.blocks) {
        f(b.pw1);
        f(b.dw);
        f(b.pw2);
        f(b.grp1);
        f(b.grp2);
      }
    }
    for (auto* h : {&head_score_, &head_offset_, &head_size_}) {
      for (auto& cb : h->conv) f(cb);
      f(h->conv5);
    }
  }

  template <typename F>
  void visit_linear(F&& f) {
    f(tokenize_);
    if (has_transition_) f(transition_);
    for (auto* stage : {&stage4_, &stage5_})
      for (auto& b : *stage) {
        f(b.wq);
        f(b.wk);
        f(b.wv);
        f(b.wo);
        f(b.fc1);
        f(b.fc2);
      }
  }

  void fold_conv(ConvBn<T>& cb) {
    if (!cb.bn) return;
    const T eps = T(1e-5);
    const int cout = cb.w.dim(0);
    const std::int64_t per_out = cb.w.numel() / cout;
    if (!cb.bias.defined())
      cb.bias = ad::Tensor<T>::zeros({cout}, true);
    for (int c = 0; c < cout; ++c) {
      auto ci = static_cast<std::size_t>(c);
      T inv_std = T(1) / std::sqrt(cb.rvar.value()[ci] + eps);
      T g = cb.gamma.value()[ci] * inv_std;
      for (std::int64_t i = 0; i < per_out; ++i)
        cb.w.value()[static_cast<std::size_t>(c * per_out + i)] *= g;
      cb.bias.value()[ci] = g * (cb.bias.value()[ci] - cb.rmean.value()[ci]) + cb.beta.value()[ci];
    }
    cb.bn = false;
  }

  void fold_linear(LinearBn<T>& lb) {
    if (!lb.bn) return;
    const T eps = T(1e-5);
    const int d_in = lb.w.dim(0), d_out = lb.w.dim(1);
    if (!lb.bias.defined()) lb.bias = ad::Tensor<T>::zeros({d_out}, true);
    for (int j = 0; j < d_out; ++j) {
      auto ji = static_cast<std::size_t>(j);
      T inv_std = T(1) / std::sqrt(lb.rvar.value()[ji] + eps);
      T g = lb.gamma.value()[ji] * inv_std;
      for (int i = 0; i < d_in; ++i)
        lb.w.value()[static_cast<std::size_t>(i) * d_out + ji] *= g;
      lb.bias.value()[ji] = g * (lb.bias.value()[ji] - lb.rmean.value()[ji]) + lb.beta.value()[ji];
    }
    lb.bn = false;
  }

  ModelConfig cfg_;
  WeightStore<T> store_;
  NeuronConfig<T> neuron_;
  LayerPlan plan_;
  int cur_h_ = 0, cur_w_ = 0;
  bool folded_ = false;
  bool has_transition_ = false;

  ConvBn<T> stem_;
  std::vector<ConvStage<T>> conv_stages_;
  SpikeLayer<T> sn_tokenize_;
  LinearBn<T> tokenize_;
  std::vector<TransformerBlockLayers<T>> stage4_;
  SpikeLayer<T> sn_transition_;
  LinearBn<T> transition_;
  std::vector<TransformerBlockLayers<T>> stage5_;
  HeadBranchLayers<T> head_score_, head_offset_, head_size_;
};

// Plan-only helpers (no weight allocation).
inline LayerPlan build_layer_plan(const ModelConfig& cfg) {
  return SDTrackNet<float>(cfg, 0, /*shapes_only=*/true).plan();
}

inline std::vector<LayerFlops> count_flops(const ModelConfig& cfg) {
  return count_flops(build_layer_plan(cfg));
}

inline std::int64_t parameter_count(const ModelConfig& cfg, bool trainable_only = true) {
  return SDTrackNet<float>(cfg, 0, /*shapes_only=*/true).store().parameter_count(trainable_only);
}

}  // namespace sdtrack
