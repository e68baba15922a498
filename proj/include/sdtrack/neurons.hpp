#pragma once

// Unified spiking-neuron dynamics with IF, LIF, and I-LIF specializations:
//
//   U[t] = H[t-1] + (X[t] - (H[t-1] - U_rest)) / tau
//   S[t] = f(U[t] - U_thr)
//   H[t] = U[t] * (1 - S[t])
//
// f is the Heaviside step for IF/LIF and (1/D) * clip(round(.), 0, D) for
// I-LIF. I-LIF integer activations expand to binary spike trains over D
// virtual timesteps (spike-ahead), and surrogate derivatives back the
// training path.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "sdtrack/core.hpp"

namespace sdtrack {

enum class NeuronKind { IF, LIF, ILIF };
enum class ResetMode { HardScaled, SoftSubtract };
enum class SpikeCoding { Binary, IntegerScaled };

inline const char* to_string(NeuronKind k) {
  switch (k) {
    case NeuronKind::IF: return "if";
    case NeuronKind::LIF: return "lif";
    case NeuronKind::ILIF: return "ilif";
  }
  return "?";
}

inline NeuronKind neuron_kind_from_string(const std::string& s) {
  if (s == "if") return NeuronKind::IF;
  if (s == "lif") return NeuronKind::LIF;
  if (s == "ilif") return NeuronKind::ILIF;
  bail("unknown neuron kind: ", s, " (expected if|lif|ilif)");
}

template <typename T>
struct NeuronConfig {
  NeuronKind kind = NeuronKind::LIF;
  T tau = T(2);
  T u_thr = T(1);
  T u_rest = T(0);
  int d = 1;                     // I-LIF virtual timesteps
  T surrogate_width = T(0.5);    // half-width of the rectangular window
  ResetMode reset = ResetMode::HardScaled;

  void validate() const {
    require(tau >= T(1), "neuron: tau must be >= 1");
    require(d >= 1, "neuron: D must be >= 1");
    require(surrogate_width > T(0), "neuron: surrogate width must be > 0");
    if (kind == NeuronKind::IF) require(tau == T(1), "IF neuron requires tau == 1");
    if (kind == NeuronKind::ILIF)
      require(u_thr == T(0) && u_rest == T(0), "I-LIF requires U_thr == U_rest == 0");
  }

  SpikeCoding coding() const {
    return kind == NeuronKind::ILIF ? SpikeCoding::IntegerScaled : SpikeCoding::Binary;
  }
};

template <typename T>
struct SpikeTensor {
  std::vector<int> shape;
  std::vector<T> values;
  SpikeCoding coding = SpikeCoding::Binary;
  int d = 1;  // grid denominator for integer_scaled values
};

// Membrane potential carried between timesteps; zero at sequence start.
template <typename T>
struct NeuronState {
  std::vector<T> h;
};

namespace detail {

// f for I-LIF: (1/D) * clip(round(u), 0, D).
template <typename T>
T ilif_quantize(T u, int d) {
  T r = std::round(u);
  if (r < T(0)) r = T(0);
  if (r > T(d)) r = T(d);
  return r / T(d);
}

}  // namespace detail

// One step of the unified dynamics over a flat tensor. The state is created
// at zero when empty and updated in place.
template <typename T>
SpikeTensor<T> neuron_step(NeuronState<T>& state, const std::vector<T>& x,
                           const std::vector<int>& shape, const NeuronConfig<T>& cfg) {
  cfg.validate();
  if (state.h.empty()) state.h.assign(x.size(), T(0));
  require(state.h.size() == x.size(), "neuron_step: state/input shape mismatch");

  SpikeTensor<T> s;
  s.shape = shape;
  s.coding = cfg.coding();
  s.d = cfg.d;
  s.values.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    T u = state.h[i] + (x[i] - (state.h[i] - cfg.u_rest)) / cfg.tau;
    T spike;
    if (cfg.kind == NeuronKind::ILIF) {
      spike = detail::ilif_quantize(u - cfg.u_thr, cfg.d);
    } else {
      spike = (u - cfg.u_thr) >= T(0) ? T(1) : T(0);
    }
    s.values[i] = spike;
    if (cfg.reset == ResetMode::HardScaled) {
      state.h[i] = u * (T(1) - spike);
    } else {
      state.h[i] = u - spike * T(cfg.d);
    }
  }
  return s;
}

// Expands integer-scaled values k/D into binary trains of k leading ones over
// a new leading axis of length D. The mean over that axis reconstructs the
// original value bit-exactly.
template <typename T>
SpikeTensor<T> spike_ahead_expand(const SpikeTensor<T>& s) {
  require(s.coding == SpikeCoding::IntegerScaled, "spike_ahead_expand: input must be integer_scaled");
  const int d = s.d;
  SpikeTensor<T> out;
  out.coding = SpikeCoding::Binary;
  out.d = 1;
  out.shape.push_back(d);
  for (int dim : s.shape) out.shape.push_back(dim);
  const std::size_t n = s.values.size();
  out.values.assign(static_cast<std::size_t>(d) * n, T(0));
  for (std::size_t i = 0; i < n; ++i) {
    T v = s.values[i];
    long k = std::lround(static_cast<double>(v) * d);
    require(k >= 0 && k <= d && T(k) / T(d) == v,
            "spike_ahead_expand: value ", static_cast<double>(v), " not on the 1/", d, " grid");
    for (long j = 0; j < k; ++j) out.values[static_cast<std::size_t>(j) * n + i] = T(1);
  }
  return out;
}

// Number of binary spikes a spike tensor stands for (k per element for
// integer-scaled coding, the element itself for binary coding).
template <typename T>
std::int64_t spike_count(const SpikeTensor<T>& s) {
  std::int64_t total = 0;
  const int d = s.coding == SpikeCoding::IntegerScaled ? s.d : 1;
  for (T v : s.values) total += std::lround(static_cast<double>(v) * d);
  return total;
}

// Surrogate derivative of the spike nonlinearity, evaluated at u - u_thr.
// IF/LIF: rectangular window, 1/(2w) on |x| < w. I-LIF: straight-through
// over the clip range, 1 on 0 < x < D.
template <typename T>
T surrogate_grad_at(T u_minus_thr, const NeuronConfig<T>& cfg) {
  if (cfg.kind == NeuronKind::ILIF) {
    return (u_minus_thr > T(0) && u_minus_thr < T(cfg.d)) ? T(1) : T(0);
  }
  const T w = cfg.surrogate_width;
  return (std::abs(u_minus_thr) < w) ? T(1) / (T(2) * w) : T(0);
}

template <typename T>
std::vector<T> surrogate_grad(const std::vector<T>& u_minus_thr, const NeuronConfig<T>& cfg) {
  require(cfg.surrogate_width > T(0), "surrogate_grad: width must be > 0");
  std::vector<T> out(u_minus_thr.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = surrogate_grad_at(u_minus_thr[i], cfg);
  return out;
}

// True on the exact spike grid for the given coding ({0,1} or {0..D}/D).
template <typename T>
bool on_spike_grid(const SpikeTensor<T>& s) {
  if (s.coding == SpikeCoding::Binary) {
    for (T v : s.values)
      if (v != T(0) && v != T(1)) return false;
    return true;
  }
  for (T v : s.values) {
    long k = std::lround(static_cast<double>(v) * s.d);
    if (k < 0 || k > s.d || T(k) / T(s.d) != v) return false;
  }
  return true;
}

}  // namespace sdtrack
