#pragma once

// Layer-level FLOP counting, firing-rate instrumentation, and the theoretical
// energy estimate
//
//   E = T * (E_MAC * sum_i FL_float_i
//            + E_AC * (sum_j FL_spike_j * fr_j + sum_k FL_ssa_k))
//
// with E_MAC = 4.6 pJ and E_AC = 0.9 pJ (32-bit, 45nm). FLOPs are counted in
// MAC-equivalent units (one multiply-add = 1). The SSA term is computed from
// the accumulations actually triggered by nonzero spike operands; the literal
// dense-FLOP variant is reported alongside it.

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "sdtrack/core.hpp"
#include "sdtrack/neurons.hpp"

namespace sdtrack {

enum class LayerKind { FloatConv, SpikeConv, SpikeFc, Ssa };

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::FloatConv: return "float_conv";
    case LayerKind::SpikeConv: return "spike_conv";
    case LayerKind::SpikeFc: return "spike_fc";
    case LayerKind::Ssa: return "ssa";
  }
  return "?";
}

// Geometry of one countable layer (conv, fc, or attention).
struct LayerSpec {
  std::string id;
  LayerKind kind = LayerKind::SpikeConv;
  // conv
  int k = 0, cin = 0, cout = 0, groups = 1, out_h = 0, out_w = 0;
  // fc
  int tokens = 0, d_in = 0, d_out = 0;
  // ssa
  int heads = 0, n_tokens = 0, d_head = 0;
};

using LayerPlan = std::vector<LayerSpec>;

struct LayerFlops {
  std::string id;
  LayerKind kind;
  double flops = 0;  // MAC-equivalent ops per sample per outer timestep
};

inline std::vector<LayerFlops> count_flops(const LayerPlan& plan) {
  std::vector<LayerFlops> out;
  out.reserve(plan.size());
  for (const LayerSpec& s : plan) {
    LayerFlops f{s.id, s.kind, 0};
    switch (s.kind) {
      case LayerKind::FloatConv:
      case LayerKind::SpikeConv:
        f.flops = double(s.k) * s.k * (double(s.cin) / s.groups) * s.cout * s.out_h * s.out_w;
        break;
      case LayerKind::SpikeFc:
        f.flops = double(s.tokens) * s.d_in * s.d_out;
        break;
      case LayerKind::Ssa:
        // Two matmuls in the Q(K^T V) association order.
        f.flops = 2.0 * s.heads * s.n_tokens * double(s.d_head) * s.d_head;
        break;
    }
    require(f.flops >= 0, "count_flops: negative count for ", s.id);
    out.push_back(f);
  }
  return out;
}

// Firing statistics of the spike operand feeding one layer, accumulated over
// any number of forwards. fr is the proportion of nonzero elements of the
// (binary-expanded) operand.
struct FiringStats {
  std::string id;
  LayerKind kind = LayerKind::SpikeConv;
  std::int64_t total = 0;    // expanded element count
  std::int64_t nonzero = 0;  // expanded nonzero count (== binary spike count)
  int slices = 1;            // binary time slices per outer step (D for I-LIF)
  std::int64_t steps = 0;    // outer steps observed
  double ssa_eff_ops = 0;    // accumulations triggered inside SSA (ssa only)

  double fr() const { return total > 0 ? static_cast<double>(nonzero) / total : 0.0; }
};

// Collects spike operands during a forward pass. With `audit` set, any value
// off the binary / 1-D grid counts as a violation. With `keep_values` set the
// raw operand tensors are retained for inspection.
template <typename T>
class SpikeRecorder {
 public:
  bool audit = false;
  bool keep_values = false;

  void begin_step() { ++steps_; }

  void record(const std::string& id, LayerKind kind, const SpikeTensor<T>& s, bool expanded) {
    FiringStats& st = stats_[id];
    st.id = id;
    st.kind = kind;
    st.steps = steps_;
    const bool integer = s.coding == SpikeCoding::IntegerScaled;
    st.slices = integer ? s.d : 1;
    if (expanded && integer) {
      SpikeTensor<T> train = spike_ahead_expand(s);
      maybe_audit(id, train);
      st.total += static_cast<std::int64_t>(train.values.size());
      for (T v : train.values)
        if (v != T(0)) ++st.nonzero;
      if (keep_values) kept_[id] = train;
    } else {
      maybe_audit(id, s);
      st.total += static_cast<std::int64_t>(s.values.size()) * (integer ? s.d : 1);
      st.nonzero += spike_count(s);
      if (keep_values) kept_[id] = s;
    }
  }

  // q, k, v shaped (..., N, d); effective op count per binary slice is
  // sum_rows nnz(K_n) * nnz(V_n)  +  nnz(Q) * d, summed over the D virtual
  // slices of integer-coded operands (an element fires in slice j iff its
  // integer count exceeds j).
  void record_ssa(const std::string& id, const SpikeTensor<T>& q, const SpikeTensor<T>& k,
                  const SpikeTensor<T>& v) {
    record(id, LayerKind::Ssa, q, false);
    record(id, LayerKind::Ssa, k, false);
    record(id, LayerKind::Ssa, v, false);
    FiringStats& st = stats_[id];
    const int rank = static_cast<int>(k.shape.size());
    require(rank >= 2 && k.shape == v.shape, "record_ssa: bad k/v shapes");
    const std::int64_t d = k.shape[static_cast<std::size_t>(rank - 1)];
    const std::int64_t rows = k.shape[static_cast<std::size_t>(rank - 2)];
    const std::int64_t batch = static_cast<std::int64_t>(k.values.size()) / (rows * d);
    const bool integer = k.coding == SpikeCoding::IntegerScaled;
    const int slices = integer ? k.d : 1;
    auto code = [&](T x) {
      return integer ? std::lround(static_cast<double>(x) * k.d) : (x != T(0) ? 1L : 0L);
    };
    double eff = 0;
    for (int sl = 0; sl < slices; ++sl) {
      for (std::int64_t b = 0; b < batch; ++b)
        for (std::int64_t n = 0; n < rows; ++n) {
          const T* kr = k.values.data() + (b * rows + n) * d;
          const T* vr = v.values.data() + (b * rows + n) * d;
          std::int64_t nk = 0, nv = 0;
          for (std::int64_t j = 0; j < d; ++j) {
            nk += code(kr[j]) > sl;
            nv += code(vr[j]) > sl;
          }
          eff += static_cast<double>(nk) * static_cast<double>(nv);
        }
      std::int64_t nq = 0;
      for (T x : q.values) nq += code(x) > sl;
      eff += static_cast<double>(nq) * static_cast<double>(d);
    }
    st.ssa_eff_ops += eff;
  }

  std::vector<FiringStats> firing_stats() const {
    std::vector<FiringStats> out;
    for (const auto& [id, st] : stats_) out.push_back(st);
    return out;
  }

  const std::map<std::string, FiringStats>& stats() const { return stats_; }
  const std::map<std::string, SpikeTensor<T>>& kept() const { return kept_; }
  int violations() const { return violations_; }
  const std::string& first_violation() const { return first_violation_; }

 private:
  void maybe_audit(const std::string& id, const SpikeTensor<T>& s) {
    if (!audit) return;
    if (!on_spike_grid(s)) {
      ++violations_;
      if (first_violation_.empty())
        first_violation_ = strcat_msg("spike-grid violation at layer ", id);
    }
  }

  std::map<std::string, FiringStats> stats_;
  std::map<std::string, SpikeTensor<T>> kept_;
  std::int64_t steps_ = 0;
  int violations_ = 0;
  std::string first_violation_;
};

// ---------------------------------------------------------------------------
// Energy report

inline constexpr double kEnergyMacPj = 4.6;  // 32-bit MAC, 45nm
inline constexpr double kEnergyAcPj = 0.9;   // 32-bit AC, 45nm

struct EnergyEntry {
  std::string id;
  LayerKind kind;
  double flops = 0;        // per sample per outer step (dense)
  double fr = 0;
  int slices = 1;
  double energy_pj = 0;       // includes the T factor
  double dense_energy_pj = 0; // literal dense-FLOP variant (differs for SSA)
};

struct EnergyReport {
  std::vector<EnergyEntry> entries;
  int t = 1;
  double e_mac = kEnergyMacPj;
  double e_ac = kEnergyAcPj;
  double mac_term_pj = 0;  // per outer step
  double ac_term_pj = 0;   // per outer step
  double total_pj = 0;     // t * (mac_term + ac_term)
  double dense_total_pj = 0;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["T"] = t;
    j["e_mac_pj"] = e_mac;
    j["e_ac_pj"] = e_ac;
    j["mac_term_pj_per_step"] = mac_term_pj;
    j["ac_term_pj_per_step"] = ac_term_pj;
    j["total_pj"] = total_pj;
    j["total_mj"] = total_pj * 1e-9;
    j["dense_total_pj"] = dense_total_pj;
    j["layers"] = nlohmann::json::array();
    for (const auto& e : entries) {
      j["layers"].push_back({{"id", e.id},
                             {"kind", to_string(e.kind)},
                             {"flops", e.flops},
                             {"fr", e.fr},
                             {"slices", e.slices},
                             {"energy_pj", e.energy_pj},
                             {"dense_energy_pj", e.dense_energy_pj}});
    }
    return j;
  }

  std::string to_csv() const {
    std::string out = "id,kind,flops,fr,slices,energy_pj,dense_energy_pj\n";
    for (const auto& e : entries)
      out += strcat_msg(e.id, ",", to_string(e.kind), ",", e.flops, ",", e.fr, ",", e.slices, ",",
                        e.energy_pj, ",", e.dense_energy_pj, "\n");
    out += strcat_msg("total,,,,,", total_pj, ",", dense_total_pj, "\n");
    return out;
  }
};

inline EnergyReport energy(const std::vector<LayerFlops>& flops,
                           const std::vector<FiringStats>& firing, int t,
                           double e_mac = kEnergyMacPj, double e_ac = kEnergyAcPj) {
  require(t >= 1, "energy: T must be >= 1");
  std::map<std::string, const FiringStats*> by_id;
  for (const auto& f : firing) by_id[f.id] = &f;

  EnergyReport r;
  r.t = t;
  r.e_mac = e_mac;
  r.e_ac = e_ac;
  for (const auto& lf : flops) {
    EnergyEntry e;
    e.id = lf.id;
    e.kind = lf.kind;
    e.flops = lf.flops;
    double per_step = 0, dense_per_step = 0;
    if (lf.kind == LayerKind::FloatConv) {
      per_step = dense_per_step = e_mac * lf.flops;
    } else {
      auto it = by_id.find(lf.id);
      require(it != by_id.end(), "energy: missing firing stats for spike layer ", lf.id);
      const FiringStats& st = *it->second;
      e.fr = st.fr();
      e.slices = st.slices;
      if (lf.kind == LayerKind::Ssa) {
        double steps = st.steps > 0 ? static_cast<double>(st.steps) : 1.0;
        per_step = e_ac * st.ssa_eff_ops / steps;
        dense_per_step = e_ac * lf.flops * st.slices;
      } else {
        per_step = e_ac * lf.flops * e.fr * st.slices;
        dense_per_step = per_step;
      }
    }
    e.energy_pj = t * per_step;
    e.dense_energy_pj = t * dense_per_step;
    (lf.kind == LayerKind::FloatConv ? r.mac_term_pj : r.ac_term_pj) += per_step;
    r.entries.push_back(e);
  }
  r.total_pj = t * (r.mac_term_pj + r.ac_term_pj);
  r.dense_total_pj = 0;
  for (const auto& e : r.entries) r.dense_total_pj += e.dense_energy_pj;
  return r;
}

}  // namespace sdtrack
