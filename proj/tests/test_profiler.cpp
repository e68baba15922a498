#include "sdtrack/profiler.hpp"

#include <gtest/gtest.h>

#include <random>

#include "sdtrack/model.hpp"

using namespace sdtrack;

namespace {

LayerSpec conv_spec(const std::string& id, LayerKind kind, int cin, int cout, int k, int groups,
                    int out_hw) {
  LayerSpec s;
  s.id = id;
  s.kind = kind;
  s.cin = cin;
  s.cout = cout;
  s.k = k;
  s.groups = groups;
  s.out_h = s.out_w = out_hw;
  return s;
}

FiringStats stats_for(const std::string& id, LayerKind kind, double fr, int slices = 1) {
  FiringStats st;
  st.id = id;
  st.kind = kind;
  st.total = 1000000;
  st.nonzero = static_cast<std::int64_t>(fr * 1000000);
  st.slices = slices;
  st.steps = 1;
  return st;
}

}  // namespace

TEST(CountFlops, FormulaEvaluation) {
  LayerPlan plan;
  plan.push_back(conv_spec("pw", LayerKind::SpikeConv, 3, 8, 1, 1, 4));
  plan.push_back(conv_spec("dw", LayerKind::SpikeConv, 8, 8, 3, 8, 4));
  LayerSpec fc;
  fc.id = "fc";
  fc.kind = LayerKind::SpikeFc;
  fc.tokens = 3;
  fc.d_in = 2;
  fc.d_out = 2;
  plan.push_back(fc);
  auto flops = count_flops(plan);
  EXPECT_DOUBLE_EQ(flops[0].flops, 384.0);   // 3*8*16
  EXPECT_DOUBLE_EQ(flops[1].flops, 1152.0);  // 9*8*16
  EXPECT_DOUBLE_EQ(flops[2].flops, 12.0);    // 3*2*2
}

TEST(CountFlops, SsaTwoMatmuls) {
  LayerSpec s;
  s.id = "ssa";
  s.kind = LayerKind::Ssa;
  s.heads = 2;
  s.n_tokens = 10;
  s.d_head = 4;
  auto flops = count_flops({s});
  EXPECT_DOUBLE_EQ(flops[0].flops, 2.0 * 2 * 10 * 16);
}

TEST(Recorder, FiringRateCountingIsExact) {
  SpikeRecorder<double> rec;
  rec.begin_step();
  SpikeTensor<double> zeros;
  zeros.shape = {100};
  zeros.values.assign(100, 0.0);
  zeros.coding = SpikeCoding::Binary;
  rec.record("a", LayerKind::SpikeConv, zeros, false);
  EXPECT_DOUBLE_EQ(rec.stats().at("a").fr(), 0.0);

  SpikeTensor<double> ones = zeros;
  ones.values.assign(100, 1.0);
  rec.record("b", LayerKind::SpikeConv, ones, false);
  EXPECT_DOUBLE_EQ(rec.stats().at("b").fr(), 1.0);

  SpikeTensor<double> fifth = zeros;
  for (int i = 0; i < 100; ++i) fifth.values[static_cast<std::size_t>(i)] = i % 5 == 0 ? 1.0 : 0.0;
  rec.record("c", LayerKind::SpikeConv, fifth, false);
  EXPECT_DOUBLE_EQ(rec.stats().at("c").fr(), 0.2);
}

TEST(Recorder, IntegerScaledExpandsToSlices) {
  SpikeRecorder<double> rec;
  rec.begin_step();
  SpikeTensor<double> s;
  s.shape = {4};
  s.values = {0.5, 1.0, 0.0, 0.25};  // k = 2,4,0,1 with D=4
  s.coding = SpikeCoding::IntegerScaled;
  s.d = 4;
  for (bool expand : {false, true}) {
    rec.record(expand ? "exp" : "int", LayerKind::SpikeConv, s, expand);
    const auto& st = rec.stats().at(expand ? "exp" : "int");
    EXPECT_EQ(st.total, 16);
    EXPECT_EQ(st.nonzero, 7);
    EXPECT_EQ(st.slices, 4);
  }
}

TEST(Recorder, AuditFlagsOffGridValues) {
  SpikeRecorder<double> rec;
  rec.audit = true;
  rec.begin_step();
  SpikeTensor<double> bad;
  bad.shape = {2};
  bad.values = {0.0, 0.37};
  bad.coding = SpikeCoding::Binary;
  rec.record("layer", LayerKind::SpikeConv, bad, false);
  EXPECT_EQ(rec.violations(), 1);
  EXPECT_NE(rec.first_violation().find("layer"), std::string::npos);
}

TEST(Energy, TwoLayerHandExample) {
  std::vector<LayerFlops> flops{{"f", LayerKind::FloatConv, 500.0},
                                {"s", LayerKind::SpikeConv, 1000.0}};
  auto report = energy(flops, {stats_for("s", LayerKind::SpikeConv, 0.2)}, 1);
  EXPECT_DOUBLE_EQ(report.total_pj, 4.6 * 500 + 0.9 * 1000 * 0.2);  // 2480
  EXPECT_DOUBLE_EQ(report.total_pj, 2480.0);
  EXPECT_DOUBLE_EQ(report.mac_term_pj, 2300.0);
  EXPECT_DOUBLE_EQ(report.ac_term_pj, 180.0);

  auto doubled = energy(flops, {stats_for("s", LayerKind::SpikeConv, 0.2)}, 2);
  EXPECT_DOUBLE_EQ(doubled.total_pj, 2 * report.total_pj);

  auto silent = energy(flops, {stats_for("s", LayerKind::SpikeConv, 0.0)}, 1);
  EXPECT_DOUBLE_EQ(silent.total_pj, 2300.0);  // MAC term only
}

TEST(Energy, MissingFiringStatsRejected) {
  std::vector<LayerFlops> flops{{"s", LayerKind::SpikeConv, 1000.0}};
  EXPECT_THROW(energy(flops, {}, 1), std::runtime_error);
}

TEST(Energy, MonotoneInFiringRateAndLinearInT) {
  auto flops = count_flops(ModelConfig::tiny());
  auto make_stats = [&](double fr) {
    std::vector<FiringStats> stats;
    for (const auto& f : flops) {
      if (f.kind == LayerKind::FloatConv) continue;
      auto st = stats_for(f.id, f.kind, fr, 4);
      if (f.kind == LayerKind::Ssa) st.ssa_eff_ops = fr * f.flops * 4;
      stats.push_back(st);
    }
    return stats;
  };
  double prev = -1;
  for (double fr : {0.0, 0.1, 0.25, 0.5, 0.9, 1.0}) {
    auto r = energy(flops, make_stats(fr), 1);
    EXPECT_GT(r.total_pj, prev);
    prev = r.total_pj;
  }
  auto base = energy(flops, make_stats(0.3), 1);
  for (int t : {2, 4}) {
    auto r = energy(flops, make_stats(0.3), t);
    EXPECT_NEAR(r.total_pj, t * base.total_pj, 1e-9 * r.total_pj);
  }
}

TEST(Energy, ReportTotalsConsistent) {
  auto flops = count_flops(ModelConfig::toy());
  std::vector<FiringStats> stats;
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> ufr(0.05, 0.6);
  for (const auto& f : flops) {
    if (f.kind == LayerKind::FloatConv) continue;
    auto st = stats_for(f.id, f.kind, ufr(rng), 4);
    if (f.kind == LayerKind::Ssa) st.ssa_eff_ops = st.fr() * f.flops;
    stats.push_back(st);
  }
  auto r = energy(flops, stats, 3);
  double sum = 0;
  for (const auto& e : r.entries) sum += e.energy_pj;
  EXPECT_NEAR(sum, r.total_pj, 1e-9 * r.total_pj);
  EXPECT_NEAR(r.total_pj, 3 * (r.mac_term_pj + r.ac_term_pj), 1e-9 * r.total_pj);
}

TEST(Energy, MeasuredToyForwardProducesConsistentReport) {
  // End-to-end: instrumented forward -> firing stats -> energy report.
  SDTrackNet<float> net(ModelConfig::toy(), 13);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<float> ud(0.0f, 1.0f);
  auto rnd = [&](std::vector<int> shape) {
    std::vector<float> d(static_cast<std::size_t>(ad::numel_of(shape)));
    for (auto& v : d) v = ud(rng);
    return ad::Tensor<float>::from(shape, std::move(d));
  };
  SpikeRecorder<float> rec;
  ForwardOptions<float> opt;
  opt.rec = &rec;
  opt.expand_spikes = true;
  ad::NoGradGuard ng;
  net.forward(rnd({1, 1, 3, 32, 32}), rnd({1, 1, 3, 64, 64}), opt);
  auto report = energy(count_flops(net.plan()), rec.firing_stats(), net.config().timesteps);
  EXPECT_GT(report.total_pj, 0.0);
  EXPECT_GT(report.mac_term_pj, 0.0);  // stem + head finals
  for (const auto& e : report.entries) {
    EXPECT_GE(e.fr, 0.0);
    EXPECT_LE(e.fr, 1.0);
    EXPECT_GE(e.energy_pj, 0.0);
  }
  // The dense SSA variant can only be an upper bound on the effective one.
  for (const auto& e : report.entries)
    if (e.kind == LayerKind::Ssa) EXPECT_LE(e.energy_pj, e.dense_energy_pj + 1e-9);
  auto j = report.to_json();
  EXPECT_TRUE(j.contains("layers"));
  EXPECT_EQ(j["T"], 1);
}
