#include "sdtrack/neurons.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace sdtrack;

namespace {

NeuronConfig<double> lif_config() {
  NeuronConfig<double> c;
  c.kind = NeuronKind::LIF;
  c.tau = 2.0;
  c.u_thr = 0.5;
  c.u_rest = 0.0;
  return c;
}

NeuronConfig<double> ilif_config(int d = 4) {
  NeuronConfig<double> c;
  c.kind = NeuronKind::ILIF;
  c.tau = 1.0;
  c.u_thr = 0.0;
  c.u_rest = 0.0;
  c.d = d;
  return c;
}

}  // namespace

TEST(NeuronStep, LifFiresAndHardResets) {
  auto cfg = lif_config();
  NeuronState<double> st;
  // H=0, X=1.2: U = 0 + (1.2 - 0)/2 = 0.6 >= 0.5 -> spike, H'=0.
  auto s = neuron_step(st, {1.2}, {1}, cfg);
  EXPECT_DOUBLE_EQ(s.values[0], 1.0);
  EXPECT_DOUBLE_EQ(st.h[0], 0.0);
  // Next X=0.8 from H=0: U = 0.4 < 0.5 -> no spike, H'=0.4.
  s = neuron_step(st, {0.8}, {1}, cfg);
  EXPECT_DOUBLE_EQ(s.values[0], 0.0);
  EXPECT_DOUBLE_EQ(st.h[0], 0.4);
}

TEST(NeuronStep, LifLeakAccumulatesSubThreshold) {
  auto cfg = lif_config();
  NeuronState<double> st;
  neuron_step(st, {0.8}, {1}, cfg);  // H = 0.4
  // U = 0.4 + (0.3 - 0.4)/2 = 0.35 < thr.
  auto s = neuron_step(st, {0.3}, {1}, cfg);
  EXPECT_DOUBLE_EQ(s.values[0], 0.0);
  EXPECT_DOUBLE_EQ(st.h[0], 0.35);
}

TEST(NeuronStep, IlifQuantization) {
  auto cfg = ilif_config(4);
  NeuronState<double> st;
  auto s = neuron_step(st, {2.3, 7.0, -1.0, 0.4}, {4}, cfg);
  EXPECT_DOUBLE_EQ(s.values[0], 0.5);   // round(2.3)=2, 2/4
  EXPECT_DOUBLE_EQ(s.values[1], 1.0);   // clipped at D
  EXPECT_DOUBLE_EQ(s.values[2], 0.0);   // clipped at 0
  EXPECT_DOUBLE_EQ(s.values[3], 0.0);   // round(0.4)=0
  EXPECT_EQ(s.coding, SpikeCoding::IntegerScaled);
}

TEST(NeuronStep, IlifHardScaledResetFollowsEq3) {
  auto cfg = ilif_config(4);
  NeuronState<double> st;
  neuron_step(st, {2.3}, {1}, cfg);
  // H' = U * (1 - S) = 2.3 * (1 - 0.5).
  EXPECT_DOUBLE_EQ(st.h[0], 2.3 * 0.5);
}

TEST(NeuronStep, IlifSoftSubtractVariant) {
  auto cfg = ilif_config(4);
  cfg.reset = ResetMode::SoftSubtract;
  NeuronState<double> st;
  neuron_step(st, {2.3}, {1}, cfg);
  // H' = U - S*D = 2.3 - 2.
  EXPECT_NEAR(st.h[0], 0.3, 1e-12);
}

TEST(NeuronStep, IfAlgebraReducesToInputPlusRest) {
  // At tau == 1 the membrane carry-over cancels: U = X + u_rest.
  NeuronConfig<double> cfg;
  cfg.kind = NeuronKind::IF;
  cfg.tau = 1.0;
  cfg.u_thr = 10.0;  // keep it sub-threshold so H' = U is observable
  cfg.u_rest = 0.25;
  NeuronState<double> st;
  neuron_step(st, {1.0}, {1}, cfg);
  EXPECT_DOUBLE_EQ(st.h[0], 1.25);
  neuron_step(st, {2.0}, {1}, cfg);
  EXPECT_DOUBLE_EQ(st.h[0], 2.25);  // independent of the previous H
}

TEST(NeuronStep, BinaryOutputsAreExactlyZeroOrOne) {
  auto cfg = lif_config();
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> ud(-2, 2);
  NeuronState<double> st;
  for (int step = 0; step < 20; ++step) {
    std::vector<double> x(64);
    for (auto& v : x) v = ud(rng);
    auto s = neuron_step(st, x, {64}, cfg);
    EXPECT_TRUE(on_spike_grid(s));
    for (std::size_t i = 0; i < s.values.size(); ++i)
      if (s.values[i] == 1.0) EXPECT_DOUBLE_EQ(st.h[i], 0.0);  // hard reset
  }
}

TEST(NeuronStep, IlifTimesDIsIntegerInRange) {
  auto cfg = ilif_config(4);
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> ud(-3, 8);
  NeuronState<double> st;
  for (int step = 0; step < 10; ++step) {
    std::vector<double> x(32);
    for (auto& v : x) v = ud(rng);
    auto s = neuron_step(st, x, {32}, cfg);
    for (double v : s.values) {
      double scaled = v * cfg.d;
      EXPECT_DOUBLE_EQ(scaled, std::round(scaled));
      EXPECT_GE(scaled, 0.0);
      EXPECT_LE(scaled, cfg.d);
    }
  }
}

TEST(NeuronStep, Deterministic) {
  auto cfg = ilif_config(4);
  std::vector<double> x{0.3, 1.7, 2.2, -0.5};
  NeuronState<double> a, b;
  auto sa = neuron_step(a, x, {4}, cfg);
  auto sb = neuron_step(b, x, {4}, cfg);
  EXPECT_EQ(sa.values, sb.values);
  EXPECT_EQ(a.h, b.h);
}

TEST(NeuronStep, ShapeMismatchRejected) {
  auto cfg = lif_config();
  NeuronState<double> st;
  neuron_step(st, {0.1, 0.2}, {2}, cfg);
  EXPECT_THROW(neuron_step(st, {0.1, 0.2, 0.3}, {3}, cfg), std::runtime_error);
}

TEST(NeuronConfigValidation, Invariants) {
  NeuronConfig<double> c;
  c.kind = NeuronKind::IF;
  c.tau = 2.0;
  EXPECT_THROW(c.validate(), std::runtime_error);
  c = NeuronConfig<double>{};
  c.kind = NeuronKind::ILIF;
  c.u_thr = 0.5;
  EXPECT_THROW(c.validate(), std::runtime_error);
}

TEST(SpikeAhead, LeadingOnesPolicy) {
  SpikeTensor<double> s;
  s.shape = {1};
  s.values = {0.5};
  s.coding = SpikeCoding::IntegerScaled;
  s.d = 4;
  auto train = spike_ahead_expand(s);
  EXPECT_EQ(train.shape, (std::vector<int>{4, 1}));
  EXPECT_EQ(train.values, (std::vector<double>{1, 1, 0, 0}));
}

TEST(SpikeAhead, ZeroAndOne) {
  SpikeTensor<double> s;
  s.shape = {2};
  s.values = {0.0, 1.0};
  s.coding = SpikeCoding::IntegerScaled;
  s.d = 4;
  auto train = spike_ahead_expand(s);
  for (int j = 0; j < 4; ++j) {
    EXPECT_EQ(train.values[static_cast<std::size_t>(j) * 2 + 0], 0.0);
    EXPECT_EQ(train.values[static_cast<std::size_t>(j) * 2 + 1], 1.0);
  }
}

TEST(SpikeAhead, MeanReconstructsExactly) {
  std::mt19937_64 rng(9);
  for (int d : {2, 3, 4, 7}) {
    std::uniform_int_distribution<int> uk(0, d);
    SpikeTensor<double> s;
    s.shape = {128};
    s.coding = SpikeCoding::IntegerScaled;
    s.d = d;
    for (int i = 0; i < 128; ++i) s.values.push_back(static_cast<double>(uk(rng)) / d);
    auto train = spike_ahead_expand(s);
    EXPECT_TRUE(on_spike_grid(train));
    for (int i = 0; i < 128; ++i) {
      double acc = 0;
      for (int j = 0; j < d; ++j) acc += train.values[static_cast<std::size_t>(j) * 128 + i];
      EXPECT_EQ(acc / d, s.values[static_cast<std::size_t>(i)]);  // bit-exact
    }
    EXPECT_EQ(spike_count(train), spike_count(s));
  }
}

TEST(SpikeAhead, OffGridValueRejected) {
  SpikeTensor<double> s;
  s.shape = {1};
  s.values = {0.3};
  s.coding = SpikeCoding::IntegerScaled;
  s.d = 4;
  EXPECT_THROW(spike_ahead_expand(s), std::runtime_error);
}

TEST(Surrogate, RectangularWindowValues) {
  auto cfg = lif_config();
  cfg.surrogate_width = 0.5;
  auto g = surrogate_grad<double>({0.0, 2.0, 0.49, -0.49, 0.5}, cfg);
  EXPECT_DOUBLE_EQ(g[0], 1.0);
  EXPECT_DOUBLE_EQ(g[1], 0.0);
  EXPECT_DOUBLE_EQ(g[2], 1.0);
  EXPECT_DOUBLE_EQ(g[3], 1.0);
  EXPECT_DOUBLE_EQ(g[4], 0.0);  // strict window
}

TEST(Surrogate, IlifStraightThroughRange) {
  auto cfg = ilif_config(4);
  auto g = surrogate_grad<double>({-0.1, 0.0, 0.5, 3.9, 4.0, 5.0}, cfg);
  EXPECT_DOUBLE_EQ(g[0], 0.0);
  EXPECT_DOUBLE_EQ(g[1], 0.0);
  EXPECT_DOUBLE_EQ(g[2], 1.0);
  EXPECT_DOUBLE_EQ(g[3], 1.0);
  EXPECT_DOUBLE_EQ(g[4], 0.0);
  EXPECT_DOUBLE_EQ(g[5], 0.0);
}

TEST(Surrogate, UnitMassOverWindow) {
  // Quadrature of the rectangular surrogate over the window equals 1, i.e. it
  // is a proper derivative model for a unit step.
  auto cfg = lif_config();
  for (double w : {0.25, 0.5, 1.0}) {
    cfg.surrogate_width = w;
    int n = 200000;
    double lo = -2 * w, hi = 2 * w, dx = (hi - lo) / n, mass = 0;
    for (int i = 0; i < n; ++i) {
      double x = lo + (i + 0.5) * dx;
      mass += surrogate_grad_at(x, cfg) * dx;
    }
    EXPECT_NEAR(mass, 1.0, 1e-3);
  }
}
