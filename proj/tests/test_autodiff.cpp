#include "sdtrack/tensor.hpp"

#include <gtest/gtest.h>

#include <random>

#include "grad_check.hpp"

using namespace sdtrack;
using namespace sdtrack::ad;
using sdtrack::testing::grad_check;

namespace {

Tensor<double> random_tensor(std::vector<int> shape, std::mt19937_64& rng, double lo = -1,
                             double hi = 1, bool requires_grad = true) {
  std::uniform_real_distribution<double> ud(lo, hi);
  std::vector<double> d(static_cast<std::size_t>(numel_of(shape)));
  for (auto& v : d) v = ud(rng);
  return Tensor<double>::from(std::move(shape), std::move(d), requires_grad);
}

constexpr double kTol = 1e-4;

}  // namespace

TEST(Backward, SumGivesOnes) {
  std::mt19937_64 rng(1);
  auto x = random_tensor({3, 4}, rng);
  auto loss = sum(x);
  backward(loss);
  for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 1.0);
}

TEST(Backward, SumOfSquaresGivesTwoX) {
  std::mt19937_64 rng(2);
  auto x = random_tensor({5}, rng);
  auto loss = sum(mul(x, x));
  backward(loss);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(x.grad()[i], 2 * x.value()[i], 1e-12);
}

TEST(Backward, NonScalarLossRejected) {
  std::mt19937_64 rng(3);
  auto x = random_tensor({2, 2}, rng);
  auto y = mul(x, x);
  EXPECT_THROW(backward(y), std::runtime_error);
}

TEST(Backward, AccumulationIsOrderIndependent) {
  // The same value used through two paths: grads add regardless of traversal
  // order, up to floating-point associativity.
  std::mt19937_64 rng(4);
  auto x = random_tensor({6}, rng);
  auto a = sum(mul(x, x));
  auto b = sum(scale(x, 3.0));
  auto loss = add(a, b);
  backward(loss);
  for (std::size_t i = 0; i < 6; ++i)
    EXPECT_NEAR(x.grad()[i], 2 * x.value()[i] + 3.0, 1e-6);
}

TEST(Ops, InputsNeverMutated) {
  std::mt19937_64 rng(5);
  auto x = random_tensor({2, 3}, rng);
  auto snapshot = x.value();
  auto y = add(scale(x, 2.0), x);
  auto z = sum(mul(y, y));
  backward(z);
  EXPECT_EQ(x.value(), snapshot);
}

TEST(Ops, MatmulIdentity) {
  std::mt19937_64 rng(6);
  auto x = random_tensor({3, 3}, rng);
  auto eye = Tensor<double>::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto y = matmul(x, eye);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(y.value()[i], x.value()[i], 1e-15);
}

TEST(Ops, Conv1x1IdentityKernel) {
  std::mt19937_64 rng(7);
  auto x = random_tensor({1, 1, 4, 4}, rng);
  auto k = Tensor<double>::from({1, 1, 1, 1}, {1.0});
  auto y = conv2d(x, k, 1, 0, 1);
  EXPECT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < 16; ++i) EXPECT_DOUBLE_EQ(y.value()[i], x.value()[i]);
}

TEST(Ops, DepthwiseOnesKernelCenterIsNine) {
  auto x = Tensor<double>::full({1, 1, 3, 3}, 1.0);
  auto k = Tensor<double>::full({1, 1, 3, 3}, 1.0);
  auto y = conv2d(x, k, 1, 1, 1);  // one channel: depthwise == plain
  EXPECT_DOUBLE_EQ(y.value()[4], 9.0);  // center
  EXPECT_DOUBLE_EQ(y.value()[0], 4.0);  // corner
}

TEST(Ops, BatchNormEvalIdentity) {
  std::mt19937_64 rng(8);
  auto x = random_tensor({2, 3, 4, 4}, rng);
  auto gamma = Tensor<double>::full({3}, 1.0);
  auto beta = Tensor<double>::zeros({3});
  auto rmean = Tensor<double>::zeros({3});
  auto rvar = Tensor<double>::full({3}, 1.0);
  auto y = batch_norm(x, gamma, beta, rmean, rvar, 1, /*training=*/false, 0.1, 0.0);
  for (std::size_t i = 0; i < x.value().size(); ++i)
    EXPECT_NEAR(y.value()[i], x.value()[i], 1e-12);
}

// ---------------------------------------------------------------------------
// Finite-difference checks, one per op.

TEST(GradCheck, ElementwiseArithmetic) {
  std::mt19937_64 rng(10);
  auto a = random_tensor({3, 4}, rng, 0.5, 2.0);
  auto b = random_tensor({3, 4}, rng, 0.5, 2.0);
  auto build = [](std::vector<Tensor<double>>& in) {
    auto s = add(in[0], in[1]);
    auto d = sub(in[0], in[1]);
    auto m = mul(in[0], in[1]);
    auto q = div(in[0], in[1]);
    return sum(add(add(s, d), add(m, q)));
  };
  auto r = grad_check(build, {a, b});
  EXPECT_LT(r.max_rel_err, kTol) << r.worst;
}

TEST(GradCheck, MinMaxScaleNegExpLogSigmoidClamp) {
  std::mt19937_64 rng(11);
  auto a = random_tensor({10}, rng, 0.2, 0.9);
  auto b = random_tensor({10}, rng, 1.1, 2.0);  // separated from a: no min/max kinks
  auto build = [](std::vector<Tensor<double>>& in) {
    auto mn = minimum(in[0], in[1]);
    auto mx = maximum(in[0], in[1]);
    auto e = ad::exp(scale(in[0], 0.5));
    auto l = ad::log(in[1]);
    auto sg = sigmoid(sub(in[0], in[1]));
    auto cl = clamp(in[0], 0.25, 0.85);  // some elements pass, some blocked
    auto t = add(add(mn, mx), add(e, l));
    return sum(add(t, add(sg, add_scalar(neg(cl), 2.0))));
  };
  auto r = grad_check(build, {a, b});
  EXPECT_LT(r.max_rel_err, kTol) << r.worst;
}

TEST(GradCheck, Reductions) {
  std::mt19937_64 rng(12);
  auto a = random_tensor({2, 3, 4}, rng);
  auto build = [](std::vector<Tensor<double>>& in) {
    auto m = mean(in[0]);
    auto mx = max_all(in[0]);
    auto sa = sum_axis(in[0], 1);
    return add(add(m, mx), sum(mul(sa, sa)));
  };
  auto r = grad_check(build, {a});
  EXPECT_LT(r.max_rel_err, kTol) << r.worst;
}

TEST(GradCheck, ShapeOps) {
  std::mt19937_64 rng(13);
  auto a = random_tensor({2, 3, 4}, rng);
  auto b = random_tensor({2, 3, 4}, rng);
  auto build = [](std::vector<Tensor<double>>& in) {
    auto t = transpose(in[0], {2, 0, 1});
    auto rs = reshape(t, {4, 6});
    auto sl = slice(in[1], {0, 1, 0}, {2, 2, 3});
    auto pl = place(sl, {2, 3, 4}, {0, 0, 1});
    return add(sum(mul(rs, rs)), sum(mul(pl, in[0])));
  };
  auto r = grad_check(build, {a, b});
  EXPECT_LT(r.max_rel_err, kTol) << r.worst;
}

TEST(GradCheck, Concat) {
  std::mt19937_64 rng(14);
  auto a = random_tensor({2, 3}, rng);
  auto b = random_tensor({2, 2}, rng);
  auto build = [](std::vector<Tensor<double>>& in) {
    auto c = concat(in[0], in[1], 1);
    return sum(mul(c, c));
  };
  auto r = grad_check(build, {a, b});
  EXPECT_LT(r.max_rel_err, kTol) << r.worst;
}

TEST(GradCheck, MatmulPlainAndBatched) {
  std::mt19937_64 rng(15);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({4, 2}, rng);
  auto build = [](std::vector<Tensor<double>>& in) {
    return sum(mul(matmul(in[0], in[1]), matmul(in[0], in[1])));
  };
  auto r = grad_check(build, {a, b});
  EXPECT_LT(r.max_rel_err, kTol) << r.worst;

  auto ab = random_tensor({2, 2, 3, 4}, rng);
  auto bb = random_tensor({2, 2, 4, 2}, rng);
  auto build_b = [](std::vector<Tensor<double>>& in) {
    return sum(matmul(in[0], in[1]));
  };
  auto rb = grad_check(build_b, {ab, bb});
  EXPECT_LT(rb.max_rel_err, kTol) << rb.worst;
}

TEST(GradCheck, Conv2dRandomInput) {
  std::mt19937_64 rng(16);
  auto x = random_tensor({2, 3, 5, 5}, rng);
  auto w = random_tensor({4, 3, 3, 3}, rng);
  auto bias = random_tensor({4}, rng);
  auto build = [](std::vector<Tensor<double>>& in) {
    return sum(mul(conv2d(in[0], in[1], in[2], 1, 1, 1), Tensor<double>::full({2, 4, 5, 5}, 0.5)));
  };
  auto r = grad_check(build, {x, w, bias});
  EXPECT_LT(r.max_rel_err, kTol) << r.worst;
}

TEST(GradCheck, Conv2dStridedGrouped) {
  std::mt19937_64 rng(17);
  auto x = random_tensor({2, 4, 6, 6}, rng);
  auto w = random_tensor({4, 1, 3, 3}, rng);  // depthwise: groups == channels
  auto build = [](std::vector<Tensor<double>>& in) {
    return sum(mul(conv2d(in[0], in[1], 2, 1, 4), Tensor<double>::full({2, 4, 3, 3}, 0.7)));
  };
  auto r = grad_check(build, {x, w});
  EXPECT_LT(r.max_rel_err, kTol) << r.worst;
}

TEST(GradCheck, BatchNormTrainAndEval) {
  std::mt19937_64 rng(18);
  auto x = random_tensor({3, 2, 2, 2}, rng);
  auto gamma = random_tensor({2}, rng, 0.5, 1.5);
  auto beta = random_tensor({2}, rng);
  for (bool training : {true, false}) {
    auto build = [training](std::vector<Tensor<double>>& in) {
      auto rmean = Tensor<double>::from({2}, {0.1, -0.2});
      auto rvar = Tensor<double>::from({2}, {1.2, 0.8});
      auto y = batch_norm(in[0], in[1], in[2], rmean, rvar, 1, training);
      return sum(mul(y, y));
    };
    auto r = grad_check(build, {x, gamma, beta});
    EXPECT_LT(r.max_rel_err, kTol) << (training ? "train: " : "eval: ") << r.worst;
  }
}

TEST(GradCheck, BatchNormTokenAxis) {
  std::mt19937_64 rng(19);
  auto x = random_tensor({2, 5, 3}, rng);  // (batch, tokens, channels)
  auto gamma = random_tensor({3}, rng, 0.5, 1.5);
  auto beta = random_tensor({3}, rng);
  auto build = [](std::vector<Tensor<double>>& in) {
    auto rmean = Tensor<double>::zeros({3});
    auto rvar = Tensor<double>::full({3}, 1.0);
    auto y = batch_norm(in[0], in[1], in[2], rmean, rvar, 2, true);
    return sum(mul(y, y));
  };
  auto r = grad_check(build, {x, gamma, beta});
  EXPECT_LT(r.max_rel_err, kTol) << r.worst;
}

TEST(GradCheck, GatherFlat) {
  std::mt19937_64 rng(20);
  auto x = random_tensor({3, 3}, rng);
  auto build = [](std::vector<Tensor<double>>& in) {
    auto g = gather_flat(in[0], 4);
    return mul(g, g);
  };
  auto r = grad_check(build, {x});
  EXPECT_LT(r.max_rel_err, kTol) << r.worst;
}

TEST(GradCheck, SpikeStandinMatchesSurrogate) {
  // The stand-in forward is differentiable with derivative equal to the
  // surrogate, so FD against it validates the surrogate-backed path.
  std::mt19937_64 rng(21);
  NeuronConfig<double> lif;
  lif.kind = NeuronKind::LIF;
  lif.tau = 2.0;
  lif.u_thr = 0.0;
  lif.surrogate_width = 0.5;
  auto x = random_tensor({12}, rng, -0.4, 0.4);  // inside the window, away from edges
  auto build = [lif](std::vector<Tensor<double>>& in) {
    return sum(mul(spike_surrogate_standin(in[0], lif), in[0]));
  };
  auto r = grad_check(build, {x});
  EXPECT_LT(r.max_rel_err, kTol) << r.worst;

  NeuronConfig<double> ilif;
  ilif.kind = NeuronKind::ILIF;
  ilif.tau = 1.0;
  ilif.u_thr = 0.0;
  ilif.u_rest = 0.0;
  ilif.d = 4;
  auto xi = random_tensor({12}, rng, 0.3, 3.7);
  auto build_i = [ilif](std::vector<Tensor<double>>& in) {
    return sum(mul(spike_surrogate_standin(in[0], ilif), in[0]));
  };
  auto ri = grad_check(build_i, {xi});
  EXPECT_LT(ri.max_rel_err, kTol) << ri.worst;
}

TEST(GradCheck, CompositeConvBnSpikeMatmulChain) {
  std::mt19937_64 rng(22);
  NeuronConfig<double> ilif;
  ilif.kind = NeuronKind::ILIF;
  ilif.tau = 1.0;
  ilif.u_thr = 0.0;
  ilif.u_rest = 0.0;
  ilif.d = 4;
  auto x = random_tensor({1, 2, 4, 4}, rng, 0.2, 1.4);
  auto w = random_tensor({2, 2, 3, 3}, rng, 0.3, 0.8);
  auto gamma = random_tensor({2}, rng, 0.8, 1.2);
  auto beta = random_tensor({2}, rng, 0.5, 1.0);
  auto proj = random_tensor({16, 3}, rng);
  auto build = [ilif](std::vector<Tensor<double>>& in) {
    auto rmean = Tensor<double>::zeros({2});
    auto rvar = Tensor<double>::full({2}, 1.0);
    auto y = conv2d(in[0], in[1], 1, 1, 1);
    y = batch_norm(y, in[2], in[3], rmean, rvar, 1, true);
    y = spike_surrogate_standin(add_scalar(y, 1.8), ilif);
    auto flat = reshape(y, {2, 16});
    return sum(matmul(flat, in[4]));
  };
  auto r = grad_check(build, {x, w, gamma, beta, proj});
  EXPECT_LT(r.max_rel_err, kTol) << r.worst;
}

TEST(SpikeActivation, ForwardIsExactStepOrGrid) {
  NeuronConfig<double> lif;
  lif.kind = NeuronKind::LIF;
  lif.tau = 2.0;
  auto u = Tensor<double>::from({4}, {-0.3, 0.0, 0.2, 5.0});
  auto s = spike_activation(u, lif);
  EXPECT_EQ(s.value(), (std::vector<double>{0, 1, 1, 1}));

  NeuronConfig<double> ilif;
  ilif.kind = NeuronKind::ILIF;
  ilif.tau = 1.0;
  ilif.u_thr = 0.0;
  ilif.u_rest = 0.0;
  ilif.d = 4;
  auto ui = Tensor<double>::from({3}, {2.3, 7.0, -1.0});
  auto si = spike_activation(ui, ilif);
  EXPECT_EQ(si.value(), (std::vector<double>{0.5, 1.0, 0.0}));
}

TEST(NoGrad, DisablesGraphRecording) {
  std::mt19937_64 rng(23);
  auto x = random_tensor({4}, rng);
  ad::NoGradGuard guard;
  auto y = sum(mul(x, x));
  EXPECT_FALSE(y.requires_grad());
}
