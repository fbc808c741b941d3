#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "xdops/autodiff.hpp"
#include "xdops/error.hpp"
#include "xdops/oracles.hpp"
#include "xdops/xd_op.hpp"

using namespace xd;
using oracle::Kind;
using oracle::OracleSpec;

namespace {

Tensor random_real(const Shape& s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor t = Tensor::zeros(s);
  for (double& v : t.re()) v = u(rng);
  return t;
}

Shape with_channels(std::size_t c, const Shape& m) {
  Shape s{c};
  s.insert(s.end(), m.begin(), m.end());
  return s;
}

std::vector<double> values(const Tensor& t) { return {t.re().begin(), t.re().end()}; }

double rel_err(const Tensor& a, const Tensor& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    num += (a.re()[i] - b.re()[i]) * (a.re()[i] - b.re()[i]);
    den += b.re()[i] * b.re()[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

ConvSpec conv(std::size_t c, const Shape& m, std::size_t k, std::size_t s = 1, std::size_t d = 1) {
  ConvSpec cs;
  cs.c_out = cs.c_in = c;
  cs.m = m;
  cs.k = k;
  cs.stride = s;
  cs.dilation = d;
  return cs;
}

}  // namespace

// ---- parameter-free constructions ---------------------------------------------

TEST(XDSkipZero, SkipReturnsInputForAnyWeight) {
  XDOp op = init_skip(2, {8}, 3);
  Tensor x = random_real({2, 8}, 1);
  Tensor first;
  for (std::uint64_t s = 0; s < 5; ++s) {
    Tensor y = xd_forward(op, random_real(op.weight.shape(), 10 + s), x);
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y.re()[i], x.re()[i], 1e-12);
    if (s == 0) first = y;
    else EXPECT_EQ(values(y), values(first));
  }
}

TEST(XDSkipZero, ZeroReturnsZerosForAnyWeight) {
  XDOp op = init_zero(3, 2, {8}, 3);
  Tensor x = random_real({2, 8}, 2);
  for (std::uint64_t s = 0; s < 5; ++s) {
    Tensor y = xd_forward(op, random_real(op.weight.shape(), 20 + s), x);
    EXPECT_EQ(y.shape(), (Shape{3, 8}));
    for (double v : y.re()) EXPECT_EQ(v, 0.0);
  }
}

TEST(XDSkipZero, SkipPadsAndCropsNonPowerOfTwo) {
  XDOp op = init_skip(1, {5, 3});
  EXPECT_EQ(op.n, (Shape{8, 4}));
  Tensor x = random_real({1, 5, 3}, 3);
  Tensor y = xd_forward(op, op.weight, x);
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y.re()[i], x.re()[i], 1e-12);
}

TEST(XDSkipZero, DepthIsOneOneOne) {
  EXPECT_EQ(init_skip(2, {8}).params.depth(), (std::array<std::size_t, 3>{1, 1, 1}));
  EXPECT_EQ(init_zero(2, 2, {8}).params.depth(), (std::array<std::size_t, 3>{1, 1, 1}));
}

// ---- convolution --------------------------------------------------------------

TEST(XDConv, KernelOneUnitWeightIsIdentity) {
  XDOp op = init_from_conv(conv(1, {8}, 1));
  Tensor x = random_real({1, 8}, 4);
  Tensor y = xd_forward(op, Tensor::real({1, 1, 1}, {1.0}), x);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(y.re()[i], x.re()[i], 1e-12);
}

TEST(XDConv, ShiftFilter) {
  XDOp op = init_from_conv(conv(1, {4}, 3));
  Tensor y = xd_forward(op, Tensor::real({1, 1, 3}, {0, 1, 0}), Tensor::real({1, 4}, {1, 2, 3, 4}));
  const std::vector<double> want{4, 1, 2, 3};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y.re()[i], want[i], 1e-12);
}

TEST(XDConv, MatchesNaiveConvTwoChannels) {
  XDOp op = init_from_conv(conv(2, {16}, 3));
  Tensor w = random_real({2, 2, 3}, 5), x = random_real({2, 16}, 6);
  EXPECT_LT(rel_err(xd_forward(op, w, x), oracle::naive_conv(w, x, 1, 1)), 1e-10);
  EXPECT_EQ(op.params.depth(), (std::array<std::size_t, 3>{1, 1, 1}));
}

TEST(XDConv, DilatedMatchesNaiveAndHasDepthThree) {
  XDOp op = init_from_conv(conv(2, {16}, 3, 1, 4));
  Tensor w = random_real({2, 2, 3}, 7), x = random_real({2, 16}, 8);
  EXPECT_LT(rel_err(xd_forward(op, w, x), oracle::naive_conv(w, x, 1, 4)), 1e-10);
  EXPECT_EQ(op.params.depth(), (std::array<std::size_t, 3>{1, 3, 1}));
}

TEST(XDConv, StrideMaskAndSubsample) {
  Tensor w = random_real({1, 1, 3}, 9), x = random_real({1, 16}, 10);
  const Tensor ref = oracle::naive_conv(w, x, 3, 1);
  XDOp masked = init_from_conv(conv(1, {16}, 3, 3));
  EXPECT_LT(rel_err(xd_forward(masked, w, x), ref), 1e-10);

  ConvSpec cs = conv(1, {16}, 3, 3);
  cs.subsample = true;
  XDOp sub = init_from_conv(cs);
  EXPECT_EQ(sub.output_shape(), (Shape{6}));
  Tensor y = xd_forward(sub, w, x);
  for (std::size_t t = 0; t < 6; ++t) EXPECT_NEAR(y.re()[t], ref.re()[3 * t], 1e-10);
}

TEST(XDConv, ChannelGroups) {
  ConvSpec cs = conv(3, {8}, 3);
  cs.groups = Tensor::real({3, 3}, {1, 1, 0, 1, 1, 0, 0, 0, 1});
  XDOp op = init_from_conv(cs);
  Tensor w = random_real({3, 3, 3}, 11), x = random_real({3, 8}, 12);
  EXPECT_LT(rel_err(xd_forward(op, w, x), oracle::naive_conv(w, x, 1, 1, cs.groups)), 1e-10);

  cs.groups = Tensor::real({3, 3}, {1, 0.5, 0, 1, 1, 0, 0, 0, 1});
  EXPECT_THROW(init_from_conv(cs), std::invalid_argument);
}

TEST(XDConv, TwoDimensional) {
  XDOp op = init_from_conv(conv(2, {8, 8}, 3, 1, 2));
  Tensor w = random_real({2, 2, 3, 3}, 13), x = random_real({2, 8, 8}, 14);
  EXPECT_LT(rel_err(xd_forward(op, w, x), oracle::naive_conv(w, x, 1, 2)), 1e-10);
}

TEST(XDConv, NonPowerOfTwoInputIsCircularOnPaddedDomain) {
  XDOp op = init_from_conv(conv(1, {6}, 3));
  Tensor w = random_real({1, 1, 3}, 15), x = random_real({1, 6}, 16);
  Tensor xp = Tensor::zeros({1, 8});
  for (std::size_t i = 0; i < 6; ++i) xp.re()[i] = x.re()[i];
  Tensor full = oracle::naive_conv(w, xp, 1, 1);
  Tensor y = xd_forward(op, w, x);
  ASSERT_EQ(y.shape(), (Shape{1, 6}));
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(y.re()[i], full.re()[i], 1e-12);
}

TEST(XDConv, RejectsOutOfRange) {
  EXPECT_THROW(init_from_conv(conv(1, {16}, 3, 1, 8)), std::invalid_argument);
  EXPECT_THROW(init_from_conv(conv(1, {16}, 3, 16)), std::invalid_argument);
  EXPECT_THROW(init_from_conv(conv(1, {4}, 5)), std::invalid_argument);
  EXPECT_THROW(init_from_conv(conv(1, {8}, 3, 0)), std::invalid_argument);
}

TEST(XDConv, DilationPermutationPlacesTaps) {
  const auto p = dilation_permutation(8, 3, 3);
  EXPECT_EQ(p[0], 0u);
  EXPECT_EQ(p[3], 1u);
  EXPECT_EQ(p[6], 2u);
  std::vector<bool> seen(8, false);
  for (auto v : p) seen.at(v) = true;
  for (bool s : seen) EXPECT_TRUE(s);
  EXPECT_THROW(dilation_permutation(8, 3, 4), std::invalid_argument);
}

// ---- pooling, FNO, transposed -------------------------------------------------

TEST(XDAvgPool, KernelOneIsIdentity) {
  PoolSpec ps;
  ps.channels = 2;
  ps.m = {8};
  ps.kernel = 1;
  XDOp op = init_avgpool(ps);
  Tensor x = random_real({2, 8}, 17);
  EXPECT_LT(rel_err(xd_forward(op, op.weight, x), x), 1e-12);
}

TEST(XDAvgPool, ConstantInputWithStride) {
  PoolSpec ps;
  ps.m = {8};
  ps.kernel = 4;
  ps.stride = 4;
  XDOp op = init_avgpool(ps);
  Tensor x = Tensor::zeros({1, 8});
  x.fill(1.75);
  Tensor y = xd_forward(op, op.weight, x);
  for (std::size_t t = 0; t < 8; ++t) EXPECT_NEAR(y.re()[t], t % 4 == 0 ? 1.75 : 0.0, 1e-12);
}

TEST(XDAvgPool, DilatedMatchesNaiveAndIgnoresWeight) {
  PoolSpec ps;
  ps.channels = 2;
  ps.m = {16};
  ps.kernel = 3;
  ps.dilation = 2;
  XDOp op = init_avgpool(ps);
  EXPECT_EQ(op.params.depth(), (std::array<std::size_t, 3>{1, 1, 1}));
  Tensor x = random_real({2, 16}, 18);
  Tensor a = xd_forward(op, random_real(op.weight.shape(), 1), x);
  Tensor b = xd_forward(op, random_real(op.weight.shape(), 2), x);
  EXPECT_EQ(values(a), values(b));
  EXPECT_LT(rel_err(a, oracle::naive_avgpool(x, 3, 1, 2)), 1e-10);
}

TEST(XDFno, MatchesTruncatedMultiplier) {
  XDOp op = init_fno(2, 2, {16}, 4);
  EXPECT_EQ(op.params.depth(), (std::array<std::size_t, 3>{1, 4, 1}));
  EXPECT_EQ(op.weight.shape(), (Shape{2, 2, 8}));
  Tensor w = random_real({2, 2, 8}, 19), x = random_real({2, 16}, 20);
  EXPECT_LT(rel_err(xd_forward(op, w, x), oracle::naive_fno(w, x, 4)), 1e-8);
}

TEST(XDFno, DcOnlyIsSpatiallyConstant) {
  XDOp op = init_fno(1, 1, {8}, 1);
  Tensor y = xd_forward(op, Tensor::real({1, 1, 2}, {1.0, 0.0}), random_real({1, 8}, 21));
  for (std::size_t t = 1; t < 8; ++t) EXPECT_NEAR(y.re()[t], y.re()[0], 1e-12);
}

TEST(XDFno, FlatMultiplierIsIdentityOnBandLimitedInput) {
  const std::size_t n = 16, modes = 8;
  XDOp op = init_fno(1, 1, {n}, modes);
  Tensor w = Tensor::zeros({1, 1, 2 * modes});
  w.re()[0] = 1.0;
  for (std::size_t r = 1; r < modes; ++r) w.re()[r] = 2.0;
  Tensor x = Tensor::zeros({1, n});
  for (std::size_t t = 0; t < n; ++t) x.re()[t] = 1.0 + std::sin(2 * M_PI * 5 * t / n);
  EXPECT_LT(rel_err(xd_forward(op, w, x), x), 1e-8);
}

TEST(XDFno, TwoDimensional) {
  XDOp op = init_fno(1, 2, {8, 8}, 2);
  Tensor w = random_real({1, 2, 4, 4}, 22), x = random_real({2, 8, 8}, 23);
  EXPECT_LT(rel_err(xd_forward(op, w, x), oracle::naive_fno(w, x, 2)), 1e-8);
}

TEST(XDTransposed, BoxReplication) {
  XDOp op = init_transposed_conv(1, 1, {2}, 2, 1);
  EXPECT_EQ(op.output_shape(), (Shape{4}));
  Tensor y = xd_forward(op, Tensor::real({1, 1, 2}, {1, 1}), Tensor::real({1, 2}, {3, -2}));
  const std::vector<double> want{3, 3, -2, -2};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y.re()[i], want[i], 1e-12);
}

TEST(XDTransposed, KernelOneIsIdentity) {
  XDOp op = init_transposed_conv(1, 1, {8}, 1, 1);
  Tensor x = random_real({1, 8}, 24);
  EXPECT_LT(rel_err(xd_forward(op, Tensor::real({1, 1, 1}, {1.0}), x), x), 1e-12);
}

TEST(XDTransposed, DilatedMatchesNaive) {
  XDOp op = init_transposed_conv(2, 2, {4}, 3, 2);
  EXPECT_EQ(op.params.depth(), (std::array<std::size_t, 3>{1, 3, 3}));
  EXPECT_EQ(op.output_shape(), (Shape{20}));
  Tensor w = random_real({2, 2, 3}, 25), x = random_real({2, 4}, 26);
  EXPECT_LT(rel_err(xd_forward(op, w, x), oracle::naive_transposed_conv(w, x, 2)), 1e-10);
}

// ---- composition --------------------------------------------------------------

TEST(XDCompose, IdentityLeavesForwardUnchanged) {
  XDOp op = init_from_conv(conv(2, {8}, 3));
  XDOp a = compose_fixed_kmatrix(op, kal::init_identity(8), Side::Input);
  XDOp b = compose_fixed_kmatrix(op, kal::init_identity(8), Side::Output);
  Tensor x = random_real({2, 8}, 27);
  EXPECT_LT(rel_err(xd_forward(a, op.weight, x), xd_forward(op, op.weight, x)), 1e-12);
  EXPECT_LT(rel_err(xd_forward(b, op.weight, x), xd_forward(op, op.weight, x)), 1e-12);
  EXPECT_EQ(a.params.depth(), (std::array<std::size_t, 3>{1, 1, 2}));
  EXPECT_EQ(b.params.depth(), (std::array<std::size_t, 3>{2, 1, 1}));
}

TEST(XDCompose, PermutationOnInputSide) {
  std::vector<std::size_t> perm{3, 0, 7, 5, 1, 2, 6, 4};
  XDOp op = init_from_conv(conv(1, {8}, 3));
  XDOp pc = compose_fixed_kmatrix(op, kal::init_permutation(8, perm), Side::Input);
  Tensor x = random_real({1, 8}, 28), px = Tensor::zeros({1, 8});
  for (std::size_t i = 0; i < 8; ++i) px.re()[i] = x.re()[perm[i]];
  EXPECT_LT(rel_err(xd_forward(pc, op.weight, x), oracle::naive_conv(op.weight, px, 1, 1)), 1e-10);
}

TEST(XDCompose, GraphConvMatchesNaive) {
  const std::size_t nodes = 8;
  std::mt19937_64 rng(29);
  std::vector<double> adj(nodes * nodes, 0.0);
  for (std::size_t i = 0; i < nodes; ++i)
    for (std::size_t j = i + 1; j < nodes; ++j)
      if (rng() % 3 == 0) adj[i * nodes + j] = adj[j * nodes + i] = 1.0;
  const auto g = oracle::graph_operator(adj, nodes, oracle::GraphKind::Normalized);
  XDOp op = init_graph_conv(2, 3, g, nodes);
  EXPECT_EQ(op.output_shape(), (Shape{nodes}));
  Tensor w = random_real({2, 3, 1}, 30), x = random_real({3, nodes}, 31);
  EXPECT_LT(rel_err(xd_forward(op, w, x), oracle::naive_graph_conv(w, x, adj, oracle::GraphKind::Normalized)), 1e-8);
}

TEST(XDCompose, RejectsDimensionMismatch) {
  XDOp op = init_from_conv(conv(1, {8}, 3));
  EXPECT_THROW(compose_fixed_kmatrix(op, kal::init_identity(16), Side::Input), std::invalid_argument);
  EXPECT_THROW(compose_fixed_kmatrix(op, kal::init_identity(8), Side::Input, 1), std::invalid_argument);
}

// ---- warm-start sweep ---------------------------------------------------------

TEST(XDWarmStart, EveryInitializerMatchesItsOracle) {
  std::size_t configs = 0;
  for (std::size_t n : {8u, 16u, 32u})
    for (std::size_t c : {1u, 2u, 3u}) {
      const std::uint64_t seed = n * 10 + c;
      for (std::size_t d : {1u, 2u, 3u})
        for (std::size_t s : {1u, 2u}) {
          if (2 * d > n - 1) continue;
          XDOp op = init_from_conv(conv(c, {n}, 3, s, d));
          OracleSpec spec;
          spec.kind = Kind::Conv;
          spec.stride = s;
          spec.dilation = d;
          auto rep = oracle::equivalence_report(op, spec, 5, seed);
          EXPECT_TRUE(rep.pass) << "conv n=" << n << " c=" << c << " d=" << d << " s=" << s << " " << rep.max_error;
          ++configs;
        }
      PoolSpec ps;
      ps.channels = c;
      ps.m = {n};
      ps.kernel = 3;
      ps.stride = 2;
      OracleSpec pool;
      pool.kind = Kind::AvgPool;
      pool.kernel = 3;
      pool.stride = 2;
      EXPECT_TRUE(oracle::equivalence_report(init_avgpool(ps), pool, 5, seed).pass) << "avgpool n=" << n;

      OracleSpec fno;
      fno.kind = Kind::Fno;
      fno.modes = n / 4;
      EXPECT_TRUE(oracle::equivalence_report(init_fno(c, c, {n}, n / 4), fno, 5, seed).pass) << "fno n=" << n;

      OracleSpec skip, zero;
      skip.kind = Kind::Skip;
      zero.kind = Kind::Zero;
      EXPECT_TRUE(oracle::equivalence_report(init_skip(c, {n}), skip, 5, seed).pass);
      EXPECT_TRUE(oracle::equivalence_report(init_zero(c, c, {n}), zero, 5, seed).pass);

      OracleSpec tr;
      tr.kind = Kind::TransposedConv;
      tr.dilation = 1;
      EXPECT_TRUE(oracle::equivalence_report(init_transposed_conv(c, c, {n / 4}, 3, 1), tr, 5, seed).pass);
      configs += 5;
    }
  EXPECT_GT(configs, 50u);
}

TEST(XDWarmStart, FixedLinearComposeReport) {
  std::vector<std::size_t> perm{5, 2, 7, 0, 1, 6, 3, 4};
  XDOp op = compose_fixed_kmatrix(init_from_conv(conv(2, {8}, 3)), kal::init_permutation(8, perm), Side::Output);
  OracleSpec spec;
  spec.kind = Kind::FixedLinearCompose;
  spec.side = oracle::ComposeSide::Output;
  spec.fixed.assign(64, 0.0);
  for (std::size_t i = 0; i < 8; ++i) spec.fixed[i * 8 + perm[i]] = 1.0;
  spec.inner = std::make_shared<OracleSpec>();
  spec.inner->kind = Kind::Conv;
  auto rep = oracle::equivalence_report(op, spec, 5, 32);
  EXPECT_TRUE(rep.pass) << rep.max_error;
}

// ---- parameters and gradients -------------------------------------------------

TEST(XDParams, ArchitectureCountMatchesClosedForm) {
  const std::size_t n = 8, c = 2;
  XDOp op = init_from_conv(conv(c, {n}, 3));
  std::size_t count = 0;
  for (const auto& t : parameter_groups(op).arch) count += t.numel();
  // Per K-matrix: depth * 2 butterflies * log2(n) stages * 4 diagonals * n/2.
  const std::size_t per_k = 1 * 2 * 3 * 4 * (n / 2);
  EXPECT_EQ(count, 3 * per_k + n + c * c);
}

TEST(XDParams, FrozenBiasAndGatesLeaveArchGroup) {
  XDOp op = init_from_conv(conv(2, {8}, 3));
  const std::size_t before = op.arch_parameters().size();
  op.params.b_frozen = op.params.C_frozen = true;
  const auto arch = op.arch_parameters();
  EXPECT_EQ(arch.size(), before - 2);
  for (const auto& t : arch) {
    EXPECT_NE(t.id(), op.params.b.id());
    EXPECT_NE(t.id(), op.params.C.id());
  }
  set_trainable(op, true, true);
  EXPECT_FALSE(op.params.b.requires_grad());
  EXPECT_FALSE(op.params.C.requires_grad());
}

TEST(XDParams, ModelGroupIsExactlyTheFilter) {
  XDOp op = init_from_conv(conv(3, {16, 16}, 5));
  auto g = parameter_groups(op);
  ASSERT_EQ(g.model.size(), 1u);
  EXPECT_EQ(g.model[0].shape(), (Shape{3, 3, 5, 5}));
  for (const auto& a : g.arch) EXPECT_NE(a.id(), g.model[0].id());
}

TEST(XDParams, CloneIsDeep) {
  XDOp op = init_from_conv(conv(1, {8}, 3));
  XDOp c = op.clone();
  c.weight.re()[0] += 1.0;
  c.params.K.axes[0].factors()[0].left.stage(0).re()[0] += 1.0;
  EXPECT_NE(c.weight.re()[0], op.weight.re()[0]);
  EXPECT_NE(c.params.K.axes[0].factors()[0].left.stage(0).re()[0],
            op.params.K.axes[0].factors()[0].left.stage(0).re()[0]);
}

TEST(XDForward, BatchedMatchesPerSample) {
  XDOp op = init_from_conv(conv(2, {8}, 3, 1, 2));
  Tensor xb = random_real({3, 2, 8}, 33);
  ad::Tape tape;
  Tensor yb = xd_forward(tape, op, xb);
  ASSERT_EQ(yb.shape(), (Shape{3, 2, 8}));
  for (std::size_t b = 0; b < 3; ++b) {
    Tensor x = Tensor::real({2, 8}, std::vector<double>(xb.re().begin() + b * 16, xb.re().begin() + (b + 1) * 16));
    Tensor y = xd_forward(op, op.weight, x);
    for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(yb.re()[b * 16 + i], y.re()[i], 1e-12);
  }
}

TEST(XDForward, ShapeErrors) {
  XDOp op = init_from_conv(conv(2, {8}, 3));
  EXPECT_THROW(xd_forward(op, op.weight, random_real({3, 8}, 1)), std::invalid_argument);
  EXPECT_THROW(xd_forward(op, op.weight, random_real({2, 7}, 1)), std::invalid_argument);
  EXPECT_THROW(xd_forward(op, random_real({2, 2, 5}, 1), random_real({2, 8}, 1)), std::invalid_argument);
}

TEST(XDForward, DebugChecksFlagNonFinite) {
  XDOp op = init_from_conv(conv(1, {8}, 3));
  Tensor x = random_real({1, 8}, 34);
  x.re()[2] = std::nan("");
  EXPECT_NO_THROW(xd_forward(op, op.weight, x));
  set_debug_checks(true);
  EXPECT_THROW(xd_forward(op, op.weight, x), NumericError);
  set_debug_checks(false);
}

TEST(XDForward, GradCheckAllParameterKinds) {
  XDOp op = init_from_conv(conv(2, {4}, 3, 1, 1));
  // Move off the exact construction so every gradient path is generic.
  for (auto& t : op.arch_parameters()) {
    std::mt19937_64 rng(reinterpret_cast<std::uintptr_t>(t.id()) % 1000);
    std::normal_distribution<double> nd(0.0, 0.1);
    for (double& v : t.re()) v += nd(rng);
    for (double& v : t.im()) v += nd(rng);
  }
  Tensor x = random_real({2, 2, 4}, 35), target = random_real({2, 2, 4}, 36);
  std::vector<std::pair<std::string, Tensor>> params{{"w", op.weight},
                                                     {"b", op.params.b},
                                                     {"C", op.params.C},
                                                     {"K", op.params.K.axes[0].factors()[0].left.stage(1)},
                                                     {"L", op.params.L.axes[0].factors()[0].right.stage(0)},
                                                     {"M", op.params.M.axes[0].factors()[0].left.stage(0)}};
  auto rep = ad::grad_check([&](ad::Tape& t) { return t.mse(xd_forward(t, op, x), target); }, params);
  EXPECT_LT(rep.max_error(), 1e-5);
  for (const auto& e : rep.entries) EXPECT_LT(e.max_rel_error, 1e-5) << e.name;
}

TEST(XDForward, FrozenArchReceivesNoGradient) {
  XDOp op = init_from_conv(conv(1, {8}, 3));
  set_trainable(op, false, true);
  Tensor x = random_real({1, 1, 8}, 37);
  ad::Tape tape;
  auto g = tape.backward(tape.sum(xd_forward(tape, op, x)));
  EXPECT_TRUE(g.contains(op.weight));
  EXPECT_FALSE(g.contains(op.params.b));
  EXPECT_FALSE(g.contains(op.params.K.axes[0].factors()[0].left.stage(0)));
}

TEST(XDInspect, DenseChannelMapOfShiftIsCirculant) {
  XDOp op = init_from_conv(conv(1, {4}, 3));
  op.weight.copy_from(Tensor::real({1, 1, 3}, {0, 1, 0}));
  const auto a = dense_channel_map(op, 0, 0);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t q = 0; q < 4; ++q) EXPECT_NEAR(a[r * 4 + q], (r + 3) % 4 == q ? 1.0 : 0.0, 1e-12);
}
