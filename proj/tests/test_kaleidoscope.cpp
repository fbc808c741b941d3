// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "dense.hpp"
#include "xdops/error.hpp"
#include "xdops/kaleidoscope.hpp"

using namespace xd;
using namespace xd::kal;
using dense::cplx;
using dense::Mat;

namespace {

// Dense stage matrix assembled block by block from the factor view.
Mat stage_dense(const ButterflyMatrix& b, std::size_t s) {
  const std::size_t n = b.n(), k = b.block_length(s), h = k / 2;
  Mat m(n * n);
  for (std::size_t blk = 0; blk < n / k; ++blk) {
    const ButterflyFactor f = b.factor(s, blk);
    const std::size_t o = blk * k;
    for (std::size_t j = 0; j < h; ++j) {
      m[(o + j) * n + o + j] = f.d1[j];
      m[(o + j) * n + o + h + j] = f.d2[j];
      m[(o + h + j) * n + o + j] = f.d3[j];
      m[(o + h + j) * n + o + h + j] = f.d4[j];
    }
  }
  return m;
}

Mat butterfly_dense(const ButterflyMatrix& b) {
  Mat m = dense::eye(b.n());
  for (std::size_t s = 0; s < b.num_stages(); ++s) m = dense::matmul(stage_dense(b, s), m, b.n());
  return m;
}

Mat transpose(const Mat& a, std::size_t n) {
  Mat t(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) t[j * n + i] = a[i * n + j];
  return t;
}

Mat kmatrix_dense(const KMatrix& k) {
  const std::size_t n = k.n();
  Mat m = dense::eye(n);
  for (const auto& f : k.factors())
    m = dense::matmul(m, dense::matmul(butterfly_dense(f.left), transpose(butterfly_dense(f.right), n), n), n);
  return m;
}

Mat perm_matrix(const std::vector<std::size_t>& p) {
  const std::size_t n = p.size();
  Mat m(n * n);
  for (std::size_t i = 0; i < n; ++i) m[i * n + p[i]] = 1.0;
  return m;
}

std::vector<std::size_t> random_perm(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), 0);
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

}  // namespace

TEST(Butterfly, IdentityLeavesVectorUnchanged) {
  ButterflyMatrix b(4);
  auto y = butterfly_apply(b, {1, 2, 3, 4});
  EXPECT_EQ(y, (std::vector<cplx>{1, 2, 3, 4}));
}

TEST(Butterfly, TwoPointTransform) {
  auto k = init_dft(2);
  auto y = butterfly_apply(k.factors()[0].left, butterfly_apply(k.factors()[0].right, {1, 1}));
  EXPECT_NEAR(std::abs(y[0] - cplx(2)), 0.0, 1e-15);
  EXPECT_NEAR(std::abs(y[1]), 0.0, 1e-15);
}

TEST(Butterfly, RandomMatchesDenseProduct) {
  auto k = init_random(16, 1, 7);
  const auto& b = k.factors()[0].left;
  std::mt19937_64 rng(3);
  auto x = dense::random_vec(16, rng);
  auto want = dense::matvec(butterfly_dense(b), x);
  auto got = butterfly_apply(b, x);
  EXPECT_LT(dense::max_abs_diff(got, want) / dense::norm(want), 1e-12);
  EXPECT_LT(dense::max_abs_diff(butterfly_materialize(b), butterfly_dense(b)), 1e-12);
}

TEST(Butterfly, RejectsWrongLength) {
  ButterflyMatrix b(8);
  EXPECT_THROW(butterfly_apply(b, std::vector<cplx>(4)), std::invalid_argument);
}

TEST(Butterfly, FactorAccessorsRoundTrip) {
  ButterflyMatrix b(8);
  ButterflyFactor f{4, {1, 2}, {3, 4}, {5, 6}, {7, 8}};
  b.set_factor(1, 1, f);
  auto g = b.factor(1, 1);
  EXPECT_EQ(g.d2, f.d2);
  EXPECT_EQ(g.d4, f.d4);
  f.d1.pop_back();
  EXPECT_THROW(b.set_factor(1, 0, f), std::invalid_argument);
}

TEST(Butterfly, MaddCount) {
  for (std::size_t n : {2, 8, 64, 1024}) EXPECT_EQ(butterfly_madds(n), 2 * n * log2_exact(n));
  EXPECT_EQ(kmatrix_madds(64, 3), 3 * 4 * 64 * 6);
}

TEST(KMatrix, ApplyMatchesMaterializeAndDenseOracle) {
  for (std::size_t n : {2, 4, 8, 16, 32}) {
    for (std::size_t depth = 1; depth <= 4; ++depth) {
      auto k = init_random(n, depth, 100 * n + depth);
      auto mat = kmatrix_materialize(k);
      EXPECT_LT(dense::max_abs_diff(mat, kmatrix_dense(k)), 1e-12) << n << " " << depth;
      for (std::size_t j = 0; j < n; ++j) {
        std::vector<double> e(n, 0.0);
        e[j] = 1.0;
        auto col = kmatrix_apply(k, Tensor::real({n}, e), 0).to_complex();
        for (std::size_t i = 0; i < n; ++i) EXPECT_LT(std::abs(col[i] - mat[i * n + j]), 1e-12);
      }
    }
  }
}

TEST(KMatrix, BatchedApplyAlongMiddleAxis) {
  const std::size_t n = 8;
  auto k = init_random(n, 3, 11);
  auto mat = kmatrix_dense(k);
  std::mt19937_64 rng(5);
  auto data = dense::random_vec(5 * n * 3, rng);
  Tensor x = Tensor::complex({5, n, 3}, data);
  Tensor y = kmatrix_apply(k, x, 1);
  for (std::size_t b = 0; b < 5; ++b)
    for (std::size_t c = 0; c < 3; ++c) {
      std::vector<cplx> fiber(n);
      for (std::size_t i = 0; i < n; ++i) fiber[i] = data[(b * n + i) * 3 + c];
      auto want = dense::matvec(mat, fiber);
      for (std::size_t i = 0; i < n; ++i) EXPECT_LT(std::abs(y.at((b * n + i) * 3 + c) - want[i]), 1e-12);
    }
  EXPECT_EQ(x.to_complex(), data);
}

TEST(KMatrix, ApplyErrors) {
  auto k = init_identity(8);
  EXPECT_THROW(kmatrix_apply(k, Tensor::zeros({2, 4}), 1), std::invalid_argument);
  EXPECT_THROW(kmatrix_apply(k, Tensor::zeros({2, 8}), 2), std::out_of_range);
}

TEST(KMatrix, IdentityConstruction) {
  for (auto [n, d] : {std::pair<std::size_t, std::size_t>{4, 1}, {8, 3}, {16, 2}}) {
    auto k = init_identity(n, d);
    EXPECT_EQ(k.depth(), d);
    EXPECT_EQ(kmatrix_materialize(k), dense::eye(n));
  }
  EXPECT_THROW(init_identity(6), std::invalid_argument);
  EXPECT_THROW(init_identity(8, 0), std::invalid_argument);
}

TEST(KMatrix, ZeroConstruction) {
  auto m = kmatrix_materialize(init_zero(8, 2));
  EXPECT_EQ(dense::norm(m), 0.0);
}

TEST(KMatrix, MaterializationCap) {
  const auto saved = materialization_cap();
  set_materialization_cap(8);
  EXPECT_THROW(kmatrix_materialize(init_identity(16)), ResourceError);
  EXPECT_NO_THROW(kmatrix_materialize(init_identity(8)));
  set_materialization_cap(saved);
}

TEST(Dft, FourPointMatrix) {
  const cplx i(0, 1);
  Mat want{1, 1, 1, 1, 1, -i, -1, i, 1, -1, 1, -1, 1, i, -1, -i};
  EXPECT_LT(dense::max_abs_diff(kmatrix_materialize(init_dft(4)), want), 1e-14);
}

TEST(Dft, MatchesAnalyticUpTo64) {
  for (std::size_t n = 2; n <= 64; n *= 2) {
    auto k = init_dft(n);
    EXPECT_EQ(k.depth(), 1u);
    EXPECT_LT(dense::max_abs_diff(kmatrix_materialize(k), dense::dft(n)), 1e-10) << n;
  }
}

TEST(Dft, InverseTimesForwardIsIdentity) {
  for (std::size_t n : {2, 4, 8, 16}) {
    auto inv = kmatrix_materialize(init_idft(n));
    auto f = dense::dft(n);
    Mat want(n * n);
    for (std::size_t j = 0; j < n * n; ++j) want[j] = std::conj(f[j]) / static_cast<double>(n);
    EXPECT_LT(dense::max_abs_diff(inv, want), 1e-12);
    auto prod = dense::matmul(inv, kmatrix_materialize(init_dft(n)), n);
    EXPECT_LT(dense::max_abs_diff(prod, dense::eye(n)), 1e-12);
  }
}

TEST(Dft, ImpulseGivesAllOnes) {
  std::vector<double> e(8, 0.0);
  e[0] = 1.0;
  auto y = kmatrix_apply(init_dft(8), Tensor::real({8}, e), 0).to_complex();
  EXPECT_LT(dense::max_abs_diff(y, std::vector<cplx>(8, 1.0)), 1e-14);
}

TEST(Dft, TwiddleFaultBreaksTransform) {
  detail::set_twiddle_fault(true);
  auto m = kmatrix_materialize(init_dft(8));
  detail::set_twiddle_fault(false);
  EXPECT_GT(dense::max_abs_diff(m, dense::dft(8)), 1.0);
}

TEST(Permutation, IdentityAndReverse) {
  std::vector<std::size_t> id{0, 1, 2, 3}, rev{3, 2, 1, 0};
  EXPECT_EQ(kmatrix_materialize(init_permutation(4, id)), dense::eye(4));
  EXPECT_EQ(kmatrix_materialize(init_permutation(4, rev)), perm_matrix(rev));
  auto y = kmatrix_apply(init_permutation(4, rev), Tensor::real({4}, {1, 2, 3, 4}), 0).to_complex();
  EXPECT_EQ(y, (std::vector<cplx>{4, 3, 2, 1}));
}

TEST(Permutation, RandomPermutationsAreExact) {
  std::mt19937_64 rng(21);
  for (std::size_t n : {2, 4, 8, 16, 32, 64, 256}) {
    for (int t = 0; t < 5; ++t) {
      auto p = random_perm(n, rng);
      auto k = init_permutation(n, p);
      EXPECT_EQ(k.depth(), 2u);
      EXPECT_EQ(kmatrix_materialize(k), perm_matrix(p)) << n;
    }
  }
}

TEST(Permutation, RejectsNonBijection) {
  EXPECT_THROW(init_permutation(4, {0, 1, 1, 2}), std::invalid_argument);
  EXPECT_THROW(init_permutation(4, {0, 1, 2}), std::invalid_argument);
  EXPECT_THROW(init_permutation(4, {0, 1, 2, 4}), std::invalid_argument);
}

TEST(Sparse, SingleEntryAndDiagonal) {
  auto e00 = kmatrix_materialize(init_sparse(4, {{0, 0, 1.0}}));
  Mat want(16);
  want[0] = 1.0;
  EXPECT_LT(dense::max_abs_diff(e00, want), 1e-12);

  std::vector<SparseEntry> diag;
  Mat dm(64);
  for (std::size_t j = 0; j < 8; ++j) {
    diag.push_back({j, j, cplx(1.0 + j, -0.5 * j)});
    dm[j * 8 + j] = diag.back().value;
  }
  auto k = init_sparse(8, diag);
  EXPECT_EQ(k.depth(), 4u);
  EXPECT_LT(dense::max_abs_diff(kmatrix_materialize(k), dm), 1e-12);
}

TEST(Sparse, RandomPatternsMatchDenseOracle) {
  std::mt19937_64 rng(99);
  std::normal_distribution<double> nd;
  for (std::size_t n : {2, 4, 8, 16, 32, 64}) {
    for (int t = 0; t < 20; ++t) {
      std::uniform_int_distribution<std::size_t> count(0, n), idx(0, n - 1);
      // Mix clustered rows/columns with uniform ones to exercise fan-in and fan-out.
      const bool clustered = t % 2;
      const std::size_t cells = 2 * std::max<std::size_t>(1, n / 4);
      const std::size_t m = clustered ? std::min(count(rng), cells) : count(rng);
      std::vector<SparseEntry> es;
      Mat want(n * n);
      while (es.size() < m) {
        std::size_t r = idx(rng), c = idx(rng);
        if (clustered) {
          r %= std::max<std::size_t>(1, n / 4);
          c = (c % 2) * (n - 1);
        }
        if (std::abs(want[r * n + c]) > 0) continue;
        es.push_back({r, c, cplx(nd(rng), nd(rng))});
        want[r * n + c] = es.back().value;
      }
      auto k = init_sparse(n, es);
      EXPECT_LT(dense::max_abs_diff(kmatrix_materialize(k), want), 1e-10) << n << " trial " << t;
    }
  }
}

TEST(Sparse, Errors) {
  EXPECT_THROW(init_sparse(2, {{0, 0, 1.0}, {0, 1, 1.0}, {1, 0, 1.0}}), Unsupported);
  EXPECT_THROW(init_sparse(4, {{1, 2, 1.0}, {1, 2, 3.0}}), std::invalid_argument);
  EXPECT_THROW(init_sparse(4, {{4, 0, 1.0}}), std::invalid_argument);
}

TEST(Compose, DepthAddsAndProductMatches) {
  for (std::size_t n : {4, 8, 16}) {
    auto k1 = init_random(n, 2, 1), k2 = init_random(n, 3, 2);
    auto c = kmatrix_compose(k1, k2);
    EXPECT_EQ(c.depth(), 5u);
    auto want = dense::matmul(kmatrix_materialize(k1), kmatrix_materialize(k2), n);
    EXPECT_LT(dense::max_abs_diff(kmatrix_materialize(c), want) / dense::norm(want), 1e-12);
  }
}

TEST(Compose, IdentityAndInverse) {
  auto k = init_random(8, 2, 9);
  EXPECT_LT(dense::max_abs_diff(kmatrix_materialize(kmatrix_compose(init_identity(8), k)), kmatrix_materialize(k)),
            1e-12);
  auto id = kmatrix_materialize(kmatrix_compose(init_dft(8), init_idft(8)));
  EXPECT_LT(dense::max_abs_diff(id, dense::eye(8)), 1e-12);
}

TEST(Compose, PermutationsCompose) {
  std::mt19937_64 rng(4);
  auto p1 = random_perm(16, rng), p2 = random_perm(16, rng);
  auto c = kmatrix_materialize(kmatrix_compose(init_permutation(16, p1), init_permutation(16, p2)));
  std::vector<std::size_t> p12(16);
  for (std::size_t i = 0; i < 16; ++i) p12[i] = p2[p1[i]];
  EXPECT_EQ(c, perm_matrix(p12));
}

TEST(Compose, IsDeepCopy) {
  auto k1 = init_identity(4), k2 = init_identity(4);
  auto c = kmatrix_compose(k1, k2);
  k1.factors()[0].left.stage(0).fill(0.0);
  EXPECT_EQ(kmatrix_materialize(c), dense::eye(4));
  EXPECT_THROW(kmatrix_compose(init_identity(4), init_identity(8)), std::invalid_argument);
}

TEST(Scaling, RowsAndColumns) {
  auto k = init_random(8, 2, 17);
  auto base = kmatrix_materialize(k);
  std::mt19937_64 rng(1);
  auto s = dense::random_vec(8, rng);
  auto kr = k.clone();
  scale_rows(kr, s);
  auto kc = k.clone();
  scale_cols(kc, s);
  auto mr = kmatrix_materialize(kr), mc = kmatrix_materialize(kc);
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j) {
      EXPECT_LT(std::abs(mr[i * 8 + j] - s[i] * base[i * 8 + j]), 1e-12);
      EXPECT_LT(std::abs(mc[i * 8 + j] - base[i * 8 + j] * s[j]), 1e-12);
    }
  auto ks = k.clone();
  scale(ks, cplx(0, 2));
  EXPECT_LT(std::abs(kmatrix_materialize(ks)[9] - cplx(0, 2) * base[9]), 1e-12);
}

TEST(Kron, IdentityAxes) {
  KroneckerK ks{{init_identity(4), init_identity(8)}};
  std::mt19937_64 rng(2);
  auto v = dense::random_vec(2 * 32, rng);
  Tensor x = Tensor::complex({2, 4, 8}, v);
  EXPECT_EQ(kron_apply(ks, x, 1).to_complex(), v);
}

TEST(Kron, TwoDimensionalDftMatchesDenseKronecker) {
  KroneckerK ks{{init_dft(4), init_dft(4)}};
  std::mt19937_64 rng(8);
  auto v = dense::random_vec(16, rng);
  auto got = kron_apply(ks, Tensor::complex({4, 4}, v), 0).to_complex();
  auto want = dense::matvec(dense::kron(dense::dft(4), 4, dense::dft(4), 4), v);
  EXPECT_LT(dense::max_abs_diff(got, want), 1e-11);
}

TEST(Kron, RandomAxesMatchDenseKronecker) {
  for (std::size_t a : {2, 4, 8})
    for (std::size_t b : {2, 4, 8}) {
      KroneckerK ks{{init_random(a, 2, a), init_random(b, 1, 31 * b)}};
      std::mt19937_64 rng(a * b);
      auto v = dense::random_vec(3 * a * b, rng);
      auto got = kron_apply(ks, Tensor::complex({3, a, b}, v), 1).to_complex();
      auto km = dense::kron(kmatrix_materialize(ks.axes[0]), a, kmatrix_materialize(ks.axes[1]), b);
      for (std::size_t c = 0; c < 3; ++c) {
        std::vector<cplx> fiber(v.begin() + c * a * b, v.begin() + (c + 1) * a * b);
        auto want = dense::matvec(km, fiber);
        std::vector<cplx> g(got.begin() + c * a * b, got.begin() + (c + 1) * a * b);
        EXPECT_LT(dense::max_abs_diff(g, want), 1e-11);
      }
    }
}

TEST(Kron, PermutedRows) {
  KroneckerK ks{{init_permutation(4, {2, 0, 3, 1}), init_identity(4)}};
  std::vector<double> v(16);
  std::iota(v.begin(), v.end(), 0.0);
  auto y = kron_apply(ks, Tensor::real({4, 4}, v), 0);
  const std::size_t src[4] = {2, 0, 3, 1};
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(y.at(r * 4 + c), cplx(v[src[r] * 4 + c]));
  EXPECT_THROW(kron_apply(ks, Tensor::zeros({4, 8}), 0), std::invalid_argument);
}
