// SPDX-License-Identifier: Apache-2.0
//
// Butterfly factorizations and K-matrices (Kaleidoscope matrices).
//
// A ButterflyMatrix of size n = 2^L is a product of L block-diagonal stages.
// Stage i has block length k = 2^(i+1); each k x k block is a butterfly
// factor [[D1, D2], [D3, D4]] with diagonal k/2 x k/2 blocks. Stages are
// applied in increasing block length (stage 0 first).
//
// A depth-d KMatrix is a product of d pairs B_left * B_right^T. Factor 0 is
// the leftmost factor, so it is applied last.
#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "xdops/tensor.hpp"

namespace xd::kal {

/// One k x k butterfly block. Diagonals have length size / 2.
struct ButterflyFactor {
  std::size_t size = 2;
  std::vector<cplx> d1, d2, d3, d4;
};

class ButterflyMatrix {
 public:
  ButterflyMatrix() = default;
  /// Identity-initialized butterfly of dimension n (power of two, >= 2).
  explicit ButterflyMatrix(std::size_t n);

  std::size_t n() const { return n_; }
  std::size_t num_stages() const { return stages_.size(); }
  std::size_t block_length(std::size_t stage) const { return std::size_t{2} << stage; }

  /// Stage parameters: complex tensor [4, n/2]; row r holds diagonal d(r+1)
  /// for all n/k factors of the stage, concatenated in block order.
  Tensor& stage(std::size_t i) { return stages_.at(i); }
  const Tensor& stage(std::size_t i) const { return stages_.at(i); }

  ButterflyFactor factor(std::size_t stage, std::size_t block) const;
  void set_factor(std::size_t stage, std::size_t block, const ButterflyFactor& f);

  ButterflyMatrix clone() const;

 private:
  std::size_t n_ = 0;
  std::vector<Tensor> stages_;
};

struct KFactor {
  ButterflyMatrix left;
  ButterflyMatrix right;
};

class KMatrix {
 public:
  KMatrix() = default;
  KMatrix(std::size_t n, std::vector<KFactor> factors);

  std::size_t n() const { return n_; }
  std::size_t depth() const { return factors_.size(); }
  std::vector<KFactor>& factors() { return factors_; }
  const std::vector<KFactor>& factors() const { return factors_; }

  /// Every stage tensor, in a fixed traversal order (factor, left then right, stage).
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;  // complex entries
  KMatrix clone() const;

 private:
  std::size_t n_ = 0;
  std::vector<KFactor> factors_;
};

/// Kronecker product of per-axis K-matrices (axis 0 outermost).
struct KroneckerK {
  std::vector<KMatrix> axes;

  std::size_t ndim() const { return axes.size(); }
  std::vector<Tensor> parameters() const;
  KroneckerK clone() const;
};

bool is_power_of_two(std::size_t n);
std::size_t log2_exact(std::size_t n);
std::size_t next_power_of_two(std::size_t n);

// ---- application -----------------------------------------------------------

/// y = B x for a single vector. O(n log n); exactly 2 n log2 n complex
/// multiply-adds.
std::vector<cplx> butterfly_apply(const ButterflyMatrix& b, const std::vector<cplx>& x);

/// Applies K to every 1-d fiber of X along `axis`. X may be real (promoted).
Tensor kmatrix_apply(const KMatrix& k, const Tensor& x, std::size_t axis);

/// Applies the Kronecker product of Ks.axes to the trailing N axes of X
/// starting at `first_axis`.
Tensor kron_apply(const KroneckerK& ks, const Tensor& x, std::size_t first_axis);

/// In-place kernel on split planes laid out as [outer][n][inner].
void kmatrix_apply_inplace(const KMatrix& k, double* re, double* im, std::size_t outer, std::size_t inner);

/// Vector-Jacobian product of kmatrix_apply_inplace at input planes (xre, xim).
/// On entry (gre, gim) hold the output gradient; on exit the input gradient.
/// When `gstages` is non-null it must parallel k.parameters() with zeroed
/// complex tensors; stage gradients are accumulated into it. Gradients use
/// the convention g = dL/dRe + i dL/dIm.
void kmatrix_backward_inplace(const KMatrix& k, const double* xre, const double* xim, double* gre, double* gim,
                              std::size_t outer, std::size_t inner, std::vector<Tensor>* gstages);

// ---- dense forms (test and export surface) ---------------------------------

std::size_t materialization_cap();
void set_materialization_cap(std::size_t cap);

/// Row-major n x n dense matrix.
std::vector<cplx> butterfly_materialize(const ButterflyMatrix& b);
std::vector<cplx> kmatrix_materialize(const KMatrix& k);

// ---- constructions ---------------------------------------------------------

KMatrix init_identity(std::size_t n, std::size_t depth = 1);
/// Unnormalized DFT, F[j,k] = exp(-2 pi i jk / n). Depth 1.
KMatrix init_dft(std::size_t n);
/// (1/n) conj(F). Depth 1.
KMatrix init_idft(std::size_t n);
/// Depth-2 K-matrix P with (P x)[i] = x[perm[i]].
KMatrix init_permutation(std::size_t n, const std::vector<std::size_t>& perm);

struct SparseEntry {
  std::size_t row = 0;
  std::size_t col = 0;
  cplx value{};
};
/// Depth-4 K-matrix equal to the matrix with at most n given nonzeros.
KMatrix init_sparse(std::size_t n, const std::vector<SparseEntry>& entries);
/// All-zero K-matrix of the given depth.
KMatrix init_zero(std::size_t n, std::size_t depth = 1);
/// Entries drawn i.i.d. complex normal with variance `scale^2`.
KMatrix init_random(std::size_t n, std::size_t depth, std::uint64_t seed, double scale = 0.7);

/// K1 * K2, depth(K1) + depth(K2). Deep copies both operands.
KMatrix kmatrix_compose(const KMatrix& k1, const KMatrix& k2);

/// diag(s) * K, folded into the last-applied stage.
void scale_rows(KMatrix& k, const std::vector<cplx>& s);
/// K * diag(s), folded into the first-applied stage.
void scale_cols(KMatrix& k, const std::vector<cplx>& s);
/// Multiplies every entry of K by `factor`.
void scale(KMatrix& k, cplx factor);

/// Complex multiply-add count of one kmatrix_apply on a single fiber.
std::size_t kmatrix_madds(std::size_t n, std::size_t depth);
inline std::size_t butterfly_madds(std::size_t n) { return 2 * n * log2_exact(n); }

namespace detail {
/// Test-only mutation hook: flips the sign of the DFT twiddle exponents.
void set_twiddle_fault(bool enabled);
bool twiddle_fault();
}  // namespace detail

}  // namespace xd::kal
