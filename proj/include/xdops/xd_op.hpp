// SPDX-License-Identifier: Apache-2.0
//
// The multi-channel XD operation
//
//   y_i = Re( K · sum_j C[i,j] · diag(L·pad(w[i,j]) + b) · M·pad(x_j) )
//
// with K, L, M Kronecker products of per-axis K-matrices, plus constructive
// initializers that reproduce convolution, pooling, skip/zero, FNO,
// transposed convolution and graph convolution exactly.
#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "xdops/autodiff.hpp"
#include "xdops/kaleidoscope.hpp"
#include "xdops/tensor.hpp"

namespace xd {

struct XDParams {
  kal::KroneckerK K, L, M;
  Tensor b;  // complex, shape n per axis
  Tensor C;  // complex [c_out, c_in]
  bool b_frozen = false;
  bool C_frozen = false;

  /// (d_K, d_L, d_M); every axis must agree.
  std::array<std::size_t, 3> depth() const;
};

struct FilterShape {
  std::size_t c_out = 1;
  std::size_t c_in = 1;
  Shape k;  // per axis
};

/// Per-axis gather applied to the real output: out[t] = full[t * step],
/// t < size.
struct AxisView {
  std::size_t step = 1;
  std::size_t size = 0;
};

struct XDOp {
  XDParams params;
  FilterShape filter;
  Shape n;  // padded domain per axis (powers of two)
  Shape m;  // input extent per axis
  std::vector<AxisView> view;
  Tensor weight;  // real [c_out, c_in, k...]

  std::size_t ndim() const { return n.size(); }
  Shape output_shape() const;  // spatial, after the view
  /// Architecture tensors (stage diagonals of K, L, M, then b and C unless
  /// frozen) and model weights.
  std::vector<Tensor> arch_parameters() const;
  std::vector<Tensor> model_parameters() const { return {weight}; }
  XDOp clone() const;
};

struct ParameterGroups {
  std::vector<Tensor> arch;
  std::vector<Tensor> model;
};
ParameterGroups parameter_groups(const XDOp& op);

/// Sets requires_grad on the architecture group and the weight.
void set_trainable(XDOp& op, bool arch, bool weights);

/// Forward on a batch x [B, c_in, m...] or a single sample [c_in, m...],
/// recorded on `tape`. Returns [B, c_out, view...] (or unbatched).
Tensor xd_forward(ad::Tape& tape, const XDOp& op, const Tensor& x);
/// Same with an explicit weight tensor in place of op.weight.
Tensor xd_forward(ad::Tape& tape, const XDOp& op, const Tensor& w, const Tensor& x);
/// Untracked evaluation.
Tensor xd_forward(const XDOp& op, const Tensor& w, const Tensor& x);

/// When enabled, xd_forward throws NumericError on non-finite output.
void set_debug_checks(bool enabled);

// ---- initializers -----------------------------------------------------------

struct ConvSpec {
  std::size_t c_out = 1;
  std::size_t c_in = 1;
  Shape m;  // input extent per axis (sets N)
  std::size_t k = 3;
  std::size_t stride = 1;
  std::size_t dilation = 1;
  /// 0/1 [c_out, c_in] channel mask; undefined means all ones.
  Tensor groups;
  /// Gather every stride-th output instead of keeping the zero-masked
  /// full-length form.
  bool subsample = false;
  std::uint64_t seed = 0;  // weight initialization
  /// Padded domain per axis; empty selects the next power of two of m.
  Shape domain;
};

/// Gather permutation of length n placing tap j at j*d for j < k.
std::vector<std::size_t> dilation_permutation(std::size_t n, std::size_t k, std::size_t d);
/// Output mask keeping positions that are multiples of s.
std::vector<double> stride_mask(std::size_t n, std::size_t s);

XDOp init_from_conv(const ConvSpec& spec);
XDOp init_skip(std::size_t channels, const Shape& m, std::size_t k = 1, std::uint64_t seed = 0);
XDOp init_zero(std::size_t c_out, std::size_t c_in, const Shape& m, std::size_t k = 1, std::uint64_t seed = 0);

struct PoolSpec {
  std::size_t channels = 1;
  Shape m;
  std::size_t kernel = 2;
  std::size_t stride = 1;
  std::size_t dilation = 1;
  bool subsample = false;
  std::uint64_t seed = 0;
};
XDOp init_avgpool(const PoolSpec& spec);

/// Filter size 2*modes per axis; modes <= n/2.
XDOp init_fno(std::size_t c_out, std::size_t c_in, const Shape& m, std::size_t modes, std::uint64_t seed = 0);

/// Stride fixed to the dilated kernel size d(k-1)+1; output extent stride*m
/// per axis.
XDOp init_transposed_conv(std::size_t c_out, std::size_t c_in, const Shape& m, std::size_t k, std::size_t dilation,
                          std::uint64_t seed = 0);

enum class Side { Input, Output };
/// M <- M·A (input side) or K <- A·K (output side) on one spatial axis.
XDOp compose_fixed_kmatrix(const XDOp& op, const kal::KMatrix& a, Side side, std::size_t axis = 0);

/// Graph convolution y_o = sum_i w[o,i] G x_i for a dense node operator G
/// (row-major nodes x nodes), realized as a 1x1 convolution composed with
/// the sparse K-matrix of G on a padded domain.
XDOp init_graph_conv(std::size_t c_out, std::size_t c_in, const std::vector<double>& g, std::size_t nodes,
                     std::uint64_t seed = 0);

// ---- inspection -----------------------------------------------------------

/// Dense real matrix (row-major, size P x P with P = prod n) of the map from
/// input channel j to output channel i, before the output view.
std::vector<double> dense_channel_map(const XDOp& op, std::size_t i, std::size_t j);
/// Dense Kronecker product of per-axis materializations.
std::vector<cplx> dense_kron(const kal::KroneckerK& ks);

}  // namespace xd
