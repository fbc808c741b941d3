// SPDX-License-Identifier: Apache-2.0
//
// Dense brute-force reference operations. Nothing here touches butterflies
// or K-matrices; Fourier transforms use the dense DFT matrix.
//
// Single-sample layout throughout: x is [c_in, extents...], weights are
// [c_out, c_in, k...], and outputs are [c_out, extents...]. Boundaries are
// circular over the extents of x unless stated otherwise.
#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "xdops/tensor.hpp"

namespace xd {
struct XDOp;
}

namespace xd::oracle {

/// y[o,t] = mask_s(t) * sum_i groups[o,i] sum_j w[o,i,j] x[i, t - j*d mod n].
/// `groups` may be undefined (all ones).
Tensor naive_conv(const Tensor& w, const Tensor& x, std::size_t stride, std::size_t dilation,
                  const Tensor& groups = {});
/// Per-channel circular mean over a dilated k^N box, same stride mask.
Tensor naive_avgpool(const Tensor& x, std::size_t kernel, std::size_t stride, std::size_t dilation);
Tensor naive_skip(const Tensor& x);
Tensor naive_zero(const Tensor& x, std::size_t c_out);
/// Re(F^-1 (mult_oi ⊙ F x_i)) summed over i, where per axis the multiplier of
/// frequency r < modes is w[r] + i*w[r + modes] and every other frequency is
/// cut. Filter extent 2*modes per axis.
Tensor naive_fno(const Tensor& w, const Tensor& x, std::size_t modes);
/// Non-circular: output extent S*m with S = d(k-1)+1; input element p adds
/// x[p]*w[j] at p*S + j*d.
Tensor naive_transposed_conv(const Tensor& w, const Tensor& x, std::size_t dilation);

enum class GraphKind { Normalized, Diffusion };
/// Dense nodes x nodes operator from a 0/weighted adjacency: Normalized is
/// D^-1/2 (A+I) D^-1/2 with D the degrees of A+I; Diffusion is D^-1 A and
/// rejects isolated nodes.
std::vector<double> graph_operator(const std::vector<double>& adjacency, std::size_t nodes, GraphKind kind);
/// y_o = sum_i w[o,i] G x_i with x [c_in, nodes] and w [c_out, c_in, 1].
Tensor naive_graph_conv(const Tensor& w, const Tensor& x, const std::vector<double>& adjacency, GraphKind kind);

/// Dense DFT along every spatial axis (axes 1..) with sign -1 or +1, no
/// normalization.
Tensor dense_dft(const Tensor& x, int sign);

enum class Kind { Conv, AvgPool, Skip, Zero, Fno, TransposedConv, GraphConv, FixedLinearCompose };
std::string kind_name(Kind k);

enum class ComposeSide { Input, Output };

struct OracleSpec {
  Kind kind = Kind::Conv;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t dilation = 1;
  Tensor groups;
  std::size_t modes = 1;
  std::vector<double> adjacency;
  GraphKind graph = GraphKind::Normalized;
  // FixedLinearCompose: real dense A on the padded 1-d domain, applied on
  // `side` of the inner oracle.
  std::vector<double> fixed;
  ComposeSide side = ComposeSide::Input;
  std::shared_ptr<OracleSpec> inner;
};

/// Evaluates the oracle for the op's geometry: x [c_in, m...] is zero-padded
/// to the op's domain (kinds defined on it), the oracle applied and the op's
/// output view taken. Returns [c_out, view...].
Tensor oracle_forward(const OracleSpec& spec, const XDOp& op, const Tensor& w, const Tensor& x);

struct EquivalenceReport {
  std::string kind;
  std::vector<double> errors;  // per trial
  std::vector<bool> absolute;  // per trial: reference norm below the fallback
  double max_error = 0.0;
  double threshold = 1e-8;
  double absolute_threshold = 1e-10;
  bool pass = false;

  /// One JSON object per trial followed by a summary object.
  std::string to_jsonl() const;
};

/// Draws random w and x per trial and compares xd_forward to the oracle by
/// ||xd - ref|| / ||ref||, or ||xd - ref|| when ||ref|| < 1e-10.
EquivalenceReport equivalence_report(const XDOp& op, const OracleSpec& spec, std::size_t trials, std::uint64_t seed);

}  // namespace xd::oracle
