// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode differentiation over real and complex tensors.
//
// A Tape records operations eagerly: every method computes its value right
// away and, if any operand is tracked, appends a node holding the
// vector-Jacobian product. A tensor is tracked when it requires grad or was
// produced by a recorded node. Gradients of complex tensors use the pair
// convention g = dL/dRe + i dL/dIm.
#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "xdops/kaleidoscope.hpp"
#include "xdops/tensor.hpp"

namespace xd::ad {

class Gradients {
 public:
  /// Gradient with the parameter's shape and dtype. Zero when the loss does
  /// not depend on p; throws std::invalid_argument if p was never tracked.
  Tensor of(const Tensor& p) const;
  bool contains(const Tensor& p) const;

 private:
  friend class Tape;
  std::unordered_map<const void*, Tensor> grads_;
  std::unordered_set<const void*> seen_;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool tracked(const Tensor& t) const;
  std::size_t size() const { return nodes_.size(); }

  // Elementwise. `b` may be broadcast over leading axes of `a` (its shape a
  // suffix of a's shape). Mixed real/complex operands yield complex.
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor scale(const Tensor& a, cplx s);

  Tensor complex(const Tensor& re, const Tensor& im);
  Tensor real(const Tensor& z);
  Tensor imag(const Tensor& z);

  /// Same data under a new shape with equal element count.
  Tensor reshape(const Tensor& x, const Shape& shape);
  /// Zero-pads each axis at its end up to `shape` (same rank).
  Tensor pad(const Tensor& x, const Shape& shape);
  /// Leading corner of each axis.
  Tensor slice(const Tensor& x, const Shape& shape);
  /// out[..., i, ...] = x[..., index[i], ...] along `axis`.
  Tensor gather(const Tensor& x, std::size_t axis, const std::vector<std::size_t>& index);
  /// Multiplies every fiber along `axis` by a constant vector.
  Tensor mask(const Tensor& x, std::size_t axis, const std::vector<double>& m);

  Tensor sum(const Tensor& x);
  Tensor sum_axis(const Tensor& x, std::size_t axis);
  Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }
  /// Concatenates along `axis`.
  Tensor concat(const std::vector<Tensor>& xs, std::size_t axis);

  /// Y[b,i,s] = sum_j C[i,j] * S[i,j,s] * U[b,j,s]; C [co,ci], S [co,ci,...],
  /// U [B,ci,...] with matching trailing extent. All complex or promoted.
  Tensor contract(const Tensor& c, const Tensor& s, const Tensor& u);

  /// Differentiable with respect to x and every stage tensor of k that is
  /// tracked.
  Tensor kmatrix_apply(const kal::KMatrix& k, const Tensor& x, std::size_t axis);
  Tensor kron_apply(const kal::KroneckerK& ks, const Tensor& x, std::size_t first_axis);

  Tensor relu(const Tensor& x);
  /// x [B, in], w [out, in], bias [out] (bias may be undefined).
  Tensor dense(const Tensor& x, const Tensor& w, const Tensor& bias);
  /// Non-overlapping max over windows of `window` on each of the last
  /// `naxes` axes.
  Tensor maxpool(const Tensor& x, std::size_t naxes, std::size_t window);

  /// Mean of squared differences (real tensors).
  Tensor mse(const Tensor& pred, const Tensor& target);
  /// Mean over axis-0 samples of |pred - target| / |target|.
  Tensor rel_l2(const Tensor& pred, const Tensor& target);
  /// Mean cross-entropy of logits [B, classes] against integer labels.
  Tensor softmax_ce(const Tensor& logits, const std::vector<std::size_t>& labels);

  /// Single use: a second call throws std::logic_error.
  Gradients backward(const Tensor& loss);

 private:
  using Backward = std::function<void(const Tensor& grad_out)>;
  struct Node {
    Tensor out;
    Backward back;
  };

  Tensor record(Tensor out, std::initializer_list<const Tensor*> inputs, Backward back);
  void accumulate(const Tensor& target, Tensor grad);

  std::vector<Node> nodes_;
  std::unordered_set<const void*> produced_;
  std::unordered_set<const void*> inputs_;
  std::unordered_map<const void*, Tensor> grads_;
  bool used_ = false;
};

struct GradReport {
  struct Entry {
    std::string name;
    double max_rel_error = 0.0;
  };
  std::vector<Entry> entries;
  double step = 0.0;
  double max_error() const;
};

/// Compares backward() against central differences with step h. For each
/// named parameter tensor the error is max|analytic - fd| / max(max|fd|, 1e-12).
/// Complex parameters are perturbed in both real and imaginary parts.
GradReport grad_check(const std::function<Tensor(Tape&)>& fn,
                      const std::vector<std::pair<std::string, Tensor>>& params, double h = 1e-5);

}  // namespace xd::ad
