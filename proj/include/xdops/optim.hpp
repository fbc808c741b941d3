// SPDX-License-Identifier: Apache-2.0
//
// First-order optimizers. Complex parameters are updated coordinate-wise on
// their real and imaginary planes, consistent with the gradient pair
// convention of the tape.
#pragma once

#include <string>
#include <vector>

#include "xdops/tensor.hpp"

namespace xd::optim {

enum class Kind { Sgd, Momentum, Adam };

Kind parse_kind(const std::string& name);
std::string kind_name(Kind k);

struct Settings {
  Kind kind = Kind::Sgd;
  double lr = 0.0;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Throws NumericError (and leaves params untouched) if any gradient is NaN
/// or infinite.
void check_finite(const std::vector<Tensor>& grads);

void sgd_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, double lr);

struct MomentumState {
  std::vector<Tensor> velocity;
};
/// v <- mu v + g; p <- p - lr v.
void momentum_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, double lr, double mu,
                   MomentumState& state);

struct AdamState {
  std::vector<Tensor> m, v;
  std::size_t t = 0;
};
void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, double lr, double beta1, double beta2,
               double eps, AdamState& state);

/// One optimizer bound to a fixed parameter list.
class Optimizer {
 public:
  Optimizer() = default;
  Optimizer(Settings s, std::vector<Tensor> params);

  void step(const std::vector<Tensor>& grads, double lr);
  const Settings& settings() const { return s_; }
  const std::vector<Tensor>& params() const { return params_; }
  std::size_t steps() const { return steps_; }

  /// Moment buffers in a fixed order (for checkpointing).
  std::vector<Tensor> state_tensors() const;
  void load_state(const std::vector<Tensor>& tensors, std::size_t steps);

 private:
  Settings s_;
  std::vector<Tensor> params_;
  MomentumState mom_;
  AdamState adam_;
  std::size_t steps_ = 0;
};

}  // namespace xd::optim
