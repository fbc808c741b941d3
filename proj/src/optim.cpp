// SPDX-License-Identifier: Apache-2.0
#include "xdops/optim.hpp"

#include <cmath>
#include <stdexcept>

#include "xdops/error.hpp"

namespace xd::optim {
namespace {

void check_lists(const std::vector<Tensor>& params, const std::vector<Tensor>& grads) {
  if (params.size() != grads.size()) throw std::invalid_argument("optimizer: parameter and gradient counts differ");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i].shape() != grads[i].shape() || params[i].dtype() != grads[i].dtype())
      throw std::invalid_argument("optimizer: gradient " + std::to_string(i) + " does not match its parameter");
}

void check_lr(double lr) {
  if (!(lr >= 0.0)) throw std::invalid_argument("optimizer: step size must be non-negative");
}

template <class F>
void for_planes(Tensor& p, const Tensor& g, F&& f) {
  f(p.re(), g.re(), 0);
  if (p.is_complex()) f(p.im(), g.im(), 1);
}

std::vector<Tensor> zeros_like(const std::vector<Tensor>& ts) {
  std::vector<Tensor> out;
  for (const auto& t : ts) out.push_back(Tensor::zeros(t.shape(), t.dtype()));
  return out;
}

}  // namespace

Kind parse_kind(const std::string& name) {
  if (name == "sgd") return Kind::Sgd;
  if (name == "momentum") return Kind::Momentum;
  if (name == "adam") return Kind::Adam;
  throw std::invalid_argument("unknown optimizer '" + name + "' (expected sgd, momentum or adam)");
}

std::string kind_name(Kind k) {
  switch (k) {
    case Kind::Sgd:
      return "sgd";
    case Kind::Momentum:
      return "momentum";
    case Kind::Adam:
      return "adam";
  }
  return "sgd";
}

void check_finite(const std::vector<Tensor>& grads) {
  for (std::size_t i = 0; i < grads.size(); ++i) {
    for (double v : grads[i].re())
      if (!std::isfinite(v)) throw NumericError("optimizer: non-finite gradient in tensor " + std::to_string(i));
    for (double v : grads[i].im())
      if (!std::isfinite(v)) throw NumericError("optimizer: non-finite gradient in tensor " + std::to_string(i));
  }
}

void sgd_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, double lr) {
  check_lists(params, grads);
  check_lr(lr);
  check_finite(grads);
  for (std::size_t k = 0; k < params.size(); ++k)
    for_planes(params[k], grads[k], [lr](auto p, auto g, int) {
      for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * g[i];
    });
}

void momentum_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, double lr, double mu,
                   MomentumState& state) {
  check_lists(params, grads);
  check_lr(lr);
  check_finite(grads);
  if (state.velocity.empty()) state.velocity = zeros_like(params);
  check_lists(params, state.velocity);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& v = state.velocity[k];
    for_planes(params[k], grads[k], [&](auto p, auto g, int plane) {
      auto vv = plane ? v.im() : v.re();
      for (std::size_t i = 0; i < p.size(); ++i) {
        vv[i] = mu * vv[i] + g[i];
        p[i] -= lr * vv[i];
      }
    });
  }
}

void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, double lr, double beta1, double beta2,
               double eps, AdamState& state) {
  check_lists(params, grads);
  check_lr(lr);
  check_finite(grads);
  if (state.m.empty()) {
    state.m = zeros_like(params);
    state.v = zeros_like(params);
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& m = state.m[k];
    Tensor& v = state.v[k];
    for_planes(params[k], grads[k], [&](auto p, auto g, int plane) {
      auto mm = plane ? m.im() : m.re();
      auto vv = plane ? v.im() : v.re();
      for (std::size_t i = 0; i < p.size(); ++i) {
        mm[i] = beta1 * mm[i] + (1.0 - beta1) * g[i];
        vv[i] = beta2 * vv[i] + (1.0 - beta2) * g[i] * g[i];
        p[i] -= lr * (mm[i] / c1) / (std::sqrt(vv[i] / c2) + eps);
      }
    });
  }
}

Optimizer::Optimizer(Settings s, std::vector<Tensor> params) : s_(s), params_(std::move(params)) {}

void Optimizer::step(const std::vector<Tensor>& grads, double lr) {
  std::vector<Tensor> g = grads;
  if (s_.weight_decay != 0.0) {
    check_lists(params_, grads);
    for (std::size_t k = 0; k < g.size(); ++k) {
      g[k] = grads[k].clone();
      for_planes(g[k], params_[k], [this](auto gp, auto pp, int) {
        for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += s_.weight_decay * pp[i];
      });
    }
  }
  switch (s_.kind) {
    case Kind::Sgd:
      sgd_step(params_, g, lr);
      break;
    case Kind::Momentum:
      momentum_step(params_, g, lr, s_.momentum, mom_);
      break;
    case Kind::Adam:
      adam_step(params_, g, lr, s_.beta1, s_.beta2, s_.eps, adam_);
      break;
  }
  ++steps_;
}

std::vector<Tensor> Optimizer::state_tensors() const {
  switch (s_.kind) {
    case Kind::Momentum:
      return mom_.velocity;
    case Kind::Adam: {
      std::vector<Tensor> out = adam_.m;
      out.insert(out.end(), adam_.v.begin(), adam_.v.end());
      return out;
    }
    default:
      return {};
  }
}

void Optimizer::load_state(const std::vector<Tensor>& tensors, std::size_t steps) {
  steps_ = steps;
  switch (s_.kind) {
    case Kind::Momentum:
      mom_.velocity = tensors;
      break;
    case Kind::Adam: {
      const std::size_t h = tensors.size() / 2;
      adam_.m.assign(tensors.begin(), tensors.begin() + static_cast<std::ptrdiff_t>(h));
      adam_.v.assign(tensors.begin() + static_cast<std::ptrdiff_t>(h), tensors.end());
      adam_.t = steps;
      break;
    }
    default:
      break;
  }
}

}  // namespace xd::optim
