// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

#include "xdops/error.hpp"
#include "xdops/search.hpp"

namespace xd::search {
namespace {

Tensor take_rows(const Tensor& t, const std::vector<std::size_t>& idx) {
  if (!t.defined()) return t;
  Shape s = t.shape();
  const std::size_t per = t.numel() / std::max<std::size_t>(s[0], 1);
  s[0] = idx.size();
  std::vector<double> v;
  v.reserve(idx.size() * per);
  for (std::size_t i : idx) {
    if (i >= t.size(0)) throw std::out_of_range("split: row out of range");
    v.insert(v.end(), t.re().begin() + i * per, t.re().begin() + (i + 1) * per);
  }
  return Tensor::real(s, std::move(v));
}

double l2(std::span<const double> a) {
  double s = 0.0;
  for (double v : a) s += v * v;
  return std::sqrt(s);
}

struct Snapshot {
  std::vector<Tensor> values;
};

Snapshot snapshot(const Supernet& net) {
  Snapshot s;
  for (const auto& t : net.state_tensors()) s.values.push_back(t.clone());
  return s;
}

void restore(const Supernet& net, const Snapshot& s) {
  auto ts = net.state_tensors();
  for (std::size_t i = 0; i < ts.size(); ++i) ts[i].copy_from(s.values[i]);
}

std::vector<Tensor> clone_all(const std::vector<Tensor>& ts) {
  std::vector<Tensor> out;
  for (const auto& t : ts) out.push_back(t.clone());
  return out;
}

std::vector<Tensor> grads_of(const ad::Gradients& g, const std::vector<Tensor>& ps) {
  std::vector<Tensor> out;
  out.reserve(ps.size());
  for (const auto& p : ps) out.push_back(g.of(p));
  return out;
}

}  // namespace

Split Split::rows(std::size_t begin, std::size_t end) const {
  std::vector<std::size_t> idx;
  for (std::size_t i = begin; i < end; ++i) idx.push_back(i);
  return pick(idx);
}

Split Split::pick(const std::vector<std::size_t>& idx) const {
  Split s;
  s.x = take_rows(x, idx);
  s.y = take_rows(y, idx);
  for (std::size_t i : idx)
    if (!labels.empty()) s.labels.push_back(labels.at(i));
  return s;
}

Schedule parse_schedule(const std::string& s) {
  if (s == "constant") return Schedule::Constant;
  if (s == "cosine") return Schedule::Cosine;
  if (s == "step") return Schedule::Step;
  throw std::invalid_argument("unknown schedule '" + s + "'");
}

std::string schedule_name(Schedule s) {
  switch (s) {
    case Schedule::Constant: return "constant";
    case Schedule::Cosine: return "cosine";
    case Schedule::Step: return "step";
  }
  return "constant";
}

void TrainConfig::validate() const {
  if (precision != "f64") throw Unsupported("train: precision '" + precision + "' is not supported (use f64)");
  if (warmup_epochs > epochs) throw std::invalid_argument("train: warmup_epochs exceeds epochs");
  if (batch_size == 0) throw std::invalid_argument("train: batch_size must be positive");
  for (double lr : {weight_opt.lr, arch_opt.lr})
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw std::invalid_argument("train: step sizes must be finite and >= 0");
  if (schedule == Schedule::Step && step_size == 0) throw std::invalid_argument("train: step_size must be positive");
}

double schedule_factor(const TrainConfig& cfg, std::size_t epoch) {
  switch (cfg.schedule) {
    case Schedule::Constant: return 1.0;
    case Schedule::Cosine:
      return 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) /
                                   static_cast<double>(std::max<std::size_t>(cfg.epochs, 1))));
    case Schedule::Step: return std::pow(cfg.gamma, static_cast<double>(epoch / cfg.step_size));
  }
  return 1.0;
}

nlohmann::json to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch},           {"train_loss", r.train_loss},
          {"valid_loss", r.valid_loss}, {"metric", r.metric},
          {"divergence_mean", r.divergence_mean}, {"wallclock_s", r.wallclock_s}};
}

std::string History::to_jsonl() const {
  std::string out;
  for (const auto& r : epochs) out += to_json(r).dump() + "\n";
  if (aborted) out += nlohmann::json{{"aborted", true}, {"reason", abort_reason}}.dump() + "\n";
  return out;
}

TrainerState make_trainer(const Supernet& net, const TrainConfig& cfg) {
  cfg.validate();
  TrainerState s;
  s.weights = optim::Optimizer(cfg.weight_opt, net.model_parameters());
  s.arch = optim::Optimizer(cfg.arch_opt, net.arch_parameters());
  return s;
}

Metrics evaluate(const Supernet& net, const Split& split, TaskKind kind, std::size_t batch_size) {
  Metrics m;
  const std::size_t S = split.size();
  if (S == 0) return m;
  batch_size = std::max<std::size_t>(batch_size, 1);
  double loss = 0.0, metric = 0.0;
  for (std::size_t b0 = 0; b0 < S; b0 += batch_size) {
    const Split b = split.rows(b0, std::min(S, b0 + batch_size));
    const Tensor out = forward(net, b.x);
    const std::size_t n = b.size(), per = out.numel() / n;
    for (std::size_t i = 0; i < n; ++i) {
      const auto o = out.re().subspan(i * per, per);
      if (kind == TaskKind::Operator) {
        const auto y = b.y.re().subspan(i * per, per);
        double d = 0.0;
        for (std::size_t j = 0; j < per; ++j) d += (o[j] - y[j]) * (o[j] - y[j]);
        const double ny = l2(y);
        const double r = std::sqrt(d) / (ny > 0.0 ? ny : 1.0);
        loss += r;
        metric += r;
      } else {
        const double mx = *std::max_element(o.begin(), o.end());
        double z = 0.0;
        for (double v : o) z += std::exp(v - mx);
        const std::size_t label = b.labels[i];
        loss += std::log(z) + mx - o[label];
        const auto best = static_cast<std::size_t>(std::max_element(o.begin(), o.end()) - o.begin());
        metric += best == label ? 1.0 : 0.0;
      }
    }
  }
  m.loss = loss / static_cast<double>(S);
  m.metric = metric / static_cast<double>(S);
  return m;
}

Divergence arch_divergence(const Supernet& net) {
  Divergence d;
  for (const auto& e : net.edges) {
    if (!e.searchable) continue;
    const auto now = e.op.arch_parameters();
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < now.size() && i < e.baseline.size(); ++i) {
      const auto a = now[i].re(), a0 = e.baseline[i].re();
      for (std::size_t j = 0; j < a.size(); ++j) {
        num += (a[j] - a0[j]) * (a[j] - a0[j]);
        den += a0[j] * a0[j];
      }
      if (now[i].is_complex()) {
        const auto b = now[i].im(), b0 = e.baseline[i].im();
        for (std::size_t j = 0; j < b.size(); ++j) {
          num += (b[j] - b0[j]) * (b[j] - b0[j]);
          den += b0[j] * b0[j];
        }
      }
    }
    d.per_edge.push_back(den > 0.0 ? std::sqrt(num / den) : std::sqrt(num));
  }
  for (double v : d.per_edge) d.mean += v;
  if (!d.per_edge.empty()) d.mean /= static_cast<double>(d.per_edge.size());
  return d;
}

History train(Supernet& net, TrainerState& state, const Task& task, const TrainConfig& cfg,
              const EpochCallback& on_epoch) {
  cfg.validate();
  History h;
  const std::size_t S = task.train.size();
  const auto model = net.model_parameters();
  const auto arch = net.arch_parameters();
  const bool classify = task.kind == TaskKind::Classification;
  const Split& valid = task.valid.size() ? task.valid : task.test;

  for (std::size_t epoch = state.epoch; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const Snapshot good = snapshot(net);
    const auto good_w = clone_all(state.weights.state_tensors());
    const auto good_a = clone_all(state.arch.state_tensors());
    const std::size_t good_ws = state.weights.steps(), good_as = state.arch.steps();

    std::vector<std::size_t> order(S);
    for (std::size_t i = 0; i < S; ++i) order[i] = i;
    std::mt19937_64 rng(cfg.seed * 0x9E3779B97F4A7C15ull + epoch);
    std::shuffle(order.begin(), order.end(), rng);

    const double f = schedule_factor(cfg, epoch);
    const bool arch_step = epoch >= cfg.warmup_epochs && !arch.empty();
    try {
      for (std::size_t b0 = 0; b0 < S; b0 += cfg.batch_size) {
        const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(b0),
                                           order.begin() + static_cast<std::ptrdiff_t>(std::min(S, b0 + cfg.batch_size)));
        const Split b = task.train.pick(idx);
        ad::Tape tape;
        const Tensor out = forward(tape, net, b.x);
        const Tensor loss = classify ? tape.softmax_ce(out, b.labels) : tape.rel_l2(out, b.y);
        const double lv = loss.item();
        if (!std::isfinite(lv)) throw NumericError("non-finite loss at epoch " + std::to_string(epoch));
        const ad::Gradients g = tape.backward(loss);
        const auto gw = grads_of(g, model);
        std::vector<Tensor> ga;
        if (arch_step) ga = grads_of(g, arch);
        optim::check_finite(gw);
        if (arch_step) optim::check_finite(ga);
        state.weights.step(gw, cfg.weight_opt.lr * f);
        if (arch_step) state.arch.step(ga, cfg.arch_opt.lr * f);
      }
    } catch (const NumericError& err) {
      restore(net, good);
      state.weights.load_state(good_w, good_ws);
      state.arch.load_state(good_a, good_as);
      h.aborted = true;
      h.abort_reason = err.what();
      return h;
    }

    EpochRecord r;
    r.epoch = epoch;
    r.train_loss = evaluate(net, task.train, task.kind).loss;
    const Metrics vm = evaluate(net, valid, task.kind);
    r.valid_loss = vm.loss;
    r.metric = vm.metric;
    r.divergence_mean = arch_divergence(net).mean;
    r.wallclock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    h.epochs.push_back(r);
    state.epoch = epoch + 1;
    if (on_epoch) on_epoch(r, net, state);
  }
  return h;
}

History train(Supernet& net, const Task& task, const TrainConfig& cfg) {
  TrainerState s = make_trainer(net, cfg);
  return train(net, s, task, cfg);
}

}  // namespace xd::search
