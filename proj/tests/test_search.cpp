#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>
#include <set>

#include "xdops/error.hpp"
#include "xdops/search.hpp"

using namespace xd;
using namespace xd::search;

namespace {

Tensor random_real(const Shape& s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor t = Tensor::zeros(s);
  for (double& v : t.re()) v = u(rng);
  return t;
}

double rel_err(const Tensor& a, const Tensor& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    num += (a.re()[i] - b.re()[i]) * (a.re()[i] - b.re()[i]);
    den += b.re()[i] * b.re()[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

std::vector<double> values(const Tensor& t) { return {t.re().begin(), t.re().end()}; }

std::vector<std::vector<double>> state_values(const Supernet& net) {
  std::vector<std::vector<double>> out;
  for (const auto& t : net.state_tensors()) {
    out.push_back(values(t));
    if (t.is_complex()) out.push_back({t.im().begin(), t.im().end()});
  }
  return out;
}

Task regression_task(std::size_t n, std::size_t rows, std::uint64_t seed) {
  Task t;
  t.kind = TaskKind::Operator;
  Tensor x = random_real({rows, 1, n}, seed);
  Tensor y = Tensor::zeros({rows, 1, n});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < n; ++i)
      y.re()[r * n + i] = x.re()[r * n + (i + n - 2) % n] - 0.5 * x.re()[r * n + (i + 1) % n];
  t.train.x = x;
  t.train.y = y;
  t.test = t.train.rows(0, rows / 2);
  return t;
}

TrainConfig small_config(std::size_t epochs) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 4;
  c.weight_opt.lr = 1e-2;
  c.arch_opt.lr = 1e-2;
  c.seed = 3;
  return c;
}

}  // namespace

// ---- warm start ------------------------------------------------------------------

TEST(SearchWarmStart, Cnn1dMatchesBackbone) {
  const Supernet net = substitute_backbone(cnn1d(16, 2, 1, 4), {});
  for (std::uint64_t s = 0; s < 20; ++s) {
    Tensor x = random_real({1, 2, 16}, 100 + s);
    EXPECT_LE(rel_err(forward(net, x), backbone_forward(net, x)), 1e-6);
  }
}

TEST(SearchWarmStart, Cnn2dSkipMatchesBackbone) {
  SubstituteOptions o;
  o.seed = 5;
  const Supernet net = substitute_backbone(cnn2d_skip(8, 1, 3, 3), o);
  for (std::uint64_t s = 0; s < 20; ++s) {
    Tensor x = random_real({1, 1, 8, 8}, 200 + s);
    EXPECT_LE(rel_err(forward(net, x), backbone_forward(net, x)), 1e-6);
  }
}

TEST(SearchWarmStart, DepthPaddingKeepsOutputs) {
  const BackboneSpec bb = cnn1d(8, 1, 1, 2);
  SubstituteOptions deep;
  deep.depth = {3, 3, 3};
  const Supernet a = substitute_backbone(bb, {}), b = substitute_backbone(bb, deep);
  Tensor x = random_real({3, 1, 8}, 7);
  EXPECT_LE(rel_err(forward(b, x), forward(a, x)), 1e-10);
  for (const auto& e : b.edges)
    if (e.searchable) EXPECT_EQ(e.op.params.depth(), (std::array<std::size_t, 3>{3, 3, 3}));
}

TEST(SearchWarmStart, MaxKernelStartsAtBackbone) {
  const BackboneSpec bb = cnn1d(16, 1, 1, 2);
  SubstituteOptions wide;
  wide.max_kernel = 5;
  const Supernet a = substitute_backbone(bb, {}), b = substitute_backbone(bb, wide);
  for (std::size_t i = 0; i < a.edges.size(); ++i) {
    if (!a.edges[i].searchable) continue;
    const Tensor& wa = a.edges[i].op.weight;
    Tensor wb = b.edges[i].op.weight;
    ASSERT_EQ(wb.numel(), wa.numel() / 3 * 5);
    for (std::size_t f = 0; f < wb.numel(); ++f) {
      if (f % 5 >= 3) EXPECT_EQ(wb.re()[f], 0.0);
      else wb.re()[f] = wa.re()[f / 5 * 3 + f % 5];
    }
  }
  Tensor x = random_real({2, 1, 16}, 8);
  EXPECT_LE(rel_err(forward(b, x), forward(a, x)), 1e-10);
}

TEST(SearchWarmStart, ZeroAndAvgPoolEdges) {
  BackboneSpec b;
  b.nodes = {{1, {8}}, {1, {8}}};
  EdgeSpec pool;
  pool.v = 1;
  pool.kind = EdgeKind::AvgPool;
  pool.k = 3;
  EdgeSpec zero = pool;
  zero.kind = EdgeKind::Zero;
  b.edges = {pool, zero};
  const Supernet net = substitute_backbone(b, {});
  Tensor x = random_real({1, 1, 8}, 9);
  const Tensor y = forward(net, x);
  for (std::size_t t = 0; t < 8; ++t) {
    double want = 0.0;
    for (std::size_t j = 0; j < 3; ++j) want += x.re()[(t + 8 - j) % 8] / 3.0;
    EXPECT_NEAR(y.re()[t], want, 1e-10);
  }
  EXPECT_LE(rel_err(y, backbone_forward(net, x)), 1e-10);
}

// ---- parameter groups -------------------------------------------------------------

TEST(SearchGroups, ArchAndModelAreDisjoint) {
  const Supernet net = substitute_backbone(cnn2d_skip(8, 1, 2, 2), {});
  std::set<const void*> arch;
  for (const auto& t : net.arch_parameters()) arch.insert(t.id());
  EXPECT_FALSE(arch.empty());
  for (const auto& t : net.model_parameters()) EXPECT_EQ(arch.count(t.id()), 0u);
}

TEST(SearchGroups, FrozenBaselineHasNoArchGroup) {
  SubstituteOptions o;
  o.searchable = false;
  const Supernet net = substitute_backbone(cnn1d(8, 1, 1, 2), o);
  EXPECT_TRUE(net.arch_parameters().empty());
  EXPECT_FALSE(net.model_parameters().empty());
}

TEST(SearchGroups, NormIsUnsupported) {
  BackboneSpec b;
  b.nodes = {{1, {8}}, {1, {8}}};
  EdgeSpec e;
  e.v = 1;
  e.kind = EdgeKind::Norm;
  b.edges = {e};
  EXPECT_THROW(substitute_backbone(b, {}), Unsupported);
}

// ---- training -------------------------------------------------------------------------

TEST(SearchTrain, WarmupForAllEpochsLeavesArchitecture) {
  Supernet net = substitute_backbone(cnn1d(8, 1, 1, 2), {});
  TrainConfig c = small_config(2);
  c.warmup_epochs = 2;
  const History h = train(net, regression_task(8, 8, 1), c);
  ASSERT_EQ(h.epochs.size(), 2u);
  for (const auto& r : h.epochs) EXPECT_EQ(r.divergence_mean, 0.0);
}

TEST(SearchTrain, ArchStepsMoveArchitecture) {
  Supernet net = substitute_backbone(cnn1d(8, 1, 1, 2), {});
  const History h = train(net, regression_task(8, 8, 1), small_config(2));
  EXPECT_GT(h.epochs.back().divergence_mean, 0.0);
}

TEST(SearchTrain, ZeroArchRateMatchesFrozenRunBitwise) {
  const BackboneSpec bb = cnn1d(8, 1, 1, 2);
  const Task task = regression_task(8, 8, 2);
  SubstituteOptions frozen;
  frozen.searchable = false;
  Supernet a = substitute_backbone(bb, {}), b = substitute_backbone(bb, frozen);
  TrainConfig c = small_config(3);
  c.arch_opt.lr = 0.0;
  train(a, task, c);
  train(b, task, c);
  const Metrics ma = evaluate(a, task.test, task.kind), mb = evaluate(b, task.test, task.kind);
  EXPECT_EQ(ma.loss, mb.loss);
  EXPECT_EQ(ma.metric, mb.metric);
}

TEST(SearchTrain, FixedSeedReproducesHistory) {
  const BackboneSpec bb = cnn1d(8, 1, 1, 2);
  const Task task = regression_task(8, 8, 3);
  Supernet a = substitute_backbone(bb, {}), b = substitute_backbone(bb, {});
  const History ha = train(a, task, small_config(2)), hb = train(b, task, small_config(2));
  ASSERT_EQ(ha.epochs.size(), hb.epochs.size());
  for (std::size_t i = 0; i < ha.epochs.size(); ++i) {
    EXPECT_EQ(ha.epochs[i].train_loss, hb.epochs[i].train_loss);
    EXPECT_EQ(ha.epochs[i].valid_loss, hb.epochs[i].valid_loss);
    EXPECT_EQ(ha.epochs[i].divergence_mean, hb.epochs[i].divergence_mean);
  }
  EXPECT_EQ(state_values(a), state_values(b));
}

TEST(SearchTrain, ResumedRunMatchesStraightRun) {
  const BackboneSpec bb = cnn1d(8, 1, 1, 2);
  const Task task = regression_task(8, 8, 4);
  Supernet a = substitute_backbone(bb, {}), b = substitute_backbone(bb, {});
  const TrainConfig c = small_config(3);
  train(a, task, c);
  TrainerState s = make_trainer(b, c);
  TrainConfig first = c;
  first.epochs = 1;
  train(b, s, task, first);
  train(b, s, task, c);
  EXPECT_EQ(state_values(a), state_values(b));
}

TEST(SearchTrain, NonFiniteLossAbortsAndRestores) {
  Supernet net = substitute_backbone(cnn1d(8, 1, 1, 2), {});
  const auto before = state_values(net);
  Task task = regression_task(8, 8, 5);
  task.train.x.re()[7 * 8] = std::numeric_limits<double>::quiet_NaN();
  const History h = train(net, task, small_config(2));
  EXPECT_TRUE(h.aborted);
  EXPECT_TRUE(h.epochs.empty());
  EXPECT_EQ(state_values(net), before);
  EXPECT_NE(h.to_jsonl().find("\"aborted\":true"), std::string::npos);
}

TEST(SearchTrain, RejectsBadConfig) {
  TrainConfig c = small_config(2);
  c.precision = "f32";
  EXPECT_THROW(c.validate(), Unsupported);
  c = small_config(2);
  c.warmup_epochs = 3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = small_config(2);
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = small_config(2);
  c.arch_opt.lr = -1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(SearchTrain, ScheduleFactors) {
  TrainConfig c = small_config(10);
  c.schedule = Schedule::Cosine;
  EXPECT_DOUBLE_EQ(schedule_factor(c, 0), 1.0);
  EXPECT_NEAR(schedule_factor(c, 5), 0.5, 1e-15);
  c.schedule = Schedule::Step;
  c.step_size = 3;
  c.gamma = 0.1;
  EXPECT_NEAR(schedule_factor(c, 7), 0.01, 1e-15);
  EXPECT_EQ(parse_schedule(schedule_name(Schedule::Step)), Schedule::Step);
  EXPECT_THROW(parse_schedule("linear"), std::invalid_argument);
}

// ---- evaluation ------------------------------------------------------------------------

TEST(SearchEvaluate, RelativeErrorOfSkipAndZeroNets) {
  BackboneSpec b;
  b.nodes = {{1, {8}}, {1, {8}}};
  EdgeSpec e;
  e.v = 1;
  e.kind = EdgeKind::Skip;
  b.edges = {e};
  Split s;
  s.x = random_real({4, 1, 8}, 11);
  s.y = s.x.clone();
  EXPECT_NEAR(evaluate(substitute_backbone(b, {}), s, TaskKind::Operator).metric, 0.0, 1e-15);
  b.edges[0].kind = EdgeKind::Zero;
  EXPECT_NEAR(evaluate(substitute_backbone(b, {}), s, TaskKind::Operator).metric, 1.0, 1e-15);
}

TEST(SearchEvaluate, ClassificationAccuracy) {
  BackboneSpec b;
  b.nodes = {{2, {}}, {2, {}}};
  EdgeSpec e;
  e.v = 1;
  e.kind = EdgeKind::Dense;
  b.edges = {e};
  Supernet net = substitute_backbone(b, {});
  Tensor w = net.edges[0].weight;
  for (std::size_t i = 0; i < w.numel(); ++i) w.re()[i] = i % 3 == 0 ? 1.0 : 0.0;
  Split s;
  s.x = Tensor::real({2, 2}, {3.0, 1.0, 1.0, 3.0});
  s.labels = {0, 1};
  const Metrics m = evaluate(net, s, TaskKind::Classification);
  EXPECT_EQ(m.metric, 1.0);
  EXPECT_NEAR(m.loss, std::log(1.0 + std::exp(-2.0)), 1e-12);
}

// ---- backbone specs ---------------------------------------------------------------------

TEST(SearchBackbone, JsonRoundTrip) {
  BackboneSpec b = cnn2d_skip(8, 1, 2, 3);
  b.edges[0].dilation = 2;
  b.edges[2].groups = Tensor::real({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const nlohmann::json j = to_json(b);
  EXPECT_EQ(to_json(backbone_from_json(j)), j);
  SubstituteOptions o;
  o.depth = {1, 2, 3};
  o.freeze_C = true;
  EXPECT_EQ(to_json(substitute_options_from_json(to_json(o))), to_json(o));
}

TEST(SearchBackbone, ValidationErrors) {
  BackboneSpec b = cnn1d(8, 1, 1, 2);
  b.edges[0].v = 0;
  EXPECT_THROW(b.validate(), std::invalid_argument);
  b = cnn1d(8, 1, 1, 2);
  b.nodes[1].channels = 5;
  EXPECT_THROW(b.validate(), std::invalid_argument);
  b = cnn1d(8, 1, 1, 2);
  b.nodes.push_back({1, {8}});
  EXPECT_THROW(b.validate(), std::invalid_argument);
  b = cnn1d(8, 1, 1, 2);
  b.edges[0].stride = 2;
  b.edges[0].subsample = true;
  EXPECT_THROW(b.validate(), std::invalid_argument);
  EXPECT_THROW(parse_edge_kind("attention"), std::invalid_argument);
  EXPECT_THROW(backbone_from_json(nlohmann::json{{"nodes", {{{"channels", 1}, {"spatial", {8}}, {"agg", "max"}}}},
                                                 {"edges", nlohmann::json::array()}}),
               std::invalid_argument);
}
