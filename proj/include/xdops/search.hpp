// SPDX-License-Identifier: Apache-2.0
//
// Backbone DAGs, their XD supernets, and the joint weight/architecture
// training loop.
#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "xdops/autodiff.hpp"
#include "xdops/optim.hpp"
#include "xdops/xd_op.hpp"

namespace xd::search {

enum class EdgeKind { Conv, AvgPool, Skip, Zero, Fno, MaxPool, Dense, Relu, Norm };
std::string edge_kind_name(EdgeKind k);
EdgeKind parse_edge_kind(const std::string& s);
bool is_searchable(EdgeKind k);

enum class Aggregation { Sum, Concat };

struct NodeSpec {
  std::size_t channels = 1;
  Shape spatial;  // empty for flat feature vectors
  Aggregation agg = Aggregation::Sum;
};

struct EdgeSpec {
  std::size_t u = 0, v = 0;
  EdgeKind kind = EdgeKind::Conv;
  std::size_t c_out = 0;  // 0: channels of node v
  std::size_t k = 3;      // conv/avgpool kernel; XD filter size for skip/zero
  std::size_t stride = 1;
  std::size_t dilation = 1;
  bool subsample = false;
  std::size_t modes = 1;
  std::size_t window = 2;  // maxpool
  bool circular = true;    // conv boundary in the backbone
  Tensor groups;           // optional 0/1 [c_out, c_in]
};

/// Node 0 is the input, the last node the output; edges must satisfy u < v.
struct BackboneSpec {
  std::string name;
  std::vector<NodeSpec> nodes;
  std::vector<EdgeSpec> edges;

  /// Throws std::invalid_argument on structural errors.
  void validate() const;
};

nlohmann::json to_json(const BackboneSpec& b);
BackboneSpec backbone_from_json(const nlohmann::json& j);

/// Three circular k x k convolutions with ReLU between, on [c_in, n].
BackboneSpec cnn1d(std::size_t n, std::size_t c_in, std::size_t c_out, std::size_t channels, std::size_t k = 3,
                   std::size_t layers = 3);
/// Four circular convolutions on [c_in, n, n] with skip edges around the
/// middle two, 2x2 max pooling, and a dense classifier.
BackboneSpec cnn2d_skip(std::size_t n, std::size_t c_in, std::size_t classes, std::size_t channels,
                        std::size_t k = 3);

struct SubstituteOptions {
  std::uint64_t seed = 0;
  /// Minimum (d_K, d_L, d_M); shallower constructions are padded with
  /// identity factors.
  std::array<std::size_t, 3> depth{0, 0, 0};
  bool freeze_b = false;
  bool freeze_C = false;
  /// XD filter size per axis; 0 keeps the backbone's kernel size.
  std::size_t max_kernel = 0;
  /// When false every edge keeps its XD warm start but the architecture
  /// group is empty (the frozen baseline).
  bool searchable = true;
};

nlohmann::json to_json(const SubstituteOptions& o);
SubstituteOptions substitute_options_from_json(const nlohmann::json& j);

struct SupernetEdge {
  EdgeSpec spec;
  bool searchable = false;
  XDOp op;               // searchable edges
  Tensor weight, bias;   // dense edges
  std::vector<Tensor> baseline;  // architecture tensors at substitution
};

struct Supernet {
  BackboneSpec backbone;
  SubstituteOptions options;
  std::vector<SupernetEdge> edges;

  std::vector<Tensor> arch_parameters() const;
  std::vector<Tensor> model_parameters() const;
  /// Every tensor that defines the network, in a fixed order.
  std::vector<Tensor> state_tensors() const;
};

/// Appends identity factors so every axis reaches the requested depths.
XDOp pad_depth(const XDOp& op, const std::array<std::size_t, 3>& depth);

Supernet substitute_backbone(const BackboneSpec& spec, const SubstituteOptions& opts);

/// Batched forward x [B, channels, spatial...] through the supernet.
Tensor forward(ad::Tape& tape, const Supernet& net, const Tensor& x);
Tensor forward(const Supernet& net, const Tensor& x);

/// Reference forward of the backbone itself from dense naive operations,
/// using the supernet's model weights. Zero-padded convolutions follow
/// their declared boundary.
Tensor backbone_forward(const Supernet& net, const Tensor& x);

// ---- tasks and training -------------------------------------------------------

enum class TaskKind { Operator, Classification };

struct Split {
  Tensor x;                         // [S, input...]
  Tensor y;                         // [S, target...] (operator tasks)
  std::vector<std::size_t> labels;  // classification tasks
  std::size_t size() const { return x.defined() ? x.size(0) : 0; }
  Split rows(std::size_t begin, std::size_t end) const;
  Split pick(const std::vector<std::size_t>& idx) const;
};

struct Task {
  TaskKind kind = TaskKind::Operator;
  Split train, valid, test;
};

enum class Schedule { Constant, Cosine, Step };
Schedule parse_schedule(const std::string& s);
std::string schedule_name(Schedule s);

struct TrainConfig {
  optim::Settings weight_opt{optim::Kind::Adam, 1e-3};
  Schedule schedule = Schedule::Cosine;
  std::size_t step_size = 50;  // Step schedule
  double gamma = 0.5;          // Step schedule
  optim::Settings arch_opt{optim::Kind::Adam, 1e-3};
  std::size_t warmup_epochs = 0;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  /// Only "f64" is supported.
  std::string precision = "f64";

  void validate() const;
};

/// Multiplier on the initial step size at `epoch`.
double schedule_factor(const TrainConfig& cfg, std::size_t epoch);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;  // train split, evaluated after the epoch's last step
  double valid_loss = 0.0;
  double metric = 0.0;  // valid relative L2 or accuracy
  double divergence_mean = 0.0;
  double wallclock_s = 0.0;
};
nlohmann::json to_json(const EpochRecord& r);

struct History {
  std::vector<EpochRecord> epochs;
  bool aborted = false;
  std::string abort_reason;
  std::string to_jsonl() const;
};

struct Metrics {
  double loss = 0.0;
  double metric = 0.0;  // mean relative L2 or accuracy
};

/// Optimizer pair and counters that persist across train() calls.
struct TrainerState {
  optim::Optimizer weights;
  optim::Optimizer arch;
  std::size_t epoch = 0;
};
TrainerState make_trainer(const Supernet& net, const TrainConfig& cfg);

using EpochCallback = std::function<void(const EpochRecord&, const Supernet&, const TrainerState&)>;

/// Runs epochs [state.epoch, cfg.epochs). Weights step every minibatch;
/// architecture steps on the same minibatch once the warmup has passed.
/// A non-finite loss restores the last completed epoch and sets aborted.
History train(Supernet& net, TrainerState& state, const Task& task, const TrainConfig& cfg,
              const EpochCallback& on_epoch = {});
History train(Supernet& net, const Task& task, const TrainConfig& cfg);

Metrics evaluate(const Supernet& net, const Split& split, TaskKind kind, std::size_t batch_size = 64);

struct Divergence {
  std::vector<double> per_edge;  // searchable edges in order
  double mean = 0.0;
};
/// ||theta - theta0|| / ||theta0|| per searchable edge (absolute when the
/// baseline norm is zero).
Divergence arch_divergence(const Supernet& net);

}  // namespace xd::search
