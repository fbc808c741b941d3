// SPDX-License-Identifier: Apache-2.0
#include "cli.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "bench.hpp"
#include "xdops/checkpoint.hpp"
#include "xdops/config.hpp"
#include "xdops/data.hpp"
#include "xdops/error.hpp"
#include "xdops/kaleidoscope.hpp"
#include "xdops/suite.hpp"

namespace xd::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

/// Thrown by verbs for a clean exit with a message on stderr.
struct Failure {
  int code;
  std::string message;
};

[[noreturn]] void invalid(const std::string& msg) { throw Failure{kInvalid, msg}; }

void write_file(const std::string& path, const std::string& text) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Failure{kRuntime, "cannot write " + path};
  f << text;
}

Shape node0_shape(const search::BackboneSpec& b) {
  Shape s{b.nodes.at(0).channels};
  s.insert(s.end(), b.nodes[0].spatial.begin(), b.nodes[0].spatial.end());
  return s;
}

void check_input_shape(const search::BackboneSpec& b, const Shape& input, const std::string& what) {
  if (node0_shape(b) != input)
    invalid(what + ": input_shape " + shape_str(input) + " does not match the backbone input " +
            shape_str(node0_shape(b)));
}

// ---- verify -----------------------------------------------------------------

struct VerifyArgs {
  std::vector<std::size_t> sizes{8, 16, 32};
  std::uint64_t seed = 0;
  std::size_t trials = 3;
  std::string report;
  bool fault = false;
};

int cmd_verify(const VerifyArgs& a, std::ostream& out) {
  suite::Options o;
  o.sizes = a.sizes;
  o.seed = a.seed;
  o.trials = a.trials;
  for (auto n : o.sizes)
    if (!kal::is_power_of_two(n) || n < 4) invalid("verify: sizes must be powers of two >= 4");
  kal::detail::set_twiddle_fault(a.fault);
  std::vector<suite::Claim> claims;
  try {
    claims = suite::run_all(o);
  } catch (...) {
    kal::detail::set_twiddle_fault(false);
    throw;
  }
  kal::detail::set_twiddle_fault(false);

  std::map<std::string, std::pair<std::size_t, std::size_t>> groups;
  std::ostringstream jsonl;
  for (const auto& c : claims) {
    auto& g = groups[c.group + "/" + c.name];
    ++g.first;
    g.second += !c.pass;
    jsonl << c.to_json().dump() << "\n";
  }
  const auto s = suite::summarize(claims);
  jsonl << json{{"summary", true}, {"claims", s.total}, {"failed", s.failed}, {"worst_ratio", s.worst_ratio}}.dump()
        << "\n";
  if (!a.report.empty()) write_file(a.report, jsonl.str());

  for (const auto& [name, g] : groups)
    out << std::left << std::setw(40) << name << g.first - g.second << "/" << g.first << " pass\n";
  out << "verify: " << s.total << " claims, " << s.failed << " failed\n";
  return s.failed ? kInvalid : kOk;
}

// ---- gen --------------------------------------------------------------------

struct GenArgs {
  std::string task;
  std::size_t n = 64;
  std::size_t samples = 0;
  std::uint64_t seed = 0;
  std::string out;
  bool identity = false;
};

int cmd_gen(const GenArgs& a, std::ostream& out) {
  data::GenSpec g;
  try {
    g.task = data::parse_task(a.task);
  } catch (const std::invalid_argument& e) {
    invalid(std::string("gen: ") + e.what());
  }
  g.n = a.n;
  g.samples = a.samples;
  g.seed = a.seed;
  g.permute = !a.identity;
  data::Dataset d;
  try {
    d = data::generate(g);
  } catch (const std::invalid_argument& e) {
    invalid(e.what());
  }
  const fs::path p(a.out);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  data::save(d, a.out);
  out << "gen: wrote " << d.n_samples() << " samples to " << a.out << " (blob " << data::blob_path(a.out) << ")\n";
  return kOk;
}

// ---- train ------------------------------------------------------------------

bool better(search::TaskKind kind, double metric, double best) {
  return kind == search::TaskKind::Classification ? metric > best : metric < best;
}

int cmd_train(const std::string& config_path, std::ostream& out, std::ostream& err) {
  cfg::RunConfig rc;
  search::Task task;
  search::Supernet net;
  try {
    rc = cfg::load_run_config(config_path);
    const search::BackboneSpec bb = cfg::build_backbone(rc);
    net = search::substitute_backbone(bb, rc.xd);
    task = cfg::load_task(rc);
    Shape input = task.train.x.shape();
    input.erase(input.begin());
    check_input_shape(bb, input, "train: " + rc.task.data);
  } catch (const std::invalid_argument& e) {
    invalid(e.what());
  }

  fs::create_directories(rc.output_dir);
  const fs::path dir(rc.output_dir);
  const json run = cfg::to_json(rc);
  write_file((dir / "config.json").string(), run.dump(2) + "\n");

  search::TrainerState state = search::make_trainer(net, rc.train);
  search::History so_far;
  std::ofstream hist((dir / "history.jsonl").string());
  double best = task.kind == search::TaskKind::Classification ? -1.0 : INFINITY;
  const auto cb = [&](const search::EpochRecord& r, const search::Supernet& n, const search::TrainerState& s) {
    so_far.epochs.push_back(r);
    hist << search::to_json(r).dump() << "\n" << std::flush;
    const json meta = {{"epoch", r.epoch}, {"metric", r.metric}, {"tag", "last"}};
    ckpt::save((dir / "last.xdck").string(), n, s, rc.train, so_far, run, meta);
    if (better(task.kind, r.metric, best)) {
      best = r.metric;
      json m = meta;
      m["tag"] = "best";
      ckpt::save((dir / "best.xdck").string(), n, s, rc.train, so_far, run, m);
    }
  };
  const search::History h = search::train(net, state, task, rc.train, cb);
  if (h.epochs.empty())
    ckpt::save((dir / "last.xdck").string(), net, state, rc.train, h, run, {{"epoch", 0}, {"tag", "last"}});
  if (h.aborted) {
    hist << json{{"aborted", true}, {"reason", h.abort_reason}}.dump() << "\n";
    err << "train: aborted: " << h.abort_reason << " (last good checkpoint kept in " << rc.output_dir << ")\n";
    return kRuntime;
  }

  json final = {{"epochs", h.epochs.size()}};
  if (!h.epochs.empty()) {
    const auto& r = h.epochs.back();
    final["train_loss"] = r.train_loss;
    final["valid_loss"] = r.valid_loss;
    final["valid_metric"] = r.metric;
    final["divergence_mean"] = r.divergence_mean;
  }
  if (task.test.size()) final["test_metric"] = search::evaluate(net, task.test, task.kind).metric;
  out << final.dump() << "\n";
  return kOk;
}

// ---- eval -------------------------------------------------------------------

int cmd_eval(const std::string& checkpoint, const std::string& data_path, const std::string& split,
             std::ostream& out) {
  ckpt::Checkpoint c;
  data::Dataset d;
  try {
    c = ckpt::load(checkpoint);
    d = data::load(data_path);
  } catch (const std::invalid_argument& e) {
    invalid(e.what());
  }
  check_input_shape(c.net.backbone, d.input_shape, "eval: " + data_path);

  std::size_t begin = 0, end = d.n_samples();
  if (split != "all") {
    if (c.run.empty()) invalid("eval: checkpoint has no run config; use --split all");
    const cfg::RunConfig rc = cfg::parse_run_config(c.run);
    const auto& t = rc.task;
    if (t.train + t.valid + t.test == 0) {
      if (split != "train") invalid("eval: the run had no held-out splits");
    } else if (split == "train") {
      end = t.train;
    } else if (split == "valid") {
      begin = t.train, end = t.train + t.valid;
    } else {
      begin = t.train + t.valid, end = t.train + t.valid + t.test;
    }
    if (end > d.n_samples()) invalid("eval: split '" + split + "' needs " + std::to_string(end) + " samples");
  }
  const search::Metrics m = search::evaluate(c.net, d.split(begin, end), d.kind);
  const bool cls = d.kind == search::TaskKind::Classification;
  out << json{{"split", split},
              {"samples", end - begin},
              {"loss", m.loss},
              {"metric", m.metric},
              {"metric_name", cls ? "accuracy" : "relative_l2"}}
             .dump()
      << "\n";
  return kOk;
}

// ---- bench ------------------------------------------------------------------

int cmd_bench(const bench::Options& o, const std::string& csv, std::ostream& out) {
  for (auto d : o.depths)
    if (d == 0) invalid("bench: depths must be positive");
  std::vector<bench::Row> rows;
  try {
    rows = bench::run(o);
  } catch (const std::invalid_argument& e) {
    invalid(e.what());
  }
  const std::string text = bench::to_csv(rows);
  if (!csv.empty()) write_file(csv, text);
  out << text;
  return kOk;
}

// ---- export -----------------------------------------------------------------

json complex_dense(const std::vector<cplx>& a) {
  std::vector<double> re, im;
  for (auto v : a) {
    re.push_back(v.real());
    im.push_back(v.imag());
  }
  return {{"re", re}, {"im", im}};
}

int cmd_export(const std::string& checkpoint, std::size_t edge, const std::string& path, std::size_t cap,
               std::ostream& out) {
  ckpt::Checkpoint c;
  try {
    c = ckpt::load(checkpoint);
  } catch (const std::invalid_argument& e) {
    invalid(e.what());
  }
  if (edge >= c.net.edges.size()) invalid("export: edge " + std::to_string(edge) + " does not exist");
  const auto& e = c.net.edges[edge];
  if (!e.searchable) invalid("export: edge " + std::to_string(edge) + " (" + search::edge_kind_name(e.spec.kind) +
                             ") is not an XD-operation");
  const XDOp& op = e.op;
  const std::size_t old = kal::materialization_cap();
  kal::set_materialization_cap(cap);
  json j = {{"edge", edge},
            {"kind", search::edge_kind_name(e.spec.kind)},
            {"n", op.n},
            {"c_out", op.filter.c_out},
            {"c_in", op.filter.c_in}};
  try {
    if (numel(op.n) > cap)
      throw ResourceError("export: padded size " + std::to_string(numel(op.n)) + " exceeds the materialization cap " +
                          std::to_string(cap));
    json maps = json::array();
    for (std::size_t i = 0; i < op.filter.c_out; ++i)
      for (std::size_t k = 0; k < op.filter.c_in; ++k)
        maps.push_back({{"i", i}, {"j", k}, {"matrix", dense_channel_map(op, i, k)}});
    j["channel_maps"] = maps;
    j["K"] = complex_dense(dense_kron(op.params.K));
    j["L"] = complex_dense(dense_kron(op.params.L));
    j["M"] = complex_dense(dense_kron(op.params.M));
    j["b"] = complex_dense(op.params.b.to_complex());
    j["C"] = complex_dense(op.params.C.to_complex());
  } catch (const ResourceError& err) {
    kal::set_materialization_cap(old);
    invalid(err.what());
  }
  kal::set_materialization_cap(old);
  write_file(path, j.dump() + "\n");
  out << "export: edge " << edge << " (" << op.filter.c_out << "x" << op.filter.c_in << " channel maps of size "
      << numel(op.n) << ") written to " << path << "\n";
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"XD-operation search spaces: verification, synthetic tasks, training and inspection.", "xdops"};
  app.require_subcommand(1);

  VerifyArgs va;
  auto* verify = app.add_subcommand("verify", "Check every warm-start construction against its oracle");
  verify->add_option("--sizes", va.sizes, "Spatial sizes (powers of two)")->delimiter(',')->capture_default_str();
  verify->add_option("--seed", va.seed, "Random seed")->capture_default_str();
  verify->add_option("--trials", va.trials, "Random draws per claim")->capture_default_str();
  verify->add_option("--report", va.report, "Write one JSON line per claim to PATH");
  verify->add_flag("--fault-twiddle", va.fault)->group("");

  GenArgs ga;
  auto* gen = app.add_subcommand("gen", "Generate a synthetic dataset");
  gen->add_option("--task", ga.task, "dilated | fourier | permuted")->required();
  gen->add_option("--n", ga.n, "Size per spatial axis (power of two)")->capture_default_str();
  gen->add_option("--samples", ga.samples, "Number of samples")->capture_default_str();
  gen->add_option("--seed", ga.seed, "Random seed")->capture_default_str();
  gen->add_option("--out", ga.out, "Sidecar path; the blob goes next to it as .bin")->required();
  gen->add_flag("--identity", ga.identity, "Permuted task: use identity permutations (the control)");

  std::string config;
  auto* train = app.add_subcommand("train", "Train a supernet from a run config");
  train->add_option("--config", config, "Run config (JSON, comments allowed)")->required();

  std::string ck, data_path, split = "all";
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  eval->add_option("--checkpoint", ck, "Checkpoint file")->required();
  eval->add_option("--data", data_path, "Dataset sidecar")->required();
  eval->add_option("--split", split, "all | train | valid | test (rows from the run config)")
      ->check(CLI::IsMember({"all", "train", "valid", "test"}))
      ->capture_default_str();

  bench::Options bo;
  std::string csv;
  auto* bench = app.add_subcommand("bench", "Time and count dense, FFT-conv, butterfly and XD forwards");
  bench->add_option("--sizes", bo.sizes, "Sizes (powers of two)")->delimiter(',')->capture_default_str();
  bench->add_option("--depths", bo.depths, "XD depths")->delimiter(',')->capture_default_str();
  bench->add_option("--channels", bo.channels, "Channels in and out")->capture_default_str();
  bench->add_option("--repeats", bo.repeats, "Timed repetitions")->capture_default_str();
  bench->add_option("--csv", csv, "Write the table to PATH");
  bool counts_only = false;
  bench->add_flag("--counts-only", counts_only, "Skip timing");

  std::size_t edge = 0, cap = kal::materialization_cap();
  std::string dense;
  auto* exp = app.add_subcommand("export", "Write dense per-channel maps and K, L, M of one edge");
  exp->add_option("--checkpoint", ck, "Checkpoint file")->required();
  exp->add_option("--edge", edge, "Edge index in the backbone")->required();
  exp->add_option("--dense", dense, "Output JSON path")->required();
  exp->add_option("--cap", cap, "Materialization cap")->capture_default_str();

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kInvalid;
  }

  try {
    if (*verify) return cmd_verify(va, out);
    if (*gen) return cmd_gen(ga, out);
    if (*train) return cmd_train(config, out, err);
    if (*eval) return cmd_eval(ck, data_path, split, out);
    if (*bench) {
      bo.timing = !counts_only;
      return cmd_bench(bo, csv, out);
    }
    if (*exp) return cmd_export(ck, edge, dense, cap, out);
  } catch (const Failure& f) {
    err << "xdops: " << f.message << "\n";
    return f.code;
  } catch (const std::invalid_argument& e) {
    err << "xdops: " << e.what() << "\n";
    return kInvalid;
  } catch (const std::exception& e) {
    err << "xdops: " << e.what() << "\n";
    return kRuntime;
  }
  return kInvalid;
}

}  // namespace xd::cli
