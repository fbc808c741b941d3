// SPDX-License-Identifier: Apache-2.0
#include "xdops/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "xdops/data.hpp"
#include "xdops/error.hpp"

namespace xd::cfg {
namespace {

using nlohmann::json;

/// Reads keys from one object and rejects whatever was not read.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config: '" + where() + "' must be an object");
  }

  template <class T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError("config: key '" + name(key) + "' has the wrong type");
    }
  }

  Section sub(const std::string& key) {
    seen_.insert(key);
    static const json empty = json::object();
    return Section(j_.contains(key) ? j_.at(key) : empty, name(key));
  }

  std::string name(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError("config: unknown key '" + name(k) + "'");
  }

 private:
  std::string where() const { return path_.empty() ? "<root>" : path_; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_settings(Section& s, optim::Settings& o) {
  std::string kind = optim::kind_name(o.kind);
  s.get("kind", kind);
  try {
    o.kind = optim::parse_kind(kind);
  } catch (const std::invalid_argument& e) {
    throw ConfigError("config: key '" + s.name("kind") + "': " + e.what());
  }
  s.get("lr", o.lr);
  s.get("momentum", o.momentum);
  s.get("beta1", o.beta1);
  s.get("beta2", o.beta2);
  s.get("eps", o.eps);
  s.get("weight_decay", o.weight_decay);
}

void check(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError("config: " + msg);
}

RunConfig with_arch(const std::string& kind, double lr, std::size_t warmup, double momentum = 0.9) {
  RunConfig c;
  c.train.arch_opt.kind = optim::parse_kind(kind);
  c.train.arch_opt.lr = lr;
  c.train.arch_opt.momentum = momentum;
  c.train.warmup_epochs = warmup;
  c.train.epochs = std::max<std::size_t>(c.train.epochs, warmup);
  return c;
}

RunConfig desk(const std::string& task) {
  RunConfig c = with_arch("adam", 1e-3, 0);
  c.train.weight_opt = {optim::Kind::Adam, 1e-2};
  c.train.schedule = search::Schedule::Cosine;
  c.train.batch_size = 32;
  c.task.data = "data/" + task + ".json";
  c.output_dir = "runs/xd-" + task;
  if (task == "permuted") {
    c.backbone.preset = "cnn2d_skip";
    c.backbone.n = 16;
    c.backbone.channels = 4;
    c.xd.depth = {3, 3, 3};
    c.train.epochs = 15;
    c.task.train = 1000;
    c.task.test = 500;
  } else {
    c.train.epochs = 150;
    c.task.train = 512;
    c.task.test = 128;
  }
  return c;
}

}  // namespace

nlohmann::json to_json(const optim::Settings& s) {
  return {{"kind", optim::kind_name(s.kind)}, {"lr", s.lr},   {"momentum", s.momentum},
          {"beta1", s.beta1},                 {"beta2", s.beta2}, {"eps", s.eps},
          {"weight_decay", s.weight_decay}};
}

nlohmann::json to_json(const search::TrainConfig& c) {
  json w = to_json(c.weight_opt);
  w["schedule"] = search::schedule_name(c.schedule);
  w["step_size"] = c.step_size;
  w["gamma"] = c.gamma;
  json a = to_json(c.arch_opt);
  a["warmup_epochs"] = c.warmup_epochs;
  return {{"optimizer", {{"weight", w}, {"arch", a}}},
          {"training", {{"epochs", c.epochs}, {"batch_size", c.batch_size}}},
          {"seed", c.seed},
          {"precision", c.precision}};
}

search::TrainConfig train_config_from_json(const nlohmann::json& j) {
  RunConfig c = parse_run_config(j);
  return c.train;
}

RunConfig parse_run_config(const nlohmann::json& j) {
  RunConfig c;
  Section root(j, "");

  Section bb = root.sub("backbone");
  bb.get("preset", c.backbone.preset);
  bb.get("n", c.backbone.n);
  bb.get("c_in", c.backbone.c_in);
  bb.get("c_out", c.backbone.c_out);
  bb.get("classes", c.backbone.classes);
  bb.get("channels", c.backbone.channels);
  bb.get("k", c.backbone.k);
  bb.get("layers", c.backbone.layers);
  bb.get("file", c.backbone.file);
  bb.finish();
  check(c.backbone.preset == "cnn1d" || c.backbone.preset == "cnn2d_skip" || c.backbone.preset == "file",
        "key 'backbone.preset' must be cnn1d, cnn2d_skip or file");
  check(c.backbone.preset != "file" || !c.backbone.file.empty(), "key 'backbone.file' is required for preset file");

  Section xs = root.sub("xd");
  xs.get("depth", c.xd.depth);
  xs.get("freeze_b", c.xd.freeze_b);
  xs.get("freeze_C", c.xd.freeze_C);
  xs.get("max_kernel", c.xd.max_kernel);
  xs.get("searchable", c.xd.searchable);
  xs.finish();

  Section opt = root.sub("optimizer");
  Section w = opt.sub("weight");
  read_settings(w, c.train.weight_opt);
  std::string schedule = search::schedule_name(c.train.schedule);
  w.get("schedule", schedule);
  try {
    c.train.schedule = search::parse_schedule(schedule);
  } catch (const std::invalid_argument& e) {
    throw ConfigError("config: key 'optimizer.weight.schedule': " + std::string(e.what()));
  }
  w.get("step_size", c.train.step_size);
  w.get("gamma", c.train.gamma);
  w.finish();
  Section a = opt.sub("arch");
  read_settings(a, c.train.arch_opt);
  a.get("warmup_epochs", c.train.warmup_epochs);
  a.finish();
  opt.finish();

  Section task = root.sub("task");
  task.get("data", c.task.data);
  task.get("train", c.task.train);
  task.get("valid", c.task.valid);
  task.get("test", c.task.test);
  task.finish();

  Section tr = root.sub("training");
  tr.get("epochs", c.train.epochs);
  tr.get("batch_size", c.train.batch_size);
  tr.finish();

  root.get("seed", c.seed);
  root.get("precision", c.train.precision);
  root.get("output_dir", c.output_dir);
  root.finish();

  c.train.seed = c.seed;
  c.xd.seed = c.seed;
  try {
    c.train.validate();
  } catch (const Unsupported&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config: cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  json j;
  try {
    j = json::parse(ss.str(), nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw ConfigError("config: " + path + " is not valid JSON: " + e.what());
  }
  return parse_run_config(j);
}

nlohmann::json to_json(const RunConfig& c) {
  json bb = {{"preset", c.backbone.preset}, {"n", c.backbone.n},       {"c_in", c.backbone.c_in},
             {"c_out", c.backbone.c_out},   {"classes", c.backbone.classes}, {"channels", c.backbone.channels},
             {"k", c.backbone.k},           {"layers", c.backbone.layers}};
  if (!c.backbone.file.empty()) bb["file"] = c.backbone.file;
  json xdj = search::to_json(c.xd);
  xdj.erase("seed");
  json j = to_json(c.train);
  j["backbone"] = bb;
  j["xd"] = xdj;
  j["task"] = {{"data", c.task.data}, {"train", c.task.train}, {"valid", c.task.valid}, {"test", c.task.test}};
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  return j;
}

search::BackboneSpec build_backbone(const RunConfig& c) {
  const auto& b = c.backbone;
  if (b.preset == "cnn1d") return search::cnn1d(b.n, b.c_in, b.c_out, b.channels, b.k, b.layers);
  if (b.preset == "cnn2d_skip") return search::cnn2d_skip(b.n, b.c_in, b.classes, b.channels, b.k);
  std::ifstream f(b.file);
  if (!f) throw ConfigError("config: cannot open backbone file " + b.file);
  std::stringstream ss;
  ss << f.rdbuf();
  try {
    return search::backbone_from_json(json::parse(ss.str(), nullptr, true, true));
  } catch (const json::exception& e) {
    throw ConfigError("config: backbone file " + b.file + ": " + e.what());
  }
}

search::Task load_task(const RunConfig& c) {
  const data::Dataset d = data::load(c.task.data);
  const std::size_t S = d.n_samples();
  const auto& t = c.task;
  if (t.train + t.valid + t.test > S)
    throw ConfigError("config: task splits need " + std::to_string(t.train + t.valid + t.test) + " samples, " +
                      c.task.data + " has " + std::to_string(S));
  search::Task task;
  task.kind = d.kind;
  if (t.train + t.valid + t.test == 0) {
    task.train = d.split(0, S);
    return task;
  }
  task.train = d.split(0, t.train);
  task.valid = d.split(t.train, t.train + t.valid);
  task.test = d.split(t.train + t.valid, t.train + t.valid + t.test);
  return task;
}

std::vector<std::string> preset_names() {
  return {"xd-dilated",       "xd-fourier",        "xd-permuted",        "burgers",
          "burgers-fno-init", "darcy",             "darcy-fno-init",     "navier-stokes-nu1e-4",
          "navier-stokes-nu1e-5", "permuted-mnist", "jsb-chorales",      "nottingham",
          "penn-treebank",    "resnet4-xd",        "resnet6-xd",         "resnet10-xd",
          "resnet18-xd",      "resnet34-xd"};
}

RunConfig preset(const std::string& name) {
  if (name == "xd-dilated") return desk("dilated");
  if (name == "xd-fourier") return desk("fourier");
  if (name == "xd-permuted") return desk("permuted");

  RunConfig c;
  if (name == "burgers") c = with_arch("adam", 1e-3, 0);
  else if (name == "burgers-fno-init") c = with_arch("momentum", 1e-4, 250, 0.5);
  else if (name == "darcy" || name == "darcy-fno-init") c = with_arch("momentum", 1e-1, 0, 0.5);
  else if (name == "navier-stokes-nu1e-4") c = with_arch("momentum", 5e-3, 0, 0.5);
  else if (name == "navier-stokes-nu1e-5") c = with_arch("momentum", 1e-3, 0, 0.5);
  else if (name == "permuted-mnist") c = with_arch("adam", 2e-4, 0);
  else if (name == "jsb-chorales") c = with_arch("adam", 2e-4, 25);
  else if (name == "nottingham") c = with_arch("adam", 2e-3, 0);
  else if (name == "penn-treebank") c = with_arch("adam", 2e-6, 0);
  else if (name == "resnet4-xd") c = with_arch("adam", 1e-4, 2);
  else if (name == "resnet6-xd") c = with_arch("momentum", 1e-4, 2, 0.99);
  else if (name == "resnet10-xd") c = with_arch("momentum", 1e-3, 2, 0.99);
  else if (name == "resnet18-xd" || name == "resnet34-xd") c = with_arch("momentum", 5e-4, 2, 0.9);
  else throw ConfigError("config: unknown preset '" + name + "'");
  // Constant step size for the protein rows; the others follow the backbone schedule.
  if (name.starts_with("resnet")) c.train.schedule = search::Schedule::Constant;
  c.output_dir = "runs/" + name;
  return c;
}

}  // namespace xd::cfg
