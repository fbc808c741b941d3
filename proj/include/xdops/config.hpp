// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: a JSON document (comments allowed) with sections
// backbone, xd, optimizer, task, training plus seed, precision and
// output_dir. Unknown keys are rejected.
#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "xdops/search.hpp"

namespace xd::cfg {

/// Validation failure; the message names the offending key.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct BackboneConfig {
  std::string preset = "cnn1d";  // cnn1d | cnn2d_skip | file
  std::size_t n = 64;
  std::size_t c_in = 1;
  std::size_t c_out = 1;
  std::size_t classes = 2;
  std::size_t channels = 8;
  std::size_t k = 3;
  std::size_t layers = 3;
  std::string file;  // preset "file": backbone JSON
};

struct TaskConfig {
  std::string data;  // dataset sidecar
  /// Leading rows for train, then valid, then test. All zero: every row
  /// trains and there is no held-out split.
  std::size_t train = 0, valid = 0, test = 0;
};

struct RunConfig {
  BackboneConfig backbone;
  search::SubstituteOptions xd;
  search::TrainConfig train;
  TaskConfig task;
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";
};

RunConfig parse_run_config(const nlohmann::json& j);
/// Paths inside the file are taken relative to the working directory.
RunConfig load_run_config(const std::string& path);
nlohmann::json to_json(const RunConfig& c);

nlohmann::json to_json(const optim::Settings& s);
nlohmann::json to_json(const search::TrainConfig& c);
search::TrainConfig train_config_from_json(const nlohmann::json& j);

search::BackboneSpec build_backbone(const RunConfig& c);
search::Task load_task(const RunConfig& c);

/// Named presets for the architecture optimizer (and the desk-scale task
/// defaults). Keys match `preset_names()`.
std::vector<std::string> preset_names();
RunConfig preset(const std::string& name);

}  // namespace xd::cfg
