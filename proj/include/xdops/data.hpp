// SPDX-License-Identifier: Apache-2.0
//
// Dataset files (JSON sidecar plus little-endian float blob) and the
// synthetic task generators.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "xdops/search.hpp"

namespace xd::data {

struct Dataset {
  std::string name;
  search::TaskKind kind = search::TaskKind::Operator;
  Shape input_shape;
  Shape target_shape;  // empty for class labels
  std::string dtype = "f64";
  std::vector<double> inputs;   // sample-major
  std::vector<double> targets;  // sample-major
  nlohmann::json generator = nlohmann::json::object();

  std::size_t n_samples() const;
  /// Rows [begin, end) as a split; class targets become labels.
  search::Split split(std::size_t begin, std::size_t end) const;
};

/// Writes `path` (sidecar) and the blob next to it with extension .bin.
void save(const Dataset& d, const std::string& path);
/// Throws std::invalid_argument on schema or length violations.
Dataset load(const std::string& path);
std::string blob_path(const std::string& sidecar);

enum class TaskName { Dilated, Fourier, Permuted };
TaskName parse_task(const std::string& s);
std::string task_name(TaskName t);

struct GenSpec {
  TaskName task = TaskName::Dilated;
  std::size_t n = 64;
  std::size_t samples = 0;
  std::uint64_t seed = 0;
  /// Permuted task only: when false the hidden permutations are the
  /// identity (the unpermuted control), with identical samples otherwise.
  bool permute = true;
};

Dataset generate(const GenSpec& spec);

/// Random real signal with Fourier modes 1..modes and 1/r amplitudes.
std::vector<double> smooth_signal(std::size_t n, std::size_t modes, std::uint64_t seed);
/// Applies the multiplier recorded by the fourier generator.
std::vector<double> apply_fourier_multiplier(const std::vector<double>& x, const std::vector<cplx>& mult);

}  // namespace xd::data
