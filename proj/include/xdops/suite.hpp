// SPDX-License-Identifier: Apache-2.0
//
// The verification suite behind `xdops verify`: oracle equivalence for
// every warm-start construction, DFT/permutation exactness, and
// finite-difference gradient checks.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

namespace xd::suite {

struct Claim {
  std::string group;  // expressivity | dft | permutation | gradient
  std::string name;
  nlohmann::json config = nlohmann::json::object();
  double max_error = 0.0;
  double threshold = 0.0;
  bool pass = false;

  nlohmann::json to_json() const;
};

struct Options {
  std::vector<std::size_t> sizes{8, 16, 32};
  std::vector<std::size_t> channels{1, 2, 3};
  std::uint64_t seed = 0;
  std::size_t trials = 3;       // random (w, x) draws per equivalence claim
  std::size_t grad_points = 10;  // random points per gradient claim
};

std::vector<Claim> expressivity(const Options& o);
/// Powers of two 2..max_n: init_dft against the analytic matrix (1e-10) and
/// init_idft * init_dft against I (1e-12).
std::vector<Claim> dft_checks(std::size_t max_n = 64);
std::vector<Claim> permutation_checks(const Options& o);
std::vector<Claim> gradient_checks(const Options& o);
std::vector<Claim> run_all(const Options& o);

struct Summary {
  std::size_t total = 0, failed = 0;
  double worst_ratio = 0.0;  // max over claims of max_error / threshold
};
Summary summarize(const std::vector<Claim>& claims);

}  // namespace xd::suite
