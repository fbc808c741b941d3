// SPDX-License-Identifier: Apache-2.0
//
// Multiply-add counts and timings for dense matvec, FFT convolution,
// single butterflies and the XD forward. Counts are complex multiply-adds
// except the dense matvec (real).
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace xd::bench {

struct Row {
  std::string op;  // dense | fft_conv | butterfly | xd
  std::size_t n = 0, c = 1, depth = 0;
  double mean_us = 0.0, stddev_us = 0.0;
  std::uint64_t madds = 0;
};

std::uint64_t dense_madds(std::size_t n, std::size_t c);
/// One radix-2 transform: n log2 n.
std::uint64_t fft_madds(std::size_t n);
/// Transforms of c inputs, c outputs and c*c filters, plus the c*c
/// pointwise products.
std::uint64_t fft_conv_madds(std::size_t n, std::size_t c);
/// M on c inputs, K on c outputs, L on c*c filters, and the C/S/U
/// contraction (two per element).
std::uint64_t xd_madds(std::size_t n, std::size_t c, std::size_t depth);

struct Options {
  std::vector<std::size_t> sizes{64, 128, 256, 512, 1024, 2048, 4096};
  std::vector<std::size_t> depths{1, 2, 3};
  std::size_t channels = 1;
  std::size_t repeats = 10;
  bool timing = true;  // false: counts only
};

std::vector<Row> run(const Options& o);
std::string to_csv(const std::vector<Row>& rows);

}  // namespace xd::bench
