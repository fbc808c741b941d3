// SPDX-License-Identifier: Apache-2.0
#include "xdops/data.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <stdexcept>

namespace xd::data {
namespace {

static_assert(std::endian::native == std::endian::little, "blob I/O assumes a little-endian host");

constexpr std::size_t kFourierModes = 4;
constexpr std::size_t kDilation = 4;
constexpr std::size_t kTaps = 3;
constexpr std::size_t kBar = 4;
constexpr std::size_t kDistractors = 6;

std::vector<double> smooth(std::size_t n, std::size_t modes, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  std::vector<double> x(n, 0.0);
  for (std::size_t r = 1; r <= modes; ++r) {
    const double a = nd(rng) / static_cast<double>(r), b = nd(rng) / static_cast<double>(r);
    for (std::size_t t = 0; t < n; ++t) {
      const double ang = 2.0 * std::numbers::pi * static_cast<double>(r * t % n) / static_cast<double>(n);
      x[t] += a * std::cos(ang) + b * std::sin(ang);
    }
  }
  return x;
}

std::vector<std::size_t> random_perm(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  // Fisher-Yates with explicit draws so the stream is portable.
  for (std::size_t i = n; i-- > 1;) std::swap(p[i], p[rng() % (i + 1)]);
  return p;
}

}  // namespace

std::size_t Dataset::n_samples() const {
  const std::size_t per = numel(input_shape);
  return per ? inputs.size() / per : 0;
}

search::Split Dataset::split(std::size_t begin, std::size_t end) const {
  const std::size_t S = n_samples();
  if (begin > end || end > S) throw std::invalid_argument("dataset '" + name + "': split out of range");
  const std::size_t pi = numel(input_shape), pt = numel(target_shape);
  search::Split s;
  Shape xs{end - begin};
  xs.insert(xs.end(), input_shape.begin(), input_shape.end());
  s.x = Tensor::real(xs, std::vector<double>(inputs.begin() + begin * pi, inputs.begin() + end * pi));
  if (kind == search::TaskKind::Classification) {
    for (std::size_t i = begin; i < end; ++i) {
      const double v = targets[i];
      if (v < 0 || v != std::floor(v)) throw std::invalid_argument("dataset '" + name + "': bad class label");
      s.labels.push_back(static_cast<std::size_t>(v));
    }
  } else {
    Shape ys{end - begin};
    ys.insert(ys.end(), target_shape.begin(), target_shape.end());
    s.y = Tensor::real(ys, std::vector<double>(targets.begin() + begin * pt, targets.begin() + end * pt));
  }
  return s;
}

std::string blob_path(const std::string& sidecar) {
  return std::filesystem::path(sidecar).replace_extension(".bin").string();
}

void save(const Dataset& d, const std::string& path) {
  if (d.dtype != "f32" && d.dtype != "f64") throw std::invalid_argument("dataset: dtype must be f32 or f64");
  nlohmann::json j = {{"name", d.name},
                      {"n_samples", d.n_samples()},
                      {"input_shape", d.input_shape},
                      {"target_shape", d.target_shape},
                      {"dtype", d.dtype},
                      {"task_kind", d.kind == search::TaskKind::Operator ? "operator" : "classification"},
                      {"blob", std::filesystem::path(blob_path(path)).filename().string()},
                      {"generator", d.generator}};
  std::ofstream side(path);
  if (!side) throw std::runtime_error("dataset: cannot write " + path);
  side << j.dump(2) << "\n";

  std::ofstream blob(blob_path(path), std::ios::binary);
  if (!blob) throw std::runtime_error("dataset: cannot write " + blob_path(path));
  const std::size_t S = d.n_samples(), pi = numel(d.input_shape), pt = numel(d.target_shape);
  auto put = [&](const double* v, std::size_t count) {
    for (std::size_t i = 0; i < count; ++i) {
      if (d.dtype == "f64") {
        blob.write(reinterpret_cast<const char*>(&v[i]), sizeof(double));
      } else {
        const float f = static_cast<float>(v[i]);
        blob.write(reinterpret_cast<const char*>(&f), sizeof(float));
      }
    }
  };
  for (std::size_t s = 0; s < S; ++s) put(d.inputs.data() + s * pi, pi);
  for (std::size_t s = 0; s < S; ++s) put(d.targets.data() + s * pt, pt);
}

Dataset load(const std::string& path) {
  std::ifstream side(path);
  if (!side) throw std::invalid_argument("dataset: cannot open " + path);
  nlohmann::json j;
  try {
    side >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("dataset: " + path + " is not valid JSON: " + e.what());
  }
  Dataset d;
  try {
    d.name = j.at("name").get<std::string>();
    d.input_shape = j.at("input_shape").get<Shape>();
    d.target_shape = j.at("target_shape").get<Shape>();
    d.dtype = j.at("dtype").get<std::string>();
    const std::string kind = j.at("task_kind").get<std::string>();
    if (kind != "operator" && kind != "classification")
      throw std::invalid_argument("dataset: unknown task_kind '" + kind + "'");
    d.kind = kind == "operator" ? search::TaskKind::Operator : search::TaskKind::Classification;
    if (j.contains("generator")) d.generator = j.at("generator");
    const std::size_t S = j.at("n_samples").get<std::size_t>();
    if (d.dtype != "f32" && d.dtype != "f64") throw std::invalid_argument("dataset: dtype must be f32 or f64");
    const std::size_t width = d.dtype == "f64" ? 8 : 4;
    const std::size_t pi = numel(d.input_shape), pt = numel(d.target_shape);
    const std::size_t expect = S * (pi + pt) * width;

    const std::string bp = blob_path(path);
    std::ifstream blob(bp, std::ios::binary | std::ios::ate);
    if (!blob) throw std::invalid_argument("dataset: missing blob " + bp);
    const auto size = static_cast<std::size_t>(blob.tellg());
    if (size != expect)
      throw std::invalid_argument("dataset: blob " + bp + " has " + std::to_string(size) + " bytes, expected " +
                                  std::to_string(expect));
    blob.seekg(0);
    std::vector<char> raw(size);
    blob.read(raw.data(), static_cast<std::streamsize>(size));
    std::vector<double> all(S * (pi + pt));
    for (std::size_t i = 0; i < all.size(); ++i) {
      if (width == 8) {
        std::memcpy(&all[i], raw.data() + i * 8, 8);
      } else {
        float f;
        std::memcpy(&f, raw.data() + i * 4, 4);
        all[i] = f;
      }
    }
    d.inputs.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(S * pi));
    d.targets.assign(all.begin() + static_cast<std::ptrdiff_t>(S * pi), all.end());
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("dataset: " + path + ": " + e.what());
  }
  return d;
}

TaskName parse_task(const std::string& s) {
  if (s == "dilated") return TaskName::Dilated;
  if (s == "fourier") return TaskName::Fourier;
  if (s == "permuted") return TaskName::Permuted;
  throw std::invalid_argument("unknown task '" + s + "'");
}

std::string task_name(TaskName t) {
  switch (t) {
    case TaskName::Dilated: return "dilated";
    case TaskName::Fourier: return "fourier";
    case TaskName::Permuted: return "permuted";
  }
  return "dilated";
}

std::vector<double> smooth_signal(std::size_t n, std::size_t modes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return smooth(n, modes, rng);
}

std::vector<double> apply_fourier_multiplier(const std::vector<double>& x, const std::vector<cplx>& mult) {
  const std::size_t n = x.size();
  std::vector<double> y(n, 0.0);
  for (std::size_t r = 0; r < mult.size() && r <= n / 2; ++r) {
    cplx X = 0.0;
    for (std::size_t t = 0; t < n; ++t) X += x[t] * std::polar(1.0, -2.0 * std::numbers::pi * (r * t % n) / n);
    // Frequencies r and n - r carry m and conj(m), so their sum is 2 Re(.).
    const double w = (r == 0 || 2 * r == n) ? 1.0 : 2.0;
    const cplx h = (r == 0 || 2 * r == n) ? cplx(mult[r].real()) : mult[r];
    for (std::size_t t = 0; t < n; ++t)
      y[t] += w * (h * X * std::polar(1.0, 2.0 * std::numbers::pi * (r * t % n) / n)).real() / n;
  }
  return y;
}

Dataset generate(const GenSpec& spec) {
  if (spec.n < 2 || (spec.n & (spec.n - 1)) != 0) throw std::invalid_argument("gen: n must be a power of two");
  Dataset d;
  d.name = task_name(spec.task);
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> nd;
  const std::size_t n = spec.n;
  d.generator = {{"task", d.name}, {"n", n}, {"seed", spec.seed}, {"samples", spec.samples}};

  switch (spec.task) {
    case TaskName::Dilated: {
      if ((kTaps - 1) * kDilation >= n) throw std::invalid_argument("gen: n too small for the dilated filter");
      std::vector<double> w(kTaps);
      for (auto& v : w) v = nd(rng) / std::sqrt(static_cast<double>(kTaps));
      d.generator["k"] = kTaps;
      d.generator["dilation"] = kDilation;
      d.generator["weights"] = w;
      d.generator["smooth_modes"] = n / 4;
      d.input_shape = d.target_shape = {1, n};
      for (std::size_t s = 0; s < spec.samples; ++s) {
        const auto x = smooth(n, n / 4, rng);
        d.inputs.insert(d.inputs.end(), x.begin(), x.end());
        for (std::size_t t = 0; t < n; ++t) {
          double acc = 0.0;
          for (std::size_t j = 0; j < kTaps; ++j) acc += w[j] * x[(t + n - (j * kDilation) % n) % n];
          d.targets.push_back(acc);
        }
      }
      break;
    }
    case TaskName::Fourier: {
      std::vector<cplx> mult(kFourierModes);
      for (std::size_t r = 0; r < kFourierModes; ++r) mult[r] = r == 0 ? cplx(nd(rng)) : cplx(nd(rng), nd(rng));
      nlohmann::json mj = nlohmann::json::array();
      for (auto m : mult) mj.push_back({m.real(), m.imag()});
      d.generator["modes"] = kFourierModes;
      d.generator["multiplier"] = mj;
      d.generator["smooth_modes"] = n / 4;
      d.input_shape = d.target_shape = {1, n};
      for (std::size_t s = 0; s < spec.samples; ++s) {
        const auto x = smooth(n, n / 4, rng);
        const auto y = apply_fourier_multiplier(x, mult);
        d.inputs.insert(d.inputs.end(), x.begin(), x.end());
        d.targets.insert(d.targets.end(), y.begin(), y.end());
      }
      break;
    }
    case TaskName::Permuted: {
      if (n < kBar) throw std::invalid_argument("gen: n too small for the permuted task");
      auto rows = random_perm(n, rng), cols = random_perm(n, rng);
      if (!spec.permute)
        for (std::size_t i = 0; i < n; ++i) rows[i] = cols[i] = i;
      d.kind = search::TaskKind::Classification;
      d.generator["permute"] = spec.permute;
      d.generator["row_perm"] = rows;
      d.generator["col_perm"] = cols;
      d.generator["bar"] = kBar;
      d.generator["noise"] = 0.1;
      d.generator["distractors"] = kDistractors;
      d.input_shape = {1, n, n};
      d.target_shape = {};
      std::vector<double> img(n * n);
      for (std::size_t s = 0; s < spec.samples; ++s) {
        const std::size_t label = rng() % 2, r0 = rng() % n, c0 = rng() % n;
        for (auto& v : img) v = 0.1 * nd(rng);
        for (std::size_t t = 0; t < kDistractors; ++t) img[rng() % (n * n)] += rng() % 2 ? 1.0 : -1.0;
        // Same row, same signs; only the order along the row differs:
        // class 0 alternates (+ - + -), class 1 pairs (+ + - -).
        for (std::size_t t = 0; t < kBar; ++t) {
          const double sign = label ? (t < kBar / 2 ? 1.0 : -1.0) : (t % 2 ? -1.0 : 1.0);
          img[r0 * n + (c0 + t) % n] += sign;
        }
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < n; ++j) d.inputs.push_back(img[rows[i] * n + cols[j]]);
        d.targets.push_back(static_cast<double>(label));
      }
      break;
    }
  }
  return d;
}

}  // namespace xd::data
