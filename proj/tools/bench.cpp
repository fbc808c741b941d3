// SPDX-License-Identifier: Apache-2.0
#include "bench.hpp"

#include <fftw3.h>

#include <chrono>
#include <cmath>
#include <complex>
#include <functional>
#include <random>
#include <sstream>

#include "xdops/kaleidoscope.hpp"
#include "xdops/search.hpp"
#include "xdops/xd_op.hpp"

namespace xd::bench {
namespace {

std::uint64_t log2n(std::size_t n) { return kal::log2_exact(n); }

void time_it(Row& r, std::size_t repeats, const std::function<void()>& f) {
  f();
  std::vector<double> us;
  for (std::size_t i = 0; i < repeats; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    us.push_back(std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - t0).count());
  }
  double mean = 0.0, var = 0.0;
  for (double v : us) mean += v;
  mean /= static_cast<double>(us.size());
  for (double v : us) var += (v - mean) * (v - mean);
  r.mean_us = mean;
  r.stddev_us = us.size() > 1 ? std::sqrt(var / static_cast<double>(us.size() - 1)) : 0.0;
}

/// Circular convolution of c channels via FFTW: forward transforms of the
/// inputs and filters, pointwise products, inverse transforms.
class FftConv {
 public:
  FftConv(std::size_t n, std::size_t c) : n_(n), c_(c) {
    in_ = fftw_alloc_complex(n * c);
    filt_ = fftw_alloc_complex(n * c * c);
    spec_ = fftw_alloc_complex(n * c);
    out_ = fftw_alloc_complex(n * c);
    const int len = static_cast<int>(n);
    fwd_ = fftw_plan_many_dft(1, &len, static_cast<int>(c), in_, nullptr, 1, len, spec_, nullptr, 1, len, FFTW_FORWARD,
                              FFTW_ESTIMATE);
    filt_fwd_ = fftw_plan_many_dft(1, &len, static_cast<int>(c * c), filt_, nullptr, 1, len, filt_, nullptr, 1, len,
                                   FFTW_FORWARD, FFTW_ESTIMATE);
    inv_ = fftw_plan_many_dft(1, &len, static_cast<int>(c), out_, nullptr, 1, len, out_, nullptr, 1, len,
                              FFTW_BACKWARD, FFTW_ESTIMATE);
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (std::size_t i = 0; i < n * c; ++i) in_[i][0] = u(rng), in_[i][1] = 0.0;
    for (std::size_t i = 0; i < n * c * c; ++i) filt_[i][0] = u(rng), filt_[i][1] = 0.0;
  }
  ~FftConv() {
    fftw_destroy_plan(fwd_);
    fftw_destroy_plan(filt_fwd_);
    fftw_destroy_plan(inv_);
    for (auto* p : {in_, filt_, spec_, out_}) fftw_free(p);
  }
  FftConv(const FftConv&) = delete;
  FftConv& operator=(const FftConv&) = delete;

  void run() {
    fftw_execute(fwd_);
    fftw_execute(filt_fwd_);
    for (std::size_t o = 0; o < c_; ++o)
      for (std::size_t t = 0; t < n_; ++t) {
        std::complex<double> acc = 0.0;
        for (std::size_t i = 0; i < c_; ++i) {
          const auto* f = filt_[(o * c_ + i) * n_ + t];
          const auto* x = spec_[i * n_ + t];
          acc += std::complex<double>(f[0], f[1]) * std::complex<double>(x[0], x[1]);
        }
        out_[o * n_ + t][0] = acc.real();
        out_[o * n_ + t][1] = acc.imag();
      }
    fftw_execute(inv_);
  }

 private:
  std::size_t n_, c_;
  fftw_complex *in_, *filt_, *spec_, *out_;
  fftw_plan fwd_, filt_fwd_, inv_;
};

}  // namespace

std::uint64_t dense_madds(std::size_t n, std::size_t c) { return std::uint64_t{c} * c * n * n; }
std::uint64_t fft_madds(std::size_t n) { return std::uint64_t{n} * log2n(n); }
std::uint64_t fft_conv_madds(std::size_t n, std::size_t c) {
  return (2 * c + c * c) * fft_madds(n) + std::uint64_t{c} * c * n;
}
std::uint64_t xd_madds(std::size_t n, std::size_t c, std::size_t depth) {
  return (2 * c + c * c) * kal::kmatrix_madds(n, depth) + 2 * std::uint64_t{c} * c * n;
}

std::vector<Row> run(const Options& o) {
  std::vector<Row> rows;
  const std::size_t c = o.channels;
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (std::size_t n : o.sizes) {
    if (!kal::is_power_of_two(n) || n < 4) throw std::invalid_argument("bench: sizes must be powers of two >= 4");
    {
      Row r{"dense", n, c, 0, 0.0, 0.0, dense_madds(n, c)};
      if (o.timing) {
        const std::size_t N = n * c;
        std::vector<double> a(N * N), x(N), y(N);
        for (auto& v : a) v = u(rng);
        for (auto& v : x) v = u(rng);
        time_it(r, o.repeats, [&] {
          for (std::size_t i = 0; i < N; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < N; ++j) s += a[i * N + j] * x[j];
            y[i] = s;
          }
        });
      }
      rows.push_back(r);
    }
    {
      Row r{"fft_conv", n, c, 0, 0.0, 0.0, fft_conv_madds(n, c)};
      if (o.timing) {
        FftConv f(n, c);
        time_it(r, o.repeats, [&] { f.run(); });
      }
      rows.push_back(r);
    }
    {
      Row r{"butterfly", n, 1, 1, 0.0, 0.0, kal::butterfly_madds(n)};
      if (o.timing) {
        const kal::ButterflyMatrix b(n);
        std::vector<cplx> x(n);
        for (auto& v : x) v = {u(rng), u(rng)};
        time_it(r, o.repeats, [&] { x = kal::butterfly_apply(b, x); });
      }
      rows.push_back(r);
    }
    for (std::size_t d : o.depths) {
      Row r{"xd", n, c, d, 0.0, 0.0, xd_madds(n, c, d)};
      if (o.timing) {
        ConvSpec cs;
        cs.c_out = cs.c_in = c;
        cs.m = {n};
        cs.k = 3;
        const XDOp op = search::pad_depth(init_from_conv(cs), {d, d, d});
        Tensor x = Tensor::zeros({c, n});
        for (double& v : x.re()) v = u(rng);
        time_it(r, o.repeats, [&] { (void)xd_forward(op, op.weight, x); });
      }
      rows.push_back(r);
    }
  }
  return rows;
}

std::string to_csv(const std::vector<Row>& rows) {
  std::ostringstream s;
  s << "op,n,c,depth,mean_us,stddev_us,madds\n";
  for (const auto& r : rows)
    s << r.op << ',' << r.n << ',' << r.c << ',' << r.depth << ',' << r.mean_us << ',' << r.stddev_us << ','
      << r.madds << '\n';
  return s.str();
}

}  // namespace xd::bench
