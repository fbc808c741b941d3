// SPDX-License-Identifier: Apache-2.0
#include "xdops/kaleidoscope.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <stdexcept>
#include <string>

#include "xdops/error.hpp"
#include "xdops/parallel.hpp"

namespace xd::kal {

bool is_power_of_two(std::size_t n) { return n >= 1 && (n & (n - 1)) == 0; }

std::size_t log2_exact(std::size_t n) {
  if (!is_power_of_two(n)) throw std::invalid_argument("size " + std::to_string(n) + " is not a power of two");
  std::size_t l = 0;
  while ((std::size_t{1} << l) < n) ++l;
  return l;
}

std::size_t next_power_of_two(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

namespace {

void require_size(std::size_t n) {
  if (n < 2 || !is_power_of_two(n))
    throw std::invalid_argument("K-matrix size must be a power of two >= 2, got " + std::to_string(n));
}

std::size_t pair_index(std::size_t i, std::size_t bit) {
  const std::size_t h = std::size_t{1} << bit;
  return ((i >> (bit + 1)) << bit) | (i & (h - 1));
}

std::size_t pair_low(std::size_t p, std::size_t bit) {
  const std::size_t h = std::size_t{1} << bit;
  return ((p >> bit) << (bit + 1)) | (p & (h - 1));
}

// One stage as a per-pair 2x2 map: d[p] = {out lo <- in lo, out lo <- in hi,
// out hi <- in lo, out hi <- in hi}.
struct Gate {
  std::size_t bit = 0;
  std::vector<std::array<cplx, 4>> d;

  Gate(std::size_t n, std::size_t b) : bit(b), d(n / 2, std::array<cplx, 4>{}) {}

  static Gate identity(std::size_t n, std::size_t b) {
    Gate g(n, b);
    for (auto& e : g.d) e = {1.0, 0.0, 0.0, 1.0};
    return g;
  }

  cplx& entry(std::size_t out, std::size_t in) {
    if ((out ^ in) & ~(std::size_t{1} << bit)) throw std::logic_error("gate entry crosses more than one bit");
    const std::size_t slot = ((out >> bit) & 1) * 2 + ((in >> bit) & 1);
    return d[pair_index(in, bit)][slot];
  }

  Gate transposed() const {
    Gate t = *this;
    for (auto& e : t.d) std::swap(e[1], e[2]);
    return t;
  }
};

// Per-bit gates of a sweep, indexed by bit.
using Sweep = std::vector<Gate>;

Sweep identity_sweep(std::size_t n) {
  Sweep s;
  for (std::size_t b = 0; b < log2_exact(n); ++b) s.push_back(Gate::identity(n, b));
  return s;
}

Sweep transposed(const Sweep& s) {
  Sweep t;
  for (const auto& g : s) t.push_back(g.transposed());
  return t;
}

Tensor stage_tensor(const Gate& g) {
  const std::size_t half = g.d.size();
  std::vector<double> re(4 * half), im(4 * half);
  for (std::size_t p = 0; p < half; ++p)
    for (std::size_t r = 0; r < 4; ++r) {
      re[r * half + p] = g.d[p][r].real();
      im[r * half + p] = g.d[p][r].imag();
    }
  return Tensor::complex({4, half}, std::move(re), std::move(im));
}

// desc is applied first (bits high to low) and forms B_right^T; asc is
// applied second (bits low to high) and forms B_left.
KFactor make_factor(std::size_t n, const Sweep& desc, const Sweep& asc) {
  KFactor f{ButterflyMatrix(n), ButterflyMatrix(n)};
  for (std::size_t b = 0; b < asc.size(); ++b) f.left.stage(b) = stage_tensor(asc[b]);
  for (std::size_t b = 0; b < desc.size(); ++b) f.right.stage(b) = stage_tensor(desc[b].transposed());
  return f;
}

std::atomic<bool> g_twiddle_fault{false};
std::atomic<std::size_t> g_cap{1024};

// ---- apply kernel ----------------------------------------------------------

void stage_apply(const Tensor& st, std::size_t bit, bool transpose, double* re, double* im, std::size_t n,
                 std::size_t inner) {
  const std::size_t half = n / 2;
  const auto sr = st.re();
  const auto si = st.im();
  const std::size_t r2 = transpose ? 2 : 1, r3 = transpose ? 1 : 2;
  for (std::size_t p = 0; p < half; ++p) {
    const std::size_t lo = pair_low(p, bit), hi = lo + (std::size_t{1} << bit);
    const double a_r = sr[p], a_i = si[p];
    const double b_r = sr[r2 * half + p], b_i = si[r2 * half + p];
    const double c_r = sr[r3 * half + p], c_i = si[r3 * half + p];
    const double e_r = sr[3 * half + p], e_i = si[3 * half + p];
    double* xr0 = re + lo * inner;
    double* xi0 = im + lo * inner;
    double* xr1 = re + hi * inner;
    double* xi1 = im + hi * inner;
    for (std::size_t j = 0; j < inner; ++j) {
      const double ur = xr0[j], ui = xi0[j], vr = xr1[j], vi = xi1[j];
      xr0[j] = a_r * ur - a_i * ui + b_r * vr - b_i * vi;
      xi0[j] = a_r * ui + a_i * ur + b_r * vi + b_i * vr;
      xr1[j] = c_r * ur - c_i * ui + e_r * vr - e_i * vi;
      xi1[j] = c_r * ui + c_i * ur + e_r * vi + e_i * vr;
    }
  }
}

void kmatrix_apply_block(const KMatrix& k, double* re, double* im, std::size_t inner) {
  const std::size_t n = k.n(), L = log2_exact(n);
  const auto& fs = k.factors();
  for (std::size_t f = fs.size(); f-- > 0;) {
    for (std::size_t b = L; b-- > 0;) stage_apply(fs[f].right.stage(b), b, true, re, im, n, inner);
    for (std::size_t b = 0; b < L; ++b) stage_apply(fs[f].left.stage(b), b, false, re, im, n, inner);
  }
}

struct StageRef {
  const Tensor* t;
  std::size_t bit;
  bool transpose;
  std::size_t param;
};

// Stages of k in application order, with their index into k.parameters().
std::vector<StageRef> stage_sequence(const KMatrix& k) {
  const std::size_t L = log2_exact(k.n());
  const auto& fs = k.factors();
  std::vector<StageRef> seq;
  for (std::size_t f = fs.size(); f-- > 0;) {
    for (std::size_t b = L; b-- > 0;) seq.push_back({&fs[f].right.stage(b), b, true, f * 2 * L + L + b});
    for (std::size_t b = 0; b < L; ++b) seq.push_back({&fs[f].left.stage(b), b, false, f * 2 * L + b});
  }
  return seq;
}

void stage_backward(const Tensor& st, std::size_t bit, bool transpose, const double* xr, const double* xi, double* gr,
                    double* gi, Tensor* gst, std::size_t n, std::size_t inner) {
  const std::size_t half = n / 2;
  const auto sr = st.re();
  const auto si = st.im();
  const std::size_t r2 = transpose ? 2 : 1, r3 = transpose ? 1 : 2;
  for (std::size_t p = 0; p < half; ++p) {
    const std::size_t lo = pair_low(p, bit), hi = lo + (std::size_t{1} << bit);
    const double a_r = sr[p], a_i = si[p];
    const double b_r = sr[r2 * half + p], b_i = si[r2 * half + p];
    const double c_r = sr[r3 * half + p], c_i = si[r3 * half + p];
    const double e_r = sr[3 * half + p], e_i = si[3 * half + p];
    double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    for (std::size_t j = 0; j < inner; ++j) {
      const std::size_t l = lo * inner + j, h = hi * inner + j;
      const double glr = gr[l], gli = gi[l], ghr = gr[h], ghi = gi[h];
      const double xlr = xr[l], xli = xi[l], xhr = xr[h], xhi = xi[h];
      // g * conj(x)
      acc[0] += glr * xlr + gli * xli;
      acc[1] += gli * xlr - glr * xli;
      acc[2] += glr * xhr + gli * xhi;
      acc[3] += gli * xhr - glr * xhi;
      acc[4] += ghr * xlr + ghi * xli;
      acc[5] += ghi * xlr - ghr * xli;
      acc[6] += ghr * xhr + ghi * xhi;
      acc[7] += ghi * xhr - ghr * xhi;
      // conj(coef) * g
      gr[l] = a_r * glr + a_i * gli + c_r * ghr + c_i * ghi;
      gi[l] = a_r * gli - a_i * glr + c_r * ghi - c_i * ghr;
      gr[h] = b_r * glr + b_i * gli + e_r * ghr + e_i * ghi;
      gi[h] = b_r * gli - b_i * glr + e_r * ghi - e_i * ghr;
    }
    if (gst) {
      auto tr = gst->re();
      auto ti = gst->im();
      tr[p] += acc[0];
      ti[p] += acc[1];
      tr[r2 * half + p] += acc[2];
      ti[r2 * half + p] += acc[3];
      tr[r3 * half + p] += acc[4];
      ti[r3 * half + p] += acc[5];
      tr[3 * half + p] += acc[6];
      ti[3 * half + p] += acc[7];
    }
  }
}

}  // namespace

namespace detail {
void set_twiddle_fault(bool enabled) { g_twiddle_fault = enabled; }
bool twiddle_fault() { return g_twiddle_fault; }
}  // namespace detail

// ---- types -----------------------------------------------------------------

ButterflyMatrix::ButterflyMatrix(std::size_t n) : n_(n) {
  require_size(n);
  const std::size_t L = log2_exact(n);
  for (std::size_t b = 0; b < L; ++b) stages_.push_back(stage_tensor(Gate::identity(n, b)));
}

ButterflyFactor ButterflyMatrix::factor(std::size_t stage, std::size_t block) const {
  const std::size_t k = block_length(stage), h = k / 2, half = n_ / 2;
  if (block >= n_ / k) throw std::out_of_range("butterfly block index out of range");
  ButterflyFactor f;
  f.size = k;
  std::vector<cplx>* ds[4] = {&f.d1, &f.d2, &f.d3, &f.d4};
  const Tensor& st = stages_.at(stage);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t j = 0; j < h; ++j) ds[r]->push_back(st.at(r * half + block * h + j));
  return f;
}

void ButterflyMatrix::set_factor(std::size_t stage, std::size_t block, const ButterflyFactor& f) {
  const std::size_t k = block_length(stage), h = k / 2, half = n_ / 2;
  if (block >= n_ / k) throw std::out_of_range("butterfly block index out of range");
  const std::vector<cplx>* ds[4] = {&f.d1, &f.d2, &f.d3, &f.d4};
  if (f.size != k) throw std::invalid_argument("butterfly factor size does not match stage block length");
  for (const auto* d : ds)
    if (d->size() != h) throw std::invalid_argument("butterfly factor diagonal has wrong length");
  Tensor& st = stages_.at(stage);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t j = 0; j < h; ++j) st.set(r * half + block * h + j, (*ds[r])[j]);
}

ButterflyMatrix ButterflyMatrix::clone() const {
  ButterflyMatrix b;
  b.n_ = n_;
  for (const auto& s : stages_) b.stages_.push_back(s.clone());
  return b;
}

KMatrix::KMatrix(std::size_t n, std::vector<KFactor> factors) : n_(n), factors_(std::move(factors)) {
  require_size(n);
  if (factors_.empty()) throw std::invalid_argument("K-matrix depth must be positive");
  for (const auto& f : factors_)
    if (f.left.n() != n || f.right.n() != n) throw std::invalid_argument("K-matrix factor dimension mismatch");
}

std::vector<Tensor> KMatrix::parameters() const {
  std::vector<Tensor> out;
  for (const auto& f : factors_) {
    for (std::size_t s = 0; s < f.left.num_stages(); ++s) out.push_back(f.left.stage(s));
    for (std::size_t s = 0; s < f.right.num_stages(); ++s) out.push_back(f.right.stage(s));
  }
  return out;
}

std::size_t KMatrix::parameter_count() const { return depth() * 2 * log2_exact(n_) * 2 * n_; }

KMatrix KMatrix::clone() const {
  std::vector<KFactor> fs;
  for (const auto& f : factors_) fs.push_back({f.left.clone(), f.right.clone()});
  return KMatrix(n_, std::move(fs));
}

std::vector<Tensor> KroneckerK::parameters() const {
  std::vector<Tensor> out;
  for (const auto& k : axes) {
    auto p = k.parameters();
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

KroneckerK KroneckerK::clone() const {
  KroneckerK c;
  for (const auto& k : axes) c.axes.push_back(k.clone());
  return c;
}

// ---- application -----------------------------------------------------------

std::vector<cplx> butterfly_apply(const ButterflyMatrix& b, const std::vector<cplx>& x) {
  if (x.size() != b.n())
    throw std::invalid_argument("butterfly_apply: vector length " + std::to_string(x.size()) + " != " +
                                std::to_string(b.n()));
  std::vector<double> re(x.size()), im(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    re[i] = x[i].real();
    im[i] = x[i].imag();
  }
  for (std::size_t s = 0; s < b.num_stages(); ++s) stage_apply(b.stage(s), s, false, re.data(), im.data(), b.n(), 1);
  std::vector<cplx> y(x.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = {re[i], im[i]};
  return y;
}

void kmatrix_apply_inplace(const KMatrix& k, double* re, double* im, std::size_t outer, std::size_t inner) {
  const std::size_t stride = k.n() * inner;
  parallel_for(outer, 1, [&](std::size_t b, std::size_t e) {
    for (std::size_t o = b; o < e; ++o) kmatrix_apply_block(k, re + o * stride, im + o * stride, inner);
  });
}

void kmatrix_backward_inplace(const KMatrix& k, const double* xre, const double* xim, double* gre, double* gim,
                              std::size_t outer, std::size_t inner, std::vector<Tensor>* gstages) {
  const auto seq = stage_sequence(k);
  const std::size_t block = k.n() * inner;
  if (gstages && gstages->size() != 2 * k.depth() * log2_exact(k.n()))
    throw std::invalid_argument("kmatrix_backward: stage gradient list does not match the K-matrix");
  // Activations entering each stage, recomputed per outer slice.
  std::vector<double> act_r((seq.size() + 1) * block), act_i((seq.size() + 1) * block);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy(xre + o * block, xre + (o + 1) * block, act_r.begin());
    std::copy(xim + o * block, xim + (o + 1) * block, act_i.begin());
    for (std::size_t s = 0; s < seq.size(); ++s) {
      std::copy(act_r.begin() + s * block, act_r.begin() + (s + 1) * block, act_r.begin() + (s + 1) * block);
      std::copy(act_i.begin() + s * block, act_i.begin() + (s + 1) * block, act_i.begin() + (s + 1) * block);
      stage_apply(*seq[s].t, seq[s].bit, seq[s].transpose, act_r.data() + (s + 1) * block,
                  act_i.data() + (s + 1) * block, k.n(), inner);
    }
    for (std::size_t s = seq.size(); s-- > 0;) {
      Tensor* gst = gstages ? &(*gstages)[seq[s].param] : nullptr;
      stage_backward(*seq[s].t, seq[s].bit, seq[s].transpose, act_r.data() + s * block, act_i.data() + s * block,
                     gre + o * block, gim + o * block, gst, k.n(), inner);
    }
  }
}

Tensor kmatrix_apply(const KMatrix& k, const Tensor& x, std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis);
  if (s.n != k.n())
    throw std::invalid_argument("kmatrix_apply: axis " + std::to_string(axis) + " has size " + std::to_string(s.n) +
                                ", K-matrix has size " + std::to_string(k.n()));
  Tensor y = x.as_complex().clone();
  kmatrix_apply_inplace(k, y.re().data(), y.im().data(), s.outer, s.inner);
  return y;
}

Tensor kron_apply(const KroneckerK& ks, const Tensor& x, std::size_t first_axis) {
  if (first_axis + ks.ndim() > x.dim()) throw std::out_of_range("kron_apply: not enough axes in input");
  for (std::size_t a = 0; a < ks.ndim(); ++a)
    if (x.size(first_axis + a) != ks.axes[a].n())
      throw std::invalid_argument("kron_apply: axis " + std::to_string(first_axis + a) + " size mismatch");
  Tensor y = x.as_complex().clone();
  for (std::size_t a = 0; a < ks.ndim(); ++a) {
    const AxisSplit s = split_axis(y.shape(), first_axis + a);
    kmatrix_apply_inplace(ks.axes[a], y.re().data(), y.im().data(), s.outer, s.inner);
  }
  return y;
}

// ---- dense forms -----------------------------------------------------------

std::size_t materialization_cap() { return g_cap; }
void set_materialization_cap(std::size_t cap) { g_cap = cap; }

namespace {
void check_cap(std::size_t n) {
  if (n > g_cap)
    throw ResourceError("materialization of size " + std::to_string(n) + " exceeds the cap of " +
                        std::to_string(g_cap.load()));
}
std::vector<cplx> eye_planes_to_dense(const std::vector<double>& re, const std::vector<double>& im) {
  std::vector<cplx> out(re.size());
  for (std::size_t i = 0; i < re.size(); ++i) out[i] = {re[i], im[i]};
  return out;
}
}  // namespace

std::vector<cplx> butterfly_materialize(const ButterflyMatrix& b) {
  const std::size_t n = b.n();
  check_cap(n);
  std::vector<double> re(n * n, 0.0), im(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) re[i * n + i] = 1.0;
  for (std::size_t s = 0; s < b.num_stages(); ++s) stage_apply(b.stage(s), s, false, re.data(), im.data(), n, n);
  return eye_planes_to_dense(re, im);
}

std::vector<cplx> kmatrix_materialize(const KMatrix& k) {
  const std::size_t n = k.n();
  check_cap(n);
  std::vector<double> re(n * n, 0.0), im(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) re[i * n + i] = 1.0;
  kmatrix_apply_inplace(k, re.data(), im.data(), 1, n);
  return eye_planes_to_dense(re, im);
}

// ---- constructions ---------------------------------------------------------

KMatrix init_identity(std::size_t n, std::size_t depth) {
  require_size(n);
  if (depth == 0) throw std::invalid_argument("K-matrix depth must be positive");
  std::vector<KFactor> fs;
  for (std::size_t d = 0; d < depth; ++d) fs.push_back({ButterflyMatrix(n), ButterflyMatrix(n)});
  return KMatrix(n, std::move(fs));
}

KMatrix init_zero(std::size_t n, std::size_t depth) {
  KMatrix k = init_identity(n, depth);
  Tensor& last = k.factors().front().left.stage(log2_exact(n) - 1);
  last.fill(0.0, 0.0);
  return k;
}

KMatrix init_random(std::size_t n, std::size_t depth, std::uint64_t seed, double scale) {
  KMatrix k = init_identity(n, depth);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, scale / std::numbers::sqrt2);
  for (auto& t : k.parameters()) {
    for (auto& v : t.re()) v = nd(rng);
    for (auto& v : t.im()) v = nd(rng);
  }
  return k;
}

namespace {

std::size_t bit_of(std::size_t i, std::size_t b) { return (i >> b) & 1; }

// Sweeps of the depth-1 DFT with twiddle exponent sign `sign` (-1 forward).
// The descending sweep computes the transform digit by digit while pairing
// position p with q = L-1-p; the ascending sweep applies the remaining
// cross twiddles and undoes the XOR labels, ending in natural order.
std::pair<Sweep, Sweep> dft_sweeps(std::size_t n, int sign) {
  const std::size_t L = log2_exact(n);
  auto omega = [n, sign](std::size_t e) {
    const double ang = sign * 2.0 * std::numbers::pi * static_cast<double>(e % n) / static_cast<double>(n);
    return cplx(std::cos(ang), std::sin(ang));
  };
  Sweep desc, asc;
  for (std::size_t b = 0; b < L; ++b) {
    desc.emplace_back(n, b);
    asc.emplace_back(n, b);
  }
  for (std::size_t pos = 0; pos < L; ++pos) {
    const std::size_t q = L - 1 - pos;
    Gate& gd = desc[pos];
    Gate& ga = asc[pos];
    for (std::size_t p = 0; p < n / 2; ++p) {
      const std::size_t lo = pair_low(p, pos);
      for (std::size_t old_v = 0; old_v < 2; ++old_v) {
        const std::size_t in = lo | (old_v << pos);
        for (std::size_t new_v = 0; new_v < 2; ++new_v) {
          const std::size_t out = lo | (new_v << pos);
          std::size_t low_bits = 0;
          for (std::size_t b = 0; b < pos; ++b) low_bits |= bit_of(in, b) << b;
          cplx dv, av;
          if (pos > q) {
            const std::size_t jq = bit_of(in, q), kq = new_v ^ jq;
            dv = omega((kq << q) * ((old_v << pos) + low_bits));
            const std::size_t kq2 = bit_of(in, q), jq2 = old_v ^ kq2;
            std::size_t s = jq2 << q;
            for (std::size_t b = 0; b < q; ++b) s += (bit_of(in, b) ^ bit_of(in, L - 1 - b)) << b;
            av = omega((new_v << pos) * s);
          } else if (pos == q) {
            dv = omega((new_v << pos) * ((old_v << pos) + low_bits));
            av = new_v == old_v ? 1.0 : 0.0;
          } else {
            dv = new_v == (old_v ^ bit_of(in, L - 1 - pos)) ? 1.0 : 0.0;
            av = new_v == old_v ? 1.0 : 0.0;
          }
          gd.entry(out, in) = dv;
          ga.entry(out, in) = av;
        }
      }
    }
  }
  return {desc, asc};
}

}  // namespace

KMatrix init_dft(std::size_t n) {
  require_size(n);
  auto [desc, asc] = dft_sweeps(n, detail::twiddle_fault() ? 1 : -1);
  std::vector<KFactor> fs{make_factor(n, desc, asc)};
  return KMatrix(n, std::move(fs));
}

KMatrix init_idft(std::size_t n) {
  require_size(n);
  auto [desc, asc] = dft_sweeps(n, detail::twiddle_fault() ? -1 : 1);
  for (auto& e : asc.back().d)
    for (auto& v : e) v /= static_cast<double>(n);
  std::vector<KFactor> fs{make_factor(n, desc, asc)};
  return KMatrix(n, std::move(fs));
}

namespace {

// Benes routing. Stage s < L switches bit order[s]; stage s >= L switches
// bit order[2L-1-s]. moves[s][pos] is where the item at pos goes.
void benes_route(std::vector<std::size_t> pos, std::vector<std::size_t> dst, const std::vector<std::size_t>& order,
                 std::size_t level, std::vector<std::vector<std::size_t>>& moves) {
  const std::size_t L = order.size();
  const std::size_t B = std::size_t{1} << order[level];
  const std::size_t m = pos.size();
  if (level + 1 == L) {
    for (std::size_t i = 0; i < m; ++i) {
      moves[level][pos[i]] = dst[i];
      moves[2 * L - 1 - level][dst[i]] = dst[i];
    }
    return;
  }
  std::map<std::size_t, std::size_t> by_pos, by_dst;
  for (std::size_t i = 0; i < m; ++i) {
    by_pos[pos[i]] = i;
    by_dst[dst[i]] = i;
  }
  std::vector<int> color(m, -1);
  for (std::size_t start = 0; start < m; ++start) {
    if (color[start] != -1) continue;
    std::size_t cur = start;
    while (true) {
      color[cur] = 0;
      const std::size_t o = by_dst.at(dst[cur] ^ B);
      if (color[o] != -1) break;
      color[o] = 1;
      const std::size_t nxt = by_pos.at(pos[o] ^ B);
      if (color[nxt] != -1) break;
      cur = nxt;
    }
  }
  std::vector<std::size_t> sub_pos[2], sub_dst[2];
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t c = static_cast<std::size_t>(color[i]);
    const std::size_t p2 = (pos[i] & ~B) | (c * B);
    const std::size_t d2 = (dst[i] & ~B) | (c * B);
    moves[level][pos[i]] = p2;
    moves[2 * L - 1 - level][d2] = dst[i];
    sub_pos[c].push_back(p2);
    sub_dst[c].push_back(d2);
  }
  for (int c = 0; c < 2; ++c) benes_route(std::move(sub_pos[c]), std::move(sub_dst[c]), order, level + 1, moves);
}

// Routes a full bijection src -> dst through 2L stages and returns the gates
// in application order.
std::vector<Gate> benes_gates(std::size_t n, const std::vector<std::size_t>& src_of_dst,
                              const std::vector<std::size_t>& order) {
  const std::size_t L = order.size();
  std::vector<std::vector<std::size_t>> moves(2 * L, std::vector<std::size_t>(n));
  std::vector<std::size_t> pos(n), dst(n);
  for (std::size_t t = 0; t < n; ++t) {
    pos[t] = src_of_dst[t];
    dst[t] = t;
  }
  benes_route(pos, dst, order, 0, moves);
  std::vector<Gate> gates;
  for (std::size_t s = 0; s < 2 * L; ++s) {
    Gate g(n, s < L ? order[s] : order[2 * L - 1 - s]);
    for (std::size_t i = 0; i < n; ++i) g.entry(moves[s][i], i) = 1.0;
    gates.push_back(std::move(g));
  }
  return gates;
}

void check_bijection(std::size_t n, const std::vector<std::size_t>& perm) {
  if (perm.size() != n) throw std::invalid_argument("permutation length does not match n");
  std::vector<bool> seen(n, false);
  for (auto v : perm) {
    if (v >= n || seen[v]) throw std::invalid_argument("permutation is not a bijection");
    seen[v] = true;
  }
}

struct Route {
  std::size_t src, dst;
  cplx value{1.0};
};

// Routes items along a single sweep whose bits are visited in `order`. Item
// paths flip one bit per stage from src toward dst. Items sharing a source
// may branch; the final stage carries each destination's value.
std::vector<Gate> sweep_route(std::size_t n, const std::vector<Route>& items, const std::vector<std::size_t>& order) {
  std::vector<Gate> gates;
  for (auto b : order) gates.emplace_back(n, b);
  std::vector<std::map<std::size_t, std::size_t>> owner(order.size());
  for (std::size_t it = 0; it < items.size(); ++it) {
    const auto& r = items[it];
    std::size_t done = 0, cur = r.src;
    for (std::size_t s = 0; s < order.size(); ++s) {
      done |= std::size_t{1} << order[s];
      const std::size_t nxt = (r.dst & done) | (r.src & ~done);
      auto [iter, fresh] = owner[s].emplace(nxt, r.src);
      if (!fresh && iter->second != r.src) throw std::logic_error("sweep routing collision");
      const bool last = s + 1 == order.size();
      if (last) {
        gates[s].entry(nxt, cur) = r.value;
      } else if (fresh) {
        gates[s].entry(nxt, cur) = 1.0;
      }
      cur = nxt;
    }
  }
  return gates;
}

std::vector<std::size_t> ascending_bits(std::size_t L) {
  std::vector<std::size_t> o(L);
  for (std::size_t b = 0; b < L; ++b) o[b] = b;
  return o;
}

std::vector<std::size_t> descending_bits(std::size_t L) {
  std::vector<std::size_t> o(L);
  for (std::size_t b = 0; b < L; ++b) o[b] = L - 1 - b;
  return o;
}

// Reindexes gates (given in application order) by bit.
Sweep by_bit(std::vector<Gate> gates) {
  Sweep s(gates.size(), Gate(2, 0));
  for (auto& g : gates) s[g.bit] = std::move(g);
  return s;
}

}  // namespace

KMatrix init_permutation(std::size_t n, const std::vector<std::size_t>& perm) {
  require_size(n);
  check_bijection(n, perm);
  const std::size_t L = log2_exact(n);
  auto gates = benes_gates(n, perm, descending_bits(L));
  // Stages L-1 and L both act on bit 0; fold the second into the first.
  Gate merged = gates[L - 1];
  {
    Gate& second = gates[L];
    for (std::size_t p = 0; p < n / 2; ++p) {
      const auto& a = merged.d[p];
      const auto& b = second.d[p];
      merged.d[p] = {b[0] * a[0] + b[1] * a[2], b[0] * a[1] + b[1] * a[3], b[2] * a[0] + b[3] * a[2],
                     b[2] * a[1] + b[3] * a[3]};
    }
  }
  std::vector<Gate> desc(gates.begin(), gates.begin() + static_cast<std::ptrdiff_t>(L));
  desc[L - 1] = merged;
  std::vector<Gate> asc(gates.begin() + static_cast<std::ptrdiff_t>(L), gates.end());
  asc[0] = Gate::identity(n, 0);
  std::vector<KFactor> fs{make_factor(n, by_bit(std::move(desc)), by_bit(std::move(asc))),
                          KFactor{ButterflyMatrix(n), ButterflyMatrix(n)}};
  return KMatrix(n, std::move(fs));
}

KMatrix init_sparse(std::size_t n, const std::vector<SparseEntry>& entries) {
  require_size(n);
  if (entries.size() > n)
    throw Unsupported("init_sparse: " + std::to_string(entries.size()) + " entries exceed n = " + std::to_string(n));
  std::set<std::pair<std::size_t, std::size_t>> seen;
  for (const auto& e : entries) {
    if (e.row >= n || e.col >= n) throw std::invalid_argument("init_sparse: entry index out of range");
    if (!seen.emplace(e.row, e.col).second)
      throw std::invalid_argument("init_sparse: duplicate entry (" + std::to_string(e.row) + "," +
                                  std::to_string(e.col) + ")");
  }
  const std::size_t L = log2_exact(n), m = entries.size();

  // Slots in column order; slot_of_row_rank maps row-order rank to slot.
  std::vector<std::size_t> by_col(m), by_row(m);
  for (std::size_t i = 0; i < m; ++i) by_col[i] = by_row[i] = i;
  std::stable_sort(by_col.begin(), by_col.end(), [&](auto a, auto b) {
    return std::pair(entries[a].col, entries[a].row) < std::pair(entries[b].col, entries[b].row);
  });
  std::stable_sort(by_row.begin(), by_row.end(), [&](auto a, auto b) {
    return std::pair(entries[a].row, entries[a].col) < std::pair(entries[b].row, entries[b].col);
  });

  // Gather distinct columns into a prefix, then fan each out to its slots.
  std::vector<Route> conc_c, exp_c;
  {
    std::size_t distinct = 0;
    for (std::size_t k = 0; k < m; ++k) {
      const auto& e = entries[by_col[k]];
      if (k == 0 || e.col != entries[by_col[k - 1]].col) conc_c.push_back({e.col, distinct++});
      exp_c.push_back({distinct - 1, k, e.value});
    }
  }
  // Slot k (column order) moves to its rank in row order.
  std::vector<std::size_t> rank_of_entry(m);
  for (std::size_t r = 0; r < m; ++r) rank_of_entry[by_row[r]] = r;
  std::vector<std::size_t> src_of_dst(n);
  for (std::size_t t = 0; t < n; ++t) src_of_dst[t] = t;
  for (std::size_t k = 0; k < m; ++k) src_of_dst[rank_of_entry[by_col[k]]] = k;
  // Sum slots of each row into a prefix, then scatter to the rows.
  std::vector<Route> exp_r, conc_r;
  {
    std::size_t distinct = 0;
    for (std::size_t r = 0; r < m; ++r) {
      const auto& e = entries[by_row[r]];
      if (r == 0 || e.row != entries[by_row[r - 1]].row) conc_r.push_back({e.row, distinct++});
      exp_r.push_back({distinct - 1, r});
    }
  }

  const auto asc_bits = ascending_bits(L), desc_bits = descending_bits(L);
  Sweep s_conc_c = by_bit(sweep_route(n, conc_c, asc_bits));
  Sweep s_exp_c = by_bit(sweep_route(n, exp_c, desc_bits));
  auto pi = benes_gates(n, src_of_dst, asc_bits);
  Sweep s_pi_asc = by_bit(std::vector<Gate>(pi.begin(), pi.begin() + static_cast<std::ptrdiff_t>(L)));
  Sweep s_pi_desc = by_bit(std::vector<Gate>(pi.begin() + static_cast<std::ptrdiff_t>(L), pi.end()));
  Sweep s_exp_r_t = transposed(by_bit(sweep_route(n, exp_r, desc_bits)));
  Sweep s_conc_r_t = transposed(by_bit(sweep_route(n, conc_r, asc_bits)));
  const Sweep id = identity_sweep(n);

  std::vector<KFactor> fs{make_factor(n, s_conc_r_t, id), make_factor(n, s_pi_desc, s_exp_r_t),
                          make_factor(n, s_exp_c, s_pi_asc), make_factor(n, id, s_conc_c)};
  return KMatrix(n, std::move(fs));
}

KMatrix kmatrix_compose(const KMatrix& k1, const KMatrix& k2) {
  if (k1.n() != k2.n()) throw std::invalid_argument("kmatrix_compose: dimension mismatch");
  std::vector<KFactor> fs;
  for (const auto& f : k1.factors()) fs.push_back({f.left.clone(), f.right.clone()});
  for (const auto& f : k2.factors()) fs.push_back({f.left.clone(), f.right.clone()});
  return KMatrix(k1.n(), std::move(fs));
}

namespace {
// Scales the rows (transpose=false) of a stored stage tensor by s.
void scale_stage_rows(Tensor& st, std::size_t bit, const std::vector<cplx>& s) {
  const std::size_t half = st.size(1);
  for (std::size_t p = 0; p < half; ++p) {
    const std::size_t lo = pair_low(p, bit), hi = lo + (std::size_t{1} << bit);
    for (std::size_t r = 0; r < 4; ++r) st.set(r * half + p, st.at(r * half + p) * (r < 2 ? s[lo] : s[hi]));
  }
}
}  // namespace

void scale_rows(KMatrix& k, const std::vector<cplx>& s) {
  if (s.size() != k.n()) throw std::invalid_argument("scale_rows: length mismatch");
  const std::size_t L = log2_exact(k.n());
  scale_stage_rows(k.factors().front().left.stage(L - 1), L - 1, s);
}

void scale_cols(KMatrix& k, const std::vector<cplx>& s) {
  if (s.size() != k.n()) throw std::invalid_argument("scale_cols: length mismatch");
  const std::size_t L = log2_exact(k.n());
  // The first stage applied is the transpose of right.stage(L-1); its
  // columns are the stored tensor's rows.
  scale_stage_rows(k.factors().back().right.stage(L - 1), L - 1, s);
}

void scale(KMatrix& k, cplx factor) {
  Tensor& st = k.factors().front().left.stage(log2_exact(k.n()) - 1);
  for (std::size_t i = 0; i < st.numel(); ++i) st.set(i, st.at(i) * factor);
}

std::size_t kmatrix_madds(std::size_t n, std::size_t depth) { return depth * 2 * butterfly_madds(n); }

}  // namespace xd::kal
