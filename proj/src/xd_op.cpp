// SPDX-License-Identifier: Apache-2.0
#include "xdops/xd_op.hpp"

#include <algorithm>
#include <atomic>
#include <functional>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

#include "xdops/error.hpp"

namespace xd {
namespace {

std::atomic<bool> g_debug_checks{false};

Shape domain_of(const Shape& m) {
  Shape n;
  for (std::size_t e : m) {
    if (e == 0) throw std::invalid_argument("XD op: zero input extent");
    n.push_back(kal::next_power_of_two(std::max<std::size_t>(e, 2)));
  }
  return n;
}

Tensor init_weight(std::size_t co, std::size_t ci, const Shape& k, std::uint64_t seed) {
  Shape shape{co, ci};
  shape.insert(shape.end(), k.begin(), k.end());
  const double bound = 1.0 / std::sqrt(static_cast<double>(ci * numel(k)));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<double> v(numel(shape));
  for (double& e : v) e = u(rng);
  Tensor w = Tensor::real(shape, std::move(v));
  w.set_requires_grad(true);
  return w;
}

Tensor ones_complex(const Shape& shape) {
  Tensor t = Tensor::zeros(shape, DType::Complex);
  t.fill(1.0);
  return t;
}

Tensor eye_complex(std::size_t c) {
  Tensor t = Tensor::zeros({c, c}, DType::Complex);
  for (std::size_t i = 0; i < c; ++i) t.set(i * c + i, 1.0);
  return t;
}

std::vector<AxisView> full_view(const Shape& m) {
  std::vector<AxisView> v;
  for (std::size_t e : m) v.push_back({1, e});
  return v;
}

kal::KroneckerK per_axis(const Shape& n, const std::function<kal::KMatrix(std::size_t)>& make) {
  kal::KroneckerK k;
  for (std::size_t a = 0; a < n.size(); ++a) k.axes.push_back(make(a));
  return k;
}

XDOp assemble(XDParams p, FilterShape f, Shape n, Shape m, std::vector<AxisView> view, std::uint64_t seed) {
  XDOp op;
  op.weight = init_weight(f.c_out, f.c_in, f.k, seed);
  op.params = std::move(p);
  op.filter = std::move(f);
  op.n = std::move(n);
  op.m = std::move(m);
  op.view = std::move(view);
  for (auto& t : op.arch_parameters()) t.set_requires_grad(true);
  return op;
}

void check_finite(const Tensor& t) {
  for (double v : t.re())
    if (!std::isfinite(v)) throw NumericError("xd_forward: non-finite output");
}

}  // namespace

std::array<std::size_t, 3> XDParams::depth() const {
  std::array<std::size_t, 3> d{};
  const kal::KroneckerK* ks[3] = {&K, &L, &M};
  for (int i = 0; i < 3; ++i) {
    if (ks[i]->axes.empty()) continue;
    d[i] = ks[i]->axes.front().depth();
    for (const auto& k : ks[i]->axes)
      if (k.depth() != d[i]) throw std::logic_error("XDParams::depth: axes disagree");
  }
  return d;
}

Shape XDOp::output_shape() const {
  Shape s;
  for (const auto& v : view) s.push_back(v.size);
  return s;
}

std::vector<Tensor> XDOp::arch_parameters() const {
  std::vector<Tensor> out;
  for (const auto* ks : {&params.K, &params.L, &params.M})
    for (auto& t : ks->parameters()) out.push_back(t);
  if (!params.b_frozen) out.push_back(params.b);
  if (!params.C_frozen) out.push_back(params.C);
  return out;
}

XDOp XDOp::clone() const {
  XDOp c;
  c.params.K = params.K.clone();
  c.params.L = params.L.clone();
  c.params.M = params.M.clone();
  c.params.b = params.b.clone();
  c.params.C = params.C.clone();
  c.params.b_frozen = params.b_frozen;
  c.params.C_frozen = params.C_frozen;
  c.filter = filter;
  c.n = n;
  c.m = m;
  c.view = view;
  c.weight = weight.clone();
  return c;
}

ParameterGroups parameter_groups(const XDOp& op) { return {op.arch_parameters(), op.model_parameters()}; }

void set_trainable(XDOp& op, bool arch, bool weights) {
  for (const auto* ks : {&op.params.K, &op.params.L, &op.params.M})
    for (auto& t : ks->parameters()) t.set_requires_grad(arch);
  op.params.b.set_requires_grad(arch && !op.params.b_frozen);
  op.params.C.set_requires_grad(arch && !op.params.C_frozen);
  op.weight.set_requires_grad(weights);
}

void set_debug_checks(bool enabled) { g_debug_checks = enabled; }

Tensor xd_forward(ad::Tape& tape, const XDOp& op, const Tensor& x) { return xd_forward(tape, op, op.weight, x); }

Tensor xd_forward(ad::Tape& tape, const XDOp& op, const Tensor& w, const Tensor& x) {
  const std::size_t N = op.ndim();
  const std::size_t co = op.filter.c_out, ci = op.filter.c_in;
  Shape wshape{co, ci};
  wshape.insert(wshape.end(), op.filter.k.begin(), op.filter.k.end());
  if (w.shape() != wshape)
    throw std::invalid_argument("xd_forward: weight " + shape_str(w.shape()) + ", expected " + shape_str(wshape));

  const bool batched = x.dim() == N + 2;
  Shape xshape = x.shape();
  if (!batched) xshape.insert(xshape.begin(), 1);
  Shape expect{xshape.empty() ? 0 : xshape[0], ci};
  expect.insert(expect.end(), op.m.begin(), op.m.end());
  if (xshape != expect)
    throw std::invalid_argument("xd_forward: input " + shape_str(x.shape()) + ", expected [B, " +
                                std::to_string(ci) + ", " + shape_str(op.m) + "]");
  const std::size_t B = xshape[0];

  Tensor xb = batched ? x : tape.reshape(x, xshape);
  Shape xpad{B, ci};
  xpad.insert(xpad.end(), op.n.begin(), op.n.end());
  if (op.m != op.n) xb = tape.pad(xb, xpad);
  Tensor u = tape.kron_apply(op.params.M, xb, 2);

  Shape wpad{co, ci};
  wpad.insert(wpad.end(), op.n.begin(), op.n.end());
  Tensor wp = op.filter.k == op.n ? w : tape.pad(w, wpad);
  Tensor s = tape.add(tape.kron_apply(op.params.L, wp, 2), op.params.b);

  Tensor y = tape.kron_apply(op.params.K, tape.contract(op.params.C, s, u), 2);
  Tensor r = tape.real(y);
  for (std::size_t a = 0; a < N; ++a) {
    const AxisView& v = op.view[a];
    if (v.step == 1 && v.size == op.n[a]) continue;
    std::vector<std::size_t> idx(v.size);
    for (std::size_t t = 0; t < v.size; ++t) idx[t] = t * v.step;
    r = tape.gather(r, 2 + a, idx);
  }
  if (g_debug_checks) check_finite(r);
  if (!batched) {
    Shape os = r.shape();
    os.erase(os.begin());
    r = tape.reshape(r, os);
  }
  return r;
}

Tensor xd_forward(const XDOp& op, const Tensor& w, const Tensor& x) {
  ad::Tape tape;
  return xd_forward(tape, op, w, x);
}

// ---- initializers ------------------------------------------------------------

std::vector<std::size_t> dilation_permutation(std::size_t n, std::size_t k, std::size_t d) {
  if (k == 0 || d == 0 || (k - 1) * d >= n)
    throw std::invalid_argument("dilation_permutation: taps do not fit in " + std::to_string(n));
  std::vector<std::size_t> perm(n, n);
  for (std::size_t j = 0; j < k; ++j) perm[j * d] = j;
  std::size_t next = k;
  for (auto& p : perm)
    if (p == n) p = next++;
  return perm;
}

std::vector<double> stride_mask(std::size_t n, std::size_t s) {
  if (s == 0) throw std::invalid_argument("stride_mask: zero stride");
  std::vector<double> m(n, 0.0);
  for (std::size_t i = 0; i < n; i += s) m[i] = 1.0;
  return m;
}

XDOp init_from_conv(const ConvSpec& spec) {
  if (spec.m.empty()) throw std::invalid_argument("init_from_conv: no spatial axes");
  if (spec.c_out == 0 || spec.c_in == 0) throw std::invalid_argument("init_from_conv: zero channels");
  if (spec.k == 0 || spec.stride == 0 || spec.dilation == 0)
    throw std::invalid_argument("init_from_conv: kernel, stride and dilation must be positive");
  Shape n = spec.domain.empty() ? domain_of(spec.m) : spec.domain;
  if (n.size() != spec.m.size()) throw std::invalid_argument("init_from_conv: domain rank mismatch");
  for (std::size_t a = 0; a < n.size(); ++a) {
    if (!kal::is_power_of_two(n[a]) || n[a] < spec.m[a])
      throw std::invalid_argument("init_from_conv: bad domain " + shape_str(n));
    if (spec.k > n[a]) throw std::invalid_argument("init_from_conv: kernel larger than domain");
    if ((spec.k - 1) * spec.dilation > n[a] - 1)
      throw std::invalid_argument("init_from_conv: dilated kernel does not fit in domain " + shape_str(n));
    if (spec.stride > 1 && spec.stride > n[a] - 1)
      throw std::invalid_argument("init_from_conv: stride exceeds domain");
  }
  Tensor C;
  if (spec.groups.defined()) {
    if (spec.groups.shape() != Shape{spec.c_out, spec.c_in})
      throw std::invalid_argument("init_from_conv: groups mask must be [c_out, c_in]");
    for (std::size_t i = 0; i < spec.groups.numel(); ++i) {
      const cplx v = spec.groups.at(i);
      if (v != cplx(0.0) && v != cplx(1.0)) throw std::invalid_argument("init_from_conv: groups mask must be 0/1");
    }
    C = spec.groups.as_complex().clone();
  } else {
    C = ones_complex({spec.c_out, spec.c_in});
  }

  XDParams p;
  p.K = per_axis(n, [&](std::size_t a) {
    kal::KMatrix k = kal::init_idft(n[a]);
    if (spec.stride > 1) {
      const auto mask = stride_mask(n[a], spec.stride);
      kal::scale_rows(k, std::vector<cplx>(mask.begin(), mask.end()));
    }
    return k;
  });
  p.L = per_axis(n, [&](std::size_t a) {
    if (spec.dilation == 1) return kal::init_dft(n[a]);
    return kal::kmatrix_compose(kal::init_dft(n[a]),
                                kal::init_permutation(n[a], dilation_permutation(n[a], spec.k, spec.dilation)));
  });
  p.M = per_axis(n, [&](std::size_t a) { return kal::init_dft(n[a]); });
  p.b = Tensor::zeros(n, DType::Complex);
  p.C = C;

  std::vector<AxisView> view = full_view(spec.m);
  if (spec.subsample && spec.stride > 1)
    for (auto& v : view) v = {spec.stride, (v.size + spec.stride - 1) / spec.stride};
  return assemble(std::move(p), {spec.c_out, spec.c_in, Shape(spec.m.size(), spec.k)}, n, spec.m, std::move(view),
                  spec.seed);
}

namespace {
XDOp identity_like(std::size_t co, std::size_t ci, const Shape& m, std::size_t k, std::uint64_t seed, double bval) {
  if (co == 0 || ci == 0) throw std::invalid_argument("XD op: zero channels");
  Shape n = domain_of(m);
  for (std::size_t e : n)
    if (k == 0 || k > e) throw std::invalid_argument("XD op: kernel does not fit in domain");
  XDParams p;
  p.K = per_axis(n, [&](std::size_t a) { return kal::init_identity(n[a]); });
  p.L = per_axis(n, [&](std::size_t a) { return kal::init_zero(n[a]); });
  p.M = per_axis(n, [&](std::size_t a) { return kal::init_identity(n[a]); });
  p.b = Tensor::zeros(n, DType::Complex);
  p.b.fill(bval);
  p.C = co == ci ? eye_complex(co) : Tensor::zeros({co, ci}, DType::Complex);
  return assemble(std::move(p), {co, ci, Shape(m.size(), k)}, n, m, full_view(m), seed);
}
}  // namespace

XDOp init_skip(std::size_t channels, const Shape& m, std::size_t k, std::uint64_t seed) {
  return identity_like(channels, channels, m, k, seed, 1.0);
}

XDOp init_zero(std::size_t c_out, std::size_t c_in, const Shape& m, std::size_t k, std::uint64_t seed) {
  return identity_like(c_out, c_in, m, k, seed, 0.0);
}

XDOp init_avgpool(const PoolSpec& spec) {
  ConvSpec cs;
  cs.c_out = cs.c_in = spec.channels;
  cs.m = spec.m;
  cs.k = spec.kernel;
  cs.stride = spec.stride;
  cs.dilation = spec.dilation;
  cs.subsample = spec.subsample;
  cs.seed = spec.seed;
  XDOp op = init_from_conv(cs);
  const Shape& n = op.n;
  op.params.L = per_axis(n, [&](std::size_t a) { return kal::init_zero(n[a]); });

  // b = (F box_0) ⊗ (F box_1) ⊗ ...
  std::vector<cplx> b{1.0};
  for (std::size_t a = 0; a < n.size(); ++a) {
    std::vector<double> box(n[a], 0.0);
    for (std::size_t j = 0; j < spec.kernel; ++j) box[j * spec.dilation] = 1.0 / static_cast<double>(spec.kernel);
    const Tensor fb = kal::kmatrix_apply(kal::init_dft(n[a]), Tensor::real({n[a]}, box).as_complex(), 0);
    const auto v = fb.to_complex();
    std::vector<cplx> nb;
    nb.reserve(b.size() * v.size());
    for (cplx x : b)
      for (cplx y : v) nb.push_back(x * y);
    b = std::move(nb);
  }
  op.params.b = Tensor::complex(n, b);
  op.params.C = eye_complex(spec.channels);
  set_trainable(op, true, true);
  return op;
}

XDOp init_fno(std::size_t c_out, std::size_t c_in, const Shape& m, std::size_t modes, std::uint64_t seed) {
  if (c_out == 0 || c_in == 0) throw std::invalid_argument("init_fno: zero channels");
  Shape n = domain_of(m);
  for (std::size_t e : n)
    if (modes == 0 || 2 * modes > e) throw std::invalid_argument("init_fno: modes must be in [1, n/2]");
  XDParams p;
  p.K = per_axis(n, [&](std::size_t a) { return kal::init_idft(n[a]); });
  p.L = per_axis(n, [&](std::size_t a) {
    std::vector<kal::SparseEntry> entries;
    for (std::size_t r = 0; r < modes; ++r) {
      entries.push_back({r, r, 1.0});
      entries.push_back({r, r + modes, cplx(0.0, 1.0)});
    }
    return kal::init_sparse(n[a], entries);
  });
  p.M = per_axis(n, [&](std::size_t a) { return kal::init_dft(n[a]); });
  p.b = Tensor::zeros(n, DType::Complex);
  p.C = ones_complex({c_out, c_in});
  return assemble(std::move(p), {c_out, c_in, Shape(m.size(), 2 * modes)}, n, m, full_view(m), seed);
}

XDOp init_transposed_conv(std::size_t c_out, std::size_t c_in, const Shape& m, std::size_t k, std::size_t dilation,
                          std::uint64_t seed) {
  if (c_out == 0 || c_in == 0) throw std::invalid_argument("init_transposed_conv: zero channels");
  if (k == 0 || dilation == 0) throw std::invalid_argument("init_transposed_conv: kernel and dilation must be positive");
  const std::size_t S = dilation * (k - 1) + 1;
  Shape n, out;
  for (std::size_t e : m) {
    if (e == 0) throw std::invalid_argument("init_transposed_conv: zero input extent");
    out.push_back(S * e);
    n.push_back(kal::next_power_of_two(std::max<std::size_t>(S * e, 2)));
  }
  XDParams p;
  p.K = per_axis(n, [&](std::size_t a) { return kal::init_idft(n[a]); });
  p.L = per_axis(n, [&](std::size_t a) {
    return kal::kmatrix_compose(kal::init_dft(n[a]),
                                kal::init_permutation(n[a], dilation_permutation(n[a], k, dilation)));
  });
  p.M = per_axis(n, [&](std::size_t a) {
    return kal::kmatrix_compose(kal::init_dft(n[a]), kal::init_permutation(n[a], dilation_permutation(n[a], m[a], S)));
  });
  p.b = Tensor::zeros(n, DType::Complex);
  p.C = ones_complex({c_out, c_in});
  return assemble(std::move(p), {c_out, c_in, Shape(m.size(), k)}, n, m, full_view(out), seed);
}

XDOp compose_fixed_kmatrix(const XDOp& op, const kal::KMatrix& a, Side side, std::size_t axis) {
  if (axis >= op.ndim()) throw std::invalid_argument("compose_fixed_kmatrix: axis out of range");
  if (a.n() != op.n[axis]) throw std::invalid_argument("compose_fixed_kmatrix: dimension mismatch");
  XDOp out = op.clone();
  if (side == Side::Input)
    out.params.M.axes[axis] = kal::kmatrix_compose(out.params.M.axes[axis], a);
  else
    out.params.K.axes[axis] = kal::kmatrix_compose(a, out.params.K.axes[axis]);
  const auto before = op.arch_parameters();
  const bool trainable = !before.empty() && before.front().requires_grad();
  for (auto& t : out.arch_parameters()) t.set_requires_grad(trainable);
  return out;
}

XDOp init_graph_conv(std::size_t c_out, std::size_t c_in, const std::vector<double>& g, std::size_t nodes,
                     std::uint64_t seed) {
  if (nodes == 0 || g.size() != nodes * nodes)
    throw std::invalid_argument("init_graph_conv: operator must be nodes x nodes");
  std::vector<kal::SparseEntry> entries;
  for (std::size_t r = 0; r < nodes; ++r)
    for (std::size_t c = 0; c < nodes; ++c)
      if (g[r * nodes + c] != 0.0) entries.push_back({r, c, g[r * nodes + c]});
  const std::size_t n = kal::next_power_of_two(std::max({nodes, entries.size(), std::size_t{2}}));
  ConvSpec cs;
  cs.c_out = c_out;
  cs.c_in = c_in;
  cs.m = {nodes};
  cs.k = 1;
  cs.seed = seed;
  cs.domain = {n};
  XDOp op = compose_fixed_kmatrix(init_from_conv(cs), kal::init_sparse(n, entries), Side::Input);
  op.view = {{1, nodes}};
  return op;
}

// ---- inspection ----------------------------------------------------------------

std::vector<cplx> dense_kron(const kal::KroneckerK& ks) {
  std::vector<cplx> out{1.0};
  std::size_t dim = 1;
  for (const auto& k : ks.axes) {
    const auto a = kal::kmatrix_materialize(k);
    const std::size_t n = k.n(), nd = dim * n;
    if (nd > kal::materialization_cap())
      throw ResourceError("dense_kron: dimension " + std::to_string(nd) + " exceeds cap");
    std::vector<cplx> r(nd * nd);
    for (std::size_t i = 0; i < dim; ++i)
      for (std::size_t j = 0; j < dim; ++j)
        for (std::size_t p = 0; p < n; ++p)
          for (std::size_t q = 0; q < n; ++q) r[(i * n + p) * nd + (j * n + q)] = out[i * dim + j] * a[p * n + q];
    out = std::move(r);
    dim = nd;
  }
  return out;
}

std::vector<double> dense_channel_map(const XDOp& op, std::size_t i, std::size_t j) {
  if (i >= op.filter.c_out || j >= op.filter.c_in) throw std::invalid_argument("dense_channel_map: channel out of range");
  const std::size_t P = numel(op.n);
  const auto K = dense_kron(op.params.K);
  const auto M = dense_kron(op.params.M);

  Tensor wij = Tensor::zeros(op.n, DType::Complex);
  {
    const Shape& k = op.filter.k;
    const std::size_t kk = numel(k), stride = kk;
    std::vector<std::size_t> idx(k.size(), 0);
    for (std::size_t t = 0; t < kk; ++t) {
      std::size_t flat = 0;
      for (std::size_t a = 0; a < k.size(); ++a) flat = flat * op.n[a] + idx[a];
      wij.set(flat, op.weight.re()[(i * op.filter.c_in + j) * stride + t]);
      for (std::size_t a = k.size(); a-- > 0;) {
        if (++idx[a] < k[a]) break;
        idx[a] = 0;
      }
    }
  }
  const auto s = kal::kron_apply(op.params.L, wij, 0).to_complex();
  const auto b = op.params.b.to_complex();
  const cplx c = op.params.C.at(i * op.filter.c_in + j);

  std::vector<double> out(P * P);
  for (std::size_t r = 0; r < P; ++r)
    for (std::size_t q = 0; q < P; ++q) {
      cplx acc = 0.0;
      for (std::size_t t = 0; t < P; ++t) acc += K[r * P + t] * (s[t] + b[t]) * M[t * P + q];
      out[r * P + q] = (c * acc).real();
    }
  return out;
}

}  // namespace xd
