// SPDX-License-Identifier: Apache-2.0
#include "xdops/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>

#include "json.hpp"

#include "xdops/xd_op.hpp"

namespace xd::oracle {
namespace {

using Index = std::vector<std::size_t>;

Index unravel(std::size_t flat, const Shape& shape) {
  Index idx(shape.size());
  for (std::size_t a = shape.size(); a-- > 0;) {
    idx[a] = flat % shape[a];
    flat /= shape[a];
  }
  return idx;
}

std::size_t ravel(const Index& idx, const Shape& shape) {
  std::size_t flat = 0;
  for (std::size_t a = 0; a < shape.size(); ++a) flat = flat * shape[a] + idx[a];
  return flat;
}

Shape spatial(const Tensor& t, std::size_t lead) { return Shape(t.shape().begin() + lead, t.shape().end()); }

void check_rank(const Tensor& w, const Tensor& x, const char* op) {
  if (w.dim() < 2 || x.dim() < 1 || w.dim() != x.dim() + 1)
    throw std::invalid_argument(std::string(op) + ": expected w [co, ci, k...] and x [ci, n...]");
  if (w.size(1) != x.size(0)) throw std::invalid_argument(std::string(op) + ": channel mismatch");
}

void check_ranges(const Shape& n, const Shape& k, std::size_t s, std::size_t d, const char* op) {
  if (s == 0 || d == 0) throw std::invalid_argument(std::string(op) + ": stride and dilation must be positive");
  for (std::size_t a = 0; a < n.size(); ++a) {
    if (k[a] == 0 || k[a] > n[a]) throw std::invalid_argument(std::string(op) + ": kernel does not fit");
    if ((k[a] - 1) * d > n[a] - 1) throw std::invalid_argument(std::string(op) + ": dilation out of range");
    if (s > 1 && s > n[a] - 1) throw std::invalid_argument(std::string(op) + ": stride out of range");
  }
}

bool stride_kept(const Index& t, std::size_t s) {
  for (std::size_t v : t)
    if (v % s != 0) return false;
  return true;
}

std::vector<cplx> dft_matrix(std::size_t n, int sign) {
  std::vector<cplx> f(n * n);
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t q = 0; q < n; ++q) {
      const double ang = sign * 2.0 * std::numbers::pi * static_cast<double>((p * q) % n) / static_cast<double>(n);
      f[p * n + q] = cplx(std::cos(ang), std::sin(ang));
    }
  return f;
}

double norm2(const Tensor& t) {
  double s = 0.0;
  for (double v : t.re()) s += v * v;
  return std::sqrt(s);
}

}  // namespace

Tensor naive_conv(const Tensor& w, const Tensor& x, std::size_t stride, std::size_t dilation, const Tensor& groups) {
  check_rank(w, x, "naive_conv");
  const std::size_t co = w.size(0), ci = w.size(1);
  const Shape n = spatial(x, 1), k = spatial(w, 2);
  check_ranges(n, k, stride, dilation, "naive_conv");
  if (groups.defined() && groups.shape() != Shape{co, ci})
    throw std::invalid_argument("naive_conv: groups must be [c_out, c_in]");
  const std::size_t P = numel(n), Q = numel(k);
  Shape os{co};
  os.insert(os.end(), n.begin(), n.end());
  Tensor y = Tensor::zeros(os);
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t tf = 0; tf < P; ++tf) {
      const Index t = unravel(tf, n);
      if (!stride_kept(t, stride)) continue;
      double acc = 0.0;
      for (std::size_t i = 0; i < ci; ++i) {
        const double g = groups.defined() ? groups.at(o * ci + i).real() : 1.0;
        if (g == 0.0) continue;
        for (std::size_t jf = 0; jf < Q; ++jf) {
          const Index j = unravel(jf, k);
          Index src(n.size());
          for (std::size_t a = 0; a < n.size(); ++a) src[a] = (t[a] + n[a] - (j[a] * dilation) % n[a]) % n[a];
          acc += g * w.re()[(o * ci + i) * Q + jf] * x.re()[i * P + ravel(src, n)];
        }
      }
      y.re()[o * P + tf] = acc;
    }
  return y;
}

Tensor naive_avgpool(const Tensor& x, std::size_t kernel, std::size_t stride, std::size_t dilation) {
  if (x.dim() < 2) throw std::invalid_argument("naive_avgpool: expected x [c, n...]");
  const std::size_t c = x.size(0);
  const Shape n = spatial(x, 1);
  const Shape k(n.size(), kernel);
  check_ranges(n, k, stride, dilation, "naive_avgpool");
  const std::size_t P = numel(n), Q = numel(k);
  Tensor y = Tensor::zeros(x.shape());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t tf = 0; tf < P; ++tf) {
      const Index t = unravel(tf, n);
      if (!stride_kept(t, stride)) continue;
      double acc = 0.0;
      for (std::size_t jf = 0; jf < Q; ++jf) {
        const Index j = unravel(jf, k);
        Index src(n.size());
        for (std::size_t a = 0; a < n.size(); ++a) src[a] = (t[a] + n[a] - (j[a] * dilation) % n[a]) % n[a];
        acc += x.re()[ch * P + ravel(src, n)];
      }
      y.re()[ch * P + tf] = acc / static_cast<double>(Q);
    }
  return y;
}

Tensor naive_skip(const Tensor& x) { return x.clone(); }

Tensor naive_zero(const Tensor& x, std::size_t c_out) {
  Shape s = x.shape();
  s.at(0) = c_out;
  return Tensor::zeros(s);
}

Tensor dense_dft(const Tensor& x, int sign) {
  Tensor cur = x.as_complex().clone();
  for (std::size_t axis = 1; axis < x.dim(); ++axis) {
    const AxisSplit sp = split_axis(cur.shape(), axis);
    const auto f = dft_matrix(sp.n, sign);
    const auto v = cur.to_complex();
    std::vector<cplx> out(v.size());
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t p = 0; p < sp.n; ++p)
        for (std::size_t in = 0; in < sp.inner; ++in) {
          cplx acc = 0.0;
          for (std::size_t q = 0; q < sp.n; ++q) acc += f[p * sp.n + q] * v[(o * sp.n + q) * sp.inner + in];
          out[(o * sp.n + p) * sp.inner + in] = acc;
        }
    cur = Tensor::complex(cur.shape(), out);
  }
  return cur;
}

Tensor naive_fno(const Tensor& w, const Tensor& x, std::size_t modes) {
  check_rank(w, x, "naive_fno");
  const std::size_t co = w.size(0), ci = w.size(1);
  const Shape n = spatial(x, 1), k = spatial(w, 2);
  for (std::size_t a = 0; a < n.size(); ++a)
    if (modes == 0 || k[a] != 2 * modes || 2 * modes > n[a])
      throw std::invalid_argument("naive_fno: filter must be 2*modes per axis with modes <= n/2");
  const std::size_t P = numel(n), Q = numel(k);
  const auto xf = dense_dft(x, -1).to_complex();
  const cplx I(0.0, 1.0);

  Shape os{co};
  os.insert(os.end(), n.begin(), n.end());
  std::vector<cplx> yf(co * P);
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t i = 0; i < ci; ++i)
      for (std::size_t rf = 0; rf < P; ++rf) {
        const Index r = unravel(rf, n);
        bool kept = true;
        for (std::size_t v : r) kept = kept && v < modes;
        if (!kept) continue;
        // Each axis contributes w[r] (coefficient 1) or w[r + modes] (coefficient i).
        cplx mult = 0.0;
        for (std::size_t jf = 0; jf < Q; ++jf) {
          const Index j = unravel(jf, k);
          cplx coef = 1.0;
          for (std::size_t a = 0; a < n.size() && coef != cplx(0.0); ++a)
            coef *= j[a] == r[a] ? cplx(1.0) : j[a] == r[a] + modes ? I : cplx(0.0);
          mult += coef * w.re()[(o * ci + i) * Q + jf];
        }
        yf[o * P + rf] += mult * xf[i * P + rf];
      }
  const auto y = dense_dft(Tensor::complex(os, yf), +1);
  Tensor out = Tensor::zeros(os);
  for (std::size_t e = 0; e < out.numel(); ++e) out.re()[e] = y.re()[e] / static_cast<double>(P);
  return out;
}

Tensor naive_transposed_conv(const Tensor& w, const Tensor& x, std::size_t dilation) {
  check_rank(w, x, "naive_transposed_conv");
  if (dilation == 0) throw std::invalid_argument("naive_transposed_conv: dilation must be positive");
  const std::size_t co = w.size(0), ci = w.size(1);
  const Shape m = spatial(x, 1), k = spatial(w, 2);
  Shape out;
  std::vector<std::size_t> S(m.size());
  for (std::size_t a = 0; a < m.size(); ++a) {
    if (k[a] == 0) throw std::invalid_argument("naive_transposed_conv: empty kernel");
    S[a] = dilation * (k[a] - 1) + 1;
    out.push_back(S[a] * m[a]);
  }
  const std::size_t Pm = numel(m), Q = numel(k), Po = numel(out);
  Shape os{co};
  os.insert(os.end(), out.begin(), out.end());
  Tensor y = Tensor::zeros(os);
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t i = 0; i < ci; ++i)
      for (std::size_t pf = 0; pf < Pm; ++pf) {
        const Index p = unravel(pf, m);
        for (std::size_t jf = 0; jf < Q; ++jf) {
          const Index j = unravel(jf, k);
          Index t(m.size());
          for (std::size_t a = 0; a < m.size(); ++a) t[a] = p[a] * S[a] + j[a] * dilation;
          y.re()[o * Po + ravel(t, out)] += x.re()[i * Pm + pf] * w.re()[(o * ci + i) * Q + jf];
        }
      }
  return y;
}

std::vector<double> graph_operator(const std::vector<double>& adjacency, std::size_t nodes, GraphKind kind) {
  if (nodes == 0 || adjacency.size() != nodes * nodes)
    throw std::invalid_argument("graph_operator: adjacency must be nodes x nodes");
  std::vector<double> a = adjacency;
  if (kind == GraphKind::Normalized)
    for (std::size_t i = 0; i < nodes; ++i) a[i * nodes + i] += 1.0;
  std::vector<double> deg(nodes, 0.0);
  for (std::size_t i = 0; i < nodes; ++i)
    for (std::size_t j = 0; j < nodes; ++j) deg[i] += a[i * nodes + j];
  std::vector<double> g(nodes * nodes);
  for (std::size_t i = 0; i < nodes; ++i) {
    if (deg[i] <= 0.0)
      throw std::invalid_argument("graph_operator: node " + std::to_string(i) + " has zero degree");
    for (std::size_t j = 0; j < nodes; ++j)
      g[i * nodes + j] = kind == GraphKind::Normalized ? a[i * nodes + j] / std::sqrt(deg[i] * deg[j])
                                                        : a[i * nodes + j] / deg[i];
  }
  return g;
}

Tensor naive_graph_conv(const Tensor& w, const Tensor& x, const std::vector<double>& adjacency, GraphKind kind) {
  if (x.dim() != 2 || w.dim() != 3 || w.size(2) != 1 || w.size(1) != x.size(0))
    throw std::invalid_argument("naive_graph_conv: expected w [co, ci, 1] and x [ci, nodes]");
  const std::size_t co = w.size(0), ci = w.size(1), nodes = x.size(1);
  const auto g = graph_operator(adjacency, nodes, kind);
  Tensor y = Tensor::zeros({co, nodes});
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t i = 0; i < ci; ++i)
      for (std::size_t r = 0; r < nodes; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < nodes; ++c) acc += g[r * nodes + c] * x.re()[i * nodes + c];
        y.re()[o * nodes + r] += w.re()[o * ci + i] * acc;
      }
  return y;
}

std::string kind_name(Kind k) {
  switch (k) {
    case Kind::Conv: return "conv";
    case Kind::AvgPool: return "avgpool";
    case Kind::Skip: return "skip";
    case Kind::Zero: return "zero";
    case Kind::Fno: return "fno";
    case Kind::TransposedConv: return "transposed_conv";
    case Kind::GraphConv: return "graph_conv";
    case Kind::FixedLinearCompose: return "fixed_linear_compose";
  }
  return "unknown";
}

namespace {

// Zero-pads the spatial axes of x [c, m...] to n.
Tensor pad_to(const Tensor& x, const Shape& n) {
  const Shape m = spatial(x, 1);
  if (m == n) return x;
  Shape os{x.size(0)};
  os.insert(os.end(), n.begin(), n.end());
  Tensor y = Tensor::zeros(os);
  const std::size_t Pm = numel(m), Pn = numel(n);
  for (std::size_t c = 0; c < x.size(0); ++c)
    for (std::size_t f = 0; f < Pm; ++f) y.re()[c * Pn + ravel(unravel(f, m), n)] = x.re()[c * Pm + f];
  return y;
}

// out[c, t] = y[c, t * step] per axis.
Tensor take_view(const Tensor& y, const std::vector<AxisView>& view) {
  const Shape n = spatial(y, 1);
  Shape v;
  for (const auto& a : view) v.push_back(a.size);
  Shape os{y.size(0)};
  os.insert(os.end(), v.begin(), v.end());
  Tensor out = Tensor::zeros(os);
  const std::size_t Pv = numel(v), Pn = numel(n);
  for (std::size_t c = 0; c < y.size(0); ++c)
    for (std::size_t f = 0; f < Pv; ++f) {
      Index t = unravel(f, v);
      for (std::size_t a = 0; a < t.size(); ++a) t[a] *= view[a].step;
      out.re()[c * Pv + f] = y.re()[c * Pn + ravel(t, n)];
    }
  return out;
}

// Applies a real dense n x n matrix along the single spatial axis.
Tensor apply_fixed(const std::vector<double>& a, const Tensor& x) {
  if (x.dim() != 2 || a.size() != x.size(1) * x.size(1))
    throw std::invalid_argument("fixed linear map: expected a 1-d signal matching the matrix");
  const std::size_t c = x.size(0), n = x.size(1);
  Tensor y = Tensor::zeros(x.shape());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t r = 0; r < n; ++r) {
      double acc = 0.0;
      for (std::size_t q = 0; q < n; ++q) acc += a[r * n + q] * x.re()[ch * n + q];
      y.re()[ch * n + r] = acc;
    }
  return y;
}

// Oracle on the padded domain (x already [c_in, n...]); returns [c_out, n...].
Tensor on_domain(const OracleSpec& spec, const Tensor& w, const Tensor& x, std::size_t c_out) {
  switch (spec.kind) {
    case Kind::Conv: return naive_conv(w, x, spec.stride, spec.dilation, spec.groups);
    case Kind::AvgPool: return naive_avgpool(x, spec.kernel, spec.stride, spec.dilation);
    case Kind::Skip: return naive_skip(x);
    case Kind::Zero: return naive_zero(x, c_out);
    case Kind::Fno: return naive_fno(w, x, spec.modes);
    case Kind::FixedLinearCompose: {
      if (!spec.inner) throw std::invalid_argument("oracle: compose spec without inner oracle");
      if (spec.side == ComposeSide::Input) return on_domain(*spec.inner, w, apply_fixed(spec.fixed, x), c_out);
      return apply_fixed(spec.fixed, on_domain(*spec.inner, w, x, c_out));
    }
    default: break;
  }
  throw std::invalid_argument("oracle: kind " + kind_name(spec.kind) + " is not defined on the padded domain");
}

}  // namespace

Tensor oracle_forward(const OracleSpec& spec, const XDOp& op, const Tensor& w, const Tensor& x) {
  switch (spec.kind) {
    case Kind::TransposedConv: return naive_transposed_conv(w, x, spec.dilation);
    case Kind::GraphConv: return naive_graph_conv(w, x, spec.adjacency, spec.graph);
    default: return take_view(on_domain(spec, w, pad_to(x, op.n), op.filter.c_out), op.view);
  }
}

std::string EquivalenceReport::to_jsonl() const {
  std::string out;
  for (std::size_t t = 0; t < errors.size(); ++t) {
    const double thr = absolute[t] ? absolute_threshold : threshold;
    nlohmann::json j = {{"kind", kind},
                        {"trial", t},
                        {"error", errors[t]},
                        {"metric", absolute[t] ? "absolute" : "relative"},
                        {"pass", errors[t] <= thr}};
    out += j.dump() + "\n";
  }
  nlohmann::json s = {{"kind", kind},         {"summary", true},      {"trials", errors.size()},
                      {"max_error", max_error}, {"threshold", threshold}, {"pass", pass}};
  out += s.dump() + "\n";
  return out;
}

EquivalenceReport equivalence_report(const XDOp& op, const OracleSpec& spec, std::size_t trials, std::uint64_t seed) {
  EquivalenceReport rep;
  rep.kind = kind_name(spec.kind);
  rep.pass = true;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (std::size_t t = 0; t < trials; ++t) {
    Tensor w = Tensor::zeros(op.weight.shape());
    for (double& v : w.re()) v = u(rng);
    Shape xs{op.filter.c_in};
    xs.insert(xs.end(), op.m.begin(), op.m.end());
    Tensor x = Tensor::zeros(xs);
    for (double& v : x.re()) v = u(rng);

    const Tensor ref = oracle_forward(spec, op, w, x);
    const Tensor got = xd_forward(op, w, x);
    double err;
    bool absolute = false;
    if (ref.shape() != got.shape()) {
      err = std::numeric_limits<double>::infinity();
    } else {
      Tensor diff = got.clone();
      for (std::size_t e = 0; e < diff.numel(); ++e) diff.re()[e] -= ref.re()[e];
      const double rn = norm2(ref);
      absolute = rn < rep.absolute_threshold;
      err = absolute ? norm2(diff) : norm2(diff) / rn;
    }
    rep.errors.push_back(err);
    rep.absolute.push_back(absolute);
    rep.max_error = std::max(rep.max_error, err);
    if (!(err <= (absolute ? rep.absolute_threshold : rep.threshold))) rep.pass = false;
  }
  return rep;
}

}  // namespace xd::oracle
