// SPDX-License-Identifier: Apache-2.0
#include "xdops/suite.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "xdops/autodiff.hpp"
#include "xdops/kaleidoscope.hpp"
#include "xdops/oracles.hpp"
#include "xdops/xd_op.hpp"

namespace xd::suite {
namespace {

using nlohmann::json;
using oracle::Kind;
using oracle::OracleSpec;

constexpr double kEquivTol = 1e-8;
constexpr double kGradTol = 1e-5;

Claim from_report(const oracle::EquivalenceReport& r, json config) {
  Claim c;
  c.group = "expressivity";
  c.name = r.kind;
  c.config = std::move(config);
  c.max_error = r.max_error;
  c.threshold = r.threshold;
  c.pass = r.pass;
  return c;
}

Tensor groups_matrix(const std::string& kind, std::size_t c, std::mt19937_64& rng) {
  Tensor g = Tensor::zeros({c, c});
  if (kind == "dense") {
    g.fill(1.0);
  } else if (kind == "identity") {
    for (std::size_t i = 0; i < c; ++i) g.re()[i * c + i] = 1.0;
  } else {
    std::vector<std::size_t> block(c);
    const std::size_t blocks = 1 + rng() % c;
    for (auto& b : block) b = rng() % blocks;
    for (std::size_t o = 0; o < c; ++o)
      for (std::size_t i = 0; i < c; ++i) g.re()[o * c + i] = block[o] == block[i] ? 1.0 : 0.0;
  }
  return g;
}

std::vector<std::size_t> random_perm(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  for (std::size_t i = n; i-- > 1;) std::swap(p[i], p[rng() % (i + 1)]);
  return p;
}

std::vector<double> random_graph(std::size_t nodes, std::mt19937_64& rng) {
  std::vector<double> adj(nodes * nodes, 0.0);
  // A ring keeps every degree positive; random chords on top.
  for (std::size_t i = 0; i < nodes; ++i) adj[i * nodes + (i + 1) % nodes] = adj[((i + 1) % nodes) * nodes + i] = 1.0;
  for (std::size_t i = 0; i < nodes; ++i)
    for (std::size_t j = i + 2; j < nodes; ++j)
      if (rng() % 4 == 0) adj[i * nodes + j] = adj[j * nodes + i] = 1.0;
  return adj;
}

void conv_claims(std::vector<Claim>& out, std::size_t n, std::size_t c, const Options& o, std::mt19937_64& rng) {
  for (std::size_t k : {1u, 3u, 5u})
    for (std::size_t d : {1u, 2u, 4u})
      for (std::size_t s : {1u, 2u, 3u})
        for (const char* g : {"dense", "identity", "random-block"}) {
          if ((k - 1) * d >= n) continue;
          if (k == 1 && d > 1) continue;  // dilation is meaningless for a single tap
          ConvSpec cs;
          cs.c_out = cs.c_in = c;
          cs.m = {n};
          cs.k = k;
          cs.stride = s;
          cs.dilation = d;
          cs.groups = groups_matrix(g, c, rng);
          OracleSpec spec;
          spec.kind = Kind::Conv;
          spec.kernel = k;
          spec.stride = s;
          spec.dilation = d;
          spec.groups = cs.groups;
          const json cfg = {{"n", n}, {"c", c}, {"k", k}, {"dilation", d}, {"stride", s}, {"groups", g}};
          out.push_back(from_report(oracle::equivalence_report(init_from_conv(cs), spec, o.trials, rng()), cfg));
        }
}

Tensor random_tensor(const Shape& s, bool cx, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor t = Tensor::zeros(s, cx ? DType::Complex : DType::Real);
  for (double& v : t.re()) v = u(rng);
  for (double& v : t.im()) v = u(rng);
  t.set_requires_grad(true);
  return t;
}

/// Scalar <r, y> with a fixed random r, summing real and imaginary parts.
Tensor project(ad::Tape& t, const Tensor& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor r = random_tensor(y.shape(), y.is_complex(), rng);
  r.set_requires_grad(false);
  Tensor p = t.mul(y, r);
  if (p.is_complex()) p = t.add(t.real(p), t.imag(p));
  return t.sum(p);
}

using Params = std::vector<std::pair<std::string, Tensor>>;
using Body = std::function<Tensor(ad::Tape&)>;

Claim grad_claim(const std::string& name, const Options& o,
                 const std::function<std::pair<Body, Params>(std::mt19937_64&)>& make) {
  Claim c;
  c.group = "gradient";
  c.name = name;
  c.threshold = kGradTol;
  c.config = {{"points", o.grad_points}, {"h", 1e-5}};
  for (std::size_t p = 0; p < o.grad_points; ++p) {
    std::mt19937_64 rng(o.seed * 7919 + std::hash<std::string>{}(name) + p);
    auto [fn, params] = make(rng);
    c.max_error = std::max(c.max_error, ad::grad_check(fn, params, 1e-5).max_error());
  }
  c.pass = c.max_error <= c.threshold;
  return c;
}

}  // namespace

json Claim::to_json() const {
  return {{"group", group}, {"name", name},           {"config", config},
          {"max_error", max_error}, {"threshold", threshold}, {"pass", pass}};
}

std::vector<Claim> expressivity(const Options& o) {
  std::vector<Claim> out;
  for (std::size_t n : o.sizes)
    for (std::size_t c : o.channels) {
      std::mt19937_64 rng(o.seed * 1000003 + n * 31 + c);
      conv_claims(out, n, c, o, rng);

      OracleSpec skip, zero;
      skip.kind = Kind::Skip;
      zero.kind = Kind::Zero;
      out.push_back(from_report(oracle::equivalence_report(init_skip(c, {n}, 3), skip, o.trials, rng()),
                                {{"n", n}, {"c", c}}));
      out.push_back(from_report(oracle::equivalence_report(init_zero(c, c, {n}, 3), zero, o.trials, rng()),
                                {{"n", n}, {"c", c}}));

      for (std::size_t k : {2u, 3u})
        for (std::size_t s : {1u, 2u, 3u, 4u}) {
          PoolSpec ps;
          ps.channels = c;
          ps.m = {n};
          ps.kernel = k;
          ps.stride = s;
          OracleSpec spec;
          spec.kind = Kind::AvgPool;
          spec.kernel = k;
          spec.stride = s;
          out.push_back(from_report(oracle::equivalence_report(init_avgpool(ps), spec, o.trials, rng()),
                                    {{"n", n}, {"c", c}, {"k", k}, {"stride", s}}));
        }

      for (std::size_t modes : {1u, 2u, 4u}) {
        if (modes > n / 2) continue;
        OracleSpec spec;
        spec.kind = Kind::Fno;
        spec.modes = modes;
        out.push_back(from_report(oracle::equivalence_report(init_fno(c, c, {n}, modes), spec, o.trials, rng()),
                                  {{"n", n}, {"c", c}, {"modes", modes}}));
      }

      for (std::size_t k : {2u, 3u})
        for (std::size_t d : {1u, 2u}) {
          OracleSpec spec;
          spec.kind = Kind::TransposedConv;
          spec.kernel = k;
          spec.dilation = d;
          const std::size_t m = n / 4;
          out.push_back(
              from_report(oracle::equivalence_report(init_transposed_conv(c, c, {m}, k, d), spec, o.trials, rng()),
                          {{"n", n}, {"m", m}, {"c", c}, {"k", k}, {"dilation", d}, {"stride", d * (k - 1) + 1}}));
        }

      if (n == 8 || n == 16)
        for (auto kind : {oracle::GraphKind::Normalized, oracle::GraphKind::Diffusion}) {
          const auto adj = random_graph(n, rng);
          OracleSpec spec;
          spec.kind = Kind::GraphConv;
          spec.adjacency = adj;
          spec.graph = kind;
          const XDOp op = init_graph_conv(c, c, oracle::graph_operator(adj, n, kind), n);
          out.push_back(from_report(oracle::equivalence_report(op, spec, o.trials, rng()),
                                    {{"nodes", n},
                                     {"c", c},
                                     {"graph", kind == oracle::GraphKind::Normalized ? "normalized" : "diffusion"}}));
        }

      for (auto side : {Side::Input, Side::Output}) {
        ConvSpec cs;
        cs.c_out = cs.c_in = c;
        cs.m = {n};
        cs.k = 3;
        const auto perm = random_perm(n, rng);
        std::uniform_real_distribution<double> u(0.5, 1.5);
        std::vector<kal::SparseEntry> entries;
        std::vector<double> dense(n * n, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
          const double v = side == Side::Input ? 1.0 : u(rng);
          entries.push_back({i, perm[i], v});
          dense[i * n + perm[i]] = v;
        }
        const kal::KMatrix a = side == Side::Input ? kal::init_permutation(n, perm) : kal::init_sparse(n, entries);
        OracleSpec spec;
        spec.kind = Kind::FixedLinearCompose;
        spec.side = side == Side::Input ? oracle::ComposeSide::Input : oracle::ComposeSide::Output;
        spec.fixed = dense;
        spec.inner = std::make_shared<OracleSpec>();
        spec.inner->kind = Kind::Conv;
        const XDOp op = compose_fixed_kmatrix(init_from_conv(cs), a, side);
        out.push_back(from_report(oracle::equivalence_report(op, spec, o.trials, rng()),
                                  {{"n", n},
                                   {"c", c},
                                   {"side", side == Side::Input ? "input" : "output"},
                                   {"fixed", side == Side::Input ? "permutation" : "scaled-permutation"}}));
      }

      if (n == 8) {
        ConvSpec cs;
        cs.c_out = cs.c_in = c;
        cs.m = {n, n};
        cs.k = 3;
        cs.dilation = 2;
        OracleSpec spec;
        spec.kind = Kind::Conv;
        spec.dilation = 2;
        out.push_back(from_report(oracle::equivalence_report(init_from_conv(cs), spec, o.trials, rng()),
                                  {{"n", json::array({n, n})}, {"c", c}, {"k", 3}, {"dilation", 2}}));
        OracleSpec fno;
        fno.kind = Kind::Fno;
        fno.modes = 2;
        out.push_back(from_report(oracle::equivalence_report(init_fno(c, c, {n, n}, 2), fno, o.trials, rng()),
                                  {{"n", json::array({n, n})}, {"c", c}, {"modes", 2}}));
      }
    }
  return out;
}

std::vector<Claim> dft_checks(std::size_t max_n) {
  std::vector<Claim> out;
  for (std::size_t n = 2; n <= max_n; n *= 2) {
    const auto f = kal::kmatrix_materialize(kal::init_dft(n));
    const auto g = kal::kmatrix_materialize(kal::init_idft(n));
    Claim a{"dft", "dft_matches_analytic", {{"n", n}}, 0.0, 1e-10, false};
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t k = 0; k < n; ++k) {
        const cplx want = std::polar(1.0, -2.0 * std::numbers::pi * static_cast<double>(j * k % n) / n);
        a.max_error = std::max(a.max_error, std::abs(f[j * n + k] - want));
      }
    a.pass = a.max_error <= a.threshold;
    Claim b{"dft", "idft_dft_is_identity", {{"n", n}}, 0.0, 1e-12, false};
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < n; ++k) {
        cplx s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * f[j * n + k];
        b.max_error = std::max(b.max_error, std::abs(s - (i == k ? 1.0 : 0.0)));
      }
    b.pass = b.max_error <= b.threshold;
    out.push_back(a);
    out.push_back(b);
  }
  return out;
}

std::vector<Claim> permutation_checks(const Options& o) {
  std::vector<Claim> out;
  for (std::size_t n : o.sizes) {
    std::mt19937_64 rng(o.seed + n);
    const auto perm = random_perm(n, rng);
    const auto p = kal::kmatrix_materialize(kal::init_permutation(n, perm));
    Claim c{"permutation", "permutation_is_exact", {{"n", n}}, 0.0, 1e-12, false};
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        c.max_error = std::max(c.max_error, std::abs(p[i * n + j] - (perm[i] == j ? 1.0 : 0.0)));
    c.pass = c.max_error <= c.threshold;
    out.push_back(c);

    for (std::size_t d : {2u, 4u}) {
      if (2 * d >= n) continue;
      const auto dp = dilation_permutation(n, 3, d);
      std::vector<std::size_t> sorted = dp;
      std::sort(sorted.begin(), sorted.end());
      bool ok = true;
      for (std::size_t i = 0; i < n; ++i) ok = ok && sorted[i] == i;
      for (std::size_t j = 0; j < 3; ++j) ok = ok && dp[j * d] == j;
      out.push_back({"permutation", "dilation_places_taps", {{"n", n}, {"k", 3}, {"dilation", d}}, ok ? 0.0 : 1.0, 0.0,
                     ok});
    }
  }
  return out;
}

std::vector<Claim> gradient_checks(const Options& o) {
  std::vector<Claim> out;
  auto add = [&](const std::string& name, const std::function<std::pair<Body, Params>(std::mt19937_64&)>& make) {
    out.push_back(grad_claim(name, o, make));
  };
  auto unary = [&](const std::string& name, const Shape& s, bool cx, std::function<Tensor(ad::Tape&, const Tensor&)> f) {
    add(name, [=](std::mt19937_64& rng) {
      Tensor x = random_tensor(s, cx, rng);
      const std::uint64_t ps = rng();
      return std::pair<Body, Params>{[=](ad::Tape& t) { return project(t, f(t, x), ps); }, {{"x", x}}};
    });
  };
  auto binary = [&](const std::string& name, const Shape& sa, const Shape& sb, bool cx,
                    std::function<Tensor(ad::Tape&, const Tensor&, const Tensor&)> f) {
    add(name, [=](std::mt19937_64& rng) {
      Tensor a = random_tensor(sa, cx, rng), b = random_tensor(sb, cx, rng);
      const std::uint64_t ps = rng();
      return std::pair<Body, Params>{[=](ad::Tape& t) { return project(t, f(t, a, b), ps); }, {{"a", a}, {"b", b}}};
    });
  };

  binary("add", {3, 4}, {4}, true, [](ad::Tape& t, const Tensor& a, const Tensor& b) { return t.add(a, b); });
  binary("sub", {3, 4}, {3, 4}, true, [](ad::Tape& t, const Tensor& a, const Tensor& b) { return t.sub(a, b); });
  binary("mul", {2, 3, 4}, {3, 4}, true, [](ad::Tape& t, const Tensor& a, const Tensor& b) { return t.mul(a, b); });
  binary("mul_real", {3, 4}, {3, 4}, false, [](ad::Tape& t, const Tensor& a, const Tensor& b) { return t.mul(a, b); });
  unary("scale", {3, 4}, true, [](ad::Tape& t, const Tensor& x) { return t.scale(x, cplx(0.5, -1.5)); });
  binary("complex", {3, 4}, {3, 4}, false,
         [](ad::Tape& t, const Tensor& a, const Tensor& b) { return t.complex(a, b); });
  unary("real", {3, 4}, true, [](ad::Tape& t, const Tensor& x) { return t.real(x); });
  unary("imag", {3, 4}, true, [](ad::Tape& t, const Tensor& x) { return t.imag(x); });
  unary("reshape", {3, 4}, true, [](ad::Tape& t, const Tensor& x) { return t.reshape(x, {2, 6}); });
  unary("pad", {3, 4}, true, [](ad::Tape& t, const Tensor& x) { return t.pad(x, {4, 8}); });
  unary("slice", {3, 8}, true, [](ad::Tape& t, const Tensor& x) { return t.slice(x, {2, 5}); });
  unary("gather", {3, 8}, true, [](ad::Tape& t, const Tensor& x) { return t.gather(x, 1, {7, 0, 3, 3, 1}); });
  unary("mask", {3, 4}, true, [](ad::Tape& t, const Tensor& x) { return t.mask(x, 1, {1.0, 0.0, -2.0, 0.5}); });
  unary("sum", {3, 4}, true, [](ad::Tape& t, const Tensor& x) { return t.sum(x); });
  unary("sum_axis", {2, 3, 4}, true, [](ad::Tape& t, const Tensor& x) { return t.sum_axis(x, 1); });
  binary("concat", {2, 3}, {2, 5}, true,
         [](ad::Tape& t, const Tensor& a, const Tensor& b) { return t.concat({a, b}, 1); });
  add("contract", [](std::mt19937_64& rng) {
    Tensor c = random_tensor({3, 2}, true, rng), s = random_tensor({3, 2, 4}, true, rng),
           u = random_tensor({2, 2, 4}, true, rng);
    const std::uint64_t ps = rng();
    return std::pair<Body, Params>{[=](ad::Tape& t) { return project(t, t.contract(c, s, u), ps); },
                                   {{"C", c}, {"S", s}, {"U", u}}};
  });
  add("kmatrix_apply", [](std::mt19937_64& rng) {
    auto k = kal::init_random(8, 2, rng());
    Params ps;
    for (auto& st : k.parameters()) {
      st.set_requires_grad(true);
      ps.push_back({"stage", st});
    }
    Tensor x = random_tensor({3, 8, 2}, true, rng);
    ps.push_back({"x", x});
    const std::uint64_t seed = rng();
    return std::pair<Body, Params>{[=](ad::Tape& t) { return project(t, t.kmatrix_apply(k, x, 1), seed); }, ps};
  });
  add("kron_apply", [](std::mt19937_64& rng) {
    kal::KroneckerK ks{{kal::init_random(4, 1, rng()), kal::init_random(8, 2, rng())}};
    Params ps;
    for (auto& st : ks.parameters()) {
      st.set_requires_grad(true);
      ps.push_back({"stage", st});
    }
    Tensor x = random_tensor({2, 4, 8}, false, rng);
    ps.push_back({"x", x});
    const std::uint64_t seed = rng();
    return std::pair<Body, Params>{[=](ad::Tape& t) { return project(t, t.kron_apply(ks, x, 1), seed); }, ps};
  });
  add("relu_dense_maxpool", [](std::mt19937_64& rng) {
    // Inputs stay away from the relu kink and from maxpool ties.
    std::uniform_real_distribution<double> mag(0.1, 1.0);
    std::vector<double> xv(16);
    for (std::size_t i = 0; i < xv.size(); ++i) xv[i] = (rng() % 2 ? 1 : -1) * (mag(rng) + 0.01 * i);
    Tensor x = Tensor::real({2, 8}, xv);
    x.set_requires_grad(true);
    Tensor w = random_tensor({3, 4}, false, rng), b = random_tensor({3}, false, rng);
    const std::uint64_t seed = rng();
    return std::pair<Body, Params>{
        [=](ad::Tape& t) { return project(t, t.dense(t.maxpool(t.relu(x), 1, 2), w, b), seed); },
        {{"x", x}, {"w", w}, {"bias", b}}};
  });
  add("losses", [](std::mt19937_64& rng) {
    Tensor p = random_tensor({3, 5}, false, rng), y = random_tensor({3, 5}, false, rng),
           z = random_tensor({4, 3}, false, rng);
    y.set_requires_grad(false);
    return std::pair<Body, Params>{[=](ad::Tape& t) {
                                     Tensor l = t.add(t.mse(p, y), t.rel_l2(p, y));
                                     return t.add(l, t.softmax_ce(z, {0, 2, 1, 2}));
                                   },
                                   {{"p", p}, {"z", z}}};
  });

  for (const char* group : {"arch", "model"}) {
    const bool arch = std::string(group) == "arch";
    add(std::string("xd_forward_") + group, [arch](std::mt19937_64& rng) {
      ConvSpec cs;
      cs.c_out = 2;
      cs.c_in = 2;
      cs.m = {8};
      cs.k = 3;
      cs.seed = rng();
      XDOp op = init_from_conv(cs);
      // Move away from the warm start so every stage carries signal.
      for (auto t : op.arch_parameters()) {
        auto re = t.re();
        auto im = t.im();
        std::uniform_real_distribution<double> u(-0.1, 0.1);
        for (double& v : re) v += u(rng);
        for (double& v : im) v += u(rng);
      }
      Tensor x = random_tensor({3, 2, 8}, false, rng);
      x.set_requires_grad(false);
      Params ps;
      if (arch) {
        for (auto t : op.arch_parameters()) ps.push_back({"arch", t});
      } else {
        ps.push_back({"weight", op.weight});
      }
      const std::uint64_t seed = rng();
      return std::pair<Body, Params>{[=](ad::Tape& t) { return project(t, xd_forward(t, op, x), seed); }, ps};
    });
  }
  return out;
}

std::vector<Claim> run_all(const Options& o) {
  std::vector<Claim> out = expressivity(o);
  for (auto&& part : {dft_checks(), permutation_checks(o), gradient_checks(o)})
    out.insert(out.end(), part.begin(), part.end());
  return out;
}

Summary summarize(const std::vector<Claim>& claims) {
  Summary s;
  for (const auto& c : claims) {
    ++s.total;
    s.failed += !c.pass;
    if (c.threshold > 0.0) s.worst_ratio = std::max(s.worst_ratio, c.max_error / c.threshold);
  }
  return s;
}

}  // namespace xd::suite
