// SPDX-License-Identifier: Apache-2.0
#include "xdops/search.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>

#include "xdops/error.hpp"
#include "xdops/oracles.hpp"

namespace xd::search {
namespace {

const char* kEdgeNames[] = {"conv", "avgpool", "skip", "zero", "fno", "maxpool", "dense", "relu", "norm"};

std::size_t out_channels(const BackboneSpec& b, const EdgeSpec& e) {
  return e.c_out ? e.c_out : b.nodes[e.v].channels;
}

// Channels and spatial extent an edge produces from its source node.
std::pair<std::size_t, Shape> edge_output(const BackboneSpec& b, const EdgeSpec& e) {
  const NodeSpec& src = b.nodes[e.u];
  const std::string where = "edge " + std::to_string(e.u) + "->" + std::to_string(e.v) + ": ";
  switch (e.kind) {
    case EdgeKind::Relu:
    case EdgeKind::Norm: return {src.channels, src.spatial};
    case EdgeKind::MaxPool: {
      if (src.spatial.empty()) throw std::invalid_argument(where + "maxpool needs a spatial input");
      Shape s;
      for (std::size_t v : src.spatial) {
        if (e.window == 0 || v % e.window != 0)
          throw std::invalid_argument(where + "pool window does not divide " + shape_str(src.spatial));
        s.push_back(v / e.window);
      }
      return {src.channels, s};
    }
    case EdgeKind::Dense: return {out_channels(b, e), {}};
    default: break;
  }
  if (src.spatial.empty()) throw std::invalid_argument(where + edge_kind_name(e.kind) + " needs a spatial input");
  Shape s = src.spatial;
  if (e.subsample && e.stride > 1)
    for (auto& v : s) v = (v + e.stride - 1) / e.stride;
  const std::size_t co = out_channels(b, e);
  if ((e.kind == EdgeKind::AvgPool || e.kind == EdgeKind::Skip) && co != src.channels)
    throw std::invalid_argument(where + edge_kind_name(e.kind) + " cannot change the channel count");
  return {co, s};
}

Tensor uniform(const Shape& shape, double bound, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-bound, bound);
  Tensor t = Tensor::zeros(shape);
  for (double& v : t.re()) v = u(rng);
  return t;
}

std::vector<Tensor> clone_all(const std::vector<Tensor>& ts) {
  std::vector<Tensor> out;
  for (const auto& t : ts) out.push_back(t.clone());
  return out;
}

}  // namespace

std::string edge_kind_name(EdgeKind k) { return kEdgeNames[static_cast<int>(k)]; }

EdgeKind parse_edge_kind(const std::string& s) {
  for (int i = 0; i < 9; ++i)
    if (s == kEdgeNames[i]) return static_cast<EdgeKind>(i);
  throw std::invalid_argument("unknown edge label '" + s + "'");
}

bool is_searchable(EdgeKind k) {
  return k == EdgeKind::Conv || k == EdgeKind::AvgPool || k == EdgeKind::Skip || k == EdgeKind::Zero ||
         k == EdgeKind::Fno;
}

void BackboneSpec::validate() const {
  if (nodes.size() < 2) throw std::invalid_argument("backbone: needs an input and an output node");
  std::vector<std::size_t> in(nodes.size(), 0), out(nodes.size(), 0);
  for (const auto& e : edges) {
    if (e.v >= nodes.size() || e.u >= e.v)
      throw std::invalid_argument("backbone: edge " + std::to_string(e.u) + "->" + std::to_string(e.v) +
                                  " breaks the topological order");
    ++out[e.u];
    ++in[e.v];
  }
  for (std::size_t v = 0; v < nodes.size(); ++v) {
    if (v > 0 && in[v] == 0) throw std::invalid_argument("backbone: node " + std::to_string(v) + " has no input");
    if (v + 1 < nodes.size() && out[v] == 0)
      throw std::invalid_argument("backbone: node " + std::to_string(v) + " is a second sink");
  }
  if (in[0] != 0) throw std::invalid_argument("backbone: input node has incoming edges");
  for (std::size_t v = 1; v < nodes.size(); ++v) {
    std::size_t channels = 0;
    for (const auto& e : edges) {
      if (e.v != v) continue;
      const auto [c, s] = edge_output(*this, e);
      if (s != nodes[v].spatial)
        throw std::invalid_argument("backbone: edge into node " + std::to_string(v) + " yields spatial " +
                                    shape_str(s) + ", node declares " + shape_str(nodes[v].spatial));
      if (nodes[v].agg == Aggregation::Sum && c != nodes[v].channels)
        throw std::invalid_argument("backbone: edge into node " + std::to_string(v) + " yields " +
                                    std::to_string(c) + " channels, node declares " +
                                    std::to_string(nodes[v].channels));
      channels += c;
    }
    if (nodes[v].agg == Aggregation::Concat && channels != nodes[v].channels)
      throw std::invalid_argument("backbone: concatenation into node " + std::to_string(v) +
                                  " does not add up to its channels");
  }
}

// ---- serialization ----------------------------------------------------------

nlohmann::json to_json(const BackboneSpec& b) {
  nlohmann::json nodes = nlohmann::json::array(), edges = nlohmann::json::array();
  for (const auto& n : b.nodes)
    nodes.push_back({{"channels", n.channels},
                     {"spatial", n.spatial},
                     {"agg", n.agg == Aggregation::Sum ? "sum" : "concat"}});
  for (const auto& e : b.edges) {
    nlohmann::json j = {{"u", e.u},           {"v", e.v},           {"op", edge_kind_name(e.kind)},
                        {"c_out", e.c_out},   {"k", e.k},           {"stride", e.stride},
                        {"dilation", e.dilation}, {"subsample", e.subsample}, {"modes", e.modes},
                        {"window", e.window}, {"circular", e.circular}};
    if (e.groups.defined()) j["groups"] = std::vector<double>(e.groups.re().begin(), e.groups.re().end());
    edges.push_back(j);
  }
  return {{"name", b.name}, {"nodes", nodes}, {"edges", edges}};
}

BackboneSpec backbone_from_json(const nlohmann::json& j) {
  BackboneSpec b;
  b.name = j.value("name", "");
  for (const auto& n : j.at("nodes")) {
    NodeSpec s;
    s.channels = n.at("channels").get<std::size_t>();
    s.spatial = n.at("spatial").get<Shape>();
    const std::string agg = n.value("agg", "sum");
    if (agg != "sum" && agg != "concat") throw std::invalid_argument("backbone: unknown aggregation '" + agg + "'");
    s.agg = agg == "sum" ? Aggregation::Sum : Aggregation::Concat;
    b.nodes.push_back(s);
  }
  for (const auto& e : j.at("edges")) {
    EdgeSpec s;
    s.u = e.at("u").get<std::size_t>();
    s.v = e.at("v").get<std::size_t>();
    s.kind = parse_edge_kind(e.at("op").get<std::string>());
    s.c_out = e.value("c_out", std::size_t{0});
    s.k = e.value("k", std::size_t{3});
    s.stride = e.value("stride", std::size_t{1});
    s.dilation = e.value("dilation", std::size_t{1});
    s.subsample = e.value("subsample", false);
    s.modes = e.value("modes", std::size_t{1});
    s.window = e.value("window", std::size_t{2});
    s.circular = e.value("circular", true);
    if (e.contains("groups")) {
      const auto g = e.at("groups").get<std::vector<double>>();
      const std::size_t co = s.c_out ? s.c_out : b.nodes.at(s.v).channels, ci = b.nodes.at(s.u).channels;
      if (g.size() != co * ci) throw std::invalid_argument("backbone: groups must have c_out * c_in entries");
      s.groups = Tensor::real({co, ci}, g);
    }
    b.edges.push_back(s);
  }
  return b;
}

nlohmann::json to_json(const SubstituteOptions& o) {
  return {{"seed", o.seed},           {"depth", o.depth},         {"freeze_b", o.freeze_b},
          {"freeze_C", o.freeze_C}, {"max_kernel", o.max_kernel}, {"searchable", o.searchable}};
}

SubstituteOptions substitute_options_from_json(const nlohmann::json& j) {
  SubstituteOptions o;
  o.seed = j.value("seed", std::uint64_t{0});
  o.depth = j.value("depth", std::array<std::size_t, 3>{0, 0, 0});
  o.freeze_b = j.value("freeze_b", false);
  o.freeze_C = j.value("freeze_C", false);
  o.max_kernel = j.value("max_kernel", std::size_t{0});
  o.searchable = j.value("searchable", true);
  return o;
}

// ---- shipped backbones ----------------------------------------------------------

BackboneSpec cnn1d(std::size_t n, std::size_t c_in, std::size_t c_out, std::size_t channels, std::size_t k,
                   std::size_t layers) {
  if (layers == 0) throw std::invalid_argument("cnn1d: needs at least one layer");
  BackboneSpec b;
  b.name = "cnn1d";
  b.nodes.push_back({c_in, {n}});
  for (std::size_t l = 0; l < layers; ++l) {
    const bool last = l + 1 == layers;
    const std::size_t src = b.nodes.size() - 1;
    b.nodes.push_back({last ? c_out : channels, {n}});
    EdgeSpec conv;
    conv.u = src;
    conv.v = src + 1;
    conv.k = k;
    b.edges.push_back(conv);
    if (!last) {
      b.nodes.push_back({channels, {n}});
      EdgeSpec relu;
      relu.u = src + 1;
      relu.v = src + 2;
      relu.kind = EdgeKind::Relu;
      b.edges.push_back(relu);
    }
  }
  return b;
}

BackboneSpec cnn2d_skip(std::size_t n, std::size_t c_in, std::size_t classes, std::size_t channels, std::size_t k) {
  BackboneSpec b;
  b.name = "cnn2d_skip";
  auto edge = [&](std::size_t u, std::size_t v, EdgeKind kind) {
    EdgeSpec e;
    e.u = u;
    e.v = v;
    e.kind = kind;
    e.k = k;
    b.edges.push_back(e);
    return &b.edges.back();
  };
  b.nodes.push_back({c_in, {n, n}});
  for (int i = 0; i < 8; ++i) b.nodes.push_back({channels, {n, n}});
  // 0 -conv-> 1 -relu-> 2 -conv-> 3 -relu-> 4 (+skip 2) -conv-> 5 -relu-> 6 (+skip 4) -conv-> 7 -relu-> 8
  edge(0, 1, EdgeKind::Conv);
  edge(1, 2, EdgeKind::Relu);
  edge(2, 3, EdgeKind::Conv);
  edge(3, 4, EdgeKind::Relu);
  edge(2, 4, EdgeKind::Skip);
  edge(4, 5, EdgeKind::Conv);
  edge(5, 6, EdgeKind::Relu);
  edge(4, 6, EdgeKind::Skip);
  edge(6, 7, EdgeKind::Conv);
  edge(7, 8, EdgeKind::Relu);
  b.nodes.push_back({channels, {1, 1}});
  edge(8, 9, EdgeKind::MaxPool)->window = n;
  b.nodes.push_back({classes, {}});
  edge(9, 10, EdgeKind::Dense);
  return b;
}

// ---- substitution ----------------------------------------------------------------

std::vector<Tensor> Supernet::arch_parameters() const {
  std::vector<Tensor> out;
  if (!options.searchable) return out;
  for (const auto& e : edges)
    if (e.searchable)
      for (auto& t : e.op.arch_parameters()) out.push_back(t);
  return out;
}

std::vector<Tensor> Supernet::model_parameters() const {
  std::vector<Tensor> out;
  for (const auto& e : edges) {
    if (e.searchable) out.push_back(e.op.weight);
    if (e.weight.defined()) out.push_back(e.weight);
    if (e.bias.defined()) out.push_back(e.bias);
  }
  return out;
}

std::vector<Tensor> Supernet::state_tensors() const {
  std::vector<Tensor> out;
  for (const auto& e : edges) {
    if (e.searchable) {
      for (const auto* ks : {&e.op.params.K, &e.op.params.L, &e.op.params.M})
        for (auto& t : ks->parameters()) out.push_back(t);
      out.push_back(e.op.params.b);
      out.push_back(e.op.params.C);
      out.push_back(e.op.weight);
    }
    if (e.weight.defined()) out.push_back(e.weight);
    if (e.bias.defined()) out.push_back(e.bias);
  }
  return out;
}

XDOp pad_depth(const XDOp& op, const std::array<std::size_t, 3>& depth) {
  XDOp out = op.clone();
  kal::KroneckerK* ks[3] = {&out.params.K, &out.params.L, &out.params.M};
  for (int i = 0; i < 3; ++i)
    for (auto& k : ks[i]->axes) {
      if (k.depth() >= depth[i]) continue;
      const kal::KMatrix id = kal::init_identity(k.n(), depth[i] - k.depth());
      k = i == 0 ? kal::kmatrix_compose(id, k) : kal::kmatrix_compose(k, id);
    }
  return out;
}

Supernet substitute_backbone(const BackboneSpec& spec, const SubstituteOptions& opts) {
  spec.validate();
  Supernet net;
  net.backbone = spec;
  net.options = opts;
  for (std::size_t idx = 0; idx < spec.edges.size(); ++idx) {
    const EdgeSpec& e = spec.edges[idx];
    SupernetEdge se;
    se.spec = e;
    se.searchable = is_searchable(e.kind);
    const std::uint64_t seed = opts.seed * 1000003ull + 7919ull * (idx + 1);
    const std::size_t ci = spec.nodes[e.u].channels, co = out_channels(spec, e);
    const Shape& m = spec.nodes[e.u].spatial;
    const std::size_t kx = std::max(e.k, opts.max_kernel);
    switch (e.kind) {
      case EdgeKind::Conv: {
        ConvSpec cs;
        cs.c_out = co;
        cs.c_in = ci;
        cs.m = m;
        cs.k = kx;
        cs.stride = e.stride;
        cs.dilation = e.dilation;
        cs.groups = e.groups;
        cs.subsample = e.subsample;
        cs.seed = seed;
        se.op = init_from_conv(cs);
        if (kx > e.k) {
          // Taps beyond the backbone kernel start at zero.
          Tensor& w = se.op.weight;
          const Shape ks(m.size(), kx);
          const std::size_t per = numel(ks);
          for (std::size_t f = 0; f < w.numel(); ++f) {
            std::size_t r = f % per;
            bool inside = true;
            for (std::size_t a = m.size(); a-- > 0;) {
              inside = inside && r % kx < e.k;
              r /= kx;
            }
            if (!inside) w.re()[f] = 0.0;
          }
        }
        break;
      }
      case EdgeKind::AvgPool: {
        PoolSpec ps;
        ps.channels = ci;
        ps.m = m;
        ps.kernel = e.k;
        ps.stride = e.stride;
        ps.dilation = e.dilation;
        ps.subsample = e.subsample;
        ps.seed = seed;
        se.op = init_avgpool(ps);
        break;
      }
      case EdgeKind::Skip: se.op = init_skip(ci, m, kx, seed); break;
      case EdgeKind::Zero: se.op = init_zero(co, ci, m, kx, seed); break;
      case EdgeKind::Fno: se.op = init_fno(co, ci, m, e.modes, seed); break;
      case EdgeKind::Dense: {
        std::size_t in = spec.nodes[e.u].channels * numel(spec.nodes[e.u].spatial);
        se.weight = uniform({co, in}, 1.0 / std::sqrt(static_cast<double>(in)), seed);
        se.bias = Tensor::zeros({co});
        se.weight.set_requires_grad(true);
        se.bias.set_requires_grad(true);
        break;
      }
      case EdgeKind::Norm: throw Unsupported("substitute_backbone: norm edges are not supported");
      case EdgeKind::Relu:
      case EdgeKind::MaxPool: break;
    }
    if (se.searchable) {
      se.op = pad_depth(se.op, opts.depth);
      se.op.params.b_frozen = opts.freeze_b;
      se.op.params.C_frozen = opts.freeze_C;
      set_trainable(se.op, opts.searchable, true);
      se.baseline = clone_all(se.op.arch_parameters());
    }
    net.edges.push_back(std::move(se));
  }
  return net;
}

// ---- forward ------------------------------------------------------------------

Tensor forward(ad::Tape& tape, const Supernet& net, const Tensor& x) {
  const auto& nodes = net.backbone.nodes;
  Shape want{x.dim() ? x.size(0) : 0, nodes[0].channels};
  want.insert(want.end(), nodes[0].spatial.begin(), nodes[0].spatial.end());
  if (x.shape() != want)
    throw std::invalid_argument("forward: input " + shape_str(x.shape()) + ", expected [B, " +
                                std::to_string(nodes[0].channels) + ", " + shape_str(nodes[0].spatial) + "]");
  const std::size_t B = x.size(0);
  std::vector<Tensor> value(nodes.size());
  value[0] = x;
  for (std::size_t v = 1; v < nodes.size(); ++v) {
    std::vector<Tensor> incoming;
    for (const auto& e : net.edges) {
      if (e.spec.v != v) continue;
      const Tensor& in = value[e.spec.u];
      switch (e.spec.kind) {
        case EdgeKind::Relu: incoming.push_back(tape.relu(in)); break;
        case EdgeKind::MaxPool:
          incoming.push_back(tape.maxpool(in, nodes[e.spec.u].spatial.size(), e.spec.window));
          break;
        case EdgeKind::Dense: {
          const Tensor flat = tape.reshape(in, {B, in.numel() / std::max<std::size_t>(B, 1)});
          incoming.push_back(tape.dense(flat, e.weight, e.bias));
          break;
        }
        case EdgeKind::Norm: throw Unsupported("forward: norm edges are not supported");
        default: incoming.push_back(xd_forward(tape, e.op, in)); break;
      }
    }
    if (nodes[v].agg == Aggregation::Concat) {
      value[v] = incoming.size() == 1 ? incoming[0] : tape.concat(incoming, 1);
    } else {
      Tensor acc = incoming[0];
      for (std::size_t i = 1; i < incoming.size(); ++i) acc = tape.add(acc, incoming[i]);
      value[v] = acc;
    }
  }
  return value.back();
}

Tensor forward(const Supernet& net, const Tensor& x) {
  ad::Tape tape;
  return forward(tape, net, x);
}

namespace {

Tensor sample(const Tensor& x, std::size_t b) {
  Shape s(x.shape().begin() + 1, x.shape().end());
  const std::size_t per = numel(s);
  return Tensor::real(s, std::vector<double>(x.re().begin() + b * per, x.re().begin() + (b + 1) * per));
}

// "Same"-size linear convolution with zero padding: taps reaching before the
// start of an axis read zero.
Tensor zero_padded_conv(const EdgeSpec& e, const XDOp& op, const Tensor& x) {
  const Shape m(x.shape().begin() + 1, x.shape().end());
  Shape big{x.size(0)};
  for (std::size_t v : m) big.push_back(v + (op.filter.k[0] - 1) * e.dilation);
  Tensor xp = Tensor::zeros(big);
  const Shape bs(big.begin() + 1, big.end());
  const std::size_t Pm = numel(m), Pb = numel(bs);
  for (std::size_t c = 0; c < x.size(0); ++c)
    for (std::size_t f = 0; f < Pm; ++f) {
      std::size_t r = f, g = 0, mul = 1;
      for (std::size_t a = m.size(); a-- > 0;) {
        g += (r % m[a]) * mul;
        mul *= bs[a];
        r /= m[a];
      }
      xp.re()[c * Pb + g] = x.re()[c * Pm + f];
    }
  const Tensor full = oracle::naive_conv(op.weight, xp, 1, e.dilation, e.groups);
  const std::size_t co = full.size(0);
  Shape out{co};
  std::vector<std::size_t> step(m.size(), 1);
  for (std::size_t a = 0; a < m.size(); ++a) {
    const bool sub = e.subsample && e.stride > 1;
    out.push_back(sub ? (m[a] + e.stride - 1) / e.stride : m[a]);
    step[a] = sub ? e.stride : 1;
  }
  const Shape os(out.begin() + 1, out.end());
  const std::size_t Po = numel(os);
  Tensor y = Tensor::zeros(out);
  for (std::size_t c = 0; c < co; ++c)
    for (std::size_t f = 0; f < Po; ++f) {
      std::size_t r = f, g = 0, mul = 1;
      bool kept = true;
      for (std::size_t a = os.size(); a-- > 0;) {
        const std::size_t t = (r % os[a]) * step[a];
        kept = kept && t % e.stride == 0;
        g += t * mul;
        mul *= bs[a];
        r /= os[a];
      }
      y.re()[c * Po + f] = kept ? full.re()[c * Pb + g] : 0.0;
    }
  return y;
}

Tensor naive_maxpool(const Tensor& x, std::size_t window) {
  const Shape m(x.shape().begin() + 1, x.shape().end());
  Shape out{x.size(0)};
  for (std::size_t v : m) out.push_back(v / window);
  const Shape os(out.begin() + 1, out.end());
  const std::size_t Pm = numel(m), Po = numel(os);
  Tensor y = Tensor::zeros(out);
  for (double& v : y.re()) v = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < x.size(0); ++c)
    for (std::size_t f = 0; f < Pm; ++f) {
      std::size_t r = f, g = 0, mul = 1;
      for (std::size_t a = m.size(); a-- > 0;) {
        g += ((r % m[a]) / window) * mul;
        mul *= os[a];
        r /= m[a];
      }
      double& dst = y.re()[c * Po + g];
      dst = std::max(dst, x.re()[c * Pm + f]);
    }
  return y;
}

Tensor backbone_edge(const Supernet& net, const SupernetEdge& e, const Tensor& x) {
  using oracle::Kind;
  oracle::OracleSpec os;
  os.kernel = e.spec.k;
  os.stride = e.spec.stride;
  os.dilation = e.spec.dilation;
  os.groups = e.spec.groups;
  os.modes = e.spec.modes;
  switch (e.spec.kind) {
    case EdgeKind::Conv:
      if (!e.spec.circular) return zero_padded_conv(e.spec, e.op, x);
      os.kind = Kind::Conv;
      return oracle::oracle_forward(os, e.op, e.op.weight, x);
    case EdgeKind::AvgPool: os.kind = Kind::AvgPool; return oracle::oracle_forward(os, e.op, e.op.weight, x);
    case EdgeKind::Skip: os.kind = Kind::Skip; return oracle::oracle_forward(os, e.op, e.op.weight, x);
    case EdgeKind::Zero: os.kind = Kind::Zero; return oracle::oracle_forward(os, e.op, e.op.weight, x);
    case EdgeKind::Fno: os.kind = Kind::Fno; return oracle::oracle_forward(os, e.op, e.op.weight, x);
    case EdgeKind::Relu: {
      Tensor y = x.clone();
      for (double& v : y.re()) v = std::max(v, 0.0);
      return y;
    }
    case EdgeKind::MaxPool: return naive_maxpool(x, e.spec.window);
    case EdgeKind::Dense: {
      const std::size_t co = e.weight.size(0), in = e.weight.size(1);
      Tensor y = Tensor::zeros({co});
      for (std::size_t o = 0; o < co; ++o) {
        double acc = e.bias.re()[o];
        for (std::size_t i = 0; i < in; ++i) acc += e.weight.re()[o * in + i] * x.re()[i];
        y.re()[o] = acc;
      }
      return y;
    }
    case EdgeKind::Norm: break;
  }
  (void)net;
  throw Unsupported("backbone_forward: norm edges are not supported");
}

}  // namespace

Tensor backbone_forward(const Supernet& net, const Tensor& x) {
  const auto& nodes = net.backbone.nodes;
  const std::size_t B = x.size(0);
  std::vector<double> out;
  Shape oshape;
  for (std::size_t b = 0; b < B; ++b) {
    std::vector<Tensor> value(nodes.size());
    value[0] = sample(x, b);
    for (std::size_t v = 1; v < nodes.size(); ++v) {
      Tensor acc;
      for (const auto& e : net.edges) {
        if (e.spec.v != v) continue;
        Tensor y = backbone_edge(net, e, value[e.spec.u]);
        if (!acc.defined()) {
          acc = y;
        } else if (nodes[v].agg == Aggregation::Sum) {
          for (std::size_t i = 0; i < acc.numel(); ++i) acc.re()[i] += y.re()[i];
        } else {
          Shape s = acc.shape();
          s[0] += y.size(0);
          std::vector<double> cat(acc.re().begin(), acc.re().end());
          cat.insert(cat.end(), y.re().begin(), y.re().end());
          acc = Tensor::real(s, cat);
        }
      }
      value[v] = acc;
    }
    oshape = value.back().shape();
    out.insert(out.end(), value.back().re().begin(), value.back().re().end());
  }
  oshape.insert(oshape.begin(), B);
  return Tensor::real(oshape, out);
}

}  // namespace xd::search
