// SPDX-License-Identifier: Apache-2.0
#include "xdops/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "xdops/config.hpp"

namespace xd::ckpt {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

using nlohmann::json;

class Writer {
 public:
  void u8(std::uint8_t v) { raw(&v, 1); }
  void u32(std::uint32_t v) { raw(&v, 4); }
  void u64(std::uint64_t v) { raw(&v, 8); }
  void f64(double v) { raw(&v, 8); }
  void bytes(const std::string& s) { buf_ += s; }
  void shape(const Shape& s) {
    u64(s.size());
    for (auto d : s) u64(d);
  }
  /// Shape, complex flag, then values ((re, im) pairs when complex).
  void tensor(const Tensor& t) {
    shape(t.shape());
    u8(t.is_complex());
    const auto re = t.re();
    const auto im = t.im();
    for (std::size_t i = 0; i < t.numel(); ++i) {
      f64(re[i]);
      if (t.is_complex()) f64(im[i]);
    }
  }
  void kmatrix(const kal::KMatrix& k) {
    u64(k.n());
    u64(k.depth());
    for (const auto& t : k.parameters()) tensor(t);
  }
  const std::string& str() const { return buf_; }

 private:
  void raw(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  std::string buf_;
};

class Reader {
 public:
  Reader(const std::string& buf, std::string what) : buf_(buf), what_(std::move(what)) {}

  std::uint8_t u8() { return pod<std::uint8_t>(); }
  std::uint32_t u32() { return pod<std::uint32_t>(); }
  std::uint64_t u64() { return pod<std::uint64_t>(); }
  double f64() { return pod<double>(); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  Shape shape() {
    const std::uint64_t r = u64();
    if (r > 16) fail("implausible tensor rank");
    Shape s(r);
    for (auto& d : s) d = u64();
    return s;
  }
  Tensor tensor() {
    const Shape s = shape();
    const bool cx = u8() != 0;
    const std::size_t n = numel(s);
    need(n * (cx ? 16 : 8));
    Tensor t = Tensor::zeros(s, cx ? DType::Complex : DType::Real);
    auto re = t.re();
    auto im = t.im();
    for (std::size_t i = 0; i < n; ++i) {
      re[i] = f64();
      if (cx) im[i] = f64();
    }
    return t;
  }
  /// Reads a tensor and copies it into `into`, which must match.
  void tensor_into(Tensor& into, const std::string& name) {
    const Tensor t = tensor();
    if (t.shape() != into.shape() || t.is_complex() != into.is_complex())
      fail(name + " has shape " + shape_str(t.shape()) + ", expected " + shape_str(into.shape()));
    into.copy_from(t);
  }
  void kmatrix_into(kal::KMatrix& k, const std::string& name) {
    const std::uint64_t n = u64(), d = u64();
    if (n != k.n() || d != k.depth())
      fail(name + " is n=" + std::to_string(n) + " depth " + std::to_string(d) + ", expected n=" +
           std::to_string(k.n()) + " depth " + std::to_string(k.depth()));
    for (auto t : k.parameters()) tensor_into(t, name);
  }
  bool done() const { return pos_ == buf_.size(); }
  [[noreturn]] void fail(const std::string& msg) const {
    throw std::invalid_argument("checkpoint: " + what_ + ": " + msg);
  }

 private:
  template <class T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n) fail("truncated");
  }

  const std::string& buf_;
  std::string what_;
  std::size_t pos_ = 0;
};

void section(Writer& out, const char tag[4], const std::string& payload) {
  out.bytes(std::string(tag, 4));
  out.u64(payload.size());
  out.bytes(payload);
}

void write_opt(Writer& w, const optim::Optimizer& o) {
  w.u64(o.steps());
  const auto ts = o.state_tensors();
  w.u64(ts.size());
  for (const auto& t : ts) w.tensor(t);
}

void read_opt(Reader& r, optim::Optimizer& o) {
  const std::uint64_t steps = r.u64(), count = r.u64();
  const auto& ps = o.params();
  if (count != 0 && count != ps.size() && count != 2 * ps.size()) r.fail("optimizer state does not fit the parameters");
  std::vector<Tensor> ts;
  for (std::uint64_t i = 0; i < count; ++i) {
    ts.push_back(r.tensor());
    if (ts.back().shape() != ps[i % ps.size()].shape()) r.fail("optimizer state shape mismatch");
  }
  o.load_state(ts, steps);
}

}  // namespace

std::string serialize_xdop(const XDOp& op) {
  Writer w;
  w.u64(op.filter.c_out);
  w.u64(op.filter.c_in);
  w.shape(op.filter.k);
  w.shape(op.n);
  w.shape(op.m);
  w.u64(op.view.size());
  for (const auto& v : op.view) {
    w.u64(v.step);
    w.u64(v.size);
  }
  for (auto d : op.params.depth()) w.u64(d);
  w.u8(op.params.b_frozen);
  w.u8(op.params.C_frozen);
  for (const auto* ks : {&op.params.K, &op.params.L, &op.params.M})
    for (const auto& k : ks->axes) w.kmatrix(k);
  w.tensor(op.params.b);
  w.tensor(op.params.C);
  w.tensor(op.weight);
  return w.str();
}

void deserialize_xdop(const std::string& bytes, XDOp& op) {
  Reader r(bytes, "XDOP");
  if (r.u64() != op.filter.c_out || r.u64() != op.filter.c_in || r.shape() != op.filter.k)
    r.fail("filter shape mismatch");
  if (r.shape() != op.n || r.shape() != op.m) r.fail("padding mismatch");
  if (r.u64() != op.view.size()) r.fail("output view mismatch");
  for (const auto& v : op.view)
    if (r.u64() != v.step || r.u64() != v.size) r.fail("output view mismatch");
  for (auto d : op.params.depth())
    if (r.u64() != d) r.fail("depth mismatch");
  op.params.b_frozen = r.u8() != 0;
  op.params.C_frozen = r.u8() != 0;
  const char* names[3] = {"K", "L", "M"};
  kal::KroneckerK* ks[3] = {&op.params.K, &op.params.L, &op.params.M};
  for (int i = 0; i < 3; ++i)
    for (auto& k : ks[i]->axes) r.kmatrix_into(k, names[i]);
  r.tensor_into(op.params.b, "b");
  r.tensor_into(op.params.C, "C");
  r.tensor_into(op.weight, "weight");
  if (!r.done()) r.fail("trailing bytes");
}

void save(const std::string& path, const search::Supernet& net, const search::TrainerState& state,
          const search::TrainConfig& train, const search::History& history, const json& run, const json& meta) {
  Writer out;
  out.bytes("XDCK");
  out.u32(kVersion);
  std::uint32_t count = 5;
  for (const auto& e : net.edges) count += e.searchable;
  out.u32(count);

  const json conf = {{"schema", kSchema},
                     {"backbone", search::to_json(net.backbone)},
                     {"xd", search::to_json(net.options)},
                     {"train", cfg::to_json(train)},
                     {"run", run}};
  section(out, "CONF", conf.dump());

  Writer dense;
  for (std::size_t i = 0; i < net.edges.size(); ++i) {
    const auto& e = net.edges[i];
    if (e.searchable) {
      Writer x;
      x.u64(i);
      x.bytes(serialize_xdop(e.op));
      section(out, "XDOP", x.str());
    } else if (e.weight.defined()) {
      dense.u64(i);
      dense.tensor(e.weight);
      dense.tensor(e.bias);
    }
  }
  section(out, "DENS", dense.str());

  Writer opts;
  opts.u64(state.epoch);
  write_opt(opts, state.weights);
  write_opt(opts, state.arch);
  section(out, "OPTS", opts.str());
  section(out, "HIST", history.to_jsonl());
  section(out, "META", meta.dump());

  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot write " + path);
    f.write(out.str().data(), static_cast<std::streamsize>(out.str().size()));
    if (!f) throw std::runtime_error("checkpoint: write failed for " + path);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw std::runtime_error("checkpoint: cannot replace " + path);
}

Checkpoint load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::invalid_argument("checkpoint: cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  const std::string buf = ss.str();
  Reader r(buf, path);
  if (r.bytes(4) != "XDCK") r.fail("not a checkpoint (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kVersion)
    r.fail("container version " + std::to_string(version) + ", this build reads " + std::to_string(kVersion));
  const std::uint32_t count = r.u32();

  Checkpoint c;
  bool have_conf = false;
  std::vector<std::size_t> xdop_seen;
  for (std::uint32_t s = 0; s < count; ++s) {
    const std::string tag = r.bytes(4);
    const std::string payload = r.bytes(r.u64());
    if (tag == "CONF") {
      json conf;
      try {
        conf = json::parse(payload);
        if (conf.at("schema").get<int>() != kSchema) r.fail("schema " + conf.at("schema").dump() + " is not supported");
        c.train = cfg::train_config_from_json(conf.at("train"));
        c.net = search::substitute_backbone(search::backbone_from_json(conf.at("backbone")),
                                            search::substitute_options_from_json(conf.at("xd")));
        c.run = conf.value("run", json::object());
      } catch (const json::exception& e) {
        r.fail(std::string("bad CONF section: ") + e.what());
      }
      c.state = search::make_trainer(c.net, c.train);
      have_conf = true;
      continue;
    }
    if (!have_conf) r.fail("section " + tag + " precedes CONF");
    if (tag == "XDOP") {
      Reader x(payload, path + " XDOP");
      const std::uint64_t idx = x.u64();
      if (idx >= c.net.edges.size() || !c.net.edges[idx].searchable) r.fail("XDOP for a non-searchable edge");
      deserialize_xdop(payload.substr(8), c.net.edges[idx].op);
      xdop_seen.push_back(idx);
    } else if (tag == "DENS") {
      Reader d(payload, path + " DENS");
      while (!d.done()) {
        const std::uint64_t idx = d.u64();
        if (idx >= c.net.edges.size() || !c.net.edges[idx].weight.defined()) d.fail("weights for a parameter-free edge");
        d.tensor_into(c.net.edges[idx].weight, "dense weight");
        d.tensor_into(c.net.edges[idx].bias, "dense bias");
      }
    } else if (tag == "OPTS") {
      Reader o(payload, path + " OPTS");
      c.state.epoch = o.u64();
      read_opt(o, c.state.weights);
      read_opt(o, c.state.arch);
    } else if (tag == "HIST") {
      std::istringstream lines(payload);
      std::string line;
      while (std::getline(lines, line)) {
        if (line.empty()) continue;
        const json j = json::parse(line);
        if (j.contains("aborted")) {
          c.history.aborted = j.at("aborted").get<bool>();
          c.history.abort_reason = j.value("reason", "");
          continue;
        }
        search::EpochRecord e;
        e.epoch = j.at("epoch").get<std::size_t>();
        e.train_loss = j.at("train_loss").get<double>();
        e.valid_loss = j.at("valid_loss").get<double>();
        e.metric = j.at("metric").get<double>();
        e.divergence_mean = j.at("divergence_mean").get<double>();
        e.wallclock_s = j.at("wallclock_s").get<double>();
        c.history.epochs.push_back(e);
      }
    } else if (tag == "META") {
      c.meta = json::parse(payload);
    }
    // Unknown tags are skipped so newer writers stay readable.
  }
  if (!have_conf) r.fail("missing CONF section");
  std::size_t searchable = 0;
  for (const auto& e : c.net.edges) searchable += e.searchable;
  if (xdop_seen.size() != searchable) r.fail("expected " + std::to_string(searchable) + " XDOP sections");
  return c;
}

}  // namespace xd::ckpt
