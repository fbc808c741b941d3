// SPDX-License-Identifier: Apache-2.0
#include "xdops/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "xdops/error.hpp"

namespace xd::ad {
namespace {

bool is_suffix(const Shape& b, const Shape& a) {
  if (b.size() > a.size()) return false;
  return std::equal(b.begin(), b.end(), a.end() - static_cast<std::ptrdiff_t>(b.size()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
}

void require_real(const Tensor& a, const char* op) {
  if (a.is_complex()) throw std::invalid_argument(std::string(op) + ": expects a real tensor");
}

// Sums g over the leading axes that `target` does not have.
Tensor reduce_leading(const Tensor& g, const Shape& target) {
  if (g.shape() == target) return g;
  const std::size_t inner = numel(target), outer = g.numel() / std::max<std::size_t>(inner, 1);
  Tensor r = Tensor::zeros(target, g.dtype());
  auto rr = r.re();
  auto gr = g.re();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) rr[i] += gr[o * inner + i];
  if (g.is_complex()) {
    auto ri = r.im();
    auto gi = g.im();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) ri[i] += gi[o * inner + i];
  }
  return r;
}

Tensor real_part(const Tensor& z) {
  if (!z.is_complex()) return z;
  return Tensor::real(z.shape(), std::vector<double>(z.re().begin(), z.re().end()));
}

// Converts a gradient to the dtype of the tensor it belongs to.
Tensor match_dtype(const Tensor& g, const Tensor& like) {
  if (like.is_complex() == g.is_complex()) return g;
  return like.is_complex() ? g.as_complex() : real_part(g);
}

std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// Copies the leading-corner block of extent `ext` from src to dst (adding
// when `add` is set).
void copy_corner(const Tensor& src, Tensor& dst, const Shape& ext, bool add) {
  const auto ss = strides_of(src.shape()), ds = strides_of(dst.shape());
  const std::size_t total = numel(ext);
  const std::size_t rank = ext.size();
  std::vector<std::size_t> idx(rank, 0);
  const bool cplx_src = src.is_complex(), cplx_dst = dst.is_complex();
  auto sr = src.re();
  auto si = src.im();
  auto dr = dst.re();
  auto di = dst.im();
  for (std::size_t n = 0; n < total; ++n) {
    std::size_t so = 0, dof = 0;
    for (std::size_t a = 0; a < rank; ++a) {
      so += idx[a] * ss[a];
      dof += idx[a] * ds[a];
    }
    if (add) {
      dr[dof] += sr[so];
      if (cplx_dst && cplx_src) di[dof] += si[so];
    } else {
      dr[dof] = sr[so];
      if (cplx_dst) di[dof] = cplx_src ? si[so] : 0.0;
    }
    for (std::size_t a = rank; a-- > 0;) {
      if (++idx[a] < ext[a]) break;
      idx[a] = 0;
    }
  }
}

Tensor broadcast_scalar(const Tensor& g, const Shape& shape) {
  Tensor out = Tensor::zeros(shape, g.dtype());
  out.fill(g.re()[0], g.is_complex() ? g.im()[0] : 0.0);
  return out;
}

}  // namespace

// ---- Gradients ---------------------------------------------------------------

Tensor Gradients::of(const Tensor& p) const {
  if (!p.defined()) throw std::invalid_argument("Gradients::of: undefined tensor");
  if (auto it = grads_.find(p.id()); it != grads_.end()) return it->second;
  if (p.requires_grad() || seen_.count(p.id())) return Tensor::zeros(p.shape(), p.dtype());
  throw std::invalid_argument("Gradients::of: tensor " + shape_str(p.shape()) + " is detached from the tape");
}

bool Gradients::contains(const Tensor& p) const { return grads_.count(p.id()) > 0; }

// ---- Tape plumbing -----------------------------------------------------------

bool Tape::tracked(const Tensor& t) const { return t.defined() && (t.requires_grad() || produced_.count(t.id())); }

Tensor Tape::record(Tensor out, std::initializer_list<const Tensor*> inputs, Backward back) {
  bool any = false;
  for (const Tensor* in : inputs)
    if (in && tracked(*in)) {
      any = true;
      inputs_.insert(in->id());
    }
  if (!any) return out;
  if (used_) throw std::logic_error("Tape: recording after backward");
  produced_.insert(out.id());
  nodes_.push_back({out, std::move(back)});
  return out;
}

void Tape::accumulate(const Tensor& target, Tensor grad) {
  if (!tracked(target)) return;
  grad = match_dtype(grad, target);
  auto it = grads_.find(target.id());
  if (it == grads_.end()) {
    grads_.emplace(target.id(), grad.clone());
    return;
  }
  auto dr = it->second.re();
  auto gr = grad.re();
  for (std::size_t i = 0; i < dr.size(); ++i) dr[i] += gr[i];
  if (grad.is_complex()) {
    auto di = it->second.im();
    auto gi = grad.im();
    for (std::size_t i = 0; i < di.size(); ++i) di[i] += gi[i];
  }
}

Gradients Tape::backward(const Tensor& loss) {
  if (used_) throw std::logic_error("Tape::backward: tape already consumed");
  if (loss.numel() != 1) throw std::invalid_argument("Tape::backward: loss is not a scalar");
  if (loss.is_complex()) throw std::invalid_argument("Tape::backward: loss is complex-valued");
  used_ = true;
  Gradients out;
  if (tracked(loss)) {
    grads_.emplace(loss.id(), Tensor::zeros(loss.shape(), DType::Real));
    grads_.at(loss.id()).fill(1.0);
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      auto it = grads_.find(nodes_[i].out.id());
      if (it == grads_.end()) continue;
      Tensor g = it->second;
      nodes_[i].back(g);
      if (!nodes_[i].out.requires_grad()) grads_.erase(nodes_[i].out.id());
    }
  }
  out.grads_ = std::move(grads_);
  out.seen_ = std::move(inputs_);
  nodes_.clear();
  return out;
}

// ---- elementwise -------------------------------------------------------------

namespace {

enum class Bin { Add, Sub, Mul };

Tensor binary_value(const Tensor& a, const Tensor& b, Bin op) {
  if (!is_suffix(b.shape(), a.shape()))
    throw std::invalid_argument("elementwise op: shape " + shape_str(b.shape()) + " does not broadcast to " +
                                shape_str(a.shape()));
  const bool cx = a.is_complex() || b.is_complex();
  Tensor out = Tensor::zeros(a.shape(), cx ? DType::Complex : DType::Real);
  const std::size_t nb = std::max<std::size_t>(b.numel(), 1), total = a.numel();
  auto ar = a.re();
  auto br = b.re();
  auto orr = out.re();
  if (!cx) {
    for (std::size_t i = 0; i < total; ++i) {
      const double x = ar[i], y = br[i % nb];
      orr[i] = op == Bin::Add ? x + y : op == Bin::Sub ? x - y : x * y;
    }
    return out;
  }
  auto oi = out.im();
  const bool ac = a.is_complex(), bc = b.is_complex();
  auto ai = a.im();
  auto bi = b.im();
  for (std::size_t i = 0; i < total; ++i) {
    const std::size_t j = i % nb;
    const double xr = ar[i], xi = ac ? ai[i] : 0.0, yr = br[j], yi = bc ? bi[j] : 0.0;
    switch (op) {
      case Bin::Add:
        orr[i] = xr + yr;
        oi[i] = xi + yi;
        break;
      case Bin::Sub:
        orr[i] = xr - yr;
        oi[i] = xi - yi;
        break;
      case Bin::Mul:
        orr[i] = xr * yr - xi * yi;
        oi[i] = xr * yi + xi * yr;
        break;
    }
  }
  return out;
}

// g * conj(other), with `other` broadcast when shorter.
Tensor mul_conj(const Tensor& g, const Tensor& other) {
  Tensor oc = other.is_complex() ? other : other.as_complex();
  Tensor conj = oc.clone();
  for (auto& v : conj.im()) v = -v;
  return binary_value(g, conj, Bin::Mul);
}

}  // namespace

Tensor Tape::add(const Tensor& a, const Tensor& b) {
  Tensor out = binary_value(a, b, Bin::Add);
  return record(out, {&a, &b}, [this, a, b](const Tensor& g) {
    accumulate(a, g);
    if (tracked(b)) accumulate(b, reduce_leading(g, b.shape()));
  });
}

Tensor Tape::sub(const Tensor& a, const Tensor& b) {
  Tensor out = binary_value(a, b, Bin::Sub);
  return record(out, {&a, &b}, [this, a, b](const Tensor& g) {
    accumulate(a, g);
    if (tracked(b)) {
      Tensor nb = reduce_leading(g, b.shape()).clone();
      for (auto& v : nb.re()) v = -v;
      for (auto& v : nb.im()) v = -v;
      accumulate(b, nb);
    }
  });
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
  Tensor out = binary_value(a, b, Bin::Mul);
  return record(out, {&a, &b}, [this, a, b](const Tensor& g) {
    if (tracked(a)) accumulate(a, mul_conj(g, b));
    if (tracked(b)) {
      // g * conj(a), then summed over the broadcast axes.
      Tensor ga = a.is_complex() ? a.clone() : a.as_complex().clone();
      for (auto& v : ga.im()) v = -v;
      accumulate(b, reduce_leading(binary_value(g.is_complex() ? g : g.as_complex(), ga, Bin::Mul), b.shape()));
    }
  });
}

Tensor Tape::scale(const Tensor& a, cplx s) {
  const bool cx = a.is_complex() || s.imag() != 0.0;
  Tensor out = Tensor::zeros(a.shape(), cx ? DType::Complex : DType::Real);
  auto ar = a.re();
  auto orr = out.re();
  if (!cx) {
    for (std::size_t i = 0; i < ar.size(); ++i) orr[i] = s.real() * ar[i];
  } else {
    auto oi = out.im();
    auto ai = a.im();
    for (std::size_t i = 0; i < ar.size(); ++i) {
      const cplx v = s * cplx(ar[i], a.is_complex() ? ai[i] : 0.0);
      orr[i] = v.real();
      oi[i] = v.imag();
    }
  }
  return record(out, {&a}, [this, a, s](const Tensor& g) {
    const cplx cs = std::conj(s);
    Tensor r = Tensor::zeros(g.shape(), g.is_complex() || cs.imag() != 0.0 ? DType::Complex : DType::Real);
    for (std::size_t i = 0; i < g.numel(); ++i) r.set(i, cs * g.at(i));
    accumulate(a, r);
  });
}

Tensor Tape::complex(const Tensor& re, const Tensor& im) {
  require_same_shape(re, im, "complex");
  require_real(re, "complex");
  require_real(im, "complex");
  Tensor out = Tensor::complex(re.shape(), std::vector<double>(re.re().begin(), re.re().end()),
                               std::vector<double>(im.re().begin(), im.re().end()));
  return record(out, {&re, &im}, [this, re, im](const Tensor& g) {
    accumulate(re, real_part(g));
    if (tracked(im)) {
      Tensor gi = Tensor::zeros(g.shape());
      if (g.is_complex()) std::copy(g.im().begin(), g.im().end(), gi.re().begin());
      accumulate(im, gi);
    }
  });
}

Tensor Tape::real(const Tensor& z) {
  Tensor out = real_part(z);
  if (!z.is_complex()) out = z.clone();
  return record(out, {&z}, [this, z](const Tensor& g) { accumulate(z, g); });
}

Tensor Tape::imag(const Tensor& z) {
  Tensor out = Tensor::zeros(z.shape());
  if (z.is_complex()) std::copy(z.im().begin(), z.im().end(), out.re().begin());
  return record(out, {&z}, [this, z](const Tensor& g) {
    if (!z.is_complex()) return;
    Tensor gz = Tensor::zeros(g.shape(), DType::Complex);
    std::copy(g.re().begin(), g.re().end(), gz.im().begin());
    accumulate(z, gz);
  });
}

// ---- shape ops ---------------------------------------------------------------

Tensor Tape::reshape(const Tensor& x, const Shape& shape) {
  if (numel(shape) != x.numel())
    throw std::invalid_argument("reshape: " + shape_str(x.shape()) + " cannot become " + shape_str(shape));
  Tensor out = x.is_complex() ? Tensor::complex(shape, std::vector<double>(x.re().begin(), x.re().end()),
                                                std::vector<double>(x.im().begin(), x.im().end()))
                              : Tensor::real(shape, std::vector<double>(x.re().begin(), x.re().end()));
  return record(out, {&x}, [this, x](const Tensor& g) {
    Tensor gx = g.is_complex() ? Tensor::complex(x.shape(), std::vector<double>(g.re().begin(), g.re().end()),
                                                 std::vector<double>(g.im().begin(), g.im().end()))
                               : Tensor::real(x.shape(), std::vector<double>(g.re().begin(), g.re().end()));
    accumulate(x, gx);
  });
}

Tensor Tape::pad(const Tensor& x, const Shape& shape) {
  if (shape.size() != x.dim()) throw std::invalid_argument("pad: rank mismatch");
  for (std::size_t a = 0; a < shape.size(); ++a)
    if (shape[a] < x.size(a)) throw std::invalid_argument("pad: target smaller than input");
  Tensor out = Tensor::zeros(shape, x.dtype());
  copy_corner(x, out, x.shape(), false);
  return record(out, {&x}, [this, x](const Tensor& g) {
    Tensor gx = Tensor::zeros(x.shape(), g.dtype());
    copy_corner(g, gx, x.shape(), false);
    accumulate(x, gx);
  });
}

Tensor Tape::slice(const Tensor& x, const Shape& shape) {
  if (shape.size() != x.dim()) throw std::invalid_argument("slice: rank mismatch");
  for (std::size_t a = 0; a < shape.size(); ++a)
    if (shape[a] > x.size(a)) throw std::invalid_argument("slice: extent larger than input");
  Tensor out = Tensor::zeros(shape, x.dtype());
  copy_corner(x, out, shape, false);
  return record(out, {&x}, [this, x, shape](const Tensor& g) {
    Tensor gx = Tensor::zeros(x.shape(), g.dtype());
    copy_corner(g, gx, shape, false);
    accumulate(x, gx);
  });
}

Tensor Tape::gather(const Tensor& x, std::size_t axis, const std::vector<std::size_t>& index) {
  const AxisSplit s = split_axis(x.shape(), axis);
  for (auto i : index)
    if (i >= s.n) throw std::out_of_range("gather: index out of range");
  Shape os = x.shape();
  os[axis] = index.size();
  Tensor out = Tensor::zeros(os, x.dtype());
  const std::size_t m = index.size();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < s.inner; ++j) {
        const std::size_t src = (o * s.n + index[i]) * s.inner + j, dst = (o * m + i) * s.inner + j;
        out.re()[dst] = x.re()[src];
        if (x.is_complex()) out.im()[dst] = x.im()[src];
      }
  return record(out, {&x}, [this, x, s, index, m](const Tensor& g) {
    Tensor gx = Tensor::zeros(x.shape(), g.dtype());
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < s.inner; ++j) {
          const std::size_t src = (o * s.n + index[i]) * s.inner + j, dst = (o * m + i) * s.inner + j;
          gx.re()[src] += g.re()[dst];
          if (g.is_complex()) gx.im()[src] += g.im()[dst];
        }
    accumulate(x, gx);
  });
}

Tensor Tape::mask(const Tensor& x, std::size_t axis, const std::vector<double>& m) {
  const AxisSplit s = split_axis(x.shape(), axis);
  if (m.size() != s.n) throw std::invalid_argument("mask: length mismatch");
  auto apply = [s, m](const Tensor& in) {
    Tensor out = in.clone();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.n; ++i)
        for (std::size_t j = 0; j < s.inner; ++j) {
          const std::size_t f = (o * s.n + i) * s.inner + j;
          out.re()[f] *= m[i];
          if (out.is_complex()) out.im()[f] *= m[i];
        }
    return out;
  };
  return record(apply(x), {&x}, [this, x, apply](const Tensor& g) { accumulate(x, apply(g)); });
}

Tensor Tape::sum(const Tensor& x) {
  double r = 0.0, i = 0.0;
  for (double v : x.re()) r += v;
  for (double v : x.im()) i += v;
  Tensor out = x.is_complex() ? Tensor::complex({}, {r}, {i}) : Tensor::scalar(r);
  return record(out, {&x}, [this, x](const Tensor& g) { accumulate(x, broadcast_scalar(g, x.shape())); });
}

Tensor Tape::sum_axis(const Tensor& x, std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis);
  Shape os = x.shape();
  os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor out = Tensor::zeros(os, x.dtype());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.n; ++i)
      for (std::size_t j = 0; j < s.inner; ++j) {
        out.re()[o * s.inner + j] += x.re()[(o * s.n + i) * s.inner + j];
        if (x.is_complex()) out.im()[o * s.inner + j] += x.im()[(o * s.n + i) * s.inner + j];
      }
  return record(out, {&x}, [this, x, s](const Tensor& g) {
    Tensor gx = Tensor::zeros(x.shape(), g.dtype());
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.n; ++i)
        for (std::size_t j = 0; j < s.inner; ++j) {
          gx.re()[(o * s.n + i) * s.inner + j] = g.re()[o * s.inner + j];
          if (g.is_complex()) gx.im()[(o * s.n + i) * s.inner + j] = g.im()[o * s.inner + j];
        }
    accumulate(x, gx);
  });
}

Tensor Tape::concat(const std::vector<Tensor>& xs, std::size_t axis) {
  if (xs.empty()) throw std::invalid_argument("concat: no inputs");
  Shape os = xs[0].shape();
  if (axis >= os.size()) throw std::out_of_range("concat: axis out of range");
  bool cx = false;
  os[axis] = 0;
  for (const auto& x : xs) {
    Shape a = x.shape(), b = xs[0].shape();
    if (a.size() != b.size()) throw std::invalid_argument("concat: rank mismatch");
    a[axis] = b[axis] = 0;
    if (a != b) throw std::invalid_argument("concat: shape mismatch");
    os[axis] += x.size(axis);
    cx = cx || x.is_complex();
  }
  Tensor out = Tensor::zeros(os, cx ? DType::Complex : DType::Real);
  const AxisSplit so = split_axis(os, axis);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& x : xs) {
    offsets.push_back(off);
    const AxisSplit s = split_axis(x.shape(), axis);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.n * s.inner; ++i) {
        const std::size_t dst = (o * so.n + off) * so.inner + i;
        out.re()[dst] = x.re()[o * s.n * s.inner + i];
        if (x.is_complex()) out.im()[dst] = x.im()[o * s.n * s.inner + i];
      }
    off += s.n;
  }
  Tensor result = out;
  bool any = false;
  for (const auto& x : xs) any = any || tracked(x);
  if (!any) return result;
  for (const auto& x : xs)
    if (tracked(x)) inputs_.insert(x.id());
  produced_.insert(out.id());
  nodes_.push_back({out, [this, xs, offsets, so, axis](const Tensor& g) {
                      for (std::size_t k = 0; k < xs.size(); ++k) {
                        if (!tracked(xs[k])) continue;
                        const AxisSplit s = split_axis(xs[k].shape(), axis);
                        Tensor gx = Tensor::zeros(xs[k].shape(), g.dtype());
                        for (std::size_t o = 0; o < s.outer; ++o)
                          for (std::size_t i = 0; i < s.n * s.inner; ++i) {
                            const std::size_t src = (o * so.n + offsets[k]) * so.inner + i;
                            gx.re()[o * s.n * s.inner + i] = g.re()[src];
                            if (g.is_complex()) gx.im()[o * s.n * s.inner + i] = g.im()[src];
                          }
                        accumulate(xs[k], gx);
                      }
                    }});
  return result;
}

// ---- structured ops ----------------------------------------------------------

Tensor Tape::contract(const Tensor& c_in, const Tensor& s_in, const Tensor& u_in) {
  if (c_in.dim() != 2 || s_in.dim() < 2 || u_in.dim() < 2)
    throw std::invalid_argument("contract: expected C [co,ci], S [co,ci,...], U [B,ci,...]");
  const std::size_t co = c_in.size(0), ci = c_in.size(1), B = u_in.size(0);
  if (s_in.size(0) != co || s_in.size(1) != ci || u_in.size(1) != ci)
    throw std::invalid_argument("contract: channel extents disagree");
  Shape rest(s_in.shape().begin() + 2, s_in.shape().end());
  if (Shape(u_in.shape().begin() + 2, u_in.shape().end()) != rest)
    throw std::invalid_argument("contract: spatial extents disagree");
  const std::size_t P = numel(rest);
  const Tensor C = c_in.as_complex(), S = s_in.as_complex(), U = u_in.as_complex();

  // T = C[i,j] * S[i,j,:]
  std::vector<double> tr(co * ci * P), ti(co * ci * P);
  for (std::size_t i = 0; i < co; ++i)
    for (std::size_t j = 0; j < ci; ++j) {
      const double cr = C.re()[i * ci + j], cim = C.im()[i * ci + j];
      const std::size_t base = (i * ci + j) * P;
      for (std::size_t p = 0; p < P; ++p) {
        const double sr = S.re()[base + p], si = S.im()[base + p];
        tr[base + p] = cr * sr - cim * si;
        ti[base + p] = cr * si + cim * sr;
      }
    }
  Shape os{B, co};
  os.insert(os.end(), rest.begin(), rest.end());
  Tensor out = Tensor::zeros(os, DType::Complex);
  auto yr = out.re();
  auto yi = out.im();
  const auto ur = U.re();
  const auto ui = U.im();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < co; ++i) {
      double* yrp = yr.data() + (b * co + i) * P;
      double* yip = yi.data() + (b * co + i) * P;
      for (std::size_t j = 0; j < ci; ++j) {
        const double* trp = tr.data() + (i * ci + j) * P;
        const double* tip = ti.data() + (i * ci + j) * P;
        const double* urp = ur.data() + (b * ci + j) * P;
        const double* uip = ui.data() + (b * ci + j) * P;
        for (std::size_t p = 0; p < P; ++p) {
          yrp[p] += trp[p] * urp[p] - tip[p] * uip[p];
          yip[p] += trp[p] * uip[p] + tip[p] * urp[p];
        }
      }
    }
  return record(out, {&c_in, &s_in, &u_in},
                [this, c_in, s_in, u_in, C, S, U, tr = std::move(tr), ti = std::move(ti), co, ci, B, P](const Tensor& g) {
                  const Tensor G = g.as_complex();
                  const auto gr = G.re();
                  const auto gi = G.im();
                  if (tracked(u_in)) {
                    Tensor gu = Tensor::zeros(U.shape(), DType::Complex);
                    auto gur = gu.re();
                    auto gui = gu.im();
                    for (std::size_t b = 0; b < B; ++b)
                      for (std::size_t i = 0; i < co; ++i)
                        for (std::size_t j = 0; j < ci; ++j) {
                          const double* trp = tr.data() + (i * ci + j) * P;
                          const double* tip = ti.data() + (i * ci + j) * P;
                          const double* grp = gr.data() + (b * co + i) * P;
                          const double* gip = gi.data() + (b * co + i) * P;
                          double* orp = gur.data() + (b * ci + j) * P;
                          double* oip = gui.data() + (b * ci + j) * P;
                          for (std::size_t p = 0; p < P; ++p) {
                            orp[p] += trp[p] * grp[p] + tip[p] * gip[p];
                            oip[p] += trp[p] * gip[p] - tip[p] * grp[p];
                          }
                        }
                    accumulate(u_in, gu);
                  }
                  if (!tracked(s_in) && !tracked(c_in)) return;
                  // gT[i,j,p] = sum_b g[b,i,p] conj(U[b,j,p])
                  std::vector<double> gtr(co * ci * P, 0.0), gti(co * ci * P, 0.0);
                  const auto ur = U.re();
                  const auto ui = U.im();
                  for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t i = 0; i < co; ++i)
                      for (std::size_t j = 0; j < ci; ++j) {
                        const double* grp = gr.data() + (b * co + i) * P;
                        const double* gip = gi.data() + (b * co + i) * P;
                        const double* urp = ur.data() + (b * ci + j) * P;
                        const double* uip = ui.data() + (b * ci + j) * P;
                        double* otr = gtr.data() + (i * ci + j) * P;
                        double* oti = gti.data() + (i * ci + j) * P;
                        for (std::size_t p = 0; p < P; ++p) {
                          otr[p] += grp[p] * urp[p] + gip[p] * uip[p];
                          oti[p] += gip[p] * urp[p] - grp[p] * uip[p];
                        }
                      }
                  if (tracked(s_in)) {
                    Tensor gs = Tensor::zeros(S.shape(), DType::Complex);
                    for (std::size_t i = 0; i < co; ++i)
                      for (std::size_t j = 0; j < ci; ++j) {
                        const double cr = C.re()[i * ci + j], cim = C.im()[i * ci + j];
                        const std::size_t base = (i * ci + j) * P;
                        for (std::size_t p = 0; p < P; ++p) {
                          gs.re()[base + p] = cr * gtr[base + p] + cim * gti[base + p];
                          gs.im()[base + p] = cr * gti[base + p] - cim * gtr[base + p];
                        }
                      }
                    accumulate(s_in, gs);
                  }
                  if (tracked(c_in)) {
                    Tensor gc = Tensor::zeros(C.shape(), DType::Complex);
                    for (std::size_t i = 0; i < co; ++i)
                      for (std::size_t j = 0; j < ci; ++j) {
                        const std::size_t base = (i * ci + j) * P;
                        double ar = 0.0, ai = 0.0;
                        for (std::size_t p = 0; p < P; ++p) {
                          const double sr = S.re()[base + p], si = S.im()[base + p];
                          ar += gtr[base + p] * sr + gti[base + p] * si;
                          ai += gti[base + p] * sr - gtr[base + p] * si;
                        }
                        gc.re()[i * ci + j] = ar;
                        gc.im()[i * ci + j] = ai;
                      }
                    accumulate(c_in, gc);
                  }
                });
}

Tensor Tape::kmatrix_apply(const kal::KMatrix& k, const Tensor& x, std::size_t axis) {
  Tensor out = kal::kmatrix_apply(k, x, axis);
  const std::vector<Tensor> stages = k.parameters();
  bool any = tracked(x);
  for (const auto& s : stages) any = any || tracked(s);
  if (!any) return out;
  if (used_) throw std::logic_error("Tape: recording after backward");
  if (tracked(x)) inputs_.insert(x.id());
  for (const auto& s : stages)
    if (tracked(s)) inputs_.insert(s.id());
  produced_.insert(out.id());
  nodes_.push_back({out, [this, k, x, axis, stages](const Tensor& g) {
                      bool want_stages = false;
                      for (const auto& s : stages) want_stages = want_stages || tracked(s);
                      if (!tracked(x) && !want_stages) return;
                      const AxisSplit sp = split_axis(x.shape(), axis);
                      const Tensor xc = x.as_complex();
                      Tensor gx = g.as_complex().clone();
                      std::vector<Tensor> gst;
                      if (want_stages)
                        for (const auto& s : stages) gst.push_back(Tensor::zeros(s.shape(), DType::Complex));
                      kal::kmatrix_backward_inplace(k, xc.re().data(), xc.im().data(), gx.re().data(),
                                                    gx.im().data(), sp.outer, sp.inner,
                                                    want_stages ? &gst : nullptr);
                      accumulate(x, gx);
                      for (std::size_t i = 0; i < gst.size(); ++i) accumulate(stages[i], gst[i]);
                    }});
  return out;
}

Tensor Tape::kron_apply(const kal::KroneckerK& ks, const Tensor& x, std::size_t first_axis) {
  if (first_axis + ks.ndim() > x.dim()) throw std::out_of_range("kron_apply: not enough axes in input");
  Tensor y = x;
  for (std::size_t a = 0; a < ks.ndim(); ++a) y = kmatrix_apply(ks.axes[a], y, first_axis + a);
  if (ks.ndim() == 0) y = x.as_complex();
  return y;
}

// ---- nonlinear and losses ----------------------------------------------------

Tensor Tape::relu(const Tensor& x) {
  require_real(x, "relu");
  Tensor out = x.clone();
  for (auto& v : out.re()) v = v > 0.0 ? v : 0.0;
  return record(out, {&x}, [this, x](const Tensor& g) {
    Tensor gx = Tensor::zeros(x.shape());
    for (std::size_t i = 0; i < gx.numel(); ++i) gx.re()[i] = x.re()[i] > 0.0 ? g.re()[i] : 0.0;
    accumulate(x, gx);
  });
}

Tensor Tape::dense(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_real(x, "dense");
  require_real(w, "dense");
  if (x.dim() != 2 || w.dim() != 2 || x.size(1) != w.size(1)) throw std::invalid_argument("dense: shape mismatch");
  const std::size_t B = x.size(0), in = x.size(1), out_n = w.size(0);
  if (bias.defined() && (bias.dim() != 1 || bias.size(0) != out_n))
    throw std::invalid_argument("dense: bias shape mismatch");
  Tensor out = Tensor::zeros({B, out_n});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < out_n; ++o) {
      double acc = bias.defined() ? bias.re()[o] : 0.0;
      for (std::size_t i = 0; i < in; ++i) acc += w.re()[o * in + i] * x.re()[b * in + i];
      out.re()[b * out_n + o] = acc;
    }
  return record(out, {&x, &w, &bias}, [this, x, w, bias, B, in, out_n](const Tensor& g) {
    if (tracked(x)) {
      Tensor gx = Tensor::zeros(x.shape());
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t o = 0; o < out_n; ++o)
          for (std::size_t i = 0; i < in; ++i) gx.re()[b * in + i] += g.re()[b * out_n + o] * w.re()[o * in + i];
      accumulate(x, gx);
    }
    if (tracked(w)) {
      Tensor gw = Tensor::zeros(w.shape());
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t o = 0; o < out_n; ++o)
          for (std::size_t i = 0; i < in; ++i) gw.re()[o * in + i] += g.re()[b * out_n + o] * x.re()[b * in + i];
      accumulate(w, gw);
    }
    if (bias.defined() && tracked(bias)) accumulate(bias, reduce_leading(g, bias.shape()));
  });
}

Tensor Tape::maxpool(const Tensor& x, std::size_t naxes, std::size_t window) {
  require_real(x, "maxpool");
  if (naxes == 0 || naxes > x.dim() || window == 0) throw std::invalid_argument("maxpool: bad arguments");
  const Shape& xs = x.shape();
  Shape os = xs;
  const std::size_t first = xs.size() - naxes;
  for (std::size_t a = first; a < xs.size(); ++a) {
    if (xs[a] % window) throw std::invalid_argument("maxpool: extent not divisible by window");
    os[a] = xs[a] / window;
  }
  Tensor out = Tensor::zeros(os);
  std::vector<std::size_t> arg(out.numel());
  const auto xst = strides_of(xs);
  const auto ost = strides_of(os);
  std::vector<std::size_t> idx(os.size());
  std::size_t win_total = 1;
  for (std::size_t a = 0; a < naxes; ++a) win_total *= window;
  for (std::size_t f = 0; f < out.numel(); ++f) {
    std::size_t rem = f, base = 0;
    for (std::size_t a = 0; a < os.size(); ++a) {
      idx[a] = rem / ost[a];
      rem %= ost[a];
      base += (a >= first ? idx[a] * window : idx[a]) * xst[a];
    }
    double best = -std::numeric_limits<double>::infinity();
    std::size_t best_at = base;
    for (std::size_t w = 0; w < win_total; ++w) {
      std::size_t r = w, off = 0;
      for (std::size_t a = xs.size(); a-- > first;) {
        off += (r % window) * xst[a];
        r /= window;
      }
      if (x.re()[base + off] > best) {
        best = x.re()[base + off];
        best_at = base + off;
      }
    }
    out.re()[f] = best;
    arg[f] = best_at;
  }
  return record(out, {&x}, [this, x, arg](const Tensor& g) {
    Tensor gx = Tensor::zeros(x.shape());
    for (std::size_t f = 0; f < arg.size(); ++f) gx.re()[arg[f]] += g.re()[f];
    accumulate(x, gx);
  });
}

Tensor Tape::mse(const Tensor& pred, const Tensor& target) {
  require_same_shape(pred, target, "mse");
  require_real(pred, "mse");
  require_real(target, "mse");
  const std::size_t n = pred.numel();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = pred.re()[i] - target.re()[i];
    acc += d * d;
  }
  Tensor out = Tensor::scalar(acc / static_cast<double>(n));
  return record(out, {&pred, &target}, [this, pred, target, n](const Tensor& g) {
    Tensor gp = Tensor::zeros(pred.shape());
    const double s = 2.0 * g.re()[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) gp.re()[i] = s * (pred.re()[i] - target.re()[i]);
    accumulate(pred, gp);
    if (tracked(target)) {
      for (auto& v : gp.re()) v = -v;
      accumulate(target, gp);
    }
  });
}

Tensor Tape::rel_l2(const Tensor& pred, const Tensor& target) {
  require_same_shape(pred, target, "rel_l2");
  require_real(pred, "rel_l2");
  require_real(target, "rel_l2");
  const std::size_t B = pred.dim() ? pred.size(0) : 1, per = B ? pred.numel() / B : 0;
  std::vector<double> num(B), den(B);
  double acc = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    double dn = 0.0, tn = 0.0;
    for (std::size_t i = 0; i < per; ++i) {
      const double d = pred.re()[b * per + i] - target.re()[b * per + i];
      dn += d * d;
      tn += target.re()[b * per + i] * target.re()[b * per + i];
    }
    num[b] = std::sqrt(dn);
    // Zero targets fall back to absolute error.
    den[b] = tn > 0.0 ? std::sqrt(tn) : 1.0;
    acc += num[b] / den[b];
  }
  Tensor out = Tensor::scalar(B ? acc / static_cast<double>(B) : 0.0);
  return record(out, {&pred}, [this, pred, target, num, den, B, per](const Tensor& g) {
    Tensor gp = Tensor::zeros(pred.shape());
    for (std::size_t b = 0; b < B; ++b) {
      if (num[b] == 0.0) continue;
      const double s = g.re()[0] / (static_cast<double>(B) * num[b] * den[b]);
      for (std::size_t i = 0; i < per; ++i)
        gp.re()[b * per + i] = s * (pred.re()[b * per + i] - target.re()[b * per + i]);
    }
    accumulate(pred, gp);
  });
}

Tensor Tape::softmax_ce(const Tensor& logits, const std::vector<std::size_t>& labels) {
  require_real(logits, "softmax_ce");
  if (logits.dim() != 2 || logits.size(0) != labels.size())
    throw std::invalid_argument("softmax_ce: expected logits [B, classes] and B labels");
  const std::size_t B = logits.size(0), C = logits.size(1);
  std::vector<double> prob(B * C);
  double acc = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    if (labels[b] >= C) throw std::out_of_range("softmax_ce: label out of range");
    const double* z = logits.re().data() + b * C;
    const double mx = *std::max_element(z, z + C);
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) s += std::exp(z[c] - mx);
    for (std::size_t c = 0; c < C; ++c) prob[b * C + c] = std::exp(z[c] - mx) / s;
    acc += -(z[labels[b]] - mx - std::log(s));
  }
  Tensor out = Tensor::scalar(acc / static_cast<double>(B));
  return record(out, {&logits}, [this, logits, labels, prob, B, C](const Tensor& g) {
    Tensor gl = Tensor::zeros(logits.shape());
    const double s = g.re()[0] / static_cast<double>(B);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        gl.re()[b * C + c] = s * (prob[b * C + c] - (c == labels[b] ? 1.0 : 0.0));
    accumulate(logits, gl);
  });
}

// ---- gradient check ----------------------------------------------------------

double GradReport::max_error() const {
  double m = 0.0;
  for (const auto& e : entries) m = std::max(m, e.max_rel_error);
  return m;
}

GradReport grad_check(const std::function<Tensor(Tape&)>& fn,
                      const std::vector<std::pair<std::string, Tensor>>& params, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("grad_check: step must be positive");
  auto eval = [&fn]() {
    Tape t;
    return fn(t).item();
  };
  Gradients grads;
  {
    Tape t;
    Tensor loss = fn(t);
    if (!std::isfinite(loss.item())) throw NumericError("grad_check: loss is not finite at the base point");
    grads = t.backward(loss);
  }
  GradReport report;
  report.step = h;
  for (const auto& [name, p_const] : params) {
    Tensor p = p_const;
    const Tensor analytic = grads.of(p);
    double max_diff = 0.0, max_fd = 0.0;
    for (int part = 0; part < (p.is_complex() ? 2 : 1); ++part) {
      auto vals = part == 0 ? p.re() : p.im();
      const auto an = part == 0 ? analytic.re() : analytic.im();
      for (std::size_t i = 0; i < vals.size(); ++i) {
        const double saved = vals[i];
        vals[i] = saved + h;
        const double fp = eval();
        vals[i] = saved - h;
        const double fm = eval();
        vals[i] = saved;
        const double fd = (fp - fm) / (2.0 * h);
        if (!std::isfinite(fd) || !std::isfinite(an[i]))
          throw NumericError("grad_check: non-finite value for parameter '" + name + "'");
        max_diff = std::max(max_diff, std::abs(an[i] - fd));
        max_fd = std::max(max_fd, std::abs(fd));
      }
    }
    report.entries.push_back({name, max_diff / std::max(max_fd, 1e-12)});
  }
  return report;
}

}  // namespace xd::ad
