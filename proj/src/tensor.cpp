// SPDX-License-Identifier: Apache-2.0
#include "xdops/tensor.hpp"

#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace xd {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, DType dtype) {
  Tensor t;
  t.s_ = std::make_shared<Storage>();
  const std::size_t count = xd::numel(shape);
  t.s_->shape = std::move(shape);
  t.s_->dtype = dtype;
  t.s_->re.assign(count, 0.0);
  if (dtype == DType::Complex) t.s_->im.assign(count, 0.0);
  return t;
}

Tensor Tensor::real(Shape shape, std::vector<double> values) {
  if (values.size() != xd::numel(shape))
    throw std::invalid_argument("Tensor::real: value count does not match shape " + shape_str(shape));
  Tensor t;
  t.s_ = std::make_shared<Storage>();
  t.s_->shape = std::move(shape);
  t.s_->re = std::move(values);
  return t;
}

Tensor Tensor::complex(Shape shape, std::vector<double> re, std::vector<double> im) {
  if (re.size() != xd::numel(shape) || im.size() != re.size())
    throw std::invalid_argument("Tensor::complex: plane sizes do not match shape " + shape_str(shape));
  Tensor t;
  t.s_ = std::make_shared<Storage>();
  t.s_->shape = std::move(shape);
  t.s_->dtype = DType::Complex;
  t.s_->re = std::move(re);
  t.s_->im = std::move(im);
  return t;
}

Tensor Tensor::complex(Shape shape, const std::vector<cplx>& values) {
  std::vector<double> re(values.size()), im(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    re[i] = values[i].real();
    im[i] = values[i].imag();
  }
  return complex(std::move(shape), std::move(re), std::move(im));
}

const Shape& Tensor::shape() const {
  if (!s_) throw std::logic_error("Tensor: access to undefined tensor");
  return s_->shape;
}

std::size_t Tensor::size(std::size_t axis) const {
  if (axis >= dim()) throw std::out_of_range("Tensor::size: axis out of range");
  return shape()[axis];
}

std::size_t Tensor::numel() const { return s_ ? s_->re.size() : 0; }

DType Tensor::dtype() const { return s_ ? s_->dtype : DType::Real; }

std::span<double> Tensor::re() { return s_->re; }
std::span<const double> Tensor::re() const { return s_->re; }
std::span<double> Tensor::im() { return s_->im; }
std::span<const double> Tensor::im() const { return s_->im; }

cplx Tensor::at(std::size_t flat) const {
  return {s_->re.at(flat), is_complex() ? s_->im.at(flat) : 0.0};
}

void Tensor::set(std::size_t flat, cplx v) {
  s_->re.at(flat) = v.real();
  if (is_complex()) {
    s_->im.at(flat) = v.imag();
  } else if (v.imag() != 0.0) {
    throw std::invalid_argument("Tensor::set: imaginary value written to a real tensor");
  }
}

double Tensor::item() const {
  if (numel() != 1) throw std::invalid_argument("Tensor::item: tensor has " + std::to_string(numel()) + " elements");
  return s_->re[0];
}

Tensor Tensor::clone() const {
  Tensor t;
  if (!s_) return t;
  t.s_ = std::make_shared<Storage>(*s_);
  return t;
}

void Tensor::copy_from(const Tensor& other) {
  if (other.shape() != shape() || other.dtype() != dtype())
    throw std::invalid_argument("Tensor::copy_from: shape or dtype mismatch");
  s_->re = other.s_->re;
  s_->im = other.s_->im;
}

void Tensor::fill(double re_value, double im_value) {
  std::fill(s_->re.begin(), s_->re.end(), re_value);
  std::fill(s_->im.begin(), s_->im.end(), im_value);
}

std::vector<cplx> Tensor::to_complex() const {
  std::vector<cplx> out(numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = at(i);
  return out;
}

Tensor Tensor::as_complex() const {
  if (is_complex()) return *this;
  return complex(shape(), s_->re, std::vector<double>(numel(), 0.0));
}

bool Tensor::requires_grad() const { return s_ && s_->requires_grad; }
void Tensor::set_requires_grad(bool flag) { s_->requires_grad = flag; }

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) throw std::out_of_range("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape));
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace xd
