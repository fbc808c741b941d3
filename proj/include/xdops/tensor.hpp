// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <complex>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace xd {

using cplx = std::complex<double>;
using Shape = std::vector<std::size_t>;

enum class DType : std::uint8_t { Real, Complex };

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array of float64 values, real or complex.
///
/// Complex tensors keep separate real and imaginary planes of identical
/// shape. A Tensor is a shared handle: copies alias the same storage, and
/// clone() makes an independent deep copy. Storage identity (id()) is what
/// the autodiff tape keys gradients on.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, DType dtype = DType::Real);
  static Tensor real(Shape shape, std::vector<double> values);
  static Tensor complex(Shape shape, std::vector<double> re, std::vector<double> im);
  static Tensor complex(Shape shape, const std::vector<cplx>& values);
  static Tensor scalar(double v) { return real({}, {v}); }

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t size(std::size_t axis) const;
  std::size_t numel() const;
  DType dtype() const;
  bool is_complex() const { return dtype() == DType::Complex; }

  std::span<double> re();
  std::span<const double> re() const;
  /// Empty for real tensors.
  std::span<double> im();
  std::span<const double> im() const;

  cplx at(std::size_t flat) const;
  void set(std::size_t flat, cplx v);
  double item() const;

  Tensor clone() const;
  /// Overwrites this tensor's values with `other`'s (same shape and dtype).
  void copy_from(const Tensor& other);
  void fill(double re, double im = 0.0);
  /// Complex view of the data as a fresh vector.
  std::vector<cplx> to_complex() const;
  Tensor as_complex() const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  const void* id() const { return s_.get(); }

 private:
  struct Storage {
    Shape shape;
    DType dtype = DType::Real;
    std::vector<double> re;
    std::vector<double> im;
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> s_;
};

/// Row-major strides helper: (outer, n, inner) for a given axis.
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t n = 1;
  std::size_t inner = 1;
};
AxisSplit split_axis(const Shape& shape, std::size_t axis);

}  // namespace xd
