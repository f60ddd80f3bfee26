#pragma once

#include <Eigen/Core>
#include <string>

#include "meshdensity/errors.hpp"

namespace meshdensity {

struct Shape {
  int n = 0, c = 0, h = 0, w = 0;

  Eigen::Index size() const { return Eigen::Index{n} * c * h * w; }
  Eigen::Index plane() const { return Eigen::Index{h} * w; }
  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," + std::to_string(w) + ")";
  }
  friend bool operator==(const Shape&, const Shape&) = default;
};

// Dense NCHW tensor. Each image n is a contiguous (c, h*w) row-major block so
// convolutions can run as GEMMs on Eigen maps.
template <class Scalar>
class Tensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using MatrixMap = Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using ConstMatrixMap = Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

  Tensor() = default;
  explicit Tensor(Shape s, Scalar fill = Scalar(0)) : shape_(s), data_(Array::Constant(s.size(), fill)) {}
  Tensor(int n, int c, int h, int w, Scalar fill = Scalar(0)) : Tensor(Shape{n, c, h, w}, fill) {}

  const Shape& shape() const { return shape_; }
  int n() const { return shape_.n; }
  int c() const { return shape_.c; }
  int h() const { return shape_.h; }
  int w() const { return shape_.w; }
  Eigen::Index size() const { return data_.size(); }

  Array& values() { return data_; }
  const Array& values() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  Scalar& operator()(int n, int c, int y, int x) { return data_[offset(n, c, y, x)]; }
  Scalar operator()(int n, int c, int y, int x) const { return data_[offset(n, c, y, x)]; }

  // Image n as a (channels, h*w) matrix.
  MatrixMap image(int n) { return MatrixMap(data_.data() + n * image_size(), shape_.c, shape_.plane()); }
  ConstMatrixMap image(int n) const {
    return ConstMatrixMap(data_.data() + n * image_size(), shape_.c, shape_.plane());
  }

  void set_zero() { data_.setZero(); }

  template <class Other>
  Tensor<Other> cast() const {
    Tensor<Other> t(shape_);
    t.values() = data_.template cast<Other>();
    return t;
  }

 private:
  Eigen::Index image_size() const { return Eigen::Index{shape_.c} * shape_.plane(); }
  Eigen::Index offset(int n, int c, int y, int x) const {
    return ((Eigen::Index{n} * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }

  Shape shape_;
  Array data_;
};

inline void require_same_shape(const Shape& a, const Shape& b, const std::string& what) {
  if (!(a == b)) throw ShapeError(what + ": shape " + a.str() + " does not match " + b.str());
}

}  // namespace meshdensity
