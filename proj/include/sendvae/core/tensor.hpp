#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "sendvae/core/error.hpp"

namespace sendvae {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

template <typename T>
using ArrayX = Eigen::Array<T, Eigen::Dynamic, 1>;
template <typename T>
using MatrixRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<MatrixRM<T>>;
template <typename T>
using ConstMapRM = Eigen::Map<const MatrixRM<T>>;

// Dense row-major N-d array. Storage is a flat Eigen array so elementwise math
// stays expression-friendly; matrix views are taken with as_matrix().
template <typename T>
struct Tensor {
  using Scalar = T;

  Shape shape;
  ArrayX<T> data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(ArrayX<T>::Zero(numel(shape))) {}
  Tensor(Shape s, ArrayX<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != numel(shape))
      throw ConfigError("tensor data size " + std::to_string(data.size()) +
                        " does not match shape " + shape_str(shape));
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor constant(Shape s, T v) {
    Tensor t(std::move(s));
    t.data.setConstant(v);
    return t;
  }

  Index size() const { return data.size(); }
  Index ndim() const { return static_cast<Index>(shape.size()); }
  Index dim(Index i) const { return shape[static_cast<std::size_t>(i < 0 ? ndim() + i : i)]; }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  T& operator[](Index i) { return data[i]; }
  T operator[](Index i) const { return data[i]; }

  // View as rows x cols where cols = last dimension.
  MapRM<T> as_matrix(Index rows, Index cols) { return MapRM<T>(ptr(), rows, cols); }
  ConstMapRM<T> as_matrix(Index rows, Index cols) const { return ConstMapRM<T>(ptr(), rows, cols); }

  Tensor reshaped(Shape s) const {
    if (numel(s) != size())
      throw ConfigError("cannot reshape " + shape_str(shape) + " to " + shape_str(s));
    return Tensor(std::move(s), data);
  }

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape, data.template cast<U>());
  }

  bool all_finite() const { return data.isFinite().all(); }
};

}  // namespace sendvae
