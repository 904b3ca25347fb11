// Copyright 2026 The KDFS Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef KDFS_TENSOR_HPP
#define KDFS_TENSOR_HPP

#include <algorithm>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "kdfs/errors.hpp"

namespace kdfs {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

/// Dense row-major n-dimensional array with an optional gradient slot.
///
/// A rank-0 tensor (empty shape) holds one element. `grad` is empty until a
/// backward pass writes into it; when populated it has the same length as
/// `data`. Tensors only receive gradients when bound to a tape as parameters.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;

  Tensor() : data(1, T{0}) {}

  explicit Tensor(Shape s, T fill = T{0}) : shape(std::move(s)), data(kdfs::numel(shape), fill) {}

  Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != kdfs::numel(shape)) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + to_string(shape));
    }
  }

  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t axis) const { return shape.at(axis); }
  bool has_grad() const { return !grad.empty(); }

  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  T item() const {
    if (data.size() != 1) {
      throw ContractError("item() on tensor of shape " + to_string(shape));
    }
    return data[0];
  }

  /// Resets an allocated gradient to zero; absent gradients stay absent.
  void zero_grad() { std::fill(grad.begin(), grad.end(), T{0}); }

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape, std::vector<U>(data.begin(), data.end()));
  }
};

}  // namespace kdfs

#endif  // KDFS_TENSOR_HPP
