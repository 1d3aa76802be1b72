#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "calliope/error.hpp"

namespace calliope {

/// Dense row-major tensor. Graph ops work on rank-2 tensors; vectors are
/// (1,n) rows and scalars (1,1). Training uses float, grad_check double.
template <typename S>
struct TensorT {
  std::vector<int> shape;
  std::vector<S> data;

  TensorT() = default;
  TensorT(std::vector<int> shape_in, std::vector<S> data_in)
      : shape(std::move(shape_in)), data(std::move(data_in)) {
    if (static_cast<std::int64_t>(data.size()) != numel()) {
      throw ShapeMismatch("tensor data length does not match shape");
    }
  }

  static TensorT zeros(const std::vector<int>& shape_in) {
    TensorT t;
    t.shape = shape_in;
    t.data.assign(static_cast<std::size_t>(t.numel()), S(0));
    return t;
  }

  static TensorT full(const std::vector<int>& shape_in, S value) {
    TensorT t = zeros(shape_in);
    for (auto& x : t.data) x = value;
    return t;
  }

  static TensorT scalar(S value) { return TensorT({1, 1}, {value}); }

  static TensorT row(std::vector<S> values) {
    const int n = static_cast<int>(values.size());
    return TensorT({1, n}, std::move(values));
  }

  std::int64_t numel() const {
    std::int64_t n = 1;
    for (int d : shape) {
      if (d <= 0) throw ShapeMismatch("non-positive dimension in shape");
      n *= d;
    }
    return n;
  }

  int rank() const { return static_cast<int>(shape.size()); }

  bool same_shape(const TensorT& o) const { return shape == o.shape; }

  bool is_scalar() const { return numel() == 1; }

  // rank-2 accessors
  int rows() const {
    if (rank() != 2) throw ShapeMismatch("rows(): tensor is not rank-2");
    return shape[0];
  }
  int cols() const {
    if (rank() != 2) throw ShapeMismatch("cols(): tensor is not rank-2");
    return shape[1];
  }
  S& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols() + c]; }
  S at(int r, int c) const {
    return data[static_cast<std::size_t>(r) * cols() + c];
  }
  S* row_ptr(int r) { return data.data() + static_cast<std::size_t>(r) * cols(); }
  const S* row_ptr(int r) const {
    return data.data() + static_cast<std::size_t>(r) * cols();
  }
};

template <typename S>
std::string shape_string(const TensorT<S>& t) {
  std::string s = "(";
  for (int i = 0; i < t.rank(); ++i) {
    if (i) s += ",";
    s += std::to_string(t.shape[i]);
  }
  return s + ")";
}

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

}  // namespace calliope
