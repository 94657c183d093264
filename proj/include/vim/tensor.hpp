#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "vim/rng.hpp"

namespace vim {

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t e : shape) n *= e;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << "]";
  return os.str();
}

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void check_shapes_match(const Shape& a, const Shape& b,
                               const char* op) {
  if (a != b) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) +
                     " vs " + shape_str(b));
  }
}

// Dense row-major tensor value. float is the training type; double is used
// by the gradient-checking path.
template <typename T>
struct TensorT {
  Shape shape;
  std::vector<T> data;
  bool requires_grad = false;

  TensorT() = default;
  TensorT(Shape s, std::vector<T> d, bool rg = false)
      : shape(std::move(s)), data(std::move(d)), requires_grad(rg) {
    validate();
  }

  static TensorT zeros(Shape s) {
    for (int64_t e : s) {
      if (e <= 0) throw ShapeError("tensor extent must be positive");
    }
    int64_t n = numel(s);
    return TensorT(std::move(s), std::vector<T>(static_cast<size_t>(n), T(0)));
  }

  static TensorT full(Shape s, T v) {
    TensorT t = zeros(std::move(s));
    for (T& x : t.data) x = v;
    return t;
  }

  // Uniform in [-bound, bound], driven by the portable generator.
  static TensorT uniform(Shape s, T bound, Rng& rng) {
    TensorT t = zeros(std::move(s));
    for (T& x : t.data) x = static_cast<T>(rng.uniform(-bound, bound));
    return t;
  }

  int64_t numel() const { return vim::numel(shape); }

  void validate() const {
    for (int64_t e : shape) {
      if (e <= 0) throw ShapeError("tensor extent must be positive");
    }
    if (static_cast<int64_t>(data.size()) != vim::numel(shape)) {
      throw ShapeError("tensor data length does not match shape " +
                       shape_str(shape));
    }
  }

  template <typename U>
  TensorT<U> cast() const {
    TensorT<U> out;
    out.shape = shape;
    out.requires_grad = requires_grad;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i)
      out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

}  // namespace vim
