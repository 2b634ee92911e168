#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "dualmod/error.hpp"

namespace dualmod {

/// Dense row-major extents. Feature maps use (N, C, D, H, W).
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<int> dims) : dims_(dims) {}
  explicit Shape(std::vector<int> dims) : dims_(std::move(dims)) {}

  [[nodiscard]] std::size_t rank() const { return dims_.size(); }
  [[nodiscard]] int operator[](std::size_t i) const { return dims_[i]; }
  [[nodiscard]] const std::vector<int>& dims() const { return dims_; }

  [[nodiscard]] std::size_t numel() const {
    return std::accumulate(dims_.begin(), dims_.end(), std::size_t{1},
                           [](std::size_t acc, int d) { return acc * static_cast<std::size_t>(d); });
  }

  /// Product of the trailing extents starting at `from`.
  [[nodiscard]] std::size_t tail(std::size_t from) const {
    std::size_t n = 1;
    for (std::size_t i = from; i < dims_.size(); ++i) n *= static_cast<std::size_t>(dims_[i]);
    return n;
  }

  bool operator==(const Shape&) const = default;

  [[nodiscard]] std::string str() const {
    std::string s = "(";
    for (std::size_t i = 0; i < dims_.size(); ++i) {
      if (i) s += ", ";
      s += std::to_string(dims_[i]);
    }
    return s + ")";
  }

 private:
  std::vector<int> dims_;
};

template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)), data(shape.numel(), fill) {}
  Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != shape.numel()) throw DataError("tensor data size does not match shape " + shape.str());
  }

  [[nodiscard]] std::size_t size() const { return data.size(); }
  [[nodiscard]] std::span<T> span() { return data; }
  [[nodiscard]] std::span<const T> span() const { return data; }
};

inline void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (!(a == b)) throw DataError(std::string(what) + ": shape mismatch " + a.str() + " vs " + b.str());
}

}  // namespace dualmod
