#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "dualmod/autograd.hpp"
#include "dualmod/data.hpp"
#include "dualmod/rng.hpp"

namespace dualmod::testing {

inline SegMask random_mask(const Extent3& e, int classes, double fg_rate, Rng& rng) {
  SegMask m(e, classes);
  for (auto& v : m.labels)
    v = uniform01(rng) < fg_rate ? static_cast<std::uint8_t>(1 + uniform_index(rng, classes - 1)) : 0;
  return m;
}

inline std::vector<std::uint8_t> random_labels(std::size_t n, int classes, Rng& rng) {
  std::vector<std::uint8_t> out(n);
  for (auto& v : out) v = static_cast<std::uint8_t>(uniform_index(rng, classes));
  return out;
}

template <typename T>
Tensor<T> random_tensor(Shape s, Rng& rng, double scale = 1.0) {
  Tensor<T> t(std::move(s));
  for (auto& v : t.data) v = static_cast<T>(scale * standard_normal(rng));
  return t;
}

/// Softmax over axis 1 of random logits, (N, C, D, H, W).
inline Tensor<double> random_probs(int n, int c, int d, int h, int w, Rng& rng) {
  Tensor<double> t(Shape{n, c, d, h, w});
  const std::size_t vox = static_cast<std::size_t>(d) * h * w;
  for (int b = 0; b < n; ++b)
    for (std::size_t i = 0; i < vox; ++i) {
      double z = 0.0;
      for (int k = 0; k < c; ++k) {
        const double e = std::exp(2.0 * standard_normal(rng));
        t.data[(static_cast<std::size_t>(b) * c + k) * vox + i] = e;
        z += e;
      }
      for (int k = 0; k < c; ++k) t.data[(static_cast<std::size_t>(b) * c + k) * vox + i] /= z;
    }
  return t;
}

inline Volume random_volume(const Extent3& e, Rng& rng, double lo = 0.0, double hi = 1.0) {
  Volume v(e, {1.0, 1.0, 1.0});
  for (auto& x : v.voxels) x = static_cast<float>(lo + (hi - lo) * uniform01(rng));
  return v;
}

}  // namespace dualmod::testing
