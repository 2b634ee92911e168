#include "conv_kernels.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <stdexcept>
#include <string>

namespace dualmod::kernels {

namespace {

template <typename T>
constexpr int kLanes = static_cast<int>(64 / sizeof(T));

// One tile of lanes as a GCC/Clang vector; lowers to a single register on AVX-512
// and to several narrower registers elsewhere.
template <typename T>
using Lanes __attribute__((vector_size(64))) = T;

template <typename T>
inline Lanes<T> load(const T* p) {
  Lanes<T> v;
  __builtin_memcpy(&v, p, sizeof(v));
  return v;
}

template <typename T>
inline void store(T* p, const Lanes<T>& v) {
  __builtin_memcpy(p, &v, sizeof(v));
}

std::vector<int> lane_map(const ConvGeometry& g, int lanes) {
  std::vector<int> map(g.tiles * lanes, -1);
  for (std::size_t i = 0; i < map.size(); ++i) {
    const std::size_t q = g.q_begin + i;
    const int row = static_cast<int>(q / g.wp) - g.pad;
    const int col = static_cast<int>(q % g.wp) - g.pad;
    if (row >= 0 && row < g.h && col >= 0 && col < g.w) map[i] = row * g.w + col;
  }
  return map;
}

// weights (Co, Ci, taps) -> blocks of CB output channels laid out (ci, tap, cb).
template <typename T>
std::vector<T> pack_weights(const T* weight, int ci, int taps, int co0, int cb) {
  std::vector<T> out(static_cast<std::size_t>(ci) * taps * cb);
  for (int c = 0; c < ci; ++c)
    for (int t = 0; t < taps; ++t)
      for (int b = 0; b < cb; ++b) out[(c * taps + t) * cb + b] = weight[((co0 + b) * ci + c) * taps + t];
  return out;
}

template <typename T, int CB>
void forward_block(const std::vector<T>& xp, const T* packed, const T* bias, const ConvGeometry& g,
                   const std::vector<int>& map, int ci_count, int co0, bool accumulate, T* out) {
  constexpr int L = kLanes<T>;
  const int k = g.k, taps = k * k * k;
  const std::size_t plane_out = static_cast<std::size_t>(g.h) * g.w;
  const std::size_t channel_stride = static_cast<std::size_t>(g.dp) * g.slice_stride;
  for (int d = 0; d < g.d; ++d) {
    for (std::size_t t = 0; t < g.tiles; ++t) {
      Lanes<T> acc[CB] = {};
      const std::size_t q = g.q_begin + t * L;
      for (int c = 0; c < ci_count; ++c) {
        const T* wc = packed + static_cast<std::size_t>(c) * taps * CB;
        for (int kd = 0; kd < k; ++kd) {
          const T* slice = xp.data() + c * channel_stride + (d + kd) * g.slice_stride + q;
          for (int kh = 0; kh < k; ++kh)
            for (int kw = 0; kw < k; ++kw) {
              const Lanes<T> src = load<T>(slice + (kh - g.pad) * g.wp + (kw - g.pad));
              const T* wv = wc + ((kd * k + kh) * k + kw) * CB;
              for (int b = 0; b < CB; ++b) acc[b] += wv[b] * src;
            }
        }
      }
      for (int b = 0; b < CB; ++b) {
        T* dst = out + static_cast<std::size_t>(co0 + b) * g.d * plane_out + d * plane_out;
        const T bv = bias ? bias[co0 + b] : T(0);
        alignas(64) T lanes[L];
        store<T>(lanes, acc[b]);
        for (int l = 0; l < L; ++l) {
          const int idx = map[t * L + l];
          if (idx < 0) continue;
          if (accumulate)
            dst[idx] += lanes[l];
          else
            dst[idx] = lanes[l] + bv;
        }
      }
    }
  }
}

template <typename T>
void forward_all(const std::vector<T>& xp, const T* weight, const T* bias, const ConvGeometry& g, int ci, int co,
                 bool accumulate, T* out) {
  const auto map = lane_map(g, kLanes<T>);
  const int taps = g.k * g.k * g.k;
  int co0 = 0;
  auto run = [&](auto block) {
    constexpr int CB = decltype(block)::value;
    while (co - co0 >= CB) {
      const auto packed = pack_weights(weight, ci, taps, co0, CB);
      forward_block<T, CB>(xp, packed.data(), bias, g, map, ci, co0, accumulate, out);
      co0 += CB;
    }
  };
  run(std::integral_constant<int, 8>{});
  run(std::integral_constant<int, 4>{});
  run(std::integral_constant<int, 2>{});
  run(std::integral_constant<int, 1>{});
}

// Accumulates all K taps along w at once so each dout load feeds K FMAs.
template <typename T, int K, int CB>
void weight_grad_block(const std::vector<T>& xp, const std::vector<T>& dop, const ConvGeometry& g, int co0,
                       T* dweight) {
  constexpr int L = kLanes<T>;
  constexpr int taps = K * K * K;
  const std::size_t channel_stride = static_cast<std::size_t>(g.dp) * g.slice_stride;
  const std::size_t row_len = g.tiles * L;
  for (int c = 0; c < g.channels_in; ++c)
    for (int kd = 0; kd < K; ++kd)
      for (int kh = 0; kh < K; ++kh) {
        Lanes<T> acc[K][CB] = {};
        const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(kh - g.pad) * g.wp - g.pad;
        for (int d = 0; d < g.d; ++d) {
          const T* xrow = xp.data() + c * channel_stride + (d + kd) * g.slice_stride + g.q_begin + shift;
          const T* grow = dop.data() + (static_cast<std::size_t>(co0) * g.d + d) * row_len;
          for (std::size_t t = 0; t < g.tiles; ++t) {
            Lanes<T> src[K];
            for (int kw = 0; kw < K; ++kw) src[kw] = load<T>(xrow + t * L + kw);
            for (int b = 0; b < CB; ++b) {
              const Lanes<T> gv = load<T>(grow + b * g.d * row_len + t * L);
              for (int kw = 0; kw < K; ++kw) acc[kw][b] += gv * src[kw];
            }
          }
        }
        for (int kw = 0; kw < K; ++kw) {
          const int tap = (kd * K + kh) * K + kw;
          for (int b = 0; b < CB; ++b) {
            alignas(64) T lanes[L];
            store<T>(lanes, acc[kw][b]);
            T s = 0;
            for (int l = 0; l < L; ++l) s += lanes[l];
            dweight[(static_cast<std::size_t>(co0 + b) * g.channels_in + c) * taps + tap] += s;
          }
        }
      }
}

template <typename T, int K>
void weight_grad_all(const std::vector<T>& xp, const std::vector<T>& dop, const ConvGeometry& g, T* dweight) {
  constexpr int kWide = K >= 5 ? 4 : 8;
  int co0 = 0;
  for (; g.channels_out - co0 >= kWide; co0 += kWide) weight_grad_block<T, K, kWide>(xp, dop, g, co0, dweight);
  for (; g.channels_out - co0 >= 2; co0 += 2) weight_grad_block<T, K, 2>(xp, dop, g, co0, dweight);
  for (; co0 < g.channels_out; ++co0) weight_grad_block<T, K, 1>(xp, dop, g, co0, dweight);
}

// Small grids waste most lanes of a tile. There the convolution is computed
// through an explicit patch matrix P (V x Ci*taps) and dense products.
constexpr std::size_t kSmallGrid = 64;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
RowMat<T> gather_patches(const T* x, const ConvGeometry& g) {
  const int k = g.k, taps = k * k * k;
  RowMat<T> patches = RowMat<T>::Zero(static_cast<Eigen::Index>(g.spatial()),
                                      static_cast<Eigen::Index>(g.channels_in) * taps);
  for (int d = 0; d < g.d; ++d)
    for (int h = 0; h < g.h; ++h)
      for (int w = 0; w < g.w; ++w) {
        T* dst = patches.row((static_cast<Eigen::Index>(d) * g.h + h) * g.w + w).data();
        for (int c = 0; c < g.channels_in; ++c)
          for (int kd = 0; kd < k; ++kd) {
            const int sd = d + kd - g.pad;
            if (sd < 0 || sd >= g.d) continue;
            for (int kh = 0; kh < k; ++kh) {
              const int sh = h + kh - g.pad;
              if (sh < 0 || sh >= g.h) continue;
              for (int kw = 0; kw < k; ++kw) {
                const int sw = w + kw - g.pad;
                if (sw < 0 || sw >= g.w) continue;
                dst[c * taps + (kd * k + kh) * k + kw] =
                    x[((static_cast<std::size_t>(c) * g.d + sd) * g.h + sh) * g.w + sw];
              }
            }
          }
      }
  return patches;
}

template <typename T>
void scatter_patches(const RowMat<T>& patches, const ConvGeometry& g, T* dx) {
  const int k = g.k, taps = k * k * k;
  for (int d = 0; d < g.d; ++d)
    for (int h = 0; h < g.h; ++h)
      for (int w = 0; w < g.w; ++w) {
        const T* src = patches.row((static_cast<Eigen::Index>(d) * g.h + h) * g.w + w).data();
        for (int c = 0; c < g.channels_in; ++c)
          for (int kd = 0; kd < k; ++kd) {
            const int sd = d + kd - g.pad;
            if (sd < 0 || sd >= g.d) continue;
            for (int kh = 0; kh < k; ++kh) {
              const int sh = h + kh - g.pad;
              if (sh < 0 || sh >= g.h) continue;
              for (int kw = 0; kw < k; ++kw) {
                const int sw = w + kw - g.pad;
                if (sw < 0 || sw >= g.w) continue;
                dx[((static_cast<std::size_t>(c) * g.d + sd) * g.h + sh) * g.w + sw] +=
                    src[c * taps + (kd * k + kh) * k + kw];
              }
            }
          }
      }
}

template <typename T>
Eigen::Map<const RowMat<T>> weight_matrix(const T* weight, const ConvGeometry& g) {
  return {weight, g.channels_out, static_cast<Eigen::Index>(g.channels_in) * g.k * g.k * g.k};
}

template <typename T>
Eigen::Map<const RowMat<T>> channel_matrix(const T* data, int channels, const ConvGeometry& g) {
  return {data, channels, static_cast<Eigen::Index>(g.spatial())};
}

}  // namespace

ConvGeometry::ConvGeometry(int ci, int co, int d_, int h_, int w_, int k_)
    : channels_in(ci), channels_out(co), d(d_), h(h_), w(w_), k(k_), pad(k_ / 2) {
  dp = d + 2 * pad;
  hp = h + 2 * pad;
  wp = w + 2 * pad;
  q_begin = static_cast<std::size_t>(pad) * wp + pad;
  constexpr std::size_t max_lanes = 16;
  // Slack covers one overrunning tile plus the farthest tap shift.
  slice_stride = static_cast<std::size_t>(hp) * wp + 2 * pad + max_lanes;
  tiles = 0;  // set per scalar type
}

namespace {

template <typename T>
ConvGeometry typed(const ConvGeometry& g) {
  ConvGeometry t = g;
  const std::size_t span = static_cast<std::size_t>(g.h) * g.wp;
  t.tiles = (span + kLanes<T> - 1) / kLanes<T>;
  return t;
}
}  // namespace

template <typename T>
void pad_input(const T* x, int channels, const ConvGeometry& g, std::vector<T>& padded) {
  padded.assign(g.padded_size(channels), T(0));
  const std::size_t channel_stride = static_cast<std::size_t>(g.dp) * g.slice_stride;
  for (int c = 0; c < channels; ++c)
    for (int d = 0; d < g.d; ++d)
      for (int h = 0; h < g.h; ++h) {
        const T* src = x + ((static_cast<std::size_t>(c) * g.d + d) * g.h + h) * g.w;
        T* dst = padded.data() + c * channel_stride + (d + g.pad) * g.slice_stride +
                 static_cast<std::size_t>(h + g.pad) * g.wp + g.pad;
        std::copy(src, src + g.w, dst);
      }
}

template <typename T>
void conv_forward(const T* x, const T* weight, const T* bias, const ConvGeometry& geom, T* out) {
  const auto g = typed<T>(geom);
  if (g.spatial() <= kSmallGrid) {
    const RowMat<T> patches = gather_patches(x, g);
    Eigen::Map<RowMat<T>> o(out, g.channels_out, static_cast<Eigen::Index>(g.spatial()));
    o.noalias() = weight_matrix(weight, g) * patches.transpose();
    for (int c = 0; c < g.channels_out; ++c) o.row(c).array() += bias[c];
    return;
  }
  std::vector<T> xp;
  pad_input(x, g.channels_in, g, xp);
  forward_all(xp, weight, bias, g, g.channels_in, g.channels_out, false, out);
}

template <typename T>
void conv_backward_input(const T* dout, const T* weight, const ConvGeometry& geom, T* dx) {
  const auto g = typed<T>(geom);
  if (g.spatial() <= kSmallGrid) {
    const RowMat<T> dpatches = channel_matrix(dout, g.channels_out, g).transpose() * weight_matrix(weight, g);
    scatter_patches(dpatches, g, dx);
    return;
  }
  const int taps = g.k * g.k * g.k;
  // Transposed, spatially flipped kernel: (Ci, Co, taps).
  std::vector<T> flipped(static_cast<std::size_t>(g.channels_in) * g.channels_out * taps);
  for (int o = 0; o < g.channels_out; ++o)
    for (int c = 0; c < g.channels_in; ++c)
      for (int t = 0; t < taps; ++t)
        flipped[(static_cast<std::size_t>(c) * g.channels_out + o) * taps + (taps - 1 - t)] =
            weight[(static_cast<std::size_t>(o) * g.channels_in + c) * taps + t];
  std::vector<T> dp;
  pad_input(dout, g.channels_out, g, dp);
  forward_all(dp, flipped.data(), static_cast<const T*>(nullptr), g, g.channels_out, g.channels_in, true, dx);
}

template <typename T>
void conv_backward_params(const T* dout, const T* x, const ConvGeometry& geom, T* dweight, T* dbias) {
  const auto g = typed<T>(geom);
  constexpr int L = kLanes<T>;
  const std::size_t plane = static_cast<std::size_t>(g.h) * g.w;
  if (dbias)
    for (int o = 0; o < g.channels_out; ++o) {
      T s = 0;
      const T* src = dout + static_cast<std::size_t>(o) * g.d * plane;
      for (std::size_t i = 0; i < g.d * plane; ++i) s += src[i];
      dbias[o] += s;
    }
  if (!dweight) return;
  // dout scattered into lane space; pad-column lanes hold zero.
  const auto map = lane_map(g, L);
  const std::size_t row_len = g.tiles * L;
  std::vector<T> dop(static_cast<std::size_t>(g.channels_out) * g.d * row_len, T(0));
  for (int o = 0; o < g.channels_out; ++o)
    for (int d = 0; d < g.d; ++d) {
      T* dst = dop.data() + (static_cast<std::size_t>(o) * g.d + d) * row_len;
      const T* src = dout + (static_cast<std::size_t>(o) * g.d + d) * plane;
      for (std::size_t i = 0; i < row_len; ++i)
        if (map[i] >= 0) dst[i] = src[map[i]];
    }
  std::vector<T> xp;
  pad_input(x, g.channels_in, g, xp);
  if (g.spatial() <= kSmallGrid) {
    const RowMat<T> patches = gather_patches(x, g);
    Eigen::Map<RowMat<T>> dw(dweight, g.channels_out, patches.cols());
    dw.noalias() += channel_matrix(dout, g.channels_out, g) * patches;
    return;
  }
  switch (g.k) {
    case 1: weight_grad_all<T, 1>(xp, dop, g, dweight); break;
    case 3: weight_grad_all<T, 3>(xp, dop, g, dweight); break;
    case 5: weight_grad_all<T, 5>(xp, dop, g, dweight); break;
    case 7: weight_grad_all<T, 7>(xp, dop, g, dweight); break;
    default: throw std::invalid_argument("conv_backward_params: unsupported kernel size " + std::to_string(g.k));
  }
}

#define DUALMOD_INSTANTIATE(T)                                                                         \
  template void pad_input(const T*, int, const ConvGeometry&, std::vector<T>&);                        \
  template void conv_forward(const T*, const T*, const T*, const ConvGeometry&, T*);                   \
  template void conv_backward_input(const T*, const T*, const ConvGeometry&, T*);                      \
  template void conv_backward_params(const T*, const T*, const ConvGeometry&, T*, T*);

DUALMOD_INSTANTIATE(float)
DUALMOD_INSTANTIATE(double)

#undef DUALMOD_INSTANTIATE

}  // namespace dualmod::kernels
