#pragma once

// Direct stride-1 "same" 3D convolution on a zero-padded layout.
//
// Each depth slice of the padded input is stored flattened as (H + 2p) x (W + 2p)
// followed by zero slack. An output voxel at padded-plane index q reads input
// index q + (kh - p) * Wp + (kw - p) of slice d + kd, so every kernel tap is a
// constant shift and a tile of consecutive q vectorizes cleanly. Lanes that land
// on pad columns are computed and discarded.

#include <cstddef>
#include <vector>

namespace dualmod::kernels {

struct ConvGeometry {
  int channels_in;
  int channels_out;
  int d, h, w;
  int k;

  ConvGeometry(int ci, int co, int d_, int h_, int w_, int k_);

  int pad;
  int dp, hp, wp;          // padded extents
  std::size_t q_begin;     // first computed plane index
  std::size_t tiles;       // lane tiles per slice; depends on the scalar type
  std::size_t slice_stride;
  [[nodiscard]] std::size_t spatial() const { return static_cast<std::size_t>(d) * h * w; }
  [[nodiscard]] std::size_t padded_size(int channels) const {
    return static_cast<std::size_t>(channels) * dp * slice_stride;
  }
};

/// Copies one sample (channels, D, H, W) into the padded layout.
template <typename T>
void pad_input(const T* x, int channels, const ConvGeometry& g, std::vector<T>& padded);

/// out (Co, D, H, W) = conv(x) + bias; weights (Co, Ci, k, k, k).
template <typename T>
void conv_forward(const T* x, const T* weight, const T* bias, const ConvGeometry& g, T* out);

/// dx (Ci, D, H, W) += conv^T(dout).
template <typename T>
void conv_backward_input(const T* dout, const T* weight, const ConvGeometry& g, T* dx);

/// dweight += dout (x) x, dbias += sum(dout).
template <typename T>
void conv_backward_params(const T* dout, const T* x, const ConvGeometry& g, T* dweight, T* dbias);

}  // namespace dualmod::kernels
