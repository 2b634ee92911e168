#include "dualmod/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "conv_kernels.hpp"
#include "dualmod/rng.hpp"

namespace dualmod::ag {

using detail::grad_of;
using detail::make_result;

namespace {

thread_local bool t_grad_enabled = true;
thread_local std::uint64_t* t_kink_fingerprint = nullptr;

void fold_signs(std::uint64_t& h, const auto& values) {
  std::uint64_t word = 0;
  int bits = 0;
  for (auto v : values) {
    word = (word << 1) | (v > 0 ? 1u : 0u);
    if (++bits == 64) {
      h = splitmix64(h ^ word);
      word = 0;
      bits = 0;
    }
  }
  h = splitmix64(h ^ word ^ (static_cast<std::uint64_t>(bits) << 58));
}

void require_rank5(const Shape& s, const char* what) {
  if (s.rank() != 5) throw DataError(std::string(what) + ": expected (N, C, D, H, W), got " + s.str());
}

struct Geometry {
  int n, c, d, h, w;
  [[nodiscard]] std::size_t spatial() const { return static_cast<std::size_t>(d) * h * w; }
};

Geometry geometry(const Shape& s) { return {s[0], s[1], s[2], s[3], s[4]}; }

// 2x linear upsampling along the middle axis of an (outer, n, inner) view.
template <typename T>
void upsample_axis(const T* x, std::size_t outer, int n, std::size_t inner, T* y) {
  for (std::size_t o = 0; o < outer; ++o) {
    const T* xo = x + o * n * inner;
    T* yo = y + o * 2 * n * inner;
    for (int i = 0; i < n; ++i) {
      const T* prev = xo + std::max(i - 1, 0) * inner;
      const T* cur = xo + i * inner;
      const T* next = xo + std::min(i + 1, n - 1) * inner;
      T* even = yo + (2 * i) * inner;
      T* odd = yo + (2 * i + 1) * inner;
      for (std::size_t j = 0; j < inner; ++j) {
        even[j] = T(0.25) * prev[j] + T(0.75) * cur[j];
        odd[j] = T(0.75) * cur[j] + T(0.25) * next[j];
      }
    }
  }
}

// Adjoint of upsample_axis: dy (outer, 2n, inner) -> dx (outer, n, inner), overwriting dx.
template <typename T>
void upsample_axis_adjoint(const T* dy, std::size_t outer, int n, std::size_t inner, T* dx) {
  std::fill(dx, dx + outer * n * inner, T(0));
  for (std::size_t o = 0; o < outer; ++o) {
    T* xo = dx + o * n * inner;
    const T* yo = dy + o * 2 * n * inner;
    for (int i = 0; i < n; ++i) {
      T* prev = xo + std::max(i - 1, 0) * inner;
      T* cur = xo + i * inner;
      T* next = xo + std::min(i + 1, n - 1) * inner;
      const T* even = yo + (2 * i) * inner;
      const T* odd = yo + (2 * i + 1) * inner;
      for (std::size_t j = 0; j < inner; ++j) {
        prev[j] += T(0.25) * even[j];
        cur[j] += T(0.75) * even[j] + T(0.75) * odd[j];
        next[j] += T(0.25) * odd[j];
      }
    }
  }
}

}  // namespace

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

KinkMonitor::KinkMonitor() : previous_(t_kink_fingerprint) { t_kink_fingerprint = &fingerprint_; }
KinkMonitor::~KinkMonitor() { t_kink_fingerprint = previous_; }

template <typename T>
Var<T> Var<T>::leaf(Tensor<T> t, bool requires_grad) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(t.shape);
  node->value = std::move(t.data);
  node->requires_grad = requires_grad;
  return Var<T>(std::move(node));
}

template <typename T>
void Var<T>::backward() const {
  if (node_->value.size() != 1) throw DataError("backward() requires a scalar output");
  if (!node_->requires_grad) return;
  // Iterative post-order DFS gives a topological order.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node<T>* p = n->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->ensure_grad();
  node_->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && !n->grad.empty()) {
      n->backward_fn(*n);
      // Interior gradients are no longer needed once propagated.
      if (n != node_.get()) std::vector<T>().swap(n->grad);
    }
  }
}

// ---------------------------------------------------------------- structural

template <typename T>
Var<T> detach(const Var<T>& x) {
  return Var<T>::constant(x.tensor());
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  std::vector<T> out(a.size());
  auto av = a.value(), bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, [](Node<T>& self) {
    for (std::size_t p = 0; p < 2; ++p)
      if (T* g = grad_of(self, p))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  std::vector<T> out(a.size());
  auto av = a.value(), bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, [](Node<T>& self) {
    if (T* g = grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    if (T* g = grad_of(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
  });
}

template <typename T>
Var<T> scale(const Var<T>& x, T factor) {
  std::vector<T> out(x.value().begin(), x.value().end());
  for (auto& v : out) v *= factor;
  return make_result<T>(x.shape(), std::move(out), {&x}, [factor](Node<T>& self) {
    if (T* g = grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += factor * self.grad[i];
  });
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  require_rank5(a.shape(), "concat_channels");
  require_rank5(b.shape(), "concat_channels");
  const auto ga = geometry(a.shape()), gb = geometry(b.shape());
  if (ga.n != gb.n || ga.d != gb.d || ga.h != gb.h || ga.w != gb.w)
    throw DataError("concat_channels: incompatible shapes " + a.shape().str() + " and " + b.shape().str());
  const std::size_t sa = ga.c * ga.spatial(), sb = gb.c * gb.spatial();
  Shape shape{ga.n, ga.c + gb.c, ga.d, ga.h, ga.w};
  std::vector<T> out(shape.numel());
  auto av = a.value(), bv = b.value();
  for (int n = 0; n < ga.n; ++n) {
    std::copy_n(av.data() + n * sa, sa, out.data() + n * (sa + sb));
    std::copy_n(bv.data() + n * sb, sb, out.data() + n * (sa + sb) + sa);
  }
  return make_result<T>(std::move(shape), std::move(out), {&a, &b}, [sa, sb, nb = ga.n](Node<T>& self) {
    T* g0 = grad_of(self, 0);
    T* g1 = grad_of(self, 1);
    for (int n = 0; n < nb; ++n) {
      const T* src = self.grad.data() + n * (sa + sb);
      if (g0)
        for (std::size_t i = 0; i < sa; ++i) g0[n * sa + i] += src[i];
      if (g1)
        for (std::size_t i = 0; i < sb; ++i) g1[n * sb + i] += src[sa + i];
    }
  });
}

// ----------------------------------------------------------------- pointwise

template <typename T>
Var<T> relu(const Var<T>& x) {
  if (t_kink_fingerprint) fold_signs(*t_kink_fingerprint, x.value());
  std::vector<T> out(x.value().begin(), x.value().end());
  for (auto& v : out) v = v > T(0) ? v : T(0);
  return make_result<T>(x.shape(), std::move(out), {&x}, [](Node<T>& self) {
    if (T* g = grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        if (self.value[i] > T(0)) g[i] += self.grad[i];
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  std::vector<T> out(x.size());
  auto xv = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = xv[i];
    // Branches keep exp() from overflowing.
    if (v >= T(0)) {
      out[i] = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      out[i] = e / (T(1) + e);
    }
  }
  return make_result<T>(x.shape(), std::move(out), {&x}, [](Node<T>& self) {
    if (T* g = grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const T s = self.value[i];
        g[i] += self.grad[i] * s * (T(1) - s);
      }
  });
}

template <typename T>
Var<T> dropout(const Var<T>& x, double rate, std::uint64_t seed) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ConfigError("dropout rate must be < 1");
  const T keep_scale = T(1.0 / (1.0 - rate));
  std::vector<T> mask(x.size());
  CounterRng rng{seed};
  for (auto& m : mask) m = uniform01(rng) >= rate ? keep_scale : T(0);
  std::vector<T> out(x.size());
  auto xv = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * mask[i];
  return make_result<T>(x.shape(), std::move(out), {&x}, [mask = std::move(mask)](Node<T>& self) {
    if (T* g = grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * mask[i];
  });
}

// ---------------------------------------------------------------- volumetric

template <typename T>
Var<T> conv3d(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  require_rank5(x.shape(), "conv3d");
  const auto g = geometry(x.shape());
  const Shape& ws = w.shape();
  if (ws.rank() != 5 || ws[1] != g.c || ws[2] != ws[3] || ws[3] != ws[4] || ws[2] % 2 == 0)
    throw DataError("conv3d: kernel " + ws.str() + " incompatible with input " + x.shape().str());
  const int co = ws[0];
  if (b.size() != static_cast<std::size_t>(co)) throw DataError("conv3d: bias size mismatch");
  const kernels::ConvGeometry cg(g.c, co, g.d, g.h, g.w, ws[2]);
  const std::size_t in_stride = static_cast<std::size_t>(g.c) * g.spatial();
  const std::size_t out_stride = static_cast<std::size_t>(co) * g.spatial();

  Shape shape{g.n, co, g.d, g.h, g.w};
  std::vector<T> out(shape.numel());
  for (int n = 0; n < g.n; ++n)
    kernels::conv_forward(x.value().data() + n * in_stride, w.value().data(), b.value().data(), cg,
                          out.data() + n * out_stride);

  return make_result<T>(std::move(shape), std::move(out), {&x, &w, &b},
                        [cg, n_batch = g.n, in_stride, out_stride](Node<T>& self) {
    const auto& xv = self.parents[0]->value;
    const auto& wv = self.parents[1]->value;
    T* gx = grad_of(self, 0);
    T* gw = grad_of(self, 1);
    T* gb = grad_of(self, 2);
    for (int n = 0; n < n_batch; ++n) {
      const T* dout = self.grad.data() + n * out_stride;
      if (gw || gb) kernels::conv_backward_params(dout, xv.data() + n * in_stride, cg, gw, gb);
      if (gx) kernels::conv_backward_input(dout, wv.data(), cg, gx + n * in_stride);
    }
  });
}

template <typename T>
Var<T> instance_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  require_rank5(x.shape(), "instance_norm");
  const auto g = geometry(x.shape());
  if (gamma.size() != static_cast<std::size_t>(g.c) || beta.size() != static_cast<std::size_t>(g.c))
    throw DataError("instance_norm: affine parameter size mismatch");
  const std::size_t plane = g.spatial();
  std::vector<T> xhat(x.size());
  std::vector<T> inv_std(static_cast<std::size_t>(g.n) * g.c);
  std::vector<T> out(x.size());
  auto xv = x.value();
  auto gv = gamma.value(), bv = beta.value();
  for (int n = 0; n < g.n; ++n)
    for (int c = 0; c < g.c; ++c) {
      const std::size_t off = (static_cast<std::size_t>(n) * g.c + c) * plane;
      double mean = 0.0;
      for (std::size_t i = 0; i < plane; ++i) mean += xv[off + i];
      mean /= static_cast<double>(plane);
      double var = 0.0;
      for (std::size_t i = 0; i < plane; ++i) {
        const double dlt = xv[off + i] - mean;
        var += dlt * dlt;
      }
      var /= static_cast<double>(plane);
      const T inv = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      inv_std[n * g.c + c] = inv;
      for (std::size_t i = 0; i < plane; ++i) {
        const T xh = static_cast<T>(xv[off + i] - mean) * inv;
        xhat[off + i] = xh;
        out[off + i] = gv[c] * xh + bv[c];
      }
    }
  return make_result<T>(x.shape(), std::move(out), {&x, &gamma, &beta},
                        [g, plane, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
    T* gx = grad_of(self, 0);
    T* gg = grad_of(self, 1);
    T* gbeta = grad_of(self, 2);
    const auto& gamma_v = self.parents[1]->value;
    for (int n = 0; n < g.n; ++n)
      for (int c = 0; c < g.c; ++c) {
        const std::size_t off = (static_cast<std::size_t>(n) * g.c + c) * plane;
        double sum_dy = 0.0, sum_dy_xh = 0.0;
        for (std::size_t i = 0; i < plane; ++i) {
          sum_dy += self.grad[off + i];
          sum_dy_xh += static_cast<double>(self.grad[off + i]) * xhat[off + i];
        }
        if (gg) gg[c] += static_cast<T>(sum_dy_xh);
        if (gbeta) gbeta[c] += static_cast<T>(sum_dy);
        if (gx) {
          const double scale_v = static_cast<double>(gamma_v[c]) * inv_std[n * g.c + c];
          const double m_dy = sum_dy / static_cast<double>(plane);
          const double m_dy_xh = sum_dy_xh / static_cast<double>(plane);
          for (std::size_t i = 0; i < plane; ++i)
            gx[off + i] += static_cast<T>(scale_v * (self.grad[off + i] - m_dy - xhat[off + i] * m_dy_xh));
        }
      }
  });
}

template <typename T>
Var<T> avg_pool2(const Var<T>& x) {
  require_rank5(x.shape(), "avg_pool2");
  const auto g = geometry(x.shape());
  if (g.d % 2 || g.h % 2 || g.w % 2) throw DataError("avg_pool2: spatial extents must be even, got " + x.shape().str());
  const Geometry o{g.n, g.c, g.d / 2, g.h / 2, g.w / 2};
  Shape shape{o.n, o.c, o.d, o.h, o.w};
  std::vector<T> out(shape.numel(), T(0));
  auto xv = x.value();
  const std::size_t channels = static_cast<std::size_t>(g.n) * g.c;
  for (std::size_t nc = 0; nc < channels; ++nc) {
    const T* src = xv.data() + nc * g.spatial();
    T* dst = out.data() + nc * o.spatial();
    for (int d = 0; d < g.d; ++d)
      for (int h = 0; h < g.h; ++h)
        for (int w = 0; w < g.w; ++w)
          dst[((d / 2) * o.h + h / 2) * o.w + w / 2] += src[(static_cast<std::size_t>(d) * g.h + h) * g.w + w];
  }
  for (auto& v : out) v *= T(0.125);
  return make_result<T>(std::move(shape), std::move(out), {&x}, [g, o, channels](Node<T>& self) {
    T* gx = grad_of(self, 0);
    if (!gx) return;
    for (std::size_t nc = 0; nc < channels; ++nc) {
      const T* src = self.grad.data() + nc * o.spatial();
      T* dst = gx + nc * g.spatial();
      for (int d = 0; d < g.d; ++d)
        for (int h = 0; h < g.h; ++h)
          for (int w = 0; w < g.w; ++w)
            dst[(static_cast<std::size_t>(d) * g.h + h) * g.w + w] += T(0.125) * src[((d / 2) * o.h + h / 2) * o.w + w / 2];
    }
  });
}

template <typename T>
Var<T> upsample2(const Var<T>& x) {
  require_rank5(x.shape(), "upsample2");
  const auto g = geometry(x.shape());
  const std::size_t nc = static_cast<std::size_t>(g.n) * g.c;
  // Separable passes: W, then H, then D.
  std::vector<T> t1(nc * g.d * g.h * (2 * g.w));
  upsample_axis(x.value().data(), nc * g.d * g.h, g.w, 1, t1.data());
  std::vector<T> t2(nc * g.d * (2 * g.h) * (2 * g.w));
  upsample_axis(t1.data(), nc * g.d, g.h, static_cast<std::size_t>(2 * g.w), t2.data());
  Shape shape{g.n, g.c, 2 * g.d, 2 * g.h, 2 * g.w};
  std::vector<T> out(shape.numel());
  upsample_axis(t2.data(), nc, g.d, static_cast<std::size_t>(4 * g.h * g.w), out.data());
  return make_result<T>(std::move(shape), std::move(out), {&x}, [g, nc](Node<T>& self) {
    T* gx = grad_of(self, 0);
    if (!gx) return;
    std::vector<T> a2(nc * g.d * (2 * g.h) * (2 * g.w));
    upsample_axis_adjoint(self.grad.data(), nc, g.d, static_cast<std::size_t>(4 * g.h * g.w), a2.data());
    std::vector<T> a1(nc * g.d * g.h * (2 * g.w));
    upsample_axis_adjoint(a2.data(), nc * g.d, g.h, static_cast<std::size_t>(2 * g.w), a1.data());
    std::vector<T> a0(nc * g.spatial());
    upsample_axis_adjoint(a1.data(), nc * g.d * g.h, g.w, 1, a0.data());
    for (std::size_t i = 0; i < a0.size(); ++i) gx[i] += a0[i];
  });
}

template <typename T>
Var<T> softmax_channels(const Var<T>& x) {
  require_rank5(x.shape(), "softmax_channels");
  const auto g = geometry(x.shape());
  const std::size_t plane = g.spatial();
  std::vector<T> out(x.size());
  auto xv = x.value();
  for (int n = 0; n < g.n; ++n) {
    const std::size_t base = static_cast<std::size_t>(n) * g.c * plane;
    for (std::size_t s = 0; s < plane; ++s) {
      T mx = xv[base + s];
      for (int c = 1; c < g.c; ++c) mx = std::max(mx, xv[base + c * plane + s]);
      T total = 0;
      for (int c = 0; c < g.c; ++c) {
        const T e = std::exp(xv[base + c * plane + s] - mx);
        out[base + c * plane + s] = e;
        total += e;
      }
      for (int c = 0; c < g.c; ++c) out[base + c * plane + s] /= total;
    }
  }
  return make_result<T>(x.shape(), std::move(out), {&x}, [g, plane](Node<T>& self) {
    T* gx = grad_of(self, 0);
    if (!gx) return;
    for (int n = 0; n < g.n; ++n) {
      const std::size_t base = static_cast<std::size_t>(n) * g.c * plane;
      for (std::size_t s = 0; s < plane; ++s) {
        T dotp = 0;
        for (int c = 0; c < g.c; ++c) dotp += self.value[base + c * plane + s] * self.grad[base + c * plane + s];
        for (int c = 0; c < g.c; ++c) {
          const std::size_t i = base + c * plane + s;
          gx[i] += self.value[i] * (self.grad[i] - dotp);
        }
      }
    }
  });
}

// -------------------------------------------------------------------- vector

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  if (x.shape().rank() < 3) throw DataError("global_avg_pool: expected (N, C, ...)");
  const int n = x.shape()[0], c = x.shape()[1];
  const std::size_t plane = x.shape().tail(2);
  std::vector<T> out(static_cast<std::size_t>(n) * c);
  auto xv = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    double acc = 0.0;
    for (std::size_t s = 0; s < plane; ++s) acc += xv[i * plane + s];
    out[i] = static_cast<T>(acc / static_cast<double>(plane));
  }
  return make_result<T>(Shape{n, c}, std::move(out), {&x}, [plane](Node<T>& self) {
    T* gx = grad_of(self, 0);
    if (!gx) return;
    const T inv = T(1) / static_cast<T>(plane);
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      for (std::size_t s = 0; s < plane; ++s) gx[i * plane + s] += self.grad[i] * inv;
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  if (x.shape().rank() != 2 || w.shape().rank() != 2 || w.shape()[1] != x.shape()[1] ||
      b.size() != static_cast<std::size_t>(w.shape()[0]))
    throw DataError("linear: incompatible shapes " + x.shape().str() + " x " + w.shape().str());
  const int n = x.shape()[0], ci = x.shape()[1], co = w.shape()[0];
  std::vector<T> out(static_cast<std::size_t>(n) * co);
  auto xv = x.value(), wv = w.value(), bv = b.value();
  for (int r = 0; r < n; ++r)
    for (int o = 0; o < co; ++o) {
      T acc = bv[o];
      for (int i = 0; i < ci; ++i) acc += wv[o * ci + i] * xv[r * ci + i];
      out[r * co + o] = acc;
    }
  return make_result<T>(Shape{n, co}, std::move(out), {&x, &w, &b}, [n, ci, co](Node<T>& self) {
    T* gx = grad_of(self, 0);
    T* gw = grad_of(self, 1);
    T* gb = grad_of(self, 2);
    const auto& xv2 = self.parents[0]->value;
    const auto& wv2 = self.parents[1]->value;
    for (int r = 0; r < n; ++r)
      for (int o = 0; o < co; ++o) {
        const T dy = self.grad[r * co + o];
        if (gb) gb[o] += dy;
        for (int i = 0; i < ci; ++i) {
          if (gw) gw[o * ci + i] += dy * xv2[r * ci + i];
          if (gx) gx[r * ci + i] += dy * wv2[o * ci + i];
        }
      }
  });
}

template <typename T>
Var<T> scale_channels(const Var<T>& x, const Var<T>& weights, T factor) {
  if (x.shape().rank() < 2 || weights.shape() != Shape{x.shape()[0], x.shape()[1]})
    throw DataError("scale_channels: weights " + weights.shape().str() + " do not match features " + x.shape().str());
  const std::size_t plane = x.shape().tail(2);
  std::vector<T> out(x.size());
  auto xv = x.value(), wv = weights.value();
  for (std::size_t i = 0; i < wv.size(); ++i)
    for (std::size_t s = 0; s < plane; ++s) out[i * plane + s] = factor * wv[i] * xv[i * plane + s];
  return make_result<T>(x.shape(), std::move(out), {&x, &weights}, [plane, factor](Node<T>& self) {
    T* gx = grad_of(self, 0);
    T* gw = grad_of(self, 1);
    const auto& xv2 = self.parents[0]->value;
    const auto& wv2 = self.parents[1]->value;
    for (std::size_t i = 0; i < wv2.size(); ++i) {
      T acc = 0;
      for (std::size_t s = 0; s < plane; ++s) {
        const T dy = self.grad[i * plane + s];
        if (gx) gx[i * plane + s] += factor * wv2[i] * dy;
        acc += dy * xv2[i * plane + s];
      }
      if (gw) gw[i] += factor * acc;
    }
  });
}

// ---------------------------------------------------------------- reductions

template <typename T>
Var<T> sum(const Var<T>& x) {
  double acc = 0.0;
  for (T v : x.value()) acc += v;
  return make_result<T>(Shape{1}, {static_cast<T>(acc)}, {&x}, [](Node<T>& self) {
    if (T* g = grad_of(self, 0))
      for (std::size_t i = 0; i < self.parents[0]->value.size(); ++i) g[i] += self.grad[0];
  });
}

template <typename T>
Var<T> dot_const(const Var<T>& x, std::span<const T> coeffs) {
  if (coeffs.size() != x.size()) throw DataError("dot_const: coefficient count mismatch");
  double acc = 0.0;
  auto xv = x.value();
  for (std::size_t i = 0; i < xv.size(); ++i) acc += static_cast<double>(coeffs[i]) * xv[i];
  std::vector<T> c(coeffs.begin(), coeffs.end());
  return make_result<T>(Shape{1}, {static_cast<T>(acc)}, {&x}, [c = std::move(c)](Node<T>& self) {
    if (T* g = grad_of(self, 0))
      for (std::size_t i = 0; i < c.size(); ++i) g[i] += self.grad[0] * c[i];
  });
}

template <typename T>
Var<T> weighted_sum(const std::vector<Var<T>>& terms, const std::vector<T>& weights) {
  if (terms.size() != weights.size()) throw DataError("weighted_sum: term/weight count mismatch");
  T acc = 0;
  std::vector<const Var<T>*> inputs;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i].size() != 1) throw DataError("weighted_sum: terms must be scalars");
    acc += weights[i] * terms[i].item();
    inputs.push_back(&terms[i]);
  }
  return make_result<T>(Shape{1}, {acc}, std::move(inputs), [weights](Node<T>& self) {
    for (std::size_t p = 0; p < self.parents.size(); ++p)
      if (T* g = grad_of(self, p)) g[0] += weights[p] * self.grad[0];
  });
}

#define DUALMOD_INSTANTIATE(T)                                                          \
  template class Var<T>;                                                                \
  template Var<T> detach(const Var<T>&);                                                \
  template Var<T> add(const Var<T>&, const Var<T>&);                                    \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                    \
  template Var<T> scale(const Var<T>&, T);                                              \
  template Var<T> concat_channels(const Var<T>&, const Var<T>&);                        \
  template Var<T> relu(const Var<T>&);                                                  \
  template Var<T> sigmoid(const Var<T>&);                                               \
  template Var<T> dropout(const Var<T>&, double, std::uint64_t);                        \
  template Var<T> conv3d(const Var<T>&, const Var<T>&, const Var<T>&);                  \
  template Var<T> instance_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);        \
  template Var<T> avg_pool2(const Var<T>&);                                             \
  template Var<T> upsample2(const Var<T>&);                                             \
  template Var<T> softmax_channels(const Var<T>&);                                      \
  template Var<T> global_avg_pool(const Var<T>&);                                       \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                  \
  template Var<T> scale_channels(const Var<T>&, const Var<T>&, T);                      \
  template Var<T> sum(const Var<T>&);                                                   \
  template Var<T> dot_const(const Var<T>&, std::span<const T>);                         \
  template Var<T> weighted_sum(const std::vector<Var<T>>&, const std::vector<T>&);

DUALMOD_INSTANTIATE(float)
DUALMOD_INSTANTIATE(double)

#undef DUALMOD_INSTANTIATE

}  // namespace dualmod::ag
