#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "dualmod/autograd.hpp"
#include "test_util.hpp"

using namespace dualmod;
using dualmod::testing::random_tensor;
using V = ag::Var<double>;

namespace {

V leaf(Shape s, Rng& rng, double scale = 1.0) { return V::leaf(random_tensor<double>(std::move(s), rng, scale), true); }

// Compares backprop of coeff . f(leaves) with central differences on every leaf entry.
void expect_gradients(const std::function<V()>& f, std::vector<V> leaves, double tol = 1e-7) {
  const V probe = f();
  std::vector<double> coeff(probe.size());
  for (std::size_t i = 0; i < coeff.size(); ++i) coeff[i] = std::sin(1.3 * static_cast<double>(i) + 0.4);
  auto objective = [&] { return ag::dot_const(f(), std::span<const double>(coeff)); };
  for (auto& l : leaves) l.zero_grad();
  objective().backward();
  const double h = 1e-6;
  for (auto& l : leaves) {
    auto vals = l.mutable_value();
    ASSERT_EQ(l.grad().size(), vals.size());
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double saved = vals[i];
      ag::NoGradGuard guard;
      vals[i] = saved + h;
      const double up = objective().item();
      vals[i] = saved - h;
      const double down = objective().item();
      vals[i] = saved;
      const double fd = (up - down) / (2 * h);
      EXPECT_NEAR(l.grad()[i], fd, tol * std::max(1.0, std::fabs(fd))) << "entry " << i;
    }
  }
}

// Direct zero-padded convolution.
std::vector<double> conv_reference(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b) {
  const int n = x.shape[0], ci = x.shape[1], d = x.shape[2], h = x.shape[3], wd = x.shape[4];
  const int co = w.shape[0], k = w.shape[2], r = k / 2;
  std::vector<double> out(static_cast<std::size_t>(n) * co * d * h * wd);
  std::size_t idx = 0;
  for (int s = 0; s < n; ++s)
    for (int o = 0; o < co; ++o)
      for (int z = 0; z < d; ++z)
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < wd; ++xx) {
            double acc = b.data[o];
            for (int i = 0; i < ci; ++i)
              for (int a = 0; a < k; ++a)
                for (int c = 0; c < k; ++c)
                  for (int e = 0; e < k; ++e) {
                    const int zz = z + a - r, yy = y + c - r, x3 = xx + e - r;
                    if (zz < 0 || yy < 0 || x3 < 0 || zz >= d || yy >= h || x3 >= wd) continue;
                    acc += w.data[(((static_cast<std::size_t>(o) * ci + i) * k + a) * k + c) * k + e] *
                           x.data[(((static_cast<std::size_t>(s) * ci + i) * d + zz) * h + yy) * wd + x3];
                  }
            out[idx++] = acc;
          }
  return out;
}

}  // namespace

TEST(Autograd, StructuralOpsGradients) {
  Rng rng(1);
  auto a = leaf({2, 3, 2, 2, 2}, rng), b = leaf({2, 3, 2, 2, 2}, rng), c = leaf({2, 1, 2, 2, 2}, rng);
  expect_gradients([&] { return ag::add(a, b); }, {a, b});
  expect_gradients([&] { return ag::sub(a, b); }, {a, b});
  expect_gradients([&] { return ag::scale(a, -2.5); }, {a});
  expect_gradients([&] { return ag::concat_channels(a, c); }, {a, c});
  expect_gradients([&] { return ag::sum(ag::add(a, a)); }, {a});
  auto s1 = leaf({1}, rng), s2 = leaf({1}, rng);
  expect_gradients([&] { return ag::weighted_sum<double>({s1, s2, s1}, {0.5, 2.0, -1.0}); }, {s1, s2});
}

TEST(Autograd, PointwiseGradients) {
  Rng rng(2);
  auto x = leaf({1, 2, 3, 3, 3}, rng);
  // keep rectifier inputs away from the kink
  for (auto& v : x.mutable_value())
    if (std::fabs(v) < 0.05) v += 0.1;
  expect_gradients([&] { return ag::relu(x); }, {x});
  expect_gradients([&] { return ag::sigmoid(x); }, {x});
  expect_gradients([&] { return ag::dropout(x, 0.4, 99); }, {x});
}

TEST(Autograd, VolumetricGradients) {
  Rng rng(3);
  auto x = leaf({2, 2, 4, 4, 4}, rng);
  for (int k : {1, 3, 5}) {
    auto w = leaf({3, 2, k, k, k}, rng, 0.3), b = leaf({3}, rng);
    expect_gradients([&] { return ag::conv3d(x, w, b); }, {x, w, b});
  }
  auto big = leaf({1, 1, 6, 6, 6}, rng);
  auto w = leaf({2, 1, 3, 3, 3}, rng, 0.3), b = leaf({2}, rng);
  expect_gradients([&] { return ag::conv3d(big, w, b); }, {big, w, b});
  auto g = leaf({2}, rng), be = leaf({2}, rng);
  expect_gradients([&] { return ag::instance_norm(x, g, be); }, {x, g, be}, 1e-6);
  expect_gradients([&] { return ag::avg_pool2(x); }, {x});
  expect_gradients([&] { return ag::upsample2(x); }, {x});
  expect_gradients([&] { return ag::softmax_channels(x); }, {x});
}

TEST(Autograd, VectorGradients) {
  Rng rng(4);
  auto x = leaf({2, 3, 2, 3, 2}, rng);
  auto v = leaf({2, 3}, rng), w = leaf({4, 3}, rng), b = leaf({4}, rng);
  expect_gradients([&] { return ag::global_avg_pool(x); }, {x});
  expect_gradients([&] { return ag::linear(v, w, b); }, {v, w, b});
  expect_gradients([&] { return ag::scale_channels(x, v, 2.0); }, {x, v});
}

TEST(Conv3d, MatchesDirectReferenceOnBothPaths) {
  Rng rng(5);
  for (Shape xs : {Shape{1, 2, 4, 4, 4}, Shape{2, 3, 8, 8, 8}, Shape{1, 2, 4, 8, 16}})
    for (int k : {1, 3, 5}) {
      const auto x = random_tensor<double>(xs, rng);
      const auto w = random_tensor<double>(Shape{3, xs[1], k, k, k}, rng);
      const auto b = random_tensor<double>(Shape{3}, rng);
      const auto out = ag::conv3d(V::constant(x), V::constant(w), V::constant(b));
      const auto ref = conv_reference(x, w, b);
      ASSERT_EQ(out.size(), ref.size());
      for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR(out.value()[i], ref[i], 1e-11) << xs.str() << " k" << k;

      // float agrees with double up to rounding
      Tensor<float> xf(xs), wf(w.shape), bf(b.shape);
      std::copy(x.data.begin(), x.data.end(), xf.data.begin());
      std::copy(w.data.begin(), w.data.end(), wf.data.begin());
      std::copy(b.data.begin(), b.data.end(), bf.data.begin());
      using F = ag::Var<float>;
      const auto of = ag::conv3d(F::constant(xf), F::constant(wf), F::constant(bf));
      for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR(of.value()[i], ref[i], 1e-4 * (1 + std::fabs(ref[i])));
    }
}

TEST(Conv3d, HandExamples) {
  const V x = V::constant(Tensor<double>(Shape{1, 1, 3, 3, 3}, 1.0));
  const V ones = V::constant(Tensor<double>(Shape{1, 1, 3, 3, 3}, 1.0));
  const V zero = V::constant(Tensor<double>(Shape{1}, 0.0));
  const auto out = ag::conv3d(x, ones, zero);
  EXPECT_EQ(out.value()[13], 27.0);  // centre
  EXPECT_EQ(out.value()[0], 8.0);    // corner
  EXPECT_EQ(out.value()[1], 12.0);   // edge
  const auto affine = ag::conv3d(x, V::constant(Tensor<double>(Shape{1, 1, 1, 1, 1}, 2.0)),
                                 V::constant(Tensor<double>(Shape{1}, 1.0)));
  for (double v : affine.value()) EXPECT_EQ(v, 3.0);
  EXPECT_THROW(ag::conv3d(x, V::constant(Tensor<double>(Shape{1, 2, 3, 3, 3})), zero), DataError);
}

TEST(Volumetric, PoolUpsampleNormSoftmaxValues) {
  Tensor<double> t(Shape{1, 1, 2, 2, 2});
  for (std::size_t i = 0; i < 8; ++i) t.data[i] = static_cast<double>(i);
  const auto pooled = ag::avg_pool2(V::constant(t));
  EXPECT_EQ(pooled.shape(), (Shape{1, 1, 1, 1, 1}));
  EXPECT_EQ(pooled.item(), 3.5);
  EXPECT_THROW(ag::avg_pool2(V::constant(Tensor<double>(Shape{1, 1, 3, 2, 2}))), DataError);

  const V line = V::constant(Tensor<double>(Shape{1, 1, 1, 1, 2}, std::vector<double>{1.0, 5.0}));
  const auto up = ag::upsample2(line);
  ASSERT_EQ(up.shape(), (Shape{1, 1, 2, 2, 4}));
  const double expected[4] = {1.0, 2.0, 4.0, 5.0};
  for (int r = 0; r < 4; ++r)
    for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(up.value()[r * 4 + i], expected[i]);

  Rng rng(6);
  const auto x = random_tensor<double>(Shape{2, 3, 4, 2, 6}, rng, 3.0);
  double in_sum = 0, out_sum = 0;
  for (double v : x.data) in_sum += v;
  const auto ux = ag::upsample2(V::constant(x));
  for (double v : ux.value()) out_sum += v;
  EXPECT_NEAR(out_sum, 8 * in_sum, 1e-9);

  const auto norm = ag::instance_norm(V::constant(x), V::constant(Tensor<double>(Shape{3}, 1.0)),
                                      V::constant(Tensor<double>(Shape{3}, 0.0)));
  const std::size_t vox = 48;
  for (std::size_t nc = 0; nc < 6; ++nc) {
    double m = 0, v = 0;
    for (std::size_t i = 0; i < vox; ++i) m += norm.value()[nc * vox + i];
    m /= vox;
    for (std::size_t i = 0; i < vox; ++i) v += std::pow(norm.value()[nc * vox + i] - m, 2);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v / vox, 1.0, 1e-4);
  }

  const auto sm = ag::softmax_channels(V::constant(x));
  for (int n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < vox; ++i) {
      double s = 0;
      for (int c = 0; c < 3; ++c) s += sm.value()[(n * 3 + c) * vox + i];
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  const auto huge = ag::softmax_channels(V::constant(Tensor<double>(Shape{1, 2, 1, 1, 1}, std::vector<double>{1000, 0})));
  EXPECT_EQ(huge.value()[0], 1.0);
  EXPECT_EQ(huge.value()[1], 0.0);
}

TEST(Dropout, MaskDeterminismAndScaling) {
  const V x = V::constant(Tensor<double>(Shape{1, 1, 16, 16, 16}, 1.0));
  const auto same = ag::dropout(x, 0.0, 3);
  for (double v : same.value()) EXPECT_EQ(v, 1.0);
  const auto d1 = ag::dropout(x, 0.5, 3), d2 = ag::dropout(x, 0.5, 3), d3 = ag::dropout(x, 0.5, 4);
  std::size_t kept = 0;
  for (std::size_t i = 0; i < d1.size(); ++i) {
    EXPECT_TRUE(d1.value()[i] == 0.0 || d1.value()[i] == 2.0);
    kept += d1.value()[i] != 0.0;
  }
  EXPECT_GT(kept, 1800u);
  EXPECT_LT(kept, 2300u);
  EXPECT_TRUE(std::equal(d1.value().begin(), d1.value().end(), d2.value().begin()));
  EXPECT_FALSE(std::equal(d1.value().begin(), d1.value().end(), d3.value().begin()));
}

TEST(Autograd, DetachAndNoGrad) {
  Rng rng(7);
  auto x = leaf({1, 1, 2, 2, 2}, rng);
  auto y = ag::add(ag::detach(x), x);
  ag::sum(y).backward();
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);

  EXPECT_TRUE(ag::grad_enabled());
  {
    ag::NoGradGuard outer;
    EXPECT_FALSE(ag::grad_enabled());
    {
      ag::NoGradGuard inner;
      EXPECT_FALSE(ag::grad_enabled());
    }
    EXPECT_FALSE(ag::grad_enabled());
    const auto z = ag::scale(x, 2.0);
    EXPECT_FALSE(z.requires_grad());
    EXPECT_TRUE(z.node()->parents.empty());
  }
  EXPECT_TRUE(ag::grad_enabled());
  EXPECT_TRUE(ag::scale(x, 2.0).requires_grad());
}

TEST(Autograd, GradientsAccumulateAcrossUses) {
  Rng rng(8);
  auto x = leaf({1, 1, 1, 1, 3}, rng);
  x.zero_grad();
  ag::sum(ag::add(ag::scale(x, 3.0), x)).backward();
  for (double g : x.grad()) EXPECT_EQ(g, 4.0);
  ag::sum(x).backward();
  for (double g : x.grad()) EXPECT_EQ(g, 5.0);
  EXPECT_THROW(ag::add(x, x).backward(), DataError);
}

TEST(KinkMonitor, FingerprintsSignPatterns) {
  const V pos = V::constant(Tensor<double>(Shape{4}, std::vector<double>{1, -2, 3, -4}));
  const V moved = V::constant(Tensor<double>(Shape{4}, std::vector<double>{1.5, -1, 2, -0.5}));
  const V flipped = V::constant(Tensor<double>(Shape{4}, std::vector<double>{1, 2, 3, -4}));
  auto fp = [](const V& v) {
    ag::KinkMonitor m;
    (void)ag::relu(v);
    return m.fingerprint();
  };
  EXPECT_EQ(fp(pos), fp(moved));
  EXPECT_NE(fp(pos), fp(flipped));

  ag::KinkMonitor outer;
  const auto before = outer.fingerprint();
  {
    ag::KinkMonitor inner;
    (void)ag::relu(pos);
    EXPECT_NE(inner.fingerprint(), 0u);
  }
  EXPECT_EQ(outer.fingerprint(), before);
  (void)ag::relu(pos);
  EXPECT_NE(outer.fingerprint(), before);
}
