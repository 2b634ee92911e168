#include "dualmod/losses.hpp"

#include <cmath>

#include "dualmod/error.hpp"

namespace dualmod {

namespace {

struct Layout {
  std::size_t batch, classes, voxels;
};

template <typename T>
Layout check_target(const ag::Var<T>& probs, std::span<const std::uint8_t> target, const char* what) {
  const Shape& s = probs.shape();
  if (s.rank() != 5) throw DataError(std::string(what) + ": probabilities must be (N, C, D, H, W)");
  const Layout l{static_cast<std::size_t>(s[0]), static_cast<std::size_t>(s[1]), s.tail(2)};
  if (target.size() != l.batch * l.voxels)
    throw DataError(std::string(what) + ": target has " + std::to_string(target.size()) + " voxels, expected " +
                    std::to_string(l.batch * l.voxels));
  for (auto t : target)
    if (t >= l.classes) throw DataError(std::string(what) + ": target label out of range");
  return l;
}

}  // namespace

template <typename T>
ag::Var<T> ce_loss(const ag::Var<T>& probs, std::span<const std::uint8_t> target) {
  const Layout l = check_target(probs, target, "ce_loss");
  const auto p = probs.value();
  const double count = static_cast<double>(l.batch * l.voxels);
  double acc = 0.0;
  for (std::size_t n = 0; n < l.batch; ++n)
    for (std::size_t v = 0; v < l.voxels; ++v) {
      const double q = p[(n * l.classes + target[n * l.voxels + v]) * l.voxels + v];
      acc -= std::log(std::max(q, kLogClamp));
    }
  std::vector<std::uint8_t> t(target.begin(), target.end());
  return ag::detail::make_result<T>(
      Shape{1}, {static_cast<T>(acc / count)}, {&probs}, [l, t = std::move(t), count](ag::Node<T>& self) {
        T* gp = ag::detail::grad_of(self, 0);
        if (!gp) return;
        const auto& p = self.parents[0]->value;
        const double g = self.grad[0];
        for (std::size_t n = 0; n < l.batch; ++n)
          for (std::size_t v = 0; v < l.voxels; ++v) {
            const std::size_t i = (n * l.classes + t[n * l.voxels + v]) * l.voxels + v;
            const double q = p[i];
            if (q > kLogClamp) gp[i] += static_cast<T>(-g / (q * count));
          }
      });
}

template <typename T>
ag::Var<T> dice_loss(const ag::Var<T>& probs, std::span<const std::uint8_t> target, double eps) {
  const Layout l = check_target(probs, target, "dice_loss");
  const auto p = probs.value();
  // Per (sample, class): intersection and denominator.
  std::vector<double> inter(l.batch * l.classes, 0.0), denom(l.batch * l.classes, eps);
  for (std::size_t n = 0; n < l.batch; ++n)
    for (std::size_t c = 0; c < l.classes; ++c) {
      double i_acc = 0.0, d_acc = 0.0;
      const T* pc = p.data() + (n * l.classes + c) * l.voxels;
      const std::uint8_t* tn = target.data() + n * l.voxels;
      for (std::size_t v = 0; v < l.voxels; ++v) {
        const double t = tn[v] == c ? 1.0 : 0.0;
        i_acc += pc[v] * t;
        d_acc += pc[v] + t;
      }
      inter[n * l.classes + c] = i_acc;
      denom[n * l.classes + c] += d_acc;
    }
  const double norm = static_cast<double>(l.batch * l.classes);
  double score = 0.0;
  for (std::size_t k = 0; k < inter.size(); ++k) score += (2.0 * inter[k] + eps) / denom[k];
  std::vector<std::uint8_t> t(target.begin(), target.end());
  return ag::detail::make_result<T>(
      Shape{1}, {static_cast<T>(1.0 - score / norm)}, {&probs},
      [l, t = std::move(t), inter = std::move(inter), denom = std::move(denom), eps, norm](ag::Node<T>& self) {
        T* gp = ag::detail::grad_of(self, 0);
        if (!gp) return;
        const double g = self.grad[0];
        for (std::size_t n = 0; n < l.batch; ++n)
          for (std::size_t c = 0; c < l.classes; ++c) {
            const double d = denom[n * l.classes + c], num = 2.0 * inter[n * l.classes + c] + eps;
            T* gc = gp + (n * l.classes + c) * l.voxels;
            const std::uint8_t* tn = t.data() + n * l.voxels;
            for (std::size_t v = 0; v < l.voxels; ++v) {
              const double tv = tn[v] == c ? 1.0 : 0.0;
              gc[v] += static_cast<T>(-g / norm * (2.0 * tv * d - num) / (d * d));
            }
          }
      });
}

template <typename T>
SupervisedTerms<T> supervised_loss(const ag::Var<T>& prob_a, const ag::Var<T>& prob_b,
                                   std::span<const std::uint8_t> target, double dice_eps) {
  require_same_shape(prob_a.shape(), prob_b.shape(), "supervised_loss");
  return {ce_loss(prob_a, target), ce_loss(prob_b, target), dice_loss(prob_a, target, dice_eps),
          dice_loss(prob_b, target, dice_eps)};
}

template <typename T>
PseudoLabelPair<T> make_pseudo_labels(const ag::Var<T>& prob_a, const ag::Var<T>& prob_b) {
  return {ag::detach(prob_a), ag::detach(prob_b)};
}

template <typename T>
ag::Var<T> consistency_loss(const ag::Var<T>& prob_a, const ag::Var<T>& prob_b, const PseudoLabelPair<T>& pl) {
  require_same_shape(prob_a.shape(), prob_b.shape(), "consistency_loss");
  require_same_shape(prob_a.shape(), pl.pl_a.shape(), "consistency_loss");
  require_same_shape(prob_a.shape(), pl.pl_b.shape(), "consistency_loss");
  const auto a = prob_a.value(), b = prob_b.value(), pa = pl.pl_a.value(), pb = pl.pl_b.value();
  const std::size_t n = a.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double da = static_cast<double>(a[i]) - pb[i], db = static_cast<double>(b[i]) - pa[i];
    acc += da * da + db * db;
  }
  const double count = 2.0 * static_cast<double>(n);
  // Only the live predictions are inputs: the pseudo-labels never receive a gradient.
  std::vector<T> ta(pa.begin(), pa.end()), tb(pb.begin(), pb.end());
  return ag::detail::make_result<T>(
      Shape{1}, {static_cast<T>(acc / count)}, {&prob_a, &prob_b},
      [ta = std::move(ta), tb = std::move(tb), count](ag::Node<T>& self) {
        const double g = 2.0 * self.grad[0] / count;
        if (T* ga = ag::detail::grad_of(self, 0)) {
          const auto& a = self.parents[0]->value;
          for (std::size_t i = 0; i < a.size(); ++i) ga[i] += static_cast<T>(g * (static_cast<double>(a[i]) - tb[i]));
        }
        if (T* gb = ag::detail::grad_of(self, 1)) {
          const auto& b = self.parents[1]->value;
          for (std::size_t i = 0; i < b.size(); ++i) gb[i] += static_cast<T>(g * (static_cast<double>(b[i]) - ta[i]));
        }
      });
}

bool LossBundle::finite() const {
  for (double v : {ce_a, ce_b, dice_a, dice_b, consistency, total})
    if (!std::isfinite(v)) return false;
  return true;
}

template <typename T>
LossBundle LossGraph<T>::values() const {
  LossBundle b;
  b.ce_a = sup.ce_a.item();
  b.ce_b = sup.ce_b.item();
  b.dice_a = sup.dice_a.item();
  b.dice_b = sup.dice_b.item();
  b.consistency = consistency.defined() ? static_cast<double>(consistency.item()) : 0.0;
  b.total = total.item();
  b.alpha = alpha;
  return b;
}

template <typename T>
LossGraph<T> total_loss(const SupervisedTerms<T>& sup, const ag::Var<T>& consistency, double alpha) {
  if (!(alpha >= 0.0)) throw ConfigError("alpha must be >= 0");
  std::vector<ag::Var<T>> terms{sup.ce_a, sup.ce_b, sup.dice_a, sup.dice_b};
  std::vector<T> weights{T(1), T(1), T(1), T(1)};
  if (consistency.defined()) {
    terms.push_back(consistency);
    weights.push_back(static_cast<T>(alpha));
  }
  return {sup, consistency, ag::weighted_sum(terms, weights), alpha};
}

double alpha_at(long it, double alpha, long rampup_iters) {
  if (rampup_iters <= 0) return alpha;
  const double t = std::min(1.0, static_cast<double>(it) / static_cast<double>(rampup_iters));
  return alpha * std::exp(-5.0 * (1.0 - t) * (1.0 - t));
}

#define DUALMOD_INSTANTIATE(T)                                                                                 \
  template ag::Var<T> ce_loss(const ag::Var<T>&, std::span<const std::uint8_t>);                               \
  template ag::Var<T> dice_loss(const ag::Var<T>&, std::span<const std::uint8_t>, double);                     \
  template SupervisedTerms<T> supervised_loss(const ag::Var<T>&, const ag::Var<T>&,                            \
                                              std::span<const std::uint8_t>, double);                          \
  template PseudoLabelPair<T> make_pseudo_labels(const ag::Var<T>&, const ag::Var<T>&);                        \
  template ag::Var<T> consistency_loss(const ag::Var<T>&, const ag::Var<T>&, const PseudoLabelPair<T>&);       \
  template struct LossGraph<T>;                                                                                \
  template LossGraph<T> total_loss(const SupervisedTerms<T>&, const ag::Var<T>&, double);

DUALMOD_INSTANTIATE(float)
DUALMOD_INSTANTIATE(double)

}  // namespace dualmod
