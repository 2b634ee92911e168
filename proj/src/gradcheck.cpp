#include "dualmod/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <optional>
#include <sstream>

#include "dualmod/losses.hpp"
#include "dualmod/network.hpp"
#include "dualmod/synthetic.hpp"

namespace dualmod {

namespace {

// Gradients smaller than this are indistinguishable from finite-difference
// round-off and are compared absolutely.
constexpr double kNormFloor = 1e-6;
// A perturbation that moves any rectifier input across zero is retried with a
// step this many times smaller, down to kMinStep.
constexpr double kStepShrink = 10.0;
constexpr double kMinStep = 1e-7;

struct MicroBatch {
  ag::Var<double> la, lb, ua, ub;
  std::vector<std::uint8_t> labels;
  bool unlabeled = false;
};

ag::Var<double> to_var(const Volume& v) {
  Tensor<double> t(Shape{1, 1, v.extent.d, v.extent.h, v.extent.w});
  std::copy(v.voxels.begin(), v.voxels.end(), t.data.begin());
  return ag::Var<double>::constant(std::move(t));
}

class Objective {
 public:
  Objective(const ExperimentConfig& cfg, const DualBranchModel<double>& model, MicroBatch batch)
      : cfg_(cfg), model_(model), batch_(std::move(batch)) {
    if (batch_.unlabeled) {
      ag::NoGradGuard guard;
      const auto out = forward_dual(model_, batch_.ua, batch_.ub, true, kUnlabeledSeed);
      pl_ = make_pseudo_labels(out.prob_a, out.prob_b);
    }
  }

  ag::Var<double> loss() const {
    const auto lab = forward_dual(model_, batch_.la, batch_.lb, true, kLabeledSeed);
    const auto sup = supervised_loss(lab.prob_a, lab.prob_b, batch_.labels, cfg_.losses.dice_epsilon);
    ag::Var<double> cons;
    if (pl_) {
      const auto unl = forward_dual(model_, batch_.ua, batch_.ub, true, kUnlabeledSeed);
      cons = consistency_loss(unl.prob_a, unl.prob_b, *pl_);
    }
    return total_loss(sup, cons, cfg_.losses.alpha).total;
  }

  struct Probe {
    double value;
    std::uint64_t kinks;
  };

  Probe probe() const {
    ag::NoGradGuard guard;
    ag::KinkMonitor monitor;
    const double v = loss().item();
    return {v, monitor.fingerprint()};
  }

  static constexpr std::uint64_t kLabeledSeed = 0x1abe1;
  static constexpr std::uint64_t kUnlabeledSeed = 0x2abe1;

 private:
  const ExperimentConfig& cfg_;
  const DualBranchModel<double>& model_;
  MicroBatch batch_;
  std::optional<PseudoLabelPair<double>> pl_;
};

}  // namespace

bool GradCheckReport::passed() const {
  return max_rel_error <= tolerance && pseudo_label_grad == 0.0 && (!mcml || live_consistency_grad > 0.0);
}

std::string GradCheckReport::format() const {
  std::ostringstream out;
  char line[200];
  std::snprintf(line, sizeof line, "%-32s %7s %7s %12s %12s %10s\n", "parameter", "checked", "refined", "|analytic|",
                "|numeric|", "rel_err");
  out << line;
  for (const auto& g : groups) {
    std::snprintf(line, sizeof line, "%-32s %7zu %7zu %12.4e %12.4e %10.3e\n", g.name.c_str(), g.checked,
                  g.refined + g.unresolved, g.analytic_norm, g.numeric_norm, g.rel_error);
    out << line;
  }
  std::snprintf(line, sizeof line, "max relative error %.3e (tolerance %.1e)\n", max_rel_error, tolerance);
  out << line;
  if (mcml) {
    std::snprintf(line, sizeof line, "gradient through pseudo-labels %.1e, through live predictions %.3e\n",
                  pseudo_label_grad, live_consistency_grad);
    out << line;
  }
  out << (passed() ? "PASS" : "FAIL") << '\n';
  return out.str();
}

GradCheckReport check_grad(const ExperimentConfig& cfg) {
  cfg.network.validate();
  const auto& gc = cfg.check_grad;
  auto model = DualBranchModel<double>::create(cfg.network, gc.seed);
  if (gc.zero_fusion)
    for (auto& p : model.parameters())
      if (p.name.rfind("fusion", 0) == 0) std::fill(p.var.mutable_value().begin(), p.var.mutable_value().end(), 0.0);

  SynthSpec spec = cfg.synthetic.spec;
  spec.shape = gc.patch_shape;
  const auto samples = generate_dataset(2, gc.seed, spec);
  MicroBatch batch;
  batch.la = to_var(samples[0].vol_a);
  batch.lb = to_var(samples[0].vol_b);
  batch.labels = samples[0].mask->labels;
  batch.unlabeled = cfg.trainer.mcml_enabled;
  batch.ua = to_var(samples[1].vol_a);
  batch.ub = to_var(samples[1].vol_b);

  GradCheckReport report;
  report.tolerance = gc.tolerance;
  report.mcml = batch.unlabeled;

  auto params = model.parameters();
  auto zero_grads = [&] {
    for (auto& p : params) p.var.zero_grad();
  };

  if (report.mcml) {
    // Anything computed from the pseudo-labels alone must leave every parameter untouched.
    zero_grads();
    const auto out = forward_dual(model, batch.ua, batch.ub, true, Objective::kUnlabeledSeed);
    const auto pl = make_pseudo_labels(out.prob_a, out.prob_b);
    std::vector<double> coeffs(pl.pl_a.size());
    for (std::size_t i = 0; i < coeffs.size(); ++i) coeffs[i] = std::sin(0.37 * static_cast<double>(i) + 0.1);
    const auto probe = ag::add(ag::dot_const(pl.pl_a, std::span<const double>(coeffs)),
                               ag::dot_const(pl.pl_b, std::span<const double>(coeffs)));
    probe.backward();
    for (const auto& p : params)
      for (double g : p.var.grad()) report.pseudo_label_grad = std::max(report.pseudo_label_grad, std::fabs(g));

    zero_grads();
    const auto live = forward_dual(model, batch.ua, batch.ub, true, Objective::kUnlabeledSeed);
    consistency_loss(live.prob_a, live.prob_b, make_pseudo_labels(out.prob_a, out.prob_b)).backward();
    double sq = 0.0;
    for (const auto& p : params)
      for (double g : p.var.grad()) sq += g * g;
    report.live_consistency_grad = std::sqrt(sq);
  }

  const Objective objective(cfg, model, batch);
  zero_grads();
  objective.loss().backward();

  const auto base_kinks = objective.probe().kinks;
  CounterRng pick{mix_seed({gc.seed, 0x9c})};
  for (auto& p : params) {
    const std::vector<double> analytic(p.var.grad().begin(), p.var.grad().end());
    auto w = p.var.mutable_value();
    std::vector<std::size_t> idx(w.size());
    std::iota(idx.begin(), idx.end(), 0);
    const auto want = static_cast<std::size_t>(gc.entries_per_tensor);
    if (idx.size() > want) {
      for (std::size_t i = 0; i < want; ++i) std::swap(idx[i], idx[i + uniform_index(pick, idx.size() - i)]);
      idx.resize(want);
    }
    GradGroupReport g;
    g.name = p.name;
    g.checked = idx.size();
    double diff = 0.0, an = 0.0, nn = 0.0;
    for (std::size_t i : idx) {
      const double saved = w[i];
      double numeric = 0.0;
      for (double h = gc.step;; h /= kStepShrink) {
        w[i] = saved + h;
        const auto up = objective.probe();
        w[i] = saved - h;
        const auto down = objective.probe();
        w[i] = saved;
        numeric = (up.value - down.value) / (2.0 * h);
        const bool smooth = up.kinks == base_kinks && down.kinks == base_kinks;
        if (smooth && h == gc.step) break;
        if (smooth) {
          ++g.refined;
          break;
        }
        if (h / kStepShrink < kMinStep) {
          ++g.unresolved;
          break;
        }
      }
      diff += (analytic[i] - numeric) * (analytic[i] - numeric);
      an += analytic[i] * analytic[i];
      nn += numeric * numeric;
    }
    g.analytic_norm = std::sqrt(an);
    g.numeric_norm = std::sqrt(nn);
    g.rel_error = std::sqrt(diff) / std::max({g.analytic_norm, g.numeric_norm, kNormFloor});
    report.max_rel_error = std::max(report.max_rel_error, g.rel_error);
    report.groups.push_back(std::move(g));
  }
  return report;
}

}  // namespace dualmod
