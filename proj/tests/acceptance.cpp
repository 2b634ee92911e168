// Prints one PASS/FAIL line per acceptance criterion and exits nonzero when any fails.
//
//   dualmod_acceptance [--only 1,3,7]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dualmod/gradcheck.hpp"
#include "dualmod/losses.hpp"
#include "dualmod/metrics.hpp"
#include "dualmod/network.hpp"
#include "dualmod/trainer.hpp"
#include "oracles.hpp"

using namespace dualmod;
using namespace dualmod::oracles;
using V = ag::Var<double>;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Tensor<double> normal_tensor(Shape s, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.data) v = scale * standard_normal(rng);
  return t;
}

Tensor<double> simplex_tensor(int n, int c, int d, Rng& rng) {
  Tensor<double> t(Shape{n, c, d, d, d});
  const std::size_t vox = static_cast<std::size_t>(d) * d * d;
  for (int b = 0; b < n; ++b)
    for (std::size_t i = 0; i < vox; ++i) {
      double z = 0;
      for (int k = 0; k < c; ++k) z += t.data[(static_cast<std::size_t>(b) * c + k) * vox + i] = std::exp(2 * standard_normal(rng));
      for (int k = 0; k < c; ++k) t.data[(static_cast<std::size_t>(b) * c + k) * vox + i] /= z;
    }
  return t;
}

SegMask random_mask(const Extent3& e, double rate, Rng& rng) {
  SegMask m(e, 2);
  for (auto& v : m.labels) v = uniform01(rng) < rate;
  return m;
}

double grad_norm(const std::vector<NamedParameter<double>>& params, const std::string& prefix) {
  double s = 0;
  for (const auto& p : params)
    if (p.name.rfind(prefix, 0) == 0)
      for (double g : p.var.grad()) s += g * g;
  return std::sqrt(s);
}

// ---- criteria ----

Outcome gradient_check() {
  ExperimentConfig cfg;
  apply_overrides(cfg, {"network.num_stages=2", "network.base_channels=4", "network.num_classes=2",
                        "network.mmf_enabled=true", "network.mae_enabled=true", "trainer.mcml_enabled=true",
                        "check_grad.patch_shape=8", "check_grad.step=1e-3", "check_grad.tolerance=1e-3"});
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = check_grad(cfg);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::size_t refined = 0, unresolved = 0;
  for (const auto& g : r.groups) {
    refined += g.refined;
    unresolved += g.unresolved;
  }
  return {r.passed() && r.max_rel_error <= 1e-3 && secs < 120.0,
          fmt("max rel error %.3e over %zu tensors (%zu entries re-measured at a smaller step, %zu unresolved), %.1f s",
              r.max_rel_error, r.groups.size(), refined, unresolved, secs)};
}

Outcome stop_gradient() {
  NetworkConfig net;
  net.base_channels = 4;
  net.num_stages = 2;
  const auto model = DualBranchModel<double>::create(net, 11);
  Rng rng(12);
  const V xa = V::constant(normal_tensor(Shape{1, 1, 8, 8, 8}, rng));
  const V xb = V::constant(normal_tensor(Shape{1, 1, 8, 8, 8}, rng));
  const auto params = model.parameters();
  auto zero = [&] {
    for (auto p : params) p.var.zero_grad();
  };

  // gradient reaching the parameters only through the pseudo-labels
  zero();
  auto out = forward_dual(model, xa, xb, false);
  auto pl = make_pseudo_labels(out.prob_a, out.prob_b);
  consistency_loss(ag::detach(out.prob_a), ag::detach(out.prob_b), pl).backward();
  double through_pl = 0;
  for (const auto& p : params)
    for (double g : p.var.grad()) through_pl = std::max(through_pl, std::fabs(g));

  // a generic functional of the pseudo-labels alone, against the same functional of the live output
  std::vector<double> coeff(out.prob_a.size());
  for (std::size_t i = 0; i < coeff.size(); ++i) coeff[i] = std::cos(0.37 * static_cast<double>(i));
  zero();
  out = forward_dual(model, xa, xb, false);
  pl = make_pseudo_labels(out.prob_a, out.prob_b);
  ag::dot_const(pl.pl_a, std::span<const double>(coeff)).backward();
  for (const auto& p : params)
    for (double g : p.var.grad()) through_pl = std::max(through_pl, std::fabs(g));
  zero();
  ag::dot_const(out.prob_a, std::span<const double>(coeff)).backward();
  const double control = grad_norm(params, "a.");

  zero();
  out = forward_dual(model, xa, xb, false);
  pl = make_pseudo_labels(out.prob_a, out.prob_b);
  consistency_loss(out.prob_a, out.prob_b, pl).backward();
  const double live_a = grad_norm(params, "a.");
  const double live_b = grad_norm(params, "b.");

  return {through_pl == 0.0 && live_a > 0.0 && live_b > 0.0 && control > 0.0,
          fmt("max |grad| through pseudo-labels %.1e, live-path norm a %.3e b %.3e (same functional of the live output %.3e)",
              through_pl, live_a, live_b, control)};
}

Outcome mae_normalization() {
  NetworkConfig net;
  net.base_channels = 2;
  net.num_stages = 3;
  const int c = net.stage_channels(net.num_stages - 1);
  Rng rng(21);
  double worst_sum = 0, worst_sym = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto model = DualBranchModel<double>::create(net, 1000 + static_cast<std::uint64_t>(trial));
    const auto& p = *model.mae;
    const V fa = V::constant(normal_tensor(Shape{2, c, 2, 2, 2}, rng, 3.0));
    const V fb = V::constant(normal_tensor(Shape{2, c, 2, 2, 2}, rng, 3.0));
    const auto w = mae_weights(fa, fb, p);
    for (std::size_t i = 0; i < w.w_a.size(); ++i)
      worst_sum = std::max(worst_sum, std::fabs(w.w_a.value()[i] + w.w_b.value()[i] - 1.0));

    const MAEParams<double> mirrored{p.a, p.a};
    const auto s = mae_weights(fa, fa, mirrored);
    for (std::size_t i = 0; i < s.w_a.size(); ++i)
      worst_sym = std::max({worst_sym, std::fabs(s.w_a.value()[i] - 0.5), std::fabs(s.w_b.value()[i] - 0.5)});
  }
  return {worst_sum <= 1e-6 && worst_sym <= 1e-6,
          fmt("max |W_a + W_b - 1| = %.1e, max |W - 0.5| in the symmetric case = %.1e", worst_sum, worst_sym)};
}

Outcome ablation_reduction() {
  NetworkConfig off;
  off.base_channels = 4;
  off.num_stages = 3;
  off.mmf_enabled = off.mae_enabled = false;
  const auto model = DualBranchModel<double>::create(off, 31);
  Rng rng(32);
  double diff = 0;
  for (int trial = 0; trial < 3; ++trial) {
    const V xa = V::constant(normal_tensor(Shape{1, 1, 8, 8, 8}, rng));
    const V xb = V::constant(normal_tensor(Shape{1, 1, 8, 8, 8}, rng));
    const auto out = forward_dual(model, xa, xb, false);
    const auto ra = reference_branch(model.branch_a, xa, off.num_stages);
    const auto rb = reference_branch(model.branch_b, xb, off.num_stages);
    for (std::size_t i = 0; i < ra.size(); ++i)
      diff = std::max({diff, std::fabs(out.prob_a.value()[i] - ra.value()[i]),
                       std::fabs(out.prob_b.value()[i] - rb.value()[i])});
  }
  auto count = [](bool mmf, bool mae) {
    NetworkConfig c;
    c.base_channels = 8;
    c.mmf_enabled = mmf;
    c.mae_enabled = mae;
    return param_count(DualBranchModel<float>::create(c, 0));
  };
  const auto full = count(true, true), no_mae = count(true, false), no_mmf = count(false, true), none = count(false, false);
  const bool monotone = full > no_mae && full > no_mmf && no_mae > none && no_mmf > none;
  return {diff <= 1e-6 && monotone, fmt("max abs diff %.1e; params full %zu, -MAE %zu, -MMF %zu, neither %zu", diff,
                                        full, no_mae, no_mmf, none)};
}

Outcome metric_oracles() {
  Rng rng(41);
  int dice_mismatch = 0, asd_pairs = 0;
  double asd_err = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const Extent3 e{1 + static_cast<int>(uniform_index(rng, 6)), 1 + static_cast<int>(uniform_index(rng, 6)),
                    1 + static_cast<int>(uniform_index(rng, 6))};
    const auto p = random_mask(e, uniform01(rng), rng);
    const auto g = random_mask(e, uniform01(rng), rng);
    const Spacing s{0.5 + 2 * uniform01(rng), 0.5 + 2 * uniform01(rng), 0.5 + 2 * uniform01(rng)};
    dice_mismatch += dice_score(p, g, 1) != dice_oracle(p, g, 1);
    const auto has = [](const SegMask& m) { return std::find(m.labels.begin(), m.labels.end(), 1) != m.labels.end(); };
    if (has(p) && has(g)) {
      asd_err = std::max(asd_err, std::fabs(asd(p, g, 1, s) - asd_oracle(p, g, 1, s)));
      ++asd_pairs;
    }
  }
  return {dice_mismatch == 0 && asd_err <= 1e-9 && asd_pairs > 0,
          fmt("dice mismatches %d/200, max ASD error %.1e mm over %d pairs", dice_mismatch, asd_err, asd_pairs)};
}

Outcome loss_oracles() {
  Rng rng(51);
  double worst = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 1 + static_cast<int>(uniform_index(rng, 2)), c = 2 + static_cast<int>(uniform_index(rng, 2));
    const auto pa = simplex_tensor(n, c, 4, rng), pb = simplex_tensor(n, c, 4, rng);
    std::vector<std::uint8_t> t(static_cast<std::size_t>(n) * 64);
    for (auto& v : t) v = static_cast<std::uint8_t>(uniform_index(rng, c));
    const std::span<const std::uint8_t> ts(t);
    const V a = V::leaf(pa, true), b = V::leaf(pb, true);
    worst = std::max({worst, std::fabs(ce_loss(a, ts).item() - ce_ref(pa, t)),
                      std::fabs(dice_loss(a, ts, 1e-5).item() - dice_ref(pa, t, 1e-5)),
                      std::fabs(consistency_loss(a, b, make_pseudo_labels(a, b)).item() - consistency_ref(pa, pb))});
  }

  std::vector<std::string> failed;
  auto expect = [&](bool ok, const char* what) {
    if (!ok) failed.emplace_back(what);
  };
  const std::vector<std::uint8_t> t4{0, 1, 1, 0};
  const std::span<const std::uint8_t> s4(t4);
  Tensor<double> onehot(Shape{1, 2, 1, 2, 2});
  for (std::size_t i = 0; i < 4; ++i) onehot.data[t4[i] * 4 + i] = 1.0;
  const V uniform = V::constant(Tensor<double>(Shape{1, 2, 1, 2, 2}, 0.5));
  expect(ce_loss(V::constant(onehot), s4).item() <= 1e-6, "ce one-hot");
  expect(std::fabs(ce_loss(uniform, s4).item() - std::log(2.0)) < 1e-12, "ce uniform = ln 2");
  const std::vector<std::uint8_t> t1{0};
  expect(std::fabs(ce_loss(V::constant(Tensor<double>(Shape{1, 2, 1, 1, 1}, std::vector<double>{0.25, 0.75})),
                           std::span<const std::uint8_t>(t1))
                       .item() -
                   -std::log(0.25)) < 1e-12,
         "ce 0.25");
  expect(dice_loss(V::constant(onehot), s4).item() <= 1e-5, "dice perfect");
  Tensor<double> miss(Shape{1, 2, 1, 2, 2});
  for (std::size_t i = 0; i < 4; ++i) miss.data[(1 - t4[i]) * 4 + i] = 1.0;
  expect(std::fabs(dice_loss(V::constant(miss), s4).item() - 1.0) < 1e-5, "dice total miss");
  const V pa = V::constant(Tensor<double>(Shape{1, 2, 1, 1, 1}, std::vector<double>{0.6, 0.4}));
  const V pb = V::constant(Tensor<double>(Shape{1, 2, 1, 1, 1}, std::vector<double>{0.5, 0.5}));
  expect(std::fabs(consistency_loss(pa, pb, make_pseudo_labels(pa, pb)).item() - 0.01) < 1e-15, "consistency 0.01");
  expect(consistency_loss(pa, pa, make_pseudo_labels(pa, pa)).item() == 0.0, "consistency agreement");
  const auto sup = supervised_loss(V::constant(onehot), uniform, s4);
  const double b_alone = ce_loss(uniform, s4).item() + dice_loss(uniform, s4).item();
  expect(std::fabs(sup.ce_a.item() + sup.ce_b.item() + sup.dice_a.item() + sup.dice_b.item() - b_alone) < 1e-5,
         "supervised composition");

  std::string detail = fmt("max deviation from scalar loops %.1e", worst);
  detail += failed.empty() ? ", hand examples reproduce" : ", failed hand examples:";
  for (const auto& f : failed) detail += " [" + f + "]";
  return {worst <= 1e-9 && failed.empty(), detail};
}

ExperimentConfig overfit_config() {
  ExperimentConfig cfg;
  apply_overrides(cfg, {"synthetic.count=24", "synthetic.seed=7", "synthetic.shape=16", "data.labeled_fraction=0.25",
                        "data.val_count=0", "data.test_count=8", "data.split_seed=7", "data.patch_shape=16",
                        "network.base_channels=8", "network.num_stages=4", "losses.alpha=1", "trainer.max_iters=2000",
                        "trainer.batch_size=4", "trainer.labeled_per_batch=2", "trainer.seed=7",
                        "trainer.mcml_enabled=true"});
  return cfg;
}

struct RunResult {
  double dsc = 0, asd = 0, seconds = 0;
};

RunResult train_and_test(const ExperimentConfig& cfg, const DatasetSplit& split) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto result = train(cfg, split);
  const auto ev = evaluate(result.final_state.model, split.test, cfg.data.patch_shape);
  return {ev.fused.dsc_mean, ev.fused.asd_mean,
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
}

// criterion 7's run doubles as the first full-configuration seed of criterion 8
std::optional<RunResult> g_overfit;

Outcome synthetic_overfit() {
  const auto cfg = overfit_config();
  const auto t0 = std::chrono::steady_clock::now();
  const auto split = prepare_split(cfg);
  const bool shape_ok = split.labeled.size() == 4 && split.unlabeled.size() == 12 && split.test.size() == 8;
  auto r = train_and_test(cfg, split);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  g_overfit = r;
  return {shape_ok && r.dsc >= 0.85 && r.asd <= 1.5 && r.seconds <= 900.0,
          fmt("split %zu/%zu/%zu, test DSC %.4f, ASD %.4f, %.0f s", split.labeled.size(), split.unlabeled.size(),
              split.test.size(), r.dsc, r.asd, r.seconds)};
}

Outcome semi_supervised_benefit() {
  const auto base = overfit_config();
  const auto split = prepare_split(base);
  const std::uint64_t seeds[3] = {7, 8, 9};
  double full = 0, no_mcml = 0, no_mmf = 0;
  std::ostringstream per_seed;
  for (auto seed : seeds) {
    auto cfg = base;
    cfg.trainer.seed = seed;
    const RunResult f = seed == 7 && g_overfit ? *g_overfit : train_and_test(cfg, split);
    cfg.trainer.mcml_enabled = false;
    const RunResult a = train_and_test(cfg, split);
    cfg.trainer.mcml_enabled = true;
    cfg.network.mmf_enabled = false;
    const RunResult b = train_and_test(cfg, split);
    full += f.dsc / 3;
    no_mcml += a.dsc / 3;
    no_mmf += b.dsc / 3;
    per_seed << fmt(" [seed %llu: %.4f/%.4f/%.4f]", static_cast<unsigned long long>(seed), f.dsc, a.dsc, b.dsc);
    std::fprintf(stderr, "  criterion 8 seed %llu: full %.4f, mcml off %.4f, mmf off %.4f\n",
                 static_cast<unsigned long long>(seed), f.dsc, a.dsc, b.dsc);
  }
  return {full > no_mcml && full > no_mmf,
          fmt("mean test DSC full %.4f, mcml off %.4f, mmf off %.4f;", full, no_mcml, no_mmf) + per_seed.str()};
}

Outcome determinism() {
  auto cfg = overfit_config();
  cfg.trainer.max_iters = 20;
  const auto t0 = std::chrono::steady_clock::now();
  const auto split = prepare_split(cfg);
  auto first_ten = [&] {
    auto state = TrainerState::create(cfg);
    std::vector<std::string> log;
    for (int i = 0; i < 10; ++i) log.push_back(log_csv_row(train_step(state, next_batch(state, split))));
    return std::pair{log, std::move(state)};
  };
  auto [log1, state1] = first_ten();
  auto [log2, state2] = first_ten();
  const bool same_logs = log1 == log2;

  const std::string path = "dualmod_acceptance_roundtrip.ckpt";
  save_checkpoint(path, state1);
  auto resumed = load_checkpoint(path);
  std::remove(path.c_str());
  std::vector<std::string> cont1, cont2;
  for (int i = 0; i < 5; ++i) {
    cont1.push_back(log_csv_row(train_step(state2, next_batch(state2, split))));
    cont2.push_back(log_csv_row(train_step(resumed, next_batch(resumed, split))));
  }
  bool same_params = true;
  const auto pa = state2.model.parameters(), pb = resumed.model.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i)
    same_params &= std::equal(pa[i].var.value().begin(), pa[i].var.value().end(), pb[i].var.value().begin());
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {same_logs && cont1 == cont2 && same_params && secs < 120.0,
          fmt("first 10 log rows %s, 5 steps after checkpoint round trip %s, parameters %s, %.1f s",
              same_logs ? "identical" : "differ", cont1 == cont2 ? "identical" : "differ",
              same_params ? "identical" : "differ", secs)};
}

std::vector<ModalitySample> placeholder_samples(int n) {
  std::vector<ModalitySample> out;
  for (int i = 0; i < n; ++i) {
    ModalitySample s;
    s.id = "p" + std::to_string(i);
    s.vol_a = Volume({1, 1, 1}, {1, 1, 1});
    s.vol_b = Volume({1, 1, 1}, {1, 1, 1});
    s.mask = SegMask({1, 1, 1}, 2);
    out.push_back(std::move(s));
  }
  return out;
}

Outcome split_arithmetic() {
  const auto a = make_split(placeholder_samples(250), 0.05, 7);
  const auto b = make_split(placeholder_samples(250), 0.05, 7);
  auto ids = [](const std::vector<ModalitySample>& v) {
    std::vector<std::string> out;
    for (const auto& s : v) out.push_back(s.id);
    return out;
  };
  const bool counts = a.labeled.size() == 12 && a.unlabeled.size() == 238;
  const bool same = ids(a.labeled) == ids(b.labeled) && ids(a.unlabeled) == ids(b.unlabeled);
  return {counts && same, fmt("%zu labeled / %zu unlabeled, repeat split %s", a.labeled.size(), a.unlabeled.size(),
                              same ? "identical" : "differs")};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      for (std::string tok; std::getline(ss, tok, ',');) only.insert(std::stoi(tok));
    } else {
      std::fprintf(stderr, "usage: %s [--only N[,N...]]\n", argv[0]);
      return 2;
    }
  }

  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"gradient check", gradient_check},
      {"stop-gradient", stop_gradient},
      {"MAE normalization", mae_normalization},
      {"ablation reduction", ablation_reduction},
      {"metric oracles", metric_oracles},
      {"loss oracles", loss_oracles},
      {"synthetic overfit", synthetic_overfit},
      {"semi-supervised benefit", semi_supervised_benefit},
      {"determinism", determinism},
      {"split arithmetic", split_arithmetic},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(n)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("criterion %d (%s): %s - %s\n", n, criteria[i].first, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
