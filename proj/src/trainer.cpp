#include "dualmod/trainer.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "dualmod/error.hpp"
#include "dualmod/preprocess.hpp"

namespace dualmod {

namespace {

struct StackedInput {
  ag::Var<float> x_a, x_b;
  std::vector<std::uint8_t> labels;
};

StackedInput stack(const std::vector<ModalitySample>& samples, bool with_labels) {
  const Extent3 e = samples.front().extent();
  const int n = static_cast<int>(samples.size());
  Tensor<float> a(Shape{n, 1, e.d, e.h, e.w}), b(Shape{n, 1, e.d, e.h, e.w});
  StackedInput out;
  for (int i = 0; i < n; ++i) {
    const auto& s = samples[static_cast<std::size_t>(i)];
    if (!(s.extent() == e)) throw DataError("batch samples differ in extent");
    std::copy(s.vol_a.voxels.begin(), s.vol_a.voxels.end(), a.data.begin() + static_cast<long>(i * e.numel()));
    std::copy(s.vol_b.voxels.begin(), s.vol_b.voxels.end(), b.data.begin() + static_cast<long>(i * e.numel()));
    if (with_labels) {
      if (!s.mask) throw DataError("labeled batch sample " + s.id + " has no mask");
      out.labels.insert(out.labels.end(), s.mask->labels.begin(), s.mask->labels.end());
    }
  }
  out.x_a = ag::Var<float>::constant(std::move(a));
  out.x_b = ag::Var<float>::constant(std::move(b));
  return out;
}

std::string format_g(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<int> window_starts(int extent, int patch) {
  if (extent <= patch) return {0};
  const int stride = std::max(1, patch / 2);
  std::vector<int> starts;
  for (int s = 0; s + patch < extent; s += stride) starts.push_back(s);
  starts.push_back(extent - patch);
  return starts;
}

// ---- binary helpers for checkpoints ----

template <typename V>
void write_pod(std::ostream& out, V v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void write_string(std::ostream& out, const std::string& s) {
  write_pod<std::uint64_t>(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <typename V>
V read_pod(std::istream& in, const std::string& path) {
  V v;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw DataError(path + ": truncated checkpoint");
  return v;
}

std::string read_string(std::istream& in, const std::string& path) {
  const auto n = read_pod<std::uint64_t>(in, path);
  if (n > (1u << 26)) throw DataError(path + ": corrupt checkpoint string");
  std::string s(n, '\0');
  if (!in.read(s.data(), static_cast<std::streamsize>(n))) throw DataError(path + ": truncated checkpoint");
  return s;
}

constexpr char kCheckpointMagic[8] = {'D', 'M', 'C', 'K', 'P', 'T', 0, 0};

}  // namespace

double lr_schedule(long it, const TrainConfig& cfg) {
  if (it < 0 || it >= cfg.max_iters)
    throw ConfigError("lr_schedule: iteration " + std::to_string(it) + " outside [0, max_iters)");
  return cfg.lr_initial *
         std::pow(1.0 - static_cast<double>(it) / static_cast<double>(cfg.max_iters), cfg.lr_power);
}

TrainerState TrainerState::create(const ExperimentConfig& cfg) {
  cfg.validate();
  TrainerState s;
  s.config = cfg;
  s.model = DualBranchModel<float>::create(cfg.network, cfg.trainer.seed);
  for (const auto& p : s.model.parameters()) s.velocity.emplace_back(p.var.size(), 0.0f);
  s.batch_rng.seed(mix_seed({cfg.trainer.seed, 0xba7c}));
  return s;
}

Batch next_batch(TrainerState& state, const DatasetSplit& split) {
  const auto& t = state.config.trainer;
  const PatchSpec patch{state.config.data.patch_shape};
  const int unlabeled = split.unlabeled.empty() ? 0 : t.batch_size - t.labeled_per_batch;
  return compose_batch(split, t.labeled_per_batch + unlabeled, t.labeled_per_batch, state.batch_rng, &patch);
}

StepRecord train_step(TrainerState& state, const Batch& batch) {
  const auto& cfg = state.config;
  if (batch.labeled_samples.empty()) throw DataError("train_step: batch has no labeled samples");
  const long it = state.iteration;
  StepRecord rec;
  rec.iteration = it;
  rec.lr = lr_schedule(it, cfg.trainer);
  const double alpha = alpha_at(it, cfg.losses.alpha, cfg.losses.alpha_rampup_iters);
  const std::uint64_t dropout_seed = mix_seed({cfg.trainer.seed, static_cast<std::uint64_t>(it), 0xd7});

  const auto lab = stack(batch.labeled_samples, true);
  const auto out_l = forward_dual(state.model, lab.x_a, lab.x_b, true, mix_seed({dropout_seed, 0}));
  const auto sup = supervised_loss(out_l.prob_a, out_l.prob_b, lab.labels, cfg.losses.dice_epsilon);

  ag::Var<float> cons;
  if (cfg.trainer.mcml_enabled && !batch.unlabeled_samples.empty()) {
    const auto unl = stack(batch.unlabeled_samples, false);
    const auto out_u = forward_dual(state.model, unl.x_a, unl.x_b, true, mix_seed({dropout_seed, 1}));
    cons = consistency_loss(out_u.prob_a, out_u.prob_b, make_pseudo_labels(out_u.prob_a, out_u.prob_b));
  }
  const auto graph = total_loss(sup, cons, alpha);
  rec.loss = graph.values();
  if (!rec.loss.finite()) {
    std::ostringstream msg;
    msg << "non-finite loss at iteration " << it << ": " << log_json_row(rec);
    throw NumericError(msg.str());
  }

  auto params = state.model.parameters();
  for (auto& p : params) p.var.zero_grad();
  graph.total.backward();

  const auto lr = static_cast<float>(rec.lr);
  const auto mu = static_cast<float>(cfg.trainer.momentum);
  const auto wd = static_cast<float>(cfg.trainer.weight_decay);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].var.mutable_value();
    const auto g = params[i].var.grad();
    auto& v = state.velocity[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      v[j] = mu * v[j] + (g[j] + wd * w[j]);
      w[j] -= lr * v[j];
    }
  }
  ++state.iteration;
  return rec;
}

PreprocessConfig preprocess_config(const DataConfig& data) {
  PreprocessConfig pre;
  pre.normalize = data.normalize;
  pre.ct_window = {data.ct_window_level, data.ct_window_width};
  pre.crop = data.crop_nonzero;
  return pre;
}

DatasetSplit prepare_split(const ExperimentConfig& cfg) {
  std::vector<ModalitySample> samples;
  if (cfg.data.manifest.empty())
    samples = generate_dataset(cfg.synthetic.count, cfg.synthetic.seed, cfg.synthetic.spec);
  else
    samples = load_manifest(cfg.data.manifest, cfg.network.num_classes);
  const auto pre = preprocess_config(cfg.data);
  for (auto& s : samples) {
    s = preprocess(s, pre);
    if (s.mask && s.mask->num_classes != cfg.network.num_classes)
      throw ConfigError("sample " + s.id + " has " + std::to_string(s.mask->num_classes) +
                        " classes but network.num_classes is " + std::to_string(cfg.network.num_classes));
  }
  return make_split(std::move(samples), cfg.data.labeled_fraction, cfg.data.split_seed,
                    {static_cast<std::size_t>(cfg.data.val_count), static_cast<std::size_t>(cfg.data.test_count)});
}

// ---- inference ----

BranchProbabilities predict_volume(const DualBranchModel<float>& model, const ModalitySample& sample,
                                   const Extent3& patch) {
  ag::NoGradGuard no_grad;
  const int classes = model.config().num_classes;
  const Extent3 orig = sample.extent();
  ModalitySample src = pad_to(sample, patch);
  src.mask.reset();
  const Extent3 e = src.extent();
  const std::size_t vox = e.numel();
  std::vector<double> acc_a(classes * vox, 0.0), acc_b(classes * vox, 0.0);
  std::vector<int> hits(vox, 0);
  for (int z : window_starts(e.d, patch.d))
    for (int y : window_starts(e.h, patch.h))
      for (int x : window_starts(e.w, patch.w)) {
        const auto win = extract_box(src, {z, y, x}, patch);
        const auto in = stack({win}, false);
        const auto out = forward_dual(model, in.x_a, in.x_b, false);
        const auto pa = out.prob_a.value(), pb = out.prob_b.value();
        for (int c = 0; c < classes; ++c)
          for (int dz = 0; dz < patch.d; ++dz)
            for (int dy = 0; dy < patch.h; ++dy)
              for (int dx = 0; dx < patch.w; ++dx) {
                const std::size_t dst = c * vox + e.index(z + dz, y + dy, x + dx);
                const std::size_t from = c * patch.numel() + patch.index(dz, dy, dx);
                acc_a[dst] += pa[from];
                acc_b[dst] += pb[from];
              }
        for (int dz = 0; dz < patch.d; ++dz)
          for (int dy = 0; dy < patch.h; ++dy)
            for (int dx = 0; dx < patch.w; ++dx) ++hits[e.index(z + dz, y + dy, x + dx)];
      }
  BranchProbabilities out;
  out.prob_a.resize(classes * orig.numel());
  out.prob_b.resize(classes * orig.numel());
  for (int c = 0; c < classes; ++c)
    for (int z = 0; z < orig.d; ++z)
      for (int y = 0; y < orig.h; ++y)
        for (int x = 0; x < orig.w; ++x) {
          const std::size_t i = e.index(z, y, x);
          const std::size_t o = c * orig.numel() + orig.index(z, y, x);
          out.prob_a[o] = static_cast<float>(acc_a[c * vox + i] / hits[i]);
          out.prob_b[o] = static_cast<float>(acc_b[c * vox + i] / hits[i]);
        }
  return out;
}

SegMask argmax_mask(const std::vector<float>& probs, const Extent3& extent, int num_classes) {
  const std::size_t vox = extent.numel();
  if (probs.size() != vox * static_cast<std::size_t>(num_classes)) throw DataError("argmax_mask: size mismatch");
  SegMask m(extent, num_classes);
  for (std::size_t v = 0; v < vox; ++v) {
    int best = 0;
    for (int c = 1; c < num_classes; ++c)
      if (probs[c * vox + v] > probs[best * vox + v]) best = c;
    m.labels[v] = static_cast<std::uint8_t>(best);
  }
  return m;
}

int worker_threads() {
  if (const char* env = std::getenv("DUALMOD_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

Evaluation evaluate(const DualBranchModel<float>& model, const std::vector<ModalitySample>& samples,
                    const Extent3& patch) {
  const int classes = model.config().num_classes;
  const std::size_t n = samples.size();
  std::vector<LabeledMask> refs(n), fused(n), only_a(n), only_b(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!samples[i].mask) throw DataError("evaluate: sample " + samples[i].id + " has no mask");
    refs[i] = {samples[i].id, *samples[i].mask, samples[i].vol_a.spacing};
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        const auto& s = samples[i];
        const auto probs = predict_volume(model, s, patch);
        std::vector<float> avg(probs.prob_a.size());
        for (std::size_t j = 0; j < avg.size(); ++j) avg[j] = 0.5f * (probs.prob_a[j] + probs.prob_b[j]);
        fused[i] = {s.id, argmax_mask(avg, s.extent(), classes), s.vol_a.spacing};
        only_a[i] = {s.id, argmax_mask(probs.prob_a, s.extent(), classes), s.vol_a.spacing};
        only_b[i] = {s.id, argmax_mask(probs.prob_b, s.extent(), classes), s.vol_a.spacing};
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const auto threads = static_cast<std::size_t>(std::min<long>(worker_threads(), static_cast<long>(n)));
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);
  return {evaluate_dataset(fused, refs), evaluate_dataset(only_a, refs), evaluate_dataset(only_b, refs)};
}

// ---- checkpoints ----

void save_checkpoint(const std::string& path, const TrainerState& state) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write checkpoint " + path);
    out.write(kCheckpointMagic, sizeof kCheckpointMagic);
    write_pod<std::uint32_t>(out, kCheckpointVersion);
    write_pod<std::uint64_t>(out, state.config.hash());
    write_pod<std::int64_t>(out, state.iteration);
    write_pod<double>(out, state.best_val_dsc);
    write_pod<std::int64_t>(out, state.best_iteration);
    write_string(out, state.config.to_text());
    std::ostringstream rng;
    rng << state.batch_rng;
    write_string(out, rng.str());
    const auto params = state.model.parameters();
    write_pod<std::uint64_t>(out, params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      write_string(out, params[i].name);
      const auto v = params[i].var.value();
      write_pod<std::uint64_t>(out, v.size());
      out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
      out.write(reinterpret_cast<const char*>(state.velocity[i].data()),
                static_cast<std::streamsize>(v.size() * sizeof(float)));
    }
    if (!out) throw Error("failed writing checkpoint " + path);
  }
  std::filesystem::rename(tmp, path);
}

TrainerState load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path);
  char magic[sizeof kCheckpointMagic];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
    throw DataError(path + ": not a checkpoint");
  const auto version = read_pod<std::uint32_t>(in, path);
  if (version != kCheckpointVersion) throw DataError(path + ": unsupported checkpoint version " + std::to_string(version));
  const auto hash = read_pod<std::uint64_t>(in, path);
  const auto iteration = read_pod<std::int64_t>(in, path);
  const auto best_dsc = read_pod<double>(in, path);
  const auto best_iter = read_pod<std::int64_t>(in, path);
  const auto config = parse_config(read_string(in, path), path);
  if (config.hash() != hash) throw DataError(path + ": config hash mismatch");
  TrainerState state = TrainerState::create(config);
  state.iteration = iteration;
  state.best_val_dsc = best_dsc;
  state.best_iteration = best_iter;
  std::istringstream rng(read_string(in, path));
  rng >> state.batch_rng;
  if (!rng) throw DataError(path + ": corrupt rng state");
  auto params = state.model.parameters();
  if (read_pod<std::uint64_t>(in, path) != params.size()) throw DataError(path + ": parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (read_string(in, path) != params[i].name) throw DataError(path + ": parameter order mismatch");
    auto w = params[i].var.mutable_value();
    if (read_pod<std::uint64_t>(in, path) != w.size()) throw DataError(path + ": parameter size mismatch");
    if (!in.read(reinterpret_cast<char*>(w.data()), static_cast<std::streamsize>(w.size() * sizeof(float))) ||
        !in.read(reinterpret_cast<char*>(state.velocity[i].data()),
                 static_cast<std::streamsize>(w.size() * sizeof(float))))
      throw DataError(path + ": truncated checkpoint");
  }
  return state;
}

// ---- training driver ----

std::string log_csv_row(const StepRecord& r) {
  const auto& l = r.loss;
  return std::to_string(r.iteration) + "," + format_g(r.lr) + "," + format_g(l.ce_a) + "," + format_g(l.ce_b) + "," +
         format_g(l.dice_a) + "," + format_g(l.dice_b) + "," + format_g(l.consistency) + "," + format_g(l.total);
}

std::string log_json_row(const StepRecord& r) {
  const auto& l = r.loss;
  nlohmann::ordered_json j = {{"iter", r.iteration},  {"lr", r.lr},         {"ce_a", l.ce_a},
                              {"ce_b", l.ce_b},       {"dice_a", l.dice_a}, {"dice_b", l.dice_b},
                              {"consistency", l.consistency}, {"total", l.total}};
  return j.dump();
}

TrainResult train(TrainerState state, const DatasetSplit& split, const TrainOptions& options) {
  namespace fs = std::filesystem;
  const auto& cfg = state.config;
  const auto& t = cfg.trainer;
  std::ofstream csv, jsonl, val_csv;
  const bool write = !options.out_dir.empty();
  const auto path = [&](const std::string& name) { return (fs::path(options.out_dir) / name).string(); };
  if (write) {
    fs::create_directories(options.out_dir);
    const auto mode = state.iteration > 0 ? std::ios::app : std::ios::trunc;
    csv.open(path("log.csv"), mode);
    jsonl.open(path("log.jsonl"), mode);
    val_csv.open(path("validation.csv"), mode);
    if (!csv || !jsonl || !val_csv) throw Error("cannot write logs under " + options.out_dir);
    if (state.iteration == 0) {
      csv << kLogHeader << '\n';
      val_csv << "iter,dsc,asd_mm\n";
    }
  }

  TrainResult result;
  while (state.iteration < t.max_iters) {
    const Batch batch = next_batch(state, split);
    const StepRecord rec = train_step(state, batch);
    result.log.push_back(rec);
    if (write) {
      csv << log_csv_row(rec) << '\n' << std::flush;
      jsonl << log_json_row(rec) << '\n' << std::flush;
    }
    if (options.on_step) options.on_step(rec);

    const long done = state.iteration;
    const bool last = done == t.max_iters;
    if (!split.val.empty() && (last || (t.eval_every > 0 && done % t.eval_every == 0))) {
      const auto ev = evaluate(state.model, split.val, cfg.data.patch_shape);
      const ValidationRecord vr{done, ev.fused.dsc_mean, ev.fused.asd_mean};
      result.validation.push_back(vr);
      if (write) val_csv << vr.iteration << ',' << format_g(vr.dsc) << ',' << format_g(vr.asd) << '\n' << std::flush;
      if (options.on_validation) options.on_validation(vr);
      if (vr.dsc > state.best_val_dsc) {
        state.best_val_dsc = vr.dsc;
        state.best_iteration = done;
        TrainerState snapshot = state;
        snapshot.model = state.model.clone();
        result.best_state = std::move(snapshot);
        if (write) save_checkpoint(path("best.ckpt"), *result.best_state);
      }
    }
    if (write && t.checkpoint_every > 0 && done % t.checkpoint_every == 0 && !last)
      save_checkpoint(path("iter_" + std::to_string(done) + ".ckpt"), state);
  }
  if (write) save_checkpoint(path("latest.ckpt"), state);
  result.final_state = std::move(state);
  return result;
}

TrainResult train(const ExperimentConfig& cfg, const DatasetSplit& split, const TrainOptions& options) {
  return train(TrainerState::create(cfg), split, options);
}

// ---- ablation ----

std::vector<AblationRow> ablation_rows() {
  return {{"baseline", false, false, false, 0, {}, {}},
          {"+MMF", true, false, false, 0, {}, {}},
          {"+MMF+MAE", true, true, false, 0, {}, {}},
          {"+MMF+MCML", true, false, true, 0, {}, {}},
          {"+MMF+MAE+MCML", true, true, true, 0, {}, {}}};
}

std::vector<AblationRow> run_ablation(const ExperimentConfig& base, const DatasetSplit& split,
                                      const std::function<void(const AblationRow&)>& on_row) {
  auto rows = ablation_rows();
  for (auto& row : rows) {
    ExperimentConfig cfg = base;
    cfg.network.mmf_enabled = row.mmf;
    cfg.network.mae_enabled = row.mae;
    cfg.trainer.mcml_enabled = row.mcml;
    try {
      auto result = train(cfg, split);
      row.params = param_count(result.final_state.model);
      row.eval = evaluate(result.final_state.model, split.test, cfg.data.patch_shape);
    } catch (const std::exception& e) {
      row.error = e.what();
    }
    if (on_row) on_row(row);
  }
  return rows;
}

void write_ablation_csv(const std::string& path, const std::vector<AblationRow>& rows) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << "row,mmf,mae,mcml,params,dsc_a_mean,dsc_a_std,dsc_b_mean,dsc_b_std,asd_a_mean,asd_a_std,asd_b_mean,"
         "asd_b_std,dsc_fused_mean,dsc_fused_std,error\n";
  for (const auto& r : rows) {
    const auto& a = r.eval.branch_a;
    const auto& b = r.eval.branch_b;
    out << r.name << ',' << r.mmf << ',' << r.mae << ',' << r.mcml << ',' << r.params << ',' << format_g(a.dsc_mean)
        << ',' << format_g(a.dsc_std) << ',' << format_g(b.dsc_mean) << ',' << format_g(b.dsc_std) << ','
        << format_g(a.asd_mean) << ',' << format_g(a.asd_std) << ',' << format_g(b.asd_mean) << ','
        << format_g(b.asd_std) << ',' << format_g(r.eval.fused.dsc_mean) << ',' << format_g(r.eval.fused.dsc_std)
        << ',' << '"' << r.error << '"' << '\n';
  }
  if (!out) throw Error("failed writing " + path);
}

std::string format_ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof line, "%-15s %4s %4s %5s %9s  %-15s %-15s %-15s %-15s\n", "row", "MMF", "MAE", "MCML",
                "params", "DSC a (%)", "DSC b (%)", "ASD a (mm)", "ASD b (mm)");
  out << line;
  auto pm = [](double m, double s, double scale) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.2f+-%.2f", m * scale, s * scale);
    return std::string(buf);
  };
  for (const auto& r : rows) {
    if (!r.error.empty()) {
      std::snprintf(line, sizeof line, "%-15s failed: %s\n", r.name.c_str(), r.error.c_str());
      out << line;
      continue;
    }
    const auto& a = r.eval.branch_a;
    const auto& b = r.eval.branch_b;
    std::snprintf(line, sizeof line, "%-15s %4s %4s %5s %9zu  %-15s %-15s %-15s %-15s\n", r.name.c_str(),
                  r.mmf ? "x" : "", r.mae ? "x" : "", r.mcml ? "x" : "", r.params,
                  pm(a.dsc_mean, a.dsc_std, 100).c_str(), pm(b.dsc_mean, b.dsc_std, 100).c_str(),
                  pm(a.asd_mean, a.asd_std, 1).c_str(), pm(b.asd_mean, b.asd_std, 1).c_str());
    out << line;
  }
  return out.str();
}

}  // namespace dualmod
