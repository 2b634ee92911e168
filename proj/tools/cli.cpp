#include "cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "dualmod/gradcheck.hpp"
#include "dualmod/plot.hpp"
#include "dualmod/preprocess.hpp"
#include "dualmod/synthetic.hpp"
#include "dualmod/trainer.hpp"
#include "dualmod/volume_io.hpp"

namespace dualmod::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir = "out";
  std::string command_line;
};

ExperimentConfig resolve_config(const Common& c) {
  ExperimentConfig cfg = c.config_path.empty() ? ExperimentConfig{} : load_config(c.config_path);
  apply_overrides(cfg, c.overrides);
  cfg.validate();
  return cfg;
}

std::string out_path(const Common& c, const std::string& name) { return (fs::path(c.out_dir) / name).string(); }

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
  if (!out) throw Error("cannot write " + path);
}

std::string hex(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// config.cfg re-parses to the same config; bundle.json records everything
// else a rerun depends on.
void write_bundle(const Common& c, const ExperimentConfig& cfg, const std::string& command) {
  fs::create_directories(c.out_dir);
  write_text(out_path(c, "config.cfg"), cfg.to_text());
  json b;
  b["command"] = command;
  b["argv"] = c.command_line;
  b["config_hash"] = hex(cfg.hash());
  b["seeds"] = {{"trainer", cfg.trainer.seed},
                {"synthetic", cfg.synthetic.seed},
                {"split", cfg.data.split_seed},
                {"check_grad", cfg.check_grad.seed}};
  b["formats"] = {{"checkpoint", kCheckpointVersion}, {"log_columns", kLogHeader}, {"metrics_csv", "id,dsc,asd_mm"}};
  b["precision"] = {{"training", "float32"}, {"check_grad", "float64"}};
  b["threads"] = worker_threads();
  write_text(out_path(c, "bundle.json"), b.dump(2) + "\n");
}

json metrics_json(const MetricsReport& r) {
  json j;
  j["dsc_mean"] = r.dsc_mean;
  j["dsc_std"] = r.dsc_std;
  j["asd_mean"] = r.asd_mean;
  j["asd_std"] = r.asd_std;
  j["asd_undefined"] = r.asd_undefined;
  json per = json::array();
  for (const auto& s : r.per_sample) {
    json row{{"id", s.id}, {"dsc", s.dsc}};
    row["asd_mm"] = s.asd_mm ? json(*s.asd_mm) : json(nullptr);
    per.push_back(row);
  }
  j["samples"] = per;
  return j;
}

void write_evaluation(const Common& c, const std::string& stem, const Evaluation& ev) {
  write_metrics_csv(out_path(c, stem + ".csv"), ev.fused);
  write_metrics_csv(out_path(c, stem + "_a.csv"), ev.branch_a);
  write_metrics_csv(out_path(c, stem + "_b.csv"), ev.branch_b);
  json j{{"fused", metrics_json(ev.fused)}, {"branch_a", metrics_json(ev.branch_a)},
         {"branch_b", metrics_json(ev.branch_b)}};
  write_text(out_path(c, stem + ".json"), j.dump(2) + "\n");
  std::cout << "fused    " << ev.fused.summary() << '\n'
            << "branch a " << ev.branch_a.summary() << '\n'
            << "branch b " << ev.branch_b.summary() << '\n';
}

void write_curves(const Common& c, const TrainResult& r) {
  Series total{{}, {}, {200, 40, 40}}, sup{{}, {}, {40, 90, 200}}, cons{{}, {}, {40, 160, 60}};
  for (const auto& s : r.log) {
    const double it = static_cast<double>(s.iteration);
    total.x.push_back(it);
    total.y.push_back(s.loss.total);
    sup.x.push_back(it);
    sup.y.push_back(s.loss.supervised());
    cons.x.push_back(it);
    cons.y.push_back(s.loss.consistency);
  }
  write_line_plot(out_path(c, "loss_curve.png"), {total, sup, cons});
  if (r.validation.size() >= 2) {
    Series dsc{{}, {}, {120, 40, 160}};
    for (const auto& v : r.validation) {
      dsc.x.push_back(static_cast<double>(v.iteration));
      dsc.y.push_back(v.dsc);
    }
    write_line_plot(out_path(c, "val_dsc.png"), {dsc});
  }
}

int cmd_train(const Common& c, const std::string& resume) {
  TrainResult result;
  ExperimentConfig cfg;
  TrainOptions opt;
  opt.out_dir = c.out_dir;
  const long every = 100;
  opt.on_step = [&](const StepRecord& r) {
    if (r.iteration % every == 0 || r.iteration + 1 == cfg.trainer.max_iters)
      std::fprintf(stderr, "iter %6ld  lr %.3e  total %.5f  sup %.5f  cons %.5f\n", r.iteration, r.lr, r.loss.total,
                   r.loss.supervised(), r.loss.consistency);
  };
  opt.on_validation = [](const ValidationRecord& v) {
    std::fprintf(stderr, "validation @%ld  dsc %.4f  asd %.4f\n", v.iteration, v.dsc, v.asd);
  };
  if (resume.empty()) {
    cfg = resolve_config(c);
    write_bundle(c, cfg, "train");
    const auto split = prepare_split(cfg);
    result = train(cfg, split, opt);
    write_curves(c, result);
    write_evaluation(c, "metrics_test", evaluate(result.final_state.model, split.test, cfg.data.patch_shape));
  } else {
    auto state = load_checkpoint(resume);
    if (!c.overrides.empty()) {
      // only the iteration budget may change on resume
      for (const auto& o : c.overrides)
        if (o.rfind("trainer.max_iters=", 0) != 0) throw ConfigError("--resume accepts only trainer.max_iters overrides");
      apply_overrides(state.config, c.overrides);
      state.config.validate();
    }
    cfg = state.config;
    write_bundle(c, cfg, "train --resume");
    const auto split = prepare_split(cfg);
    result = train(std::move(state), split, opt);
    write_curves(c, result);
    write_evaluation(c, "metrics_test", evaluate(result.final_state.model, split.test, cfg.data.patch_shape));
  }
  return kOk;
}

int cmd_eval(const Common& c, const std::string& checkpoint, const std::string& manifest) {
  const auto state = load_checkpoint(checkpoint);
  ExperimentConfig cfg = state.config;
  fs::create_directories(c.out_dir);
  std::vector<ModalitySample> samples;
  if (manifest.empty()) {
    samples = prepare_split(cfg).test;
  } else {
    const auto pp = preprocess_config(cfg.data);
    for (const auto& s : load_manifest(manifest, cfg.network.num_classes)) {
      if (!s.labeled()) throw DataError("eval: sample " + s.id + " has no mask");
      samples.push_back(preprocess(s, pp));
    }
  }
  write_evaluation(c, "metrics", evaluate(state.model, samples, cfg.data.patch_shape));
  return kOk;
}

int cmd_ablate(const Common& c) {
  const auto cfg = resolve_config(c);
  write_bundle(c, cfg, "ablate");
  const auto split = prepare_split(cfg);
  const auto rows = run_ablation(cfg, split, [](const AblationRow& r) {
    if (r.error.empty())
      std::fprintf(stderr, "%-16s dsc %.4f  asd %.4f\n", r.name.c_str(), r.eval.fused.dsc_mean, r.eval.fused.asd_mean);
    else
      std::fprintf(stderr, "%-16s failed: %s\n", r.name.c_str(), r.error.c_str());
  });
  write_ablation_csv(out_path(c, "ablation.csv"), rows);
  const auto table = format_ablation_table(rows);
  write_text(out_path(c, "ablation.txt"), table);
  std::cout << table;
  for (const auto& r : rows)
    if (!r.error.empty()) return kRuntimeError;
  return kOk;
}

int cmd_synth(const Common& c) {
  const auto cfg = resolve_config(c);
  write_bundle(c, cfg, "synth");
  const auto samples = generate_dataset(cfg.synthetic.count, cfg.synthetic.seed, cfg.synthetic.spec);
  std::vector<ManifestEntry> entries;
  for (const auto& s : samples) {
    ManifestEntry e{s.id, s.id + "_a.raw", s.id + "_b.raw", s.id + "_mask.raw"};
    write_raw_volume(out_path(c, e.path_a), s.vol_a);
    write_raw_volume(out_path(c, e.path_b), s.vol_b);
    write_raw_mask(out_path(c, e.path_mask), *s.mask);
    entries.push_back(e);
  }
  write_manifest(out_path(c, "manifest.tsv"), entries);
  std::cout << "wrote " << entries.size() << " samples to " << out_path(c, "manifest.tsv") << '\n';
  return kOk;
}

int cmd_check_grad(const Common& c) {
  const auto cfg = resolve_config(c);
  write_bundle(c, cfg, "check-grad");
  const auto report = check_grad(cfg);
  const auto text = report.format();
  write_text(out_path(c, "check_grad.txt"), text);
  std::cout << text;
  return report.passed() ? kOk : kGradCheckFailed;
}

void add_common(CLI::App* sub, Common& c, bool with_config) {
  if (with_config) {
    sub->add_option("--config", c.config_path, "INI config file")->check(CLI::ExistingFile);
    sub->add_option("--set", c.overrides, "section.key=value override, repeatable");
  }
  sub->add_option("--out", c.out_dir, "output directory")->capture_default_str();
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"dual-branch multi-modal semi-supervised segmentation"};
  app.require_subcommand(1);
  Common common;
  for (int i = 0; i < argc; ++i) common.command_line += (i ? " " : "") + std::string(argv[i]);

  auto* train_cmd = app.add_subcommand("train", "train on the configured data and evaluate on its test split");
  add_common(train_cmd, common, true);
  std::string resume;
  train_cmd->add_option("--resume", resume, "continue from a checkpoint")->check(CLI::ExistingFile);

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval_cmd, common, false);
  std::string checkpoint, manifest;
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--manifest", manifest, "labeled manifest; default: the checkpoint config's test split")
      ->check(CLI::ExistingFile);

  auto* ablate_cmd = app.add_subcommand("ablate", "train and evaluate the five ablation rows");
  add_common(ablate_cmd, common, true);
  auto* synth_cmd = app.add_subcommand("synth", "write a synthetic dataset and manifest");
  add_common(synth_cmd, common, true);
  auto* grad_cmd = app.add_subcommand("check-grad", "compare backprop with finite differences");
  add_common(grad_cmd, common, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigError;
  }

  try {
    if (*train_cmd) return cmd_train(common, resume);
    if (*eval_cmd) return cmd_eval(common, checkpoint, manifest);
    if (*ablate_cmd) return cmd_ablate(common);
    if (*synth_cmd) return cmd_synth(common);
    if (*grad_cmd) return cmd_check_grad(common);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kRuntimeError;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kRuntimeError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kRuntimeError;
}

}  // namespace dualmod::cli
