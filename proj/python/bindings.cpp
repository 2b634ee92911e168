#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "dualmod/config.hpp"
#include "dualmod/error.hpp"
#include "dualmod/gradcheck.hpp"
#include "dualmod/metrics.hpp"
#include "dualmod/preprocess.hpp"
#include "dualmod/synthetic.hpp"
#include "dualmod/trainer.hpp"

namespace py = pybind11;
using namespace dualmod;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using LabelArray = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

Extent3 extent_of(const py::buffer_info& info) {
  if (info.ndim != 3) throw DataError("expected a 3-d array, got " + std::to_string(info.ndim) + " dimensions");
  return {static_cast<int>(info.shape[0]), static_cast<int>(info.shape[1]), static_cast<int>(info.shape[2])};
}

Volume to_volume(const FloatArray& a, const Spacing& spacing = {1, 1, 1}) {
  const auto info = a.request();
  Volume v(extent_of(info), spacing);
  std::copy_n(static_cast<const float*>(info.ptr), v.voxels.size(), v.voxels.begin());
  return v;
}

SegMask to_mask(const LabelArray& a, int num_classes) {
  const auto info = a.request();
  SegMask m(extent_of(info), num_classes);
  std::copy_n(static_cast<const std::uint8_t*>(info.ptr), m.labels.size(), m.labels.begin());
  m.validate();
  return m;
}

template <typename T>
py::array_t<T> to_array(const std::vector<T>& data, const Extent3& e) {
  py::array_t<T> out({e.d, e.h, e.w});
  std::copy(data.begin(), data.end(), out.mutable_data());
  return out;
}

py::dict report_dict(const MetricsReport& r) {
  py::list samples;
  for (const auto& s : r.per_sample) {
    py::dict d;
    d["id"] = s.id;
    d["dsc"] = s.dsc;
    d["asd_mm"] = s.asd_mm ? py::object(py::float_(*s.asd_mm)) : py::object(py::none());
    samples.append(d);
  }
  py::dict d;
  d["dsc_mean"] = r.dsc_mean;
  d["dsc_std"] = r.dsc_std;
  d["asd_mean"] = r.asd_mean;
  d["asd_std"] = r.asd_std;
  d["asd_undefined"] = r.asd_undefined;
  d["samples"] = samples;
  return d;
}

ExperimentConfig make_config(const std::string& text, const std::vector<std::string>& overrides) {
  auto cfg = parse_config(text, "<python>");
  apply_overrides(cfg, overrides);
  cfg.validate();
  return cfg;
}

}  // namespace

PYBIND11_MODULE(_dualmod, m) {
  m.doc() = "Dual-branch multi-modal segmentation core";

  auto base = py::register_exception<Error>(m, "Error");
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<DataError>(m, "DataError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());

  m.def(
      "generate_sample",
      [](std::array<int, 3> shape, int num_blobs, double noise_sigma, double contrast_a, double contrast_b,
         int num_decoys, std::uint64_t seed) {
        SynthSpec spec;
        spec.shape = {shape[0], shape[1], shape[2]};
        spec.num_blobs = num_blobs;
        spec.noise_sigma = noise_sigma;
        spec.contrast_a = contrast_a;
        spec.contrast_b = contrast_b;
        spec.num_decoys = num_decoys;
        spec.seed = seed;
        const auto s = generate_sample(spec);
        py::dict d;
        d["id"] = s.id;
        d["vol_a"] = to_array(s.vol_a.voxels, s.extent());
        d["vol_b"] = to_array(s.vol_b.voxels, s.extent());
        d["mask"] = to_array(s.mask->labels, s.extent());
        return d;
      },
      py::arg("shape") = std::array<int, 3>{16, 16, 16}, py::arg("num_blobs") = 2, py::arg("noise_sigma") = 0.1,
      py::arg("contrast_a") = 0.6, py::arg("contrast_b") = 0.6, py::arg("num_decoys") = 0, py::arg("seed") = 0,
      "Synthetic paired volumes and their mask as numpy arrays.");

  m.def(
      "dice_score",
      [](const LabelArray& pred, const LabelArray& ref, int class_id, int num_classes) {
        return dice_score(to_mask(pred, num_classes), to_mask(ref, num_classes), class_id);
      },
      py::arg("pred"), py::arg("ref"), py::arg("class_id") = 1, py::arg("num_classes") = 2);

  m.def(
      "asd",
      [](const LabelArray& pred, const LabelArray& ref, int class_id, std::array<double, 3> spacing, int num_classes) {
        return asd(to_mask(pred, num_classes), to_mask(ref, num_classes), class_id,
                   {spacing[0], spacing[1], spacing[2]});
      },
      py::arg("pred"), py::arg("ref"), py::arg("class_id") = 1, py::arg("spacing") = std::array<double, 3>{1, 1, 1},
      py::arg("num_classes") = 2, "Average symmetric surface distance in mm.");

  m.def(
      "minmax_normalize",
      [](const FloatArray& a) {
        const auto v = minmax_normalize(to_volume(a));
        return to_array(v.voxels, v.extent);
      },
      py::arg("volume"));

  m.def(
      "hu_window",
      [](const FloatArray& a, double level, double width) {
        const auto v = hu_window(to_volume(a), {level, width});
        return to_array(v.voxels, v.extent);
      },
      py::arg("volume"), py::arg("level") = 40.0, py::arg("width") = 400.0);

  m.def(
      "split_counts",
      [](int n, double labeled_fraction, std::uint64_t seed) {
        std::vector<ModalitySample> samples(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
          auto& s = samples[static_cast<std::size_t>(i)];
          s.id = std::to_string(i);
          s.vol_a = Volume({1, 1, 1}, {1, 1, 1});
          s.vol_b = s.vol_a;
          s.mask = SegMask({1, 1, 1}, 2);
        }
        const auto split = make_split(std::move(samples), labeled_fraction, seed);
        std::vector<int> labeled;
        for (const auto& s : split.labeled) labeled.push_back(std::stoi(s.id));
        return py::make_tuple(split.labeled.size(), split.unlabeled.size(), labeled);
      },
      py::arg("n"), py::arg("labeled_fraction"), py::arg("seed") = 7,
      "(labeled count, unlabeled count, labeled indices) of a split over n samples.");

  m.def(
      "config_text",
      [](const std::string& text, const std::vector<std::string>& overrides) {
        return make_config(text, overrides).to_text();
      },
      py::arg("text") = "", py::arg("overrides") = std::vector<std::string>{},
      "Canonical form of an INI config after overrides.");

  m.def(
      "param_count",
      [](const std::string& text, const std::vector<std::string>& overrides) {
        const auto cfg = make_config(text, overrides);
        return param_count(DualBranchModel<float>::create(cfg.network, cfg.trainer.seed));
      },
      py::arg("text") = "", py::arg("overrides") = std::vector<std::string>{});

  m.def(
      "check_grad",
      [](const std::string& text, const std::vector<std::string>& overrides) {
        GradCheckReport r;
        {
          py::gil_scoped_release release;
          r = check_grad(make_config(text, overrides));
        }
        py::dict d;
        d["passed"] = r.passed();
        d["max_rel_error"] = r.max_rel_error;
        d["pseudo_label_grad"] = r.pseudo_label_grad;
        d["live_consistency_grad"] = r.live_consistency_grad;
        d["report"] = r.format();
        return d;
      },
      py::arg("text") = "", py::arg("overrides") = std::vector<std::string>{});

  m.def(
      "train",
      [](const std::string& text, const std::vector<std::string>& overrides, const std::string& out_dir) {
        const auto cfg = make_config(text, overrides);
        TrainResult result;
        Evaluation ev;
        {
          py::gil_scoped_release release;
          const auto split = prepare_split(cfg);
          TrainOptions opts;
          opts.out_dir = out_dir;
          result = train(cfg, split, opts);
          ev = evaluate(result.final_state.model, split.test, cfg.data.patch_shape);
        }
        py::list log;
        for (const auto& r : result.log) {
          py::dict row;
          row["iter"] = r.iteration;
          row["lr"] = r.lr;
          row["ce_a"] = r.loss.ce_a;
          row["ce_b"] = r.loss.ce_b;
          row["dice_a"] = r.loss.dice_a;
          row["dice_b"] = r.loss.dice_b;
          row["consistency"] = r.loss.consistency;
          row["total"] = r.loss.total;
          log.append(row);
        }
        py::dict d;
        d["log"] = log;
        d["test"] = report_dict(ev.fused);
        d["test_a"] = report_dict(ev.branch_a);
        d["test_b"] = report_dict(ev.branch_b);
        return d;
      },
      py::arg("text") = "", py::arg("overrides") = std::vector<std::string>{}, py::arg("out_dir") = "",
      "Trains on the configured data and evaluates the final model on its test split.");

  m.def(
      "evaluate_checkpoint",
      [](const std::string& path) {
        Evaluation ev;
        {
          py::gil_scoped_release release;
          const auto state = load_checkpoint(path);
          const auto split = prepare_split(state.config);
          ev = evaluate(state.model, split.test, state.config.data.patch_shape);
        }
        py::dict d;
        d["test"] = report_dict(ev.fused);
        d["test_a"] = report_dict(ev.branch_a);
        d["test_b"] = report_dict(ev.branch_b);
        return d;
      },
      py::arg("path"));
}
