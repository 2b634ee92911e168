#include "dualmod/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

namespace dualmod {

namespace {

void check_pair(const SegMask& a, const SegMask& b, const char* what) {
  if (!(a.extent == b.extent))
    throw DataError(std::string(what) + ": extent mismatch " + a.extent.str() + " vs " + b.extent.str());
}

// Exact 1D squared distance transform along a strided line (lower envelope of
// parabolas), with sample pitch `step` in mm.
void edt_line(double* f, std::size_t n, std::size_t stride, double step, std::vector<double>& buf,
              std::vector<int>& v, std::vector<double>& z) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  buf.resize(n);
  v.resize(n);
  z.resize(n + 1);
  for (std::size_t i = 0; i < n; ++i) buf[i] = f[i * stride];
  const double s2 = step * step;
  int k = -1;
  for (int q = 0; q < static_cast<int>(n); ++q) {
    if (buf[q] == inf) continue;
    while (k >= 0) {
      const int p = v[k];
      const double s = ((buf[q] + s2 * q * q) - (buf[p] + s2 * p * p)) / (2.0 * s2 * (q - p));
      if (s <= z[k]) {
        --k;
        continue;
      }
      ++k;
      v[k] = q;
      z[k] = s;
      z[k + 1] = inf;
      break;
    }
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -inf;
      z[1] = inf;
    }
  }
  if (k < 0) return;  // no finite sample on this line
  int j = 0;
  for (int q = 0; q < static_cast<int>(n); ++q) {
    while (z[j + 1] < q) ++j;
    const double d = step * (q - v[j]);
    f[q * stride] = d * d + buf[v[j]];
  }
}

double mean_distance(const std::vector<Voxel>& from, const std::vector<double>& dist2, const Extent3& e) {
  double s = 0.0;
  for (const auto& p : from) s += std::sqrt(dist2[e.index(p[0], p[1], p[2])]);
  return s;
}

}  // namespace

double dice_score(const SegMask& pred, const SegMask& gt, int class_id) {
  check_pair(pred, gt, "dice_score");
  std::size_t p = 0, g = 0, both = 0;
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    const bool in_p = pred.labels[i] == class_id, in_g = gt.labels[i] == class_id;
    p += in_p;
    g += in_g;
    both += in_p && in_g;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

std::vector<Voxel> extract_surface(const SegMask& mask, int class_id) {
  const Extent3& e = mask.extent;
  auto outside = [&](int z, int y, int x) {
    return z < 0 || y < 0 || x < 0 || z >= e.d || y >= e.h || x >= e.w || mask.at(z, y, x) != class_id;
  };
  std::vector<Voxel> out;
  for (int z = 0; z < e.d; ++z)
    for (int y = 0; y < e.h; ++y)
      for (int x = 0; x < e.w; ++x) {
        if (mask.at(z, y, x) != class_id) continue;
        if (outside(z - 1, y, x) || outside(z + 1, y, x) || outside(z, y - 1, x) || outside(z, y + 1, x) ||
            outside(z, y, x - 1) || outside(z, y, x + 1))
          out.push_back({z, y, x});
      }
  return out;
}

std::vector<double> squared_distance_transform(const std::vector<unsigned char>& features, const Extent3& e,
                                               const Spacing& spacing) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> f(e.numel());
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = features[i] ? 0.0 : inf;
  std::vector<double> buf, z;
  std::vector<int> v;
  const std::size_t sd = static_cast<std::size_t>(e.h) * e.w, sh = e.w;
  for (int a = 0; a < e.d; ++a)
    for (int b = 0; b < e.h; ++b) edt_line(&f[a * sd + b * sh], e.w, 1, spacing[2], buf, v, z);
  for (int a = 0; a < e.d; ++a)
    for (int c = 0; c < e.w; ++c) edt_line(&f[a * sd + c], e.h, sh, spacing[1], buf, v, z);
  for (int b = 0; b < e.h; ++b)
    for (int c = 0; c < e.w; ++c) edt_line(&f[b * sh + c], e.d, sd, spacing[0], buf, v, z);
  return f;
}

double asd(const SegMask& pred, const SegMask& gt, int class_id, const Spacing& spacing) {
  check_pair(pred, gt, "asd");
  const auto sp = extract_surface(pred, class_id), sg = extract_surface(gt, class_id);
  if (sp.empty() || sg.empty()) throw UndefinedDistance("asd: empty surface");
  const Extent3& e = pred.extent;
  auto feature_map = [&](const std::vector<Voxel>& s) {
    std::vector<unsigned char> m(e.numel(), 0);
    for (const auto& p : s) m[e.index(p[0], p[1], p[2])] = 1;
    return m;
  };
  const auto to_g = squared_distance_transform(feature_map(sg), e, spacing);
  const auto to_p = squared_distance_transform(feature_map(sp), e, spacing);
  return (mean_distance(sp, to_g, e) + mean_distance(sg, to_p, e)) / static_cast<double>(sp.size() + sg.size());
}

void aggregate(MetricsReport& r) {
  r.dsc_mean = r.dsc_std = r.asd_mean = r.asd_std = 0.0;
  r.asd_undefined = r.asd_count = 0;
  const double n = static_cast<double>(r.per_sample.size());
  for (const auto& s : r.per_sample) {
    r.dsc_mean += s.dsc;
    if (s.asd_mm) {
      r.asd_mean += *s.asd_mm;
      ++r.asd_count;
    } else {
      ++r.asd_undefined;
    }
  }
  if (n > 0) r.dsc_mean /= n;
  if (r.asd_count > 0) r.asd_mean /= r.asd_count;
  for (const auto& s : r.per_sample) {
    r.dsc_std += (s.dsc - r.dsc_mean) * (s.dsc - r.dsc_mean);
    if (s.asd_mm) r.asd_std += (*s.asd_mm - r.asd_mean) * (*s.asd_mm - r.asd_mean);
  }
  if (n > 0) r.dsc_std = std::sqrt(r.dsc_std / n);
  if (r.asd_count > 0) r.asd_std = std::sqrt(r.asd_std / r.asd_count);
}

MetricsReport evaluate_dataset(const std::vector<LabeledMask>& predictions,
                               const std::vector<LabeledMask>& references) {
  if (predictions.size() != references.size()) throw DataError("evaluate_dataset: list lengths differ");
  MetricsReport report;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const auto& p = predictions[i];
    const auto& g = references[i];
    if (p.id != g.id) throw DataError("evaluate_dataset: id mismatch " + p.id + " vs " + g.id);
    SampleMetrics m{p.id, 0.0, 0.0};
    const int classes = g.mask.num_classes;
    for (int c = 1; c < classes; ++c) {
      m.dsc += dice_score(p.mask, g.mask, c);
      if (!m.asd_mm) continue;
      try {
        *m.asd_mm += asd(p.mask, g.mask, c, g.spacing);
      } catch (const UndefinedDistance&) {
        m.asd_mm.reset();
      }
    }
    m.dsc /= classes - 1;
    if (m.asd_mm) *m.asd_mm /= classes - 1;
    report.per_sample.push_back(std::move(m));
  }
  aggregate(report);
  return report;
}

std::string MetricsReport::summary() const {
  char buf[192];
  std::snprintf(buf, sizeof buf, "dsc %.4f +- %.4f, asd_mm %.4f +- %.4f (n=%zu, asd undefined %d)", dsc_mean,
                dsc_std, asd_mean, asd_std, per_sample.size(), asd_undefined);
  return buf;
}

void write_metrics_csv(const std::string& path, const MetricsReport& report) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out.precision(17);
  out << "id,dsc,asd_mm\n";
  for (const auto& s : report.per_sample) {
    out << s.id << ',' << s.dsc << ',';
    if (s.asd_mm) out << *s.asd_mm;
    out << '\n';
  }
  out << "# " << report.summary() << '\n';
  if (!out) throw Error("failed writing " + path);
}

}  // namespace dualmod
