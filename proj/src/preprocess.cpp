#include "dualmod/preprocess.hpp"

#include <algorithm>
#include <limits>

#include "dualmod/error.hpp"

namespace dualmod {

Volume minmax_normalize(const Volume& v) {
  Volume out = v;
  if (v.voxels.empty()) return out;
  const auto [lo, hi] = std::minmax_element(v.voxels.begin(), v.voxels.end());
  const double mn = *lo, range = static_cast<double>(*hi) - mn;
  for (auto& x : out.voxels) x = range > 0.0 ? static_cast<float>((x - mn) / range) : 0.0f;
  return out;
}

Volume hu_window(const Volume& v, const WindowSpec& w) {
  if (!(w.width > 0.0)) throw ConfigError("window width must be positive");
  Volume out = v;
  const double low = w.level - w.width / 2.0;
  for (auto& x : out.voxels) x = static_cast<float>(std::clamp((x - low) / w.width, 0.0, 1.0));
  return out;
}

ModalitySample extract_box(const ModalitySample& s, const Extent3& origin, const Extent3& shape) {
  const Extent3& e = s.extent();
  if (origin.d < 0 || origin.h < 0 || origin.w < 0 || origin.d + shape.d > e.d || origin.h + shape.h > e.h ||
      origin.w + shape.w > e.w)
    throw DataError("box " + shape.str() + " does not fit in " + e.str());
  auto copy_vol = [&](const Volume& v) {
    Volume out(shape, v.spacing);
    for (int z = 0; z < shape.d; ++z)
      for (int y = 0; y < shape.h; ++y)
        for (int x = 0; x < shape.w; ++x) out.at(z, y, x) = v.at(z + origin.d, y + origin.h, x + origin.w);
    return out;
  };
  ModalitySample out;
  out.id = s.id;
  out.vol_a = copy_vol(s.vol_a);
  out.vol_b = copy_vol(s.vol_b);
  if (s.mask) {
    SegMask m(shape, s.mask->num_classes);
    for (int z = 0; z < shape.d; ++z)
      for (int y = 0; y < shape.h; ++y)
        for (int x = 0; x < shape.w; ++x) m.at(z, y, x) = s.mask->at(z + origin.d, y + origin.h, x + origin.w);
    out.mask = std::move(m);
  }
  return out;
}

ModalitySample crop_nonzero(const ModalitySample& s, Modality reference) {
  const Volume& ref = reference == Modality::a ? s.vol_a : s.vol_b;
  const Extent3& e = ref.extent;
  int lo[3] = {e.d, e.h, e.w}, hi[3] = {-1, -1, -1};
  for (int z = 0; z < e.d; ++z)
    for (int y = 0; y < e.h; ++y)
      for (int x = 0; x < e.w; ++x) {
        if (ref.at(z, y, x) == 0.0f) continue;
        const int c[3] = {z, y, x};
        for (int a = 0; a < 3; ++a) {
          lo[a] = std::min(lo[a], c[a]);
          hi[a] = std::max(hi[a], c[a]);
        }
      }
  if (hi[0] < 0) throw DataError("crop_nonzero: reference volume of " + s.id + " is all zero");
  return extract_box(s, {lo[0], lo[1], lo[2]}, {hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1});
}

ModalitySample pad_to(const ModalitySample& s, const Extent3& shape) {
  const Extent3& e = s.extent();
  const Extent3 target{std::max(e.d, shape.d), std::max(e.h, shape.h), std::max(e.w, shape.w)};
  if (target == e) return s;
  auto pad_vol = [&](const Volume& v) {
    Volume out(target, v.spacing, 0.0f);
    for (int z = 0; z < e.d; ++z)
      for (int y = 0; y < e.h; ++y)
        for (int x = 0; x < e.w; ++x) out.at(z, y, x) = v.at(z, y, x);
    return out;
  };
  ModalitySample out;
  out.id = s.id;
  out.vol_a = pad_vol(s.vol_a);
  out.vol_b = pad_vol(s.vol_b);
  if (s.mask) {
    SegMask m(target, s.mask->num_classes);
    for (int z = 0; z < e.d; ++z)
      for (int y = 0; y < e.h; ++y)
        for (int x = 0; x < e.w; ++x) m.at(z, y, x) = s.mask->at(z, y, x);
    out.mask = std::move(m);
  }
  return out;
}

ModalitySample random_patch(const ModalitySample& s, const PatchSpec& p, Rng& rng) {
  if (p.shape.d < 1 || p.shape.h < 1 || p.shape.w < 1) throw ConfigError("patch extents must be >= 1");
  const ModalitySample padded = pad_to(s, p.shape);
  const Extent3& e = padded.extent();
  const Extent3 origin{static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(e.d - p.shape.d + 1))),
                      static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(e.h - p.shape.h + 1))),
                      static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(e.w - p.shape.w + 1)))};
  return extract_box(padded, origin, p.shape);
}

ModalitySample preprocess(const ModalitySample& s, const PreprocessConfig& cfg) {
  ModalitySample out = cfg.crop ? crop_nonzero(s, Modality::a) : s;
  out.vol_a = cfg.normalize == NormalizeMode::window ? hu_window(out.vol_a, cfg.ct_window) : minmax_normalize(out.vol_a);
  out.vol_b = minmax_normalize(out.vol_b);
  return out;
}

NormalizeMode parse_normalize_mode(const std::string& name) {
  if (name == "minmax") return NormalizeMode::minmax;
  if (name == "window") return NormalizeMode::window;
  throw ConfigError("normalize must be minmax or window, got '" + name + "'");
}

}  // namespace dualmod
