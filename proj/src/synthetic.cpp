#include "dualmod/synthetic.hpp"

#include <algorithm>

#include "dualmod/error.hpp"
#include "dualmod/rng.hpp"

namespace dualmod {

namespace {

double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

Ellipsoid random_ellipsoid(Rng& rng, const Extent3& e) {
  const double ext[3] = {static_cast<double>(e.d), static_cast<double>(e.h), static_cast<double>(e.w)};
  Ellipsoid el{};
  for (int a = 0; a < 3; ++a) {
    el.radius[a] = uniform(rng, 0.12, 0.25) * ext[a];
    el.centre[a] = uniform(rng, 0.3, 0.7) * (ext[a] - 1.0);
  }
  return el;
}

}  // namespace

bool Ellipsoid::contains(int z, int y, int x) const {
  const double c[3] = {static_cast<double>(z), static_cast<double>(y), static_cast<double>(x)};
  double s = 0.0;
  for (int a = 0; a < 3; ++a) {
    const double t = (c[a] - centre[a]) / radius[a];
    s += t * t;
  }
  return s <= 1.0;
}

void SynthSpec::validate() const {
  if (shape.d < 8 || shape.h < 8 || shape.w < 8 || shape.d % 8 || shape.h % 8 || shape.w % 8)
    throw ConfigError("synthetic shape must be a positive multiple of 8 per axis, got " + shape.str());
  if (blobs.empty() && (num_blobs < 1 || num_blobs > 3)) throw ConfigError("num_blobs must be in [1, 3]");
  if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be >= 0");
  if (num_decoys < 0) throw ConfigError("num_decoys must be >= 0");
  for (const auto& b : blobs)
    for (double r : b.radius)
      if (!(r > 0.0)) throw ConfigError("ellipsoid radii must be positive");
}

std::vector<Ellipsoid> sample_blobs(const SynthSpec& spec) {
  if (!spec.blobs.empty()) return spec.blobs;
  Rng rng(mix_seed({spec.seed, 0}));
  std::vector<Ellipsoid> out;
  for (int i = 0; i < spec.num_blobs; ++i) out.push_back(random_ellipsoid(rng, spec.shape));
  return out;
}

ModalitySample generate_sample(const SynthSpec& spec) {
  spec.validate();
  const auto blobs = sample_blobs(spec);
  Rng decoy_rng(mix_seed({spec.seed, 3}));
  std::vector<Ellipsoid> decoys;
  for (int i = 0; i < spec.num_decoys; ++i) decoys.push_back(random_ellipsoid(decoy_rng, spec.shape));

  const Extent3& e = spec.shape;
  ModalitySample s;
  s.id = "synth_" + std::to_string(spec.seed);
  s.vol_a = Volume(e, {1.0, 1.0, 1.0});
  s.vol_b = Volume(e, {1.0, 1.0, 1.0});
  SegMask mask(e, 2);
  CounterRng noise_a{mix_seed({spec.seed, 1})}, noise_b{mix_seed({spec.seed, 2})};
  for (int z = 0; z < e.d; ++z)
    for (int y = 0; y < e.h; ++y)
      for (int x = 0; x < e.w; ++x) {
        const bool lesion = std::any_of(blobs.begin(), blobs.end(), [&](const auto& b) { return b.contains(z, y, x); });
        bool decoy_a = false, decoy_b = false;
        for (std::size_t i = 0; i < decoys.size(); ++i)
          if (decoys[i].contains(z, y, x)) (i % 2 == 0 ? decoy_a : decoy_b) = true;
        double a = 0.2 + ((lesion || decoy_a) ? spec.contrast_a : 0.0);
        double b = 0.8 - ((lesion || decoy_b) ? spec.contrast_b : 0.0);
        if (spec.noise_sigma > 0.0) {
          a += spec.noise_sigma * standard_normal(noise_a);
          b += spec.noise_sigma * standard_normal(noise_b);
        }
        s.vol_a.at(z, y, x) = static_cast<float>(std::clamp(a, 0.0, 1.0));
        s.vol_b.at(z, y, x) = static_cast<float>(std::clamp(b, 0.0, 1.0));
        mask.at(z, y, x) = lesion ? 1 : 0;
      }
  s.mask = std::move(mask);
  return s;
}

std::vector<ModalitySample> generate_dataset(int n, std::uint64_t base_seed, const SynthSpec& spec) {
  if (n < 1) throw ConfigError("generate_dataset: n must be >= 1");
  std::vector<ModalitySample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    SynthSpec s = spec;
    s.seed = base_seed + static_cast<std::uint64_t>(i);
    out.push_back(generate_sample(s));
  }
  return out;
}

}  // namespace dualmod
