#include "dualmod/data.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include "dualmod/error.hpp"
#include "dualmod/preprocess.hpp"
#include "dualmod/volume_io.hpp"

namespace dualmod {

std::string Extent3::str() const {
  return std::to_string(d) + "x" + std::to_string(h) + "x" + std::to_string(w);
}

void Volume::validate() const {
  if (extent.d < 1 || extent.h < 1 || extent.w < 1) throw DataError("volume extent must be >= 1, got " + extent.str());
  for (double s : spacing)
    if (!(s > 0.0)) throw DataError("volume spacing must be positive");
  if (voxels.size() != extent.numel()) throw DataError("volume voxel count does not match extent " + extent.str());
  for (float v : voxels)
    if (!std::isfinite(v)) throw DataError("volume contains a non-finite voxel");
}

void SegMask::validate() const {
  if (num_classes < 2 || num_classes > 255) throw DataError("mask class count must be in [2, 255]");
  if (labels.size() != extent.numel()) throw DataError("mask label count does not match extent " + extent.str());
  for (auto l : labels)
    if (l >= num_classes) throw DataError("mask label " + std::to_string(l) + " out of range");
}

void ModalitySample::validate() const {
  vol_a.validate();
  vol_b.validate();
  if (!(vol_a.extent == vol_b.extent) || vol_a.spacing != vol_b.spacing)
    throw DataError("sample " + id + ": modalities are not aligned");
  if (mask) {
    mask->validate();
    if (!(mask->extent == vol_a.extent)) throw DataError("sample " + id + ": mask extent differs from volumes");
  }
}

DatasetSplit make_split(std::vector<ModalitySample> samples, double labeled_fraction, std::uint64_t seed,
                        Holdout holdout) {
  if (samples.empty()) throw DataError("make_split: empty sample list");
  if (!(labeled_fraction > 0.0 && labeled_fraction <= 1.0))
    throw ConfigError("make_split: labeled fraction must be in (0, 1]");
  std::unordered_set<std::string> ids;
  for (const auto& s : samples) {
    if (!s.mask) throw DataError("make_split: sample " + s.id + " has no mask");
    if (!ids.insert(s.id).second) throw DataError("make_split: duplicate id " + s.id);
  }
  if (holdout.val + holdout.test >= samples.size())
    throw ConfigError("make_split: holdout leaves no training samples");

  Rng rng(seed);
  for (std::size_t i = samples.size() - 1; i > 0; --i) std::swap(samples[i], samples[uniform_index(rng, i + 1)]);

  DatasetSplit split;
  auto it = samples.begin();
  auto take = [&](std::vector<ModalitySample>& dst, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) dst.push_back(std::move(*it++));
  };
  take(split.test, holdout.test);
  take(split.val, holdout.val);
  const auto pool = static_cast<std::size_t>(samples.end() - it);
  const auto labeled =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(labeled_fraction * static_cast<double>(pool))));
  take(split.labeled, labeled);
  take(split.unlabeled, pool - labeled);
  return split;
}

Batch compose_batch(const DatasetSplit& split, int batch_size, int labeled_count, Rng& rng, const PatchSpec* patch) {
  if (batch_size < 1) throw ConfigError("compose_batch: batch size must be >= 1");
  if (labeled_count < 1 || labeled_count > batch_size)
    throw ConfigError("compose_batch: labeled count must be in [1, batch size]");
  if (split.labeled.empty()) throw DataError("compose_batch: labeled pool is empty");
  const int unlabeled_count = batch_size - labeled_count;
  if (unlabeled_count > 0 && split.unlabeled.empty()) throw DataError("compose_batch: unlabeled pool is empty");

  Rng labeled_rng(rng());
  Rng unlabeled_rng(rng());
  auto draw = [&](const std::vector<ModalitySample>& pool, Rng& r) {
    const auto& src = pool[uniform_index(r, pool.size())];
    return patch ? random_patch(src, *patch, r) : src;
  };

  Batch batch;
  for (int i = 0; i < labeled_count; ++i) batch.labeled_samples.push_back(draw(split.labeled, labeled_rng));
  for (int i = 0; i < unlabeled_count; ++i) {
    auto s = draw(split.unlabeled, unlabeled_rng);
    s.mask.reset();
    batch.unlabeled_samples.push_back(std::move(s));
  }
  return batch;
}

std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path);
  std::vector<ManifestEntry> entries;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, '\t')) fields.push_back(field);
    if (line.back() == '\t') fields.emplace_back();
    if (fields.size() == 3) fields.emplace_back();
    if (fields.size() != 4 || fields[0].empty() || fields[1].empty() || fields[2].empty())
      throw DataError(path + ":" + std::to_string(lineno) + ": expected id, path_a, path_b, path_mask");
    entries.push_back({fields[0], fields[1], fields[2], fields[3]});
  }
  return entries;
}

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write manifest " + path);
  for (const auto& e : entries) out << e.id << '\t' << e.path_a << '\t' << e.path_b << '\t' << e.path_mask << '\n';
  if (!out) throw Error("failed writing manifest " + path);
}

std::vector<ModalitySample> load_manifest(const std::string& path, int num_classes) {
  namespace fs = std::filesystem;
  const fs::path base = fs::path(path).parent_path();
  auto resolve = [&](const std::string& p) {
    const fs::path q(p);
    return (q.is_absolute() ? q : base / q).string();
  };
  std::vector<ModalitySample> samples;
  for (const auto& e : read_manifest(path)) {
    ModalitySample s;
    s.id = e.id;
    s.vol_a = read_volume(resolve(e.path_a));
    s.vol_b = read_volume(resolve(e.path_b));
    if (!e.path_mask.empty()) s.mask = read_mask(resolve(e.path_mask), num_classes);
    s.validate();
    samples.push_back(std::move(s));
  }
  return samples;
}

}  // namespace dualmod
