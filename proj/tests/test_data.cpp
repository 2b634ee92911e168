#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "dualmod/data.hpp"
#include "dualmod/preprocess.hpp"
#include "dualmod/volume_io.hpp"
#include "test_util.hpp"

using namespace dualmod;
namespace fs = std::filesystem;

namespace {

std::vector<ModalitySample> tiny_samples(int n, Extent3 e = {2, 2, 2}) {
  std::vector<ModalitySample> out;
  for (int i = 0; i < n; ++i) {
    ModalitySample s;
    s.id = "s" + std::to_string(i);
    s.vol_a = Volume(e, {1, 1, 1}, static_cast<float>(i));
    s.vol_b = Volume(e, {1, 1, 1}, static_cast<float>(-i));
    s.mask = SegMask(e, 2);
    s.mask->labels[0] = 1;
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<std::string> ids(const std::vector<ModalitySample>& v) {
  std::vector<std::string> out;
  for (const auto& s : v) out.push_back(s.id);
  return out;
}

fs::path scratch_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("dualmod_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(MakeSplit, FloorAndClamp) {
  auto s = make_split(tiny_samples(250), 0.05, 1);
  EXPECT_EQ(s.labeled.size(), 12u);
  EXPECT_EQ(s.unlabeled.size(), 238u);
  s = make_split(tiny_samples(100), 1.0, 1);
  EXPECT_EQ(s.labeled.size(), 100u);
  EXPECT_EQ(s.unlabeled.size(), 0u);
  s = make_split(tiny_samples(10), 0.05, 1);
  EXPECT_EQ(s.labeled.size(), 1u);
  EXPECT_EQ(s.unlabeled.size(), 9u);
}

TEST(MakeSplit, RejectsBadInput) {
  EXPECT_THROW(make_split(tiny_samples(10), 0.0, 1), ConfigError);
  EXPECT_THROW(make_split(tiny_samples(10), 1.5, 1), ConfigError);
  EXPECT_THROW(make_split({}, 0.5, 1), DataError);
  EXPECT_THROW(make_split(tiny_samples(4), 0.5, 1, {2, 2}), ConfigError);
}

TEST(MakeSplit, DeterministicPartition) {
  for (std::uint64_t seed : {0ull, 7ull, 123456789ull}) {
    const auto a = make_split(tiny_samples(40), 0.3, seed, {3, 5});
    const auto b = make_split(tiny_samples(40), 0.3, seed, {3, 5});
    EXPECT_EQ(ids(a.labeled), ids(b.labeled));
    EXPECT_EQ(ids(a.unlabeled), ids(b.unlabeled));
    EXPECT_EQ(ids(a.val), ids(b.val));
    EXPECT_EQ(ids(a.test), ids(b.test));
    EXPECT_EQ(a.val.size(), 3u);
    EXPECT_EQ(a.test.size(), 5u);
    EXPECT_EQ(a.labeled.size(), 9u);  // floor(0.3 * 32)

    std::set<std::string> seen;
    for (const auto* part : {&a.labeled, &a.unlabeled, &a.val, &a.test})
      for (const auto& s : *part) EXPECT_TRUE(seen.insert(s.id).second) << s.id;
    EXPECT_EQ(seen.size(), 40u);
  }
  const auto x = make_split(tiny_samples(40), 0.3, 1);
  const auto y = make_split(tiny_samples(40), 0.3, 2);
  EXPECT_NE(ids(x.labeled), ids(y.labeled));
}

TEST(ComposeBatch, CountsMasksAndDeterminism) {
  const auto split = make_split(tiny_samples(20), 0.25, 3);
  Rng r1(9), r2(9);
  const auto b1 = compose_batch(split, 4, 2, r1);
  const auto b2 = compose_batch(split, 4, 2, r2);
  ASSERT_EQ(b1.labeled_samples.size(), 2u);
  ASSERT_EQ(b1.unlabeled_samples.size(), 2u);
  EXPECT_EQ(ids(b1.labeled_samples), ids(b2.labeled_samples));
  EXPECT_EQ(ids(b1.unlabeled_samples), ids(b2.unlabeled_samples));
  for (int i = 0; i < 50; ++i) {
    const auto b = compose_batch(split, 4, 2, r1);
    for (const auto& s : b.labeled_samples) EXPECT_TRUE(s.labeled());
    for (const auto& s : b.unlabeled_samples) EXPECT_FALSE(s.labeled());
  }
  const auto full = compose_batch(split, 4, 4, r1);
  EXPECT_EQ(full.labeled_samples.size(), 4u);
  EXPECT_TRUE(full.unlabeled_samples.empty());
  EXPECT_THROW(compose_batch(split, 4, 5, r1), ConfigError);
}

TEST(ComposeBatch, PatchesKeepAlignment) {
  auto samples = tiny_samples(6, {6, 6, 6});
  for (auto& s : samples)
    for (std::size_t i = 0; i < s.vol_a.voxels.size(); ++i) {
      s.vol_a.voxels[i] = static_cast<float>(i);
      s.vol_b.voxels[i] = -static_cast<float>(i);
      s.mask->labels[i] = i % 3 == 0;
    }
  const auto split = make_split(samples, 0.5, 1);
  const PatchSpec patch{{4, 4, 4}};
  Rng rng(2);
  const auto b = compose_batch(split, 4, 2, rng, &patch);
  for (const auto& s : b.labeled_samples) {
    EXPECT_EQ(s.extent(), (Extent3{4, 4, 4}));
    for (std::size_t i = 0; i < s.vol_a.voxels.size(); ++i) {
      const auto src = static_cast<std::size_t>(s.vol_a.voxels[i]);
      EXPECT_EQ(s.vol_b.voxels[i], -s.vol_a.voxels[i]);
      EXPECT_EQ(s.mask->labels[i], src % 3 == 0);
    }
  }
}

TEST(Manifest, RoundTripAndRelativePaths) {
  const auto dir = scratch_dir("manifest");
  const auto samples = tiny_samples(3, {2, 3, 4});
  std::vector<ManifestEntry> entries;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    ManifestEntry e{s.id, s.id + "_a.raw", s.id + "_b.raw", i == 2 ? "" : s.id + "_m.raw"};
    write_raw_volume((dir / e.path_a).string(), s.vol_a);
    write_raw_volume((dir / e.path_b).string(), s.vol_b);
    if (!e.path_mask.empty()) write_raw_mask((dir / e.path_mask).string(), *s.mask);
    entries.push_back(e);
  }
  write_manifest((dir / "m.tsv").string(), entries);
  const auto back = read_manifest((dir / "m.tsv").string());
  ASSERT_EQ(back.size(), 3u);
  EXPECT_EQ(back[1].path_b, "s1_b.raw");
  EXPECT_TRUE(back[2].path_mask.empty());

  const auto loaded = load_manifest((dir / "m.tsv").string(), 2);
  ASSERT_EQ(loaded.size(), 3u);
  EXPECT_EQ(loaded[1].vol_a.voxels, samples[1].vol_a.voxels);
  EXPECT_EQ(loaded[1].mask->labels, samples[1].mask->labels);
  EXPECT_FALSE(loaded[2].labeled());
  fs::remove_all(dir);
}

TEST(Manifest, RejectsMalformedLines) {
  const auto dir = scratch_dir("manifest_bad");
  std::ofstream(dir / "bad.tsv") << "# comment\n\nonly\ttwo\n";
  EXPECT_THROW(read_manifest((dir / "bad.tsv").string()), DataError);
  fs::remove_all(dir);
}

TEST(Validation, ShapeAndFiniteness) {
  auto s = tiny_samples(1)[0];
  EXPECT_NO_THROW(s.validate());
  s.vol_b = Volume({2, 2, 3}, {1, 1, 1});
  EXPECT_THROW(s.validate(), DataError);
  Volume v({2, 2, 2}, {1, 1, 1});
  v.voxels[3] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(v.validate(), DataError);
  SegMask m({2, 2, 2}, 2);
  m.labels[0] = 2;
  EXPECT_THROW(m.validate(), DataError);
}
