#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <set>

#include "cvd/binary_io.hpp"
#include "cvd/error.hpp"
#include "cvd/synthdata.hpp"

namespace cvd {
namespace {

std::string error_message(const std::vector<std::uint8_t>& bytes, std::string* kind) {
  try {
    decode_dataset(bytes);
  } catch (const Error& e) {
    *kind = e.kind();
    return e.what();
  }
  *kind = "none";
  return {};
}

bool same_pixels(const Tensor& a, const Tensor& b, double tol = 0.0) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::abs(a[i] - b[i]) > tol) return false;
  return true;
}

TEST(SampleScene, DeterministicUnderSeed) {
  std::mt19937_64 a(42), b(42);
  const auto x = sample_scene(a, 3);
  const auto y = sample_scene(b, 3);
  ASSERT_EQ(x.layout.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(x.layout[i].row, y.layout[i].row);
    EXPECT_EQ(x.layout[i].col, y.layout[i].col);
    EXPECT_EQ(x.layout[i].shape, y.layout[i].shape);
    EXPECT_EQ(x.layout[i].tone, y.layout[i].tone);
  }
}

TEST(SampleScene, SingleCellGridIsForced) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 20; ++i) {
    const auto c = sample_scene(rng, 0, SceneSpec{1, 1});
    ASSERT_EQ(c.layout.size(), 1u);
    EXPECT_EQ(c.layout[0].row, 0u);
    EXPECT_EQ(c.layout[0].col, 0u);
  }
  try {
    sample_scene(rng, 0, SceneSpec{5, 2});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), "config");
  }
}

TEST(SampleScene, CellsAreUniqueTonesInRange) {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 500; ++i) {
    const auto c = sample_scene(rng, 0);
    std::set<std::pair<std::size_t, std::size_t>> cells;
    for (const auto& o : c.layout) {
      cells.emplace(o.row, o.col);
      EXPECT_GE(o.tone, 0.2);
      EXPECT_LE(o.tone, 1.0);
    }
    EXPECT_EQ(cells.size(), c.layout.size());
  }
}

TEST(SampleScene, CellOccupancyIsUniform) {
  std::mt19937_64 rng(3);
  const int draws = 10000;
  std::vector<double> counts(36, 0.0);
  for (int i = 0; i < draws; ++i)
    for (const auto& o : sample_scene(rng, 0).layout) counts[o.row * 6 + o.col] += 1.0;
  // Each cell is occupied with probability 5/36 per draw.
  const double p = 5.0 / 36.0;
  const double expected = draws * p;
  const double sigma = std::sqrt(draws * p * (1.0 - p));
  double chi2 = 0.0;
  for (double c : counts) {
    EXPECT_LT(std::abs(c - expected), 3.0 * sigma);
    chi2 += (c - expected) * (c - expected) / expected;
  }
  // 35 degrees of freedom: mean 35, sd sqrt(70).
  EXPECT_LT(chi2, 35.0 + 3.0 * std::sqrt(70.0));
}

TEST(DroneViewpoint, FieldsInRange) {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 1000; ++i) {
    const auto vp = sample_drone_viewpoint(rng);
    EXPECT_EQ(vp.view_kind, View::drone);
    EXPECT_GE(vp.azimuth, 0.0);
    EXPECT_LT(vp.azimuth, 2.0 * std::numbers::pi);
    EXPECT_GE(vp.tilt, 0.0);
    EXPECT_LE(vp.tilt, 0.5);
    EXPECT_GE(vp.scale, 0.8);
    EXPECT_LE(vp.scale, 1.25);
    EXPECT_GE(vp.shading_mag, 0.0);
    EXPECT_LE(vp.shading_mag, 0.3);
  }
  const auto sat = satellite_viewpoint();
  EXPECT_EQ(sat.view_kind, View::satellite);
  EXPECT_EQ(sat.azimuth, 0.0);
  EXPECT_EQ(sat.tilt, 0.0);
  EXPECT_EQ(sat.scale, 1.0);
}

TEST(Render, SatelliteViewIsCanonical) {
  std::mt19937_64 rng(5);
  const auto c = sample_scene(rng, 0);
  EXPECT_TRUE(same_pixels(render(c, satellite_viewpoint(), 32), render_canonical(c, 32)));
}

TEST(Render, HalfTurnOfSymmetricLayoutIsCanonical) {
  ContentFactor c;
  c.layout = {{0, 1, ObjectShape::disc, 0.8}, {5, 4, ObjectShape::disc, 0.8},
              {2, 2, ObjectShape::cross, 0.5}, {3, 3, ObjectShape::cross, 0.5},
              {1, 5, ObjectShape::square, 0.3}, {4, 0, ObjectShape::square, 0.3}};
  ViewpointFactor vp;
  vp.view_kind = View::drone;
  vp.azimuth = std::numbers::pi;
  for (std::size_t size : {16u, 32u, 48u}) {
    EXPECT_TRUE(same_pixels(render(c, vp, size), render_canonical(c, size), 1e-6)) << size;
  }
}

TEST(Render, ShadingSpansItsMagnitude) {
  ContentFactor empty;
  for (double dir : {0.0, 0.7, 2.0, 4.0}) {
    ViewpointFactor vp;
    vp.shading_dir = dir;
    vp.shading_mag = 0.3;
    const auto img = render(empty, vp, 32);
    const auto [lo, hi] = std::minmax_element(img.data().begin(), img.data().end());
    EXPECT_NEAR(*hi - *lo, 0.3, 1.0 / 32.0);
    EXPECT_NEAR(*lo, kBackgroundTone, 1e-12);
  }
}

TEST(Render, PixelsInUnitRangeAndChannelsReplicated) {
  std::mt19937_64 rng(6);
  for (int i = 0; i < 50; ++i) {
    const auto c = sample_scene(rng, 0);
    const auto img = render(c, sample_drone_viewpoint(rng), 16, 3);
    ASSERT_EQ(img.shape(), (Shape{3, 16, 16}));
    for (double v : img.data()) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
    }
    for (std::size_t p = 0; p < 256; ++p) ASSERT_EQ(img[p], img[512 + p]);
  }
  try {
    render(sample_scene(rng, 0), satellite_viewpoint(), 8);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), "config");
  }
}

TEST(Render, EqualFactorsRenderIdentically) {
  std::mt19937_64 a(7), b(7);
  const auto ca = sample_scene(a, 1);
  const auto cb = sample_scene(b, 1);
  const auto va = sample_drone_viewpoint(a);
  const auto vb = sample_drone_viewpoint(b);
  EXPECT_EQ(va, vb);
  EXPECT_TRUE(same_pixels(render(ca, va, 32), render(cb, vb, 32)));
}

TEST(GenerateDataset, Counts) {
  const auto small = generate_dataset({.scenes = 2, .drone_views = 1, .size = 16});
  EXPECT_EQ(small.records.size(), 4u);
  const auto pairs = small.pairs();
  ASSERT_EQ(pairs.size(), 2u);
  EXPECT_NE(pairs[0].scene_id, pairs[1].scene_id);

  const auto big = generate_dataset({.scenes = 200, .drone_views = 4, .size = 16});
  EXPECT_EQ(big.pairs().size(), 800u);
  EXPECT_EQ(big.scene_count(), 200u);
  try {
    generate_dataset({.scenes = 1});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), "config");
  }
}

TEST(GenerateDataset, SameSeedIsBitwiseEqualAndSeedsDiffer) {
  const DatasetSpec spec{.scenes = 6, .drone_views = 2, .size = 16, .seed = 9};
  EXPECT_EQ(encode_dataset(generate_dataset(spec)), encode_dataset(generate_dataset(spec)));
  auto other = spec;
  other.seed = 10;
  EXPECT_NE(encode_dataset(generate_dataset(spec)), encode_dataset(generate_dataset(other)));
}

TEST(GenerateDataset, ScenesDoNotDependOnDatasetSize) {
  const auto a = generate_dataset({.scenes = 3, .drone_views = 2, .size = 16, .seed = 1});
  const auto b = generate_dataset({.scenes = 7, .drone_views = 2, .size = 16, .seed = 1});
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    EXPECT_EQ(a.records[i].vp, b.records[i].vp);
    EXPECT_TRUE(same_pixels(a.records[i].image, b.records[i].image));
  }
}

TEST(GenerateDataset, PairsShareSatelliteAndSplitsAreDisjoint) {
  const auto ds = generate_dataset({.scenes = 10, .drone_views = 3, .size = 16, .seed = 2});
  std::set<std::uint32_t> train, test;
  for (const auto& p : ds.pairs(Split::train)) train.insert(p.scene_id);
  for (const auto& p : ds.pairs(Split::test)) test.insert(p.scene_id);
  EXPECT_EQ(train.size(), 5u);
  EXPECT_EQ(test.size(), 5u);
  for (auto id : train) EXPECT_FALSE(test.contains(id));

  for (const auto& p : ds.pairs()) {
    EXPECT_EQ(p.sat_vp, satellite_viewpoint());
    // The satellite image does not depend on the drone viewpoint.
    std::mt19937_64 rng(derive_seed(2, p.scene_id));
    const auto content = sample_scene(rng, p.scene_id);
    const auto expected = render(content, satellite_viewpoint(), 16);
    for (std::size_t i = 0; i < expected.size(); ++i)
      ASSERT_EQ(p.satellite_image[i], static_cast<double>(static_cast<float>(expected[i])));
  }
}

TEST(DatasetFile, RoundTripIsLossless) {
  const auto ds = generate_dataset({.scenes = 4, .drone_views = 2, .size = 16, .channels = 2, .seed = 3});
  const auto bytes = encode_dataset(ds);
  EXPECT_EQ(bytes.size(), dataset_file_size(12, 16, 2));
  const auto back = decode_dataset(bytes);
  EXPECT_EQ(back.size, 16u);
  EXPECT_EQ(back.channels, 2u);
  ASSERT_EQ(back.records.size(), ds.records.size());
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    EXPECT_EQ(back.records[i].scene_id, ds.records[i].scene_id);
    EXPECT_EQ(back.records[i].vp, ds.records[i].vp);
    EXPECT_TRUE(same_pixels(back.records[i].image, ds.records[i].image));
  }
  EXPECT_EQ(encode_dataset(back), bytes);

  const auto path = (std::filesystem::temp_directory_path() / "cvd_roundtrip.cvds").string();
  write_dataset(ds, path);
  EXPECT_EQ(encode_dataset(read_dataset(path)), bytes);
  std::filesystem::remove(path);
}

TEST(DatasetFile, SizeFormula) {
  // 20-byte header; per record 4 (id) + 1 (kind) + 20 (viewpoint) + 4*C*S*S pixels.
  EXPECT_EQ(dataset_file_size(1000, 32, 1), 20u + 1000u * (25u + 4096u));
  EXPECT_EQ(encode_dataset(generate_dataset({.scenes = 2, .drone_views = 1, .size = 16})).size(),
            20u + 4u * (25u + 1024u));
}

TEST(DatasetFile, CorruptionIsAFormatError) {
  const auto bytes = encode_dataset(generate_dataset({.scenes = 2, .drone_views = 1, .size = 16}));
  std::string kind;

  auto bad_magic = bytes;
  bad_magic[0] ^= 0xFF;
  EXPECT_NE(error_message(bad_magic, &kind).find("offset 0"), std::string::npos);
  EXPECT_EQ(kind, "format");

  auto bad_version = bytes;
  bad_version[4] = 2;
  EXPECT_NE(error_message(bad_version, &kind).find("offset 4"), std::string::npos);
  EXPECT_EQ(kind, "format");

  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  error_message(truncated, &kind);
  EXPECT_EQ(kind, "format");

  auto header_only = std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + 10);
  error_message(header_only, &kind);
  EXPECT_EQ(kind, "format");

  auto bad_kind = bytes;
  bad_kind[20 + 4] = 7;
  EXPECT_NE(error_message(bad_kind, &kind).find("offset 24"), std::string::npos);
  EXPECT_EQ(kind, "format");

  try {
    read_dataset("/nonexistent/dir/file.cvds");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), "io");
  }
}

TEST(DeriveSeed, DistinctStreams) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t s = 0; s < 4; ++s)
    for (std::uint64_t id = 0; id < 256; ++id) seen.insert(derive_seed(s, id));
  EXPECT_EQ(seen.size(), 4u * 256u);
}

}  // namespace
}  // namespace cvd
