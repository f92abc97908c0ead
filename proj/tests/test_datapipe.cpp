#include <gtest/gtest.h>

#include <fstream>

#include "checks.hpp"
#include "maskdiff/datapipe.hpp"
#include "maskdiff/hash.hpp"
#include "maskdiff/png_io.hpp"
#include "temp_dir.hpp"

using namespace maskdiff;

namespace {

Tensor<float> random_image(int h, int w, Rng& rng) {
  Tensor<float> t(Shape{1, 3, h, w});
  for (auto& v : t.values()) v = static_cast<float>(rng.uniform(-1, 1));
  return t;
}

// Image whose channel 0 stores the source row and channel 1 the source column.
Tensor<float> coordinate_image(int n) {
  Tensor<float> t(Shape{1, 3, n, n});
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      t.at(0, 0, y, x) = static_cast<float>(y);
      t.at(0, 1, y, x) = static_cast<float>(x);
    }
  return t;
}

LabelMap coordinate_mask(int n) {
  LabelMap m(n, n);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) m.at(y, x) = static_cast<std::uint8_t>(y * n + x);
  return m;
}

}  // namespace

TEST(Tiling, SingleTile) {
  EXPECT_EQ(tile_origins(64, 64, 0), std::vector<int>{0});
  Rng rng(1);
  const auto img = random_image(64, 64, rng);
  const auto tiles = tile(img, 64, 0);
  ASSERT_EQ(tiles.size(), 1u);
  EXPECT_EQ(tiles[0].y, 0);
  EXPECT_EQ(tiles[0].image, img);
}

TEST(Tiling, LastOriginShiftsInward) {
  EXPECT_EQ(tile_origins(100, 64, 0), (std::vector<int>{0, 36}));
  Rng rng(1);
  const auto tiles = tile(random_image(100, 100, rng), 64, 0);
  ASSERT_EQ(tiles.size(), 4u);
  EXPECT_EQ(tiles[3].y, 36);
  EXPECT_EQ(tiles[3].x, 36);
  EXPECT_EQ(tiles[1].y, 0);
  EXPECT_EQ(tiles[1].x, 36);
}

TEST(Tiling, CoverageAndStitchRoundTrip) {
  Rng rng(4);
  for (int k = 0; k < 20; ++k) {
    const int h = rng.uniform_int(8, 40), w = rng.uniform_int(8, 40);
    const int patch = rng.uniform_int(4, std::min(h, w));
    const int overlap = rng.uniform_int(0, patch - 1);
    const auto img = random_image(h, w, rng);
    const auto tiles = tile(img, patch, overlap);
    std::vector<int> cover(static_cast<std::size_t>(h) * w, 0);
    for (const auto& t : tiles)
      for (int y = 0; y < patch; ++y)
        for (int x = 0; x < patch; ++x) ++cover[(t.y + y) * w + t.x + x];
    for (int c : cover) EXPECT_GT(c, 0);
    EXPECT_LT(max_abs_diff(stitch(tiles, h, w), img), 1e-6);
  }
}

TEST(Tiling, Errors) {
  Rng rng(1);
  EXPECT_THROW(tile(random_image(16, 16, rng), 32, 0), DomainError);
  EXPECT_THROW(tile(random_image(16, 16, rng), 8, 8), DomainError);
  std::vector<Tile> none;
  EXPECT_THROW(stitch(none, 4, 4), DomainError);
}

TEST(Augment, GroupIdentities) {
  Rng rng(2);
  const auto img = random_image(8, 8, rng);
  const auto mask = oracle::random_blob_mask(8, 4, rng);
  auto r = img;
  auto m = mask;
  for (int i = 0; i < 4; ++i) {
    r = rotate90(r, 1);
    m = rotate90(m, 1);
  }
  EXPECT_EQ(r, img);
  EXPECT_EQ(m, mask);
  for (bool hz : {true, false}) {
    EXPECT_EQ(flip(flip(img, hz), hz), img);
    EXPECT_EQ(flip(flip(mask, hz), hz), mask);
  }
  EXPECT_NE(rotate90(img, 1), img);
}

TEST(Augment, ZeroMagnitudeElasticIsIdentity) {
  Rng rng(3);
  const auto img = random_image(12, 12, rng);
  const auto mask = oracle::random_blob_mask(12, 3, rng);
  const auto field = random_elastic_field(12, 12, 3.0, 0.0, rng);
  EXPECT_LT(max_abs_diff(warp(img, field), img), 1e-7);
  EXPECT_EQ(warp(mask, field), mask);
  const std::vector<AugmentOp> ops{AugmentOp::elastic};
  AugmentParams p;
  p.elastic_magnitude = 0.0;
  const auto out = augment(img, mask, ops, rng, p);
  EXPECT_LT(max_abs_diff(out.image, img), 1e-7);
  EXPECT_EQ(*out.mask, mask);
}

TEST(Augment, GeometricOpsKeepImageAndMaskAligned) {
  // every augmented mask pixel must carry the source coordinate stored in the image
  const int n = 12;
  const auto img = coordinate_image(n);
  const auto mask = coordinate_mask(n);
  const std::vector<AugmentOp> ops{AugmentOp::rotate90, AugmentOp::flip, AugmentOp::random_crop};
  Rng rng(9);
  for (int k = 0; k < 30; ++k) {
    const auto out = augment(img, mask, ops, rng);
    ASSERT_EQ(out.image.h(), out.mask->height);
    for (int y = 0; y < out.mask->height; ++y)
      for (int x = 0; x < out.mask->width; ++x) {
        const int src = out.mask->at(y, x);
        EXPECT_EQ(out.image.at(0, 0, y, x), static_cast<float>(src / n));
        EXPECT_EQ(out.image.at(0, 1, y, x), static_cast<float>(src % n));
      }
  }
}

TEST(Augment, NeverIntroducesNewClasses) {
  Rng rng(5);
  const std::vector<AugmentOp> ops{AugmentOp::rotate90, AugmentOp::flip, AugmentOp::color_shift,
                                   AugmentOp::random_crop, AugmentOp::elastic};
  for (int k = 0; k < 30; ++k) {
    const auto img = random_image(16, 16, rng);
    const auto mask = oracle::random_blob_mask(16, 4, rng, 6);
    const auto out = augment(img, mask, ops, rng);
    const auto before = mask.classes();
    for (int c : out.mask->classes()) EXPECT_TRUE(before.count(c)) << c;
    for (float v : out.image.values()) {
      EXPECT_GE(v, -1.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
}

TEST(Augment, ColorShiftLeavesMaskAlone) {
  Rng rng(6);
  const auto img = random_image(8, 8, rng);
  const auto mask = oracle::random_blob_mask(8, 3, rng);
  const std::vector<AugmentOp> ops{AugmentOp::color_shift};
  const auto out = augment(img, mask, ops, rng);
  EXPECT_EQ(*out.mask, mask);
  EXPECT_NE(out.image, img);
}

TEST(Augment, CropLargerThanInputThrows) {
  Rng rng(6);
  const auto img = random_image(8, 8, rng);
  const std::vector<AugmentOp> ops{AugmentOp::random_crop};
  AugmentParams p;
  p.crop_size = 9;
  EXPECT_THROW(augment(img, std::nullopt, ops, rng, p), DomainError);
}

TEST(Resize, Contracts) {
  Rng rng(7);
  const auto img = random_image(16, 16, rng);
  EXPECT_EQ(resize(img, 16), img);
  const Tensor<float> flat(Shape{1, 3, 16, 16}, 0.25f);
  const auto small_flat = resize(flat, 7);
  for (float v : small_flat.values()) EXPECT_NEAR(v, 0.25f, 1e-6);
  const auto mask = oracle::random_blob_mask(16, 4, rng, 6);
  for (int target : {5, 8, 31}) {
    const auto small = resize(mask, target);
    EXPECT_EQ(small.height, target);
    for (int c : small.classes()) EXPECT_TRUE(mask.classes().count(c));
  }
  EXPECT_THROW(resize(img, 0), DomainError);
  EXPECT_THROW(resize(mask, 8, ResizeMode::bilinear_image), DomainError);
}

TEST(Png, RoundTripsBitExact) {
  Rng rng(1);
  Tensor<float> img(Shape{1, 3, 5, 7});
  for (auto& v : img.values()) v = from_byte(static_cast<std::uint8_t>(rng.uniform_int(0, 255)));
  const auto bytes = encode_png_rgb(img);
  EXPECT_TRUE(has_png_signature(bytes));
  EXPECT_EQ(decode_png_rgb(bytes), img);
  const auto mask = oracle::random_blob_mask(9, 4, rng);
  EXPECT_EQ(decode_png_mask(encode_png_mask(mask)), mask);
  EXPECT_EQ(encode_png_mask(mask), encode_png_mask(mask));
}

TEST(Png, ByteMapping) {
  EXPECT_EQ(to_byte(-1.0f), 0);
  EXPECT_EQ(to_byte(1.0f), 255);
  EXPECT_EQ(to_byte(2.0f), 255);
  EXPECT_FLOAT_EQ(from_byte(0), -1.0f);
  EXPECT_FLOAT_EQ(from_byte(255), 1.0f);
  for (int b = 0; b < 256; ++b) EXPECT_EQ(to_byte(from_byte(static_cast<std::uint8_t>(b))), b);
}

TEST(Png, MalformedInputRaisesIoError) {
  std::vector<std::uint8_t> junk{1, 2, 3, 4};
  EXPECT_THROW(decode_png_rgb(junk), IoError);
  Rng rng(1);
  auto bytes = encode_png_mask(oracle::random_blob_mask(8, 3, rng));
  bytes.resize(bytes.size() / 2);
  EXPECT_THROW(decode_png_mask(bytes), IoError);
}

TEST(Manifest, JsonRoundTrip) {
  oracle::TempDir dir;
  Manifest m;
  m.num_classes = 3;
  m.class_names = {"background", "a", "b"};
  DatasetRecord r;
  r.image = "images/0.png";
  r.mask = "masks/0.png";
  r.split = Split::val;
  r.metadata["creatinine"] = 1.25;
  r.provenance = Provenance::d2;
  r.tag = "seen";
  m.records.push_back(r);
  r.image = "images/1.png";
  r.mask.reset();
  r.split = Split::test;
  m.records.push_back(r);
  save_manifest(m, dir / "m.json");
  const auto back = load_manifest(dir / "m.json");
  EXPECT_EQ(back.base_dir, dir.path());
  EXPECT_EQ(manifest_to_json(back), manifest_to_json(m));
  ASSERT_EQ(back.records.size(), 2u);
  EXPECT_FALSE(back.records[1].mask.has_value());
  EXPECT_EQ(back.records[0].metadata.at("creatinine"), 1.25);
  EXPECT_EQ(back.filter(Split::test).records.size(), 1u);
}

TEST(Manifest, ValidationErrors) {
  Manifest m;
  DatasetRecord r;
  r.image = "a.png";
  m.records = {r, r};
  EXPECT_THROW(m.validate(), ValidationError);
  m.records = {r};
  m.version = "9";
  EXPECT_THROW(m.validate(), ValidationError);
  oracle::TempDir dir;
  std::ofstream(dir / "bad.json") << "{ not json";
  EXPECT_THROW(load_manifest(dir / "bad.json"), ValidationError);
  EXPECT_THROW(parse_split("holdout"), ValidationError);
}

TEST(Manifest, LoadSamplesChecksMasks) {
  oracle::TempDir dir;
  Rng rng(3);
  write_image(dir / "i.png", random_image(8, 8, rng));
  write_mask(dir / "ok.png", oracle::random_blob_mask(8, 3, rng));
  write_mask(dir / "small.png", LabelMap(4, 8));
  write_mask(dir / "high.png", LabelMap(8, 8, 7));
  Manifest m;
  m.num_classes = 3;
  m.base_dir = dir.path();
  m.records = {DatasetRecord{"i.png", "ok.png"}};
  EXPECT_EQ(load_samples(m).size(), 1u);
  m.records[0].mask = "small.png";
  EXPECT_THROW(load_samples(m), ValidationError);
  m.records[0].mask = "high.png";
  EXPECT_THROW(load_samples(m), ValidationError);
}

TEST(Toy, DeterministicAndComplete) {
  ToySpec spec{6, 32, 4, 11, 1, 2};
  const auto a = make_toy_samples(spec);
  const auto b = make_toy_samples(spec);
  ASSERT_EQ(a.size(), 6u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].image, b[i].image);
    EXPECT_EQ(a[i].mask, b[i].mask);
    std::vector<int> hist(4, 0);
    for (auto v : a[i].mask.labels) ++hist[v];
    for (int c = 1; c < 4; ++c) EXPECT_GE(hist[c], 1) << "record " << i << " class " << c;
    EXPECT_TRUE(a[i].metadata.count("creatinine"));
  }
  EXPECT_EQ(a[0].split, Split::train);
  EXPECT_EQ(a[3].split, Split::val);
  EXPECT_EQ(a[4].split, Split::test);
  EXPECT_NE(a[0].image, a[1].image);
}

TEST(Toy, DatasetIsByteIdentical) {
  oracle::TempDir d1, d2;
  ToySpec spec{4, 32, 4, 7, 0, 1};
  const auto m = make_toy_dataset(spec, d1.path());
  make_toy_dataset(spec, d2.path());
  EXPECT_EQ(m.records.size(), 4u);
  EXPECT_EQ(m.records[0].provenance, Provenance::toy);
  EXPECT_EQ(file_sha256(d1 / "manifest.json"), file_sha256(d2 / "manifest.json"));
  for (const auto& r : m.records) {
    EXPECT_EQ(file_sha256(d1 / r.image), file_sha256(d2 / r.image));
    EXPECT_EQ(file_sha256(d1 / *r.mask), file_sha256(d2 / *r.mask));
  }
  const auto back = load_samples(load_manifest(d1 / "manifest.json"));
  EXPECT_EQ(back[0].image.h(), 32);
}

TEST(Toy, EmptyDataset) {
  oracle::TempDir dir;
  const auto m = make_toy_dataset(ToySpec{0, 32, 4, 1, 0, 0}, dir.path());
  EXPECT_TRUE(m.records.empty());
  EXPECT_TRUE(load_manifest(dir / "manifest.json").records.empty());
}
