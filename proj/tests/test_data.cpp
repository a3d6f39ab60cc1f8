#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "scanet/data.hpp"
#include "scanet/metrics.hpp"

namespace fs = std::filesystem;
using namespace scanet;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("scanet_data_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

Raster gray_raster(int w, int h, std::uint8_t v) { return Raster(w, h, 1, v); }

void write_triple(const fs::path& root, const std::string& id, std::uint8_t label_value = 0) {
  for (const char* k : {"A", "B", "label"}) fs::create_directories(root / "train" / k);
  write_png(root / "train" / "A" / (id + ".png"), Raster(8, 8, 3, 90));
  write_png(root / "train" / "B" / (id + ".png"), Raster(8, 8, 3, 120));
  write_png(root / "train" / "label" / (id + ".png"), gray_raster(8, 8, label_value));
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST(Png, RoundTripsGrayAndRgb) {
  TempDir tmp;
  Raster rgb(5, 3, 3);
  for (std::size_t i = 0; i < rgb.pixels.size(); ++i) rgb.pixels[i] = std::uint8_t(i * 7);
  write_png(tmp.path / "rgb.png", rgb);
  const Raster back = read_png(tmp.path / "rgb.png", 3);
  EXPECT_EQ(back.width, 5);
  EXPECT_EQ(back.height, 3);
  EXPECT_EQ(back.pixels, rgb.pixels);

  Raster g(4, 4, 1);
  g.at(1, 2) = 128;
  g.at(3, 3) = 255;
  write_png(tmp.path / "g.png", g);
  EXPECT_EQ(read_png(tmp.path / "g.png", 1).pixels, g.pixels);
}

TEST(Png, ColourLabelNeedsEqualChannels) {
  TempDir tmp;
  Raster rgb(2, 2, 3, 128);
  write_png(tmp.path / "same.png", rgb);
  EXPECT_EQ(read_png(tmp.path / "same.png", 1).pixels, std::vector<std::uint8_t>(4, 128));
  rgb.at(0, 1, 2) = 3;
  write_png(tmp.path / "diff.png", rgb);
  EXPECT_THROW(read_png(tmp.path / "diff.png", 1), DataError);
  EXPECT_THROW(read_png(tmp.path / "missing.png", 1), DataError);
}

TEST(Dataset, OrphanIsDroppedWithWarning) {
  TempDir tmp;
  for (const char* id : {"a1", "a2", "a3"}) write_triple(tmp.path, id);
  write_png(tmp.path / "train" / "A" / "lonely.png", Raster(8, 8, 3));
  const auto m = scan_dataset(tmp.path, "train");
  EXPECT_EQ(m.ids, (std::vector<std::string>{"a1", "a2", "a3"}));
  ASSERT_EQ(m.warnings.size(), 1u);
  EXPECT_NE(m.warnings[0].find("lonely.png"), std::string::npos);
}

TEST(Dataset, EmptyLabelFolderIsAnError) {
  TempDir tmp;
  for (const char* k : {"A", "B", "label"}) fs::create_directories(tmp.path / "train" / k);
  write_png(tmp.path / "train" / "A" / "x.png", Raster(8, 8, 3));
  write_png(tmp.path / "train" / "B" / "x.png", Raster(8, 8, 3));
  EXPECT_THROW(scan_dataset(tmp.path, "train"), DataError);
}

TEST(Dataset, MissingFolderIsAnError) {
  TempDir tmp;
  fs::create_directories(tmp.path / "train" / "A");
  try {
    scan_dataset(tmp.path, "train");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("B"), std::string::npos);
  }
}

TEST(Dataset, RemapAppliesToRawValues) {
  TempDir tmp;
  write_triple(tmp.path, "s", 255);
  const auto m = scan_dataset(tmp.path, "train");
  const auto s = load_sample(m, "s");
  EXPECT_EQ(s.mask.labels, std::vector<int>(64, 2));
  EXPECT_NEAR(s.image_a.at(0, 0, 0), 90.f / 255.f, 1e-7);
  s.validate(3);

  const auto custom = scan_dataset(tmp.path, "train", parse_remap("0:0,255:1"));
  EXPECT_EQ(load_sample(custom, "s").mask.labels, std::vector<int>(64, 1));
}

TEST(Dataset, UnmappedRawValueNamesValueAndFile) {
  TempDir tmp;
  write_triple(tmp.path, "odd", 17);
  const auto m = scan_dataset(tmp.path, "train");
  try {
    load_sample(m, "odd");
    FAIL();
  } catch (const DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("17"), std::string::npos);
    EXPECT_NE(msg.find("odd.png"), std::string::npos);
  }
}

TEST(Dataset, IncongruentSizesAreRejected) {
  TempDir tmp;
  write_triple(tmp.path, "s");
  write_png(tmp.path / "train" / "B" / "s.png", Raster(8, 6, 3));
  EXPECT_THROW(load_sample(scan_dataset(tmp.path, "train"), "s"), DataError);
}

TEST(Dataset, RemapParsing) {
  EXPECT_EQ(parse_remap("0:0,128:1,255:2"), default_remap());
  EXPECT_EQ(format_remap(default_remap()), "0:0,128:1,255:2");
  EXPECT_THROW(parse_remap("0-1"), DataError);
  EXPECT_THROW(parse_remap("a:b"), DataError);
}

TEST(Batching, StacksImagesAndMasks) {
  Image a(3, 2, 2, 0.5f), b(3, 2, 2, 1.0f);
  Normalization norm{{0.5f, 0.5f, 0.5f}, {0.25f, 0.25f, 0.25f}};
  const auto t = stack_images<float>({&a, &b}, norm);
  EXPECT_EQ(t.shape(), (Shape4{2, 3, 2, 2}));
  EXPECT_FLOAT_EQ(t.values()[0], 0.f);
  EXPECT_FLOAT_EQ(t.values()[12], 2.f);
  LabelMap m1(1, 2, 2, 1), m2(1, 2, 2, 2);
  const auto m = stack_masks({&m1, &m2});
  EXPECT_EQ(m.n, 2);
  EXPECT_EQ(m.at(1, 1, 1), 2);
  Image c(3, 3, 2);
  EXPECT_THROW(stack_images<float>({&a, &c}), ShapeError);
}

TEST(Synthetic, SizeMustBeDivisibleBy32) {
  TempDir tmp;
  SyntheticParams p;
  p.size = 100;
  try {
    generate_synthetic(tmp.path, 1, p);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("size must be divisible by 32"), std::string::npos);
  }
}

TEST(Synthetic, SameSeedSameBytes) {
  TempDir one, two;
  SyntheticParams p;
  p.count = 3;
  generate_synthetic(one.path, 42, p);
  generate_synthetic(two.path, 42, p);
  for (const char* k : {"A", "B", "label"})
    for (int i = 0; i < 3; ++i) {
      const auto name = fs::path("train") / k / (sample_id(i) + ".png");
      EXPECT_EQ(read_bytes(one.path / name), read_bytes(two.path / name)) << name;
    }
  EXPECT_EQ(read_bytes(one.path / "synthetic.json"), read_bytes(two.path / "synthetic.json"));
  const auto side = nlohmann::json::parse(read_bytes(one.path / "synthetic.json"));
  EXPECT_EQ(side["seed"], 42);
  EXPECT_EQ(side["size"], 64);

  const auto m = scan_dataset(one.path, "train");
  EXPECT_EQ(m.ids.size(), 3u);
  EXPECT_TRUE(m.warnings.empty());
  for (const auto& s : load_all(m, 3)) EXPECT_EQ(s.height(), 64);
}

TEST(Synthetic, MaskMarksExactlyTheChangedShapes) {
  std::mt19937_64 rng(7);
  SyntheticParams p;
  for (int trial = 0; trial < 20; ++trial) {
    const auto s = synthesize_sample(p, rng, "x");
    for (int y = 0; y < p.size; ++y)
      for (int x = 0; x < p.size; ++x) {
        int expected = 0;
        for (const auto& shape : s.shapes)
          if (shape.contains(y + 0.5, x + 0.5)) expected = shape.kind == ShapeKind::building ? 2 : 1;
        // buildings are drawn after roads, so they win on overlap
        bool in_building = false;
        for (const auto& shape : s.shapes)
          in_building = in_building || (shape.kind == ShapeKind::building && shape.contains(y + 0.5, x + 0.5));
        if (in_building) expected = 2;
        EXPECT_EQ(s.sample.mask.at(y, x), expected);
      }
  }
}

TEST(Synthetic, UnchangedPixelsShareTheBackground) {
  std::mt19937_64 rng(3);
  SyntheticParams p;
  p.jitter = 0.0;
  const auto s = synthesize_sample(p, rng, "x");
  for (int y = 0; y < p.size; ++y)
    for (int x = 0; x < p.size; ++x)
      if (s.sample.mask.at(y, x) == 0) {
        for (int c = 0; c < 3; ++c) EXPECT_EQ(s.sample.image_a.at(c, y, x), s.sample.image_b.at(c, y, x));
      }
}

TEST(Synthetic, RoadWidthsStayInRange) {
  std::mt19937_64 rng(11);
  SyntheticParams p;
  p.min_roads = 1;
  for (int i = 0; i < 50; ++i)
    for (const auto& s : synthesize_sample(p, rng, "x").shapes)
      if (s.kind == ShapeKind::road) {
        EXPECT_GE(2 * s.half_h, p.min_road_width);
        EXPECT_LE(2 * s.half_h, p.max_road_width);
      }
}

TEST(Synthetic, SmallBuildingShareFollowsParameter) {
  std::mt19937_64 rng(5);
  SyntheticParams p;
  p.size = 128;
  p.max_roads = 0;
  p.min_roads = 0;
  p.small_fraction = 0.5;
  long small = 0, total = 0;
  for (int i = 0; i < 150; ++i) {
    const auto s = synthesize_sample(p, rng, "x");
    for (const auto& c : connected_components(s.sample.mask, 2).components) {
      ++total;
      small += c.area < 400;
      if (c.area >= 400) {
        EXPECT_GE(c.area, 484);
      }
    }
  }
  const double share = double(small) / double(total);
  const double sigma = std::sqrt(0.25 / double(total));
  EXPECT_NEAR(share, 0.5, 5 * sigma) << small << " of " << total;
}
