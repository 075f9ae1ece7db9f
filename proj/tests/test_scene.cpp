#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "flowdet/error.hpp"
#include "flowdet/scene.hpp"

using namespace flowdet;

namespace {

SceneConfig tiny_config() {
  SceneConfig c;
  c.channels = 3;
  c.height = 16;
  c.width = 16;
  c.num_classes = 3;
  c.min_objects = 1;
  c.max_objects = 3;
  c.noise_std = 0.05;
  c.min_size = 0.2;
  c.max_size = 0.6;
  return c;
}

std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_SUITE("scene") {

TEST_CASE("generate_scene determinism and invariants") {
  const SceneConfig cfg = tiny_config();
  const Scene a = generate_scene(42, cfg);
  const Scene b = generate_scene(42, cfg);
  CHECK(a.raster.values == b.raster.values);
  REQUIRE(a.gt_boxes.size() == b.gt_boxes.size());
  for (std::size_t i = 0; i < a.gt_boxes.size(); ++i) {
    CHECK(a.gt_boxes[i].cx == b.gt_boxes[i].cx);
    CHECK(a.gt_classes[i] == b.gt_classes[i]);
  }
  CHECK(a.gt_boxes.size() >= 1);
  CHECK(a.gt_boxes.size() <= 3);
  for (std::size_t i = 0; i < a.gt_boxes.size(); ++i) {
    const BoundingBox clipped = clip_to_unit(a.gt_boxes[i]);
    CHECK(clipped.cx == a.gt_boxes[i].cx);
    CHECK(a.gt_boxes[i].w >= cfg.min_size);
    CHECK(a.gt_classes[i] >= 0);
    CHECK(a.gt_classes[i] < cfg.num_classes);
  }
  const Scene c = generate_scene(43, cfg);
  CHECK(a.raster.values != c.raster.values);
}

TEST_CASE("noise-free raster support lies inside the gt box") {
  SceneConfig cfg = tiny_config();
  cfg.noise_std = 0.0;
  cfg.min_objects = cfg.max_objects = 1;
  const Scene s = generate_scene(0, cfg);
  REQUIRE(s.gt_boxes.size() == 1);
  const Corners c = to_corners(s.gt_boxes[0]);
  for (int y = 0; y < cfg.height; ++y)
    for (int x = 0; x < cfg.width; ++x) {
      double mag = 0.0;
      for (int ch = 0; ch < cfg.channels; ++ch)
        mag += std::abs(s.raster.at(ch, y, x));
      if (mag < 1e-9) continue;
      // Cell centers in normalized units must fall inside the box.
      const double cx = (x + 0.5) / cfg.width;
      const double cy = (y + 0.5) / cfg.height;
      CHECK(cx >= c.x0 - 0.5 / cfg.width);
      CHECK(cx <= c.x1 + 0.5 / cfg.width);
      CHECK(cy >= c.y0 - 0.5 / cfg.height);
      CHECK(cy <= c.y1 + 0.5 / cfg.height);
    }
}

TEST_CASE("class histogram is roughly uniform") {
  const SceneConfig cfg = tiny_config();
  int counts[3] = {0, 0, 0};
  int total = 0;
  for (int seed = 0; seed < 1000; ++seed) {
    const Scene s = generate_scene(seed, cfg);
    for (int c : s.gt_classes) {
      ++counts[c];
      ++total;
    }
  }
  const double expect = total / 3.0;
  const double sigma = std::sqrt(total * (1.0 / 3.0) * (2.0 / 3.0));
  for (int c = 0; c < 3; ++c) CHECK(std::abs(counts[c] - expect) < 3.0 * sigma);
}

TEST_CASE("roi_align constants, linearity, full-image oracle") {
  FeatureGrid g;
  g.channels = 2;
  g.height = 8;
  g.width = 8;
  g.values.assign(2 * 8 * 8, 0.0);

  SUBCASE("constant grid") {
    for (auto& v : g.values) v = 3.25;
    const RoiFeature r = roi_align(g, {0.4, 0.6, 0.3, 0.2}, 4);
    for (double v : r.values) CHECK(v == doctest::Approx(3.25).epsilon(1e-12));
  }
  SUBCASE("full image at P = H reads back the grid") {
    for (std::size_t i = 0; i < g.values.size(); ++i)
      g.values[i] = static_cast<double>(i % 13) - 6.0;
    const RoiFeature r = roi_align(g, {0.5, 0.5, 1.0, 1.0}, 8);
    // Lattice centers coincide with pixel centers, so bilinear sampling
    // returns the grid exactly.
    for (int c = 0; c < 2; ++c)
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x)
          CHECK(r.values[(c * 8 + y) * 8 + x] ==
                doctest::Approx(g.at(c, y, x)).epsilon(1e-12));
  }
  SUBCASE("linearity in the grid") {
    FeatureGrid g2 = g;
    for (std::size_t i = 0; i < g.values.size(); ++i) {
      g.values[i] = std::sin(0.37 * i);
      g2.values[i] = std::cos(0.21 * i);
    }
    FeatureGrid mix = g;
    for (std::size_t i = 0; i < g.values.size(); ++i)
      mix.values[i] = 2.0 * g.values[i] - 0.5 * g2.values[i];
    const BoundingBox b{0.45, 0.55, 0.52, 0.35};
    const RoiFeature ra = roi_align(g, b, 5);
    const RoiFeature rb = roi_align(g2, b, 5);
    const RoiFeature rm = roi_align(mix, b, 5);
    for (std::size_t i = 0; i < rm.values.size(); ++i)
      CHECK(rm.values[i] ==
            doctest::Approx(2.0 * ra.values[i] - 0.5 * rb.values[i])
                .epsilon(1e-9));
  }
  SUBCASE("degenerate box samples its center") {
    for (std::size_t i = 0; i < g.values.size(); ++i)
      g.values[i] = static_cast<double>(i);
    const RoiFeature r = roi_align(g, {0.5, 0.5, 0.0, 0.0}, 3);
    for (int c = 0; c < 2; ++c)
      for (int i = 0; i < 9; ++i)
        CHECK(r.values[c * 9 + i] ==
              doctest::Approx(r.values[c * 9]).epsilon(1e-12));
  }
}

TEST_CASE("global_average_pool oracle") {
  FeatureGrid g;
  g.channels = 2;
  g.height = 4;
  g.width = 4;
  g.values.assign(32, 0.0);
  g.at(0, 1, 2) = 1.0;
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) g.at(1, y, x) = 0.5;
  const auto pooled = global_average_pool(g);
  REQUIRE(pooled.size() == 2);
  CHECK(pooled[0] == doctest::Approx(1.0 / 16.0).epsilon(1e-12));
  CHECK(pooled[1] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("dataset round-trip is bit-exact") {
  const SceneConfig cfg = tiny_config();
  Dataset d;
  d.num_classes = cfg.num_classes;
  d.config_hash = "cafe0123cafe0123";
  for (int i = 0; i < 10; ++i) {
    Scene s = generate_scene(100 + i, cfg);
    s.scene_id = i;
    d.scenes.push_back(std::move(s));
  }
  const std::string path = temp_path("flowdet_test_dataset.jsonl");
  write_dataset(d, path);
  const Dataset back = read_dataset(path);
  CHECK(back.num_classes == d.num_classes);
  CHECK(back.config_hash == d.config_hash);
  REQUIRE(back.scenes.size() == d.scenes.size());
  for (std::size_t i = 0; i < d.scenes.size(); ++i) {
    CHECK(back.scenes[i].scene_id == d.scenes[i].scene_id);
    CHECK(back.scenes[i].raster.values == d.scenes[i].raster.values);
    REQUIRE(back.scenes[i].gt_boxes.size() == d.scenes[i].gt_boxes.size());
    for (std::size_t j = 0; j < d.scenes[i].gt_boxes.size(); ++j) {
      CHECK(back.scenes[i].gt_boxes[j].cx == d.scenes[i].gt_boxes[j].cx);
      CHECK(back.scenes[i].gt_boxes[j].cy == d.scenes[i].gt_boxes[j].cy);
      CHECK(back.scenes[i].gt_boxes[j].w == d.scenes[i].gt_boxes[j].w);
      CHECK(back.scenes[i].gt_boxes[j].h == d.scenes[i].gt_boxes[j].h);
      CHECK(back.scenes[i].gt_classes[j] == d.scenes[i].gt_classes[j]);
    }
  }
  // Write-read-write emits identical bytes.
  const std::string path2 = temp_path("flowdet_test_dataset2.jsonl");
  write_dataset(back, path2);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  const std::string s1((std::istreambuf_iterator<char>(f1)), {});
  const std::string s2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(s1 == s2);
  std::remove(path.c_str());
  std::remove(path2.c_str());
}

TEST_CASE("dataset format errors") {
  const std::string path = temp_path("flowdet_test_badfile.jsonl");
  {
    std::ofstream out(path);
    out << "not json\n";
  }
  CHECK_THROWS_AS(read_dataset(path), Error);
  {
    std::ofstream out(path);
    out << R"({"K":3,"config_hash":"x","kind":"flowdet-dataset","version":99})"
        << "\n";
  }
  CHECK_THROWS_AS(read_dataset(path), Error);
  SUBCASE("empty dataset round-trips") {
    Dataset d;
    d.num_classes = 2;
    d.config_hash = "00";
    write_dataset(d, path);
    const Dataset back = read_dataset(path);
    CHECK(back.scenes.empty());
    CHECK(back.num_classes == 2);
  }
  std::remove(path.c_str());
}

}  // TEST_SUITE
