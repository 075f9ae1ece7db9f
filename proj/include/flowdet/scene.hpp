#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "flowdet/box_geometry.hpp"

namespace flowdet {

// Single-scale feature raster standing in for an image encoder. Values are
// stored row-major as [channels, height, width].
struct FeatureGrid {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> values;

  double at(int c, int y, int x) const {
    return values[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  double& at(int c, int y, int x) {
    return values[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
};

struct Scene {
  std::int64_t scene_id = 0;
  FeatureGrid raster;
  std::vector<BoundingBox> gt_boxes;
  std::vector<int> gt_classes;
};

struct RoiFeature {
  int channels = 0;
  int pooled = 0;
  std::vector<double> values;  // [channels, pooled, pooled]
};

struct SceneConfig {
  int channels = 3;
  int height = 64;
  int width = 64;
  int num_classes = 3;
  int min_objects = 1;
  int max_objects = 4;
  int max_total = 16;
  double noise_std = 0.05;
  double min_size = 0.1;
  double max_size = 0.5;
  double iou_cap = 0.5;
  int place_retries = 64;
};

// Fixed per-class channel fill pattern; classes below the channel count get a
// one-hot signature, the rest a deterministic pseudo-random one.
std::vector<double> class_signature(int class_id, int channels);

// Deterministic synthetic scene: M rectangles painted with their class
// signature (later boxes occlude earlier ones) plus additive Gaussian noise.
Scene generate_scene(std::uint64_t rng_seed, const SceneConfig& config);

// Bilinear sampling of pooled x pooled points at the centers of a uniform
// lattice over the clipped box. Half-pixel centers, clamped border reads,
// points more than one pixel outside the grid read as 0.
RoiFeature roi_align(const FeatureGrid& grid, const BoundingBox& b, int pooled);

std::vector<double> global_average_pool(const FeatureGrid& grid);

struct Dataset {
  int num_classes = 0;
  std::string config_hash;
  std::vector<Scene> scenes;
};

// Line-delimited JSON: one header line, then one record per scene. Float
// round-trips are bit-exact.
void write_dataset(const Dataset& dataset, const std::string& path);
Dataset read_dataset(const std::string& path);

}  // namespace flowdet
