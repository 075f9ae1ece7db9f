#include "flowdet/scene.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "flowdet/error.hpp"
#include "flowdet/rng.hpp"

namespace flowdet {

namespace {

void validate_config(const SceneConfig& c) {
  if (c.channels < 1 || c.height < 8 || c.width < 8) {
    raise(ErrorCode::InvalidParameter, "raster must be at least 8x8 with >=1 channel");
  }
  if (c.num_classes < 2) {
    raise(ErrorCode::InvalidParameter, "need at least 2 classes");
  }
  if (c.min_objects < 1 || c.min_objects > c.max_objects ||
      c.max_objects > c.max_total) {
    raise(ErrorCode::InvalidParameter,
          "object count bounds must satisfy 1 <= min <= max <= max_total");
  }
  if (c.min_size <= 0.0 || c.min_size > c.max_size || c.max_size > 1.0) {
    raise(ErrorCode::InvalidParameter, "box size bounds invalid");
  }
}

}  // namespace

std::vector<double> class_signature(int class_id, int channels) {
  std::vector<double> sig(channels, 0.0);
  if (class_id < channels) {
    sig[class_id] = 1.0;
    return sig;
  }
  Rng rng = Rng::child(0x51677u, static_cast<std::uint64_t>(class_id));
  for (double& v : sig) v = 0.2 + 0.8 * rng.u01();
  return sig;
}

Scene generate_scene(std::uint64_t rng_seed, const SceneConfig& config) {
  validate_config(config);
  Rng rng = Rng::child(rng_seed, 0x5ce7eull);

  Scene scene;
  scene.scene_id = static_cast<std::int64_t>(rng_seed);
  scene.raster.channels = config.channels;
  scene.raster.height = config.height;
  scene.raster.width = config.width;
  scene.raster.values.assign(
      static_cast<std::size_t>(config.channels) * config.height * config.width,
      0.0);

  int count = config.min_objects +
              static_cast<int>(rng.uniform_int(
                  static_cast<std::uint64_t>(config.max_objects - config.min_objects + 1)));

  std::vector<Corners> placed;
  for (int i = 0; i < count; ++i) {
    int cls = static_cast<int>(rng.uniform_int(config.num_classes));
    bool ok = false;
    for (int attempt = 0; attempt < config.place_retries && !ok; ++attempt) {
      BoundingBox b;
      b.w = rng.uniform(config.min_size, config.max_size);
      b.h = rng.uniform(config.min_size, config.max_size);
      b.cx = rng.uniform(b.w / 2.0, 1.0 - b.w / 2.0);
      b.cy = rng.uniform(b.h / 2.0, 1.0 - b.h / 2.0);
      Corners c = to_corners(b);
      bool overlaps = false;
      for (const Corners& other : placed) {
        if (iou(c, other) > config.iou_cap) {
          overlaps = true;
          break;
        }
      }
      if (overlaps) continue;
      placed.push_back(c);
      scene.gt_boxes.push_back(clip_to_unit(b));
      scene.gt_classes.push_back(cls);
      ok = true;
    }
    if (!ok) {
      raise(ErrorCode::PlacementFailure,
            "could not place object " + std::to_string(i) + " within retry budget");
    }
  }

  // Paint in placement order so later boxes occlude earlier ones.
  for (std::size_t i = 0; i < scene.gt_boxes.size(); ++i) {
    Corners c = to_corners(scene.gt_boxes[i]);
    std::vector<double> sig = class_signature(scene.gt_classes[i], config.channels);
    for (int y = 0; y < config.height; ++y) {
      double cy = (y + 0.5) / config.height;
      if (cy < c.y0 || cy > c.y1) continue;
      for (int x = 0; x < config.width; ++x) {
        double cx = (x + 0.5) / config.width;
        if (cx < c.x0 || cx > c.x1) continue;
        for (int ch = 0; ch < config.channels; ++ch) {
          scene.raster.at(ch, y, x) = sig[ch];
        }
      }
    }
  }

  if (config.noise_std > 0.0) {
    for (double& v : scene.raster.values) {
      v += config.noise_std * rng.normal();
    }
  }
  return scene;
}

namespace {

double bilinear_read(const FeatureGrid& grid, int ch, double y, double x) {
  if (y < -1.0 || y > grid.height || x < -1.0 || x > grid.width) return 0.0;
  y = std::clamp(y, 0.0, static_cast<double>(grid.height - 1));
  x = std::clamp(x, 0.0, static_cast<double>(grid.width - 1));
  int y0 = static_cast<int>(y);
  int x0 = static_cast<int>(x);
  int y1 = std::min(y0 + 1, grid.height - 1);
  int x1 = std::min(x0 + 1, grid.width - 1);
  double ly = y - y0;
  double lx = x - x0;
  return (1.0 - ly) * (1.0 - lx) * grid.at(ch, y0, x0) +
         (1.0 - ly) * lx * grid.at(ch, y0, x1) +
         ly * (1.0 - lx) * grid.at(ch, y1, x0) + ly * lx * grid.at(ch, y1, x1);
}

}  // namespace

RoiFeature roi_align(const FeatureGrid& grid, const BoundingBox& b, int pooled) {
  if (pooled < 1) {
    raise(ErrorCode::InvalidParameter, "pooled resolution must be >= 1");
  }
  Corners c = to_corners(clip_to_unit(b));
  RoiFeature out;
  out.channels = grid.channels;
  out.pooled = pooled;
  out.values.resize(static_cast<std::size_t>(grid.channels) * pooled * pooled);
  double bw = c.x1 - c.x0;
  double bh = c.y1 - c.y0;
  std::size_t idx = 0;
  for (int ch = 0; ch < grid.channels; ++ch) {
    for (int py = 0; py < pooled; ++py) {
      double v = c.y0 + (py + 0.5) * bh / pooled;
      double gy = v * grid.height - 0.5;
      for (int px = 0; px < pooled; ++px) {
        double u = c.x0 + (px + 0.5) * bw / pooled;
        double gx = u * grid.width - 0.5;
        out.values[idx++] = bilinear_read(grid, ch, gy, gx);
      }
    }
  }
  return out;
}

std::vector<double> global_average_pool(const FeatureGrid& grid) {
  std::vector<double> pooled(grid.channels, 0.0);
  const double inv = 1.0 / (static_cast<double>(grid.height) * grid.width);
  for (int ch = 0; ch < grid.channels; ++ch) {
    double total = 0.0;
    for (int y = 0; y < grid.height; ++y) {
      for (int x = 0; x < grid.width; ++x) {
        total += grid.at(ch, y, x);
      }
    }
    pooled[ch] = total * inv;
  }
  return pooled;
}

void write_dataset(const Dataset& dataset, const std::string& path) {
  std::ofstream out(path);
  if (!out) {
    raise(ErrorCode::IoError, "cannot open " + path + " for writing");
  }
  nlohmann::json header = {{"version", 1},
                           {"kind", "flowdet-dataset"},
                           {"K", dataset.num_classes},
                           {"config_hash", dataset.config_hash}};
  out << header.dump() << "\n";
  for (const Scene& scene : dataset.scenes) {
    nlohmann::json rec;
    rec["version"] = 1;
    rec["scene_id"] = scene.scene_id;
    rec["C"] = scene.raster.channels;
    rec["H"] = scene.raster.height;
    rec["W"] = scene.raster.width;
    rec["raster"] = scene.raster.values;
    nlohmann::json boxes = nlohmann::json::array();
    for (const BoundingBox& b : scene.gt_boxes) {
      boxes.push_back({b.cx, b.cy, b.w, b.h});
    }
    rec["boxes"] = std::move(boxes);
    rec["classes"] = scene.gt_classes;
    out << rec.dump() << "\n";
  }
  if (!out) {
    raise(ErrorCode::IoError, "write failed for " + path);
  }
}

Dataset read_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    raise(ErrorCode::IoError, "cannot open " + path);
  }
  Dataset dataset;
  std::string line;
  int line_no = 0;
  auto parse_line = [&](const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
    if (j.is_discarded()) {
      raise(ErrorCode::FormatError,
            path + ": malformed record at line " + std::to_string(line_no));
    }
    return j;
  };

  if (!std::getline(in, line)) {
    raise(ErrorCode::FormatError, path + ": missing header line");
  }
  line_no = 1;
  nlohmann::json header = parse_line(line);
  if (!header.contains("version") || !header.contains("K")) {
    raise(ErrorCode::FormatError, path + ": header missing fields at line 1");
  }
  if (header["version"].get<int>() != 1) {
    raise(ErrorCode::VersionError,
          path + ": unsupported dataset version " + header["version"].dump());
  }
  dataset.num_classes = header["K"].get<int>();
  dataset.config_hash = header.value("config_hash", "");

  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json rec = parse_line(line);
    try {
      Scene scene;
      scene.scene_id = rec.at("scene_id").get<std::int64_t>();
      scene.raster.channels = rec.at("C").get<int>();
      scene.raster.height = rec.at("H").get<int>();
      scene.raster.width = rec.at("W").get<int>();
      scene.raster.values = rec.at("raster").get<std::vector<double>>();
      std::size_t expected = static_cast<std::size_t>(scene.raster.channels) *
                             scene.raster.height * scene.raster.width;
      if (scene.raster.values.size() != expected) {
        raise(ErrorCode::FormatError,
              path + ": raster size mismatch at line " + std::to_string(line_no));
      }
      for (const auto& b : rec.at("boxes")) {
        scene.gt_boxes.push_back(BoundingBox{b.at(0).get<double>(), b.at(1).get<double>(),
                                             b.at(2).get<double>(), b.at(3).get<double>()});
      }
      scene.gt_classes = rec.at("classes").get<std::vector<int>>();
      if (scene.gt_classes.size() != scene.gt_boxes.size()) {
        raise(ErrorCode::FormatError,
              path + ": boxes/classes length mismatch at line " + std::to_string(line_no));
      }
      dataset.scenes.push_back(std::move(scene));
    } catch (const nlohmann::json::exception&) {
      raise(ErrorCode::FormatError,
            path + ": bad record fields at line " + std::to_string(line_no));
    }
  }
  return dataset;
}

}  // namespace flowdet
