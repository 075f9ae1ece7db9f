#include "flowdet/box_geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "flowdet/error.hpp"

namespace flowdet {

Corners to_corners(const BoundingBox& b) {
  if (!std::isfinite(b.cx) || !std::isfinite(b.cy) || !std::isfinite(b.w) ||
      !std::isfinite(b.h)) {
    raise(ErrorCode::InvalidBox, "non-finite box components");
  }
  Corners c{b.cx - b.w / 2.0, b.cy - b.h / 2.0, b.cx + b.w / 2.0,
            b.cy + b.h / 2.0};
  if (c.x0 > c.x1) std::swap(c.x0, c.x1);
  if (c.y0 > c.y1) std::swap(c.y0, c.y1);
  return c;
}

BoundingBox from_corners(const Corners& c) {
  return BoundingBox{(c.x0 + c.x1) / 2.0, (c.y0 + c.y1) / 2.0, c.x1 - c.x0,
                     c.y1 - c.y0};
}

static double intersection_area(const Corners& a, const Corners& b) {
  double iw = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
  double ih = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  return iw * ih;
}

double iou(const Corners& a, const Corners& b) {
  double inter = intersection_area(a, b);
  double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;
  return inter / uni;
}

double giou(const Corners& a, const Corners& b) {
  double inter = intersection_area(a, b);
  double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;
  double ex0 = std::min(a.x0, b.x0);
  double ey0 = std::min(a.y0, b.y0);
  double ex1 = std::max(a.x1, b.x1);
  double ey1 = std::max(a.y1, b.y1);
  double enclosing = (ex1 - ex0) * (ey1 - ey0);
  double result = inter / uni;
  if (enclosing > 0.0) result -= (enclosing - uni) / enclosing;
  return result;
}

double interp_iou(const Corners& a, const Corners& b, int n_interp) {
  if (n_interp < 1) {
    raise(ErrorCode::InvalidParameter, "interp_iou requires n_interp >= 1");
  }
  if (n_interp == 1) return iou(a, b);
  double total = 0.0;
  for (int i = 0; i < n_interp; ++i) {
    double t = static_cast<double>(i) / static_cast<double>(n_interp - 1);
    Corners m{(1.0 - t) * a.x0 + t * b.x0, (1.0 - t) * a.y0 + t * b.y0,
              (1.0 - t) * a.x1 + t * b.x1, (1.0 - t) * a.y1 + t * b.y1};
    total += iou(m, b);
  }
  return total / static_cast<double>(n_interp);
}

std::vector<Detection> class_wise_nms(const std::vector<Detection>& dets,
                                      double iou_threshold) {
  std::vector<int> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int i, int j) {
    if (dets[i].score != dets[j].score) return dets[i].score > dets[j].score;
    if (dets[i].class_id != dets[j].class_id)
      return dets[i].class_id < dets[j].class_id;
    return i < j;
  });

  std::vector<Detection> kept;
  std::vector<Corners> kept_corners;
  kept.reserve(dets.size());
  for (int idx : order) {
    const Detection& d = dets[idx];
    Corners c = to_corners(d.box);
    bool suppressed = false;
    for (std::size_t k = 0; k < kept.size(); ++k) {
      if (kept[k].class_id != d.class_id) continue;
      if (iou(kept_corners[k], c) > iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) {
      kept.push_back(d);
      kept_corners.push_back(c);
    }
  }
  return kept;
}

BoundingBox clip_to_unit(const BoundingBox& b) {
  Corners c = to_corners(b);
  c.x0 = std::clamp(c.x0, 0.0, 1.0);
  c.y0 = std::clamp(c.y0, 0.0, 1.0);
  c.x1 = std::clamp(c.x1, 0.0, 1.0);
  c.y1 = std::clamp(c.y1, 0.0, 1.0);
  return from_corners(c);
}

}  // namespace flowdet
