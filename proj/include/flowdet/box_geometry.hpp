#pragma once

#include <vector>

namespace flowdet {

// Canonical box representation: center (cx, cy) plus width/height, in
// normalized image units. Corner form is derived on demand.
struct BoundingBox {
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;
};

struct Corners {
  double x0 = 0.0;
  double y0 = 0.0;
  double x1 = 0.0;
  double y1 = 0.0;

  double area() const { return (x1 - x0) * (y1 - y0); }
};

struct Detection {
  BoundingBox box;
  int class_id = 0;
  double score = 0.0;
};

// Corner form with canonical ordering (x0 <= x1, y0 <= y1).
// Throws InvalidBox on non-finite input.
Corners to_corners(const BoundingBox& b);

BoundingBox from_corners(const Corners& c);

// Intersection over union in [0,1]. Zero-area vs zero-area pairs return 0 by
// convention, which keeps downstream NMS total.
double iou(const Corners& a, const Corners& b);

// Generalized IoU: iou - (|C| - |A u B|)/|C| with C the smallest enclosing
// box. Range (-1, 1]; returns 0 when both boxes are degenerate.
double giou(const Corners& a, const Corners& b);

// Mean IoU between b and n_interp boxes linearly interpolated from a to b,
// endpoints inclusive. Smoothly positive even for disjoint boxes.
double interp_iou(const Corners& a, const Corners& b, int n_interp);

inline constexpr int kDefaultInterpIouPoints = 8;

// Greedy descending-score suppression within each class; cross-class pairs
// never suppress each other. Output sorted by score descending with
// deterministic tie-break (score, lower class_id, input index).
std::vector<Detection> class_wise_nms(const std::vector<Detection>& dets,
                                      double iou_threshold);

// Clamp the box to the unit square via its corners. Idempotent; a fully
// out-of-bounds box collapses to a zero-area box on the boundary.
BoundingBox clip_to_unit(const BoundingBox& b);

}  // namespace flowdet
