#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "flowdet/box_geometry.hpp"

namespace flowdet {

// One scene's detections aligned with its ground truth.
struct EvalInput {
  std::int64_t scene_id = 0;
  std::vector<Detection> detections;
  std::vector<BoundingBox> gt_boxes;
  std::vector<int> gt_classes;
};

struct PrCurve {
  double iou_thr = 0.0;
  std::array<double, 101> precision{};  // at recall 0.00, 0.01, ..., 1.00
};

struct EvalResult {
  bool valid = false;  // false when no scene carries any ground truth
  double ap = 0.0;     // mean over IoU 0.50:0.05:0.95
  double ap50 = 0.0;
  double ap75 = 0.0;
  double recall = 0.0;  // matched-gt fraction at IoU 0.5
  // Size-stratified AP over normalized box area; cuts at 1/64 and 1/16 of
  // the image area. NaN when a bucket holds no ground truth.
  double ap_small = 0.0;
  double ap_medium = 0.0;
  double ap_large = 0.0;
  int n_gt = 0;
  int n_det = 0;
  std::vector<PrCurve> curves;
};

inline constexpr double kSmallAreaCut = 1.0 / 64.0;
inline constexpr double kMediumAreaCut = 1.0 / 16.0;

// 101-point interpolated AP at one IoU threshold: global score-descending
// greedy matching per class (ties by score, then scene_id, then detection
// index; each gt matched at most once, to the highest-IoU eligible det),
// averaged over the classes that appear in the ground truth. Returns NaN if
// no scene has any ground truth.
double ap_at_iou(const std::vector<EvalInput>& inputs, double iou_thr);

// Mean AP over thresholds 0.50:0.05:0.95 plus AP50/AP75, recall, and
// size-stratified APs.
EvalResult coco_style_ap(const std::vector<EvalInput>& inputs);

}  // namespace flowdet
