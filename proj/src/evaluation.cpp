#include "flowdet/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "flowdet/error.hpp"

namespace flowdet {
namespace {

struct DetRecord {
  double score = 0.0;
  std::int64_t scene_id = 0;
  int scene_pos = 0;  // position within the input list
  int det_index = 0;
  int class_id = 0;
  Corners corners;
  double area = 0.0;
};

struct GtRecord {
  int scene_pos = 0;
  Corners corners;
  bool ignored = false;
  bool matched = false;
};

struct ClassEval {
  std::array<double, 101> precision{};
  double ap = 0.0;
  int matched = 0;
  int n_gt = 0;  // non-ignored
};

// Greedy COCO-style matching + 101-point AP for one class at one threshold.
// Ground truths outside [area_lo, area_hi) are ignore entries: detections may
// match them without scoring, and they do not count toward recall.
ClassEval eval_class(const std::vector<EvalInput>& inputs, int class_id,
                     double iou_thr, double area_lo, double area_hi) {
  std::vector<DetRecord> dets;
  std::vector<std::vector<GtRecord>> gts(inputs.size());
  ClassEval out;
  for (std::size_t s = 0; s < inputs.size(); ++s) {
    const EvalInput& in = inputs[s];
    for (std::size_t g = 0; g < in.gt_boxes.size(); ++g) {
      if (in.gt_classes[g] != class_id) continue;
      GtRecord rec;
      rec.scene_pos = static_cast<int>(s);
      rec.corners = to_corners(in.gt_boxes[g]);
      const double area = rec.corners.area();
      rec.ignored = !(area >= area_lo && area < area_hi);
      if (!rec.ignored) out.n_gt += 1;
      gts[s].push_back(rec);
    }
    for (std::size_t d = 0; d < in.detections.size(); ++d) {
      const Detection& det = in.detections[d];
      if (det.class_id != class_id) continue;
      if (!std::isfinite(det.score))
        raise(ErrorCode::InvalidParameter, "evaluation: non-finite score");
      DetRecord rec;
      rec.score = det.score;
      rec.scene_id = in.scene_id;
      rec.scene_pos = static_cast<int>(s);
      rec.det_index = static_cast<int>(d);
      rec.class_id = det.class_id;
      rec.corners = to_corners(det.box);
      rec.area = rec.corners.area();
      // For stratified buckets, detections outside the range are set aside
      // (they can neither score nor hurt).
      if (rec.area >= area_lo && rec.area < area_hi) dets.push_back(rec);
    }
  }
  std::sort(dets.begin(), dets.end(), [](const DetRecord& a, const DetRecord& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.scene_id != b.scene_id) return a.scene_id < b.scene_id;
    return a.det_index < b.det_index;
  });
  std::vector<char> is_tp(dets.size(), 0), is_ignored(dets.size(), 0);
  for (std::size_t di = 0; di < dets.size(); ++di) {
    auto& scene_gts = gts[dets[di].scene_pos];
    int best = -1, best_ignored = -1;
    double best_iou = iou_thr, best_ignored_iou = iou_thr;
    for (std::size_t g = 0; g < scene_gts.size(); ++g) {
      if (scene_gts[g].matched) continue;
      const double overlap = iou(dets[di].corners, scene_gts[g].corners);
      if (scene_gts[g].ignored) {
        if (overlap >= best_ignored_iou) {
          best_ignored_iou = overlap;
          best_ignored = static_cast<int>(g);
        }
      } else if (overlap >= best_iou) {
        best_iou = overlap;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0) {
      scene_gts[best].matched = true;
      is_tp[di] = 1;
      out.matched += 1;
    } else if (best_ignored >= 0) {
      is_ignored[di] = 1;  // overlapped only an ignore entry; drop silently
    }
  }
  // Precision/recall curve over the scored detections.
  std::vector<double> prec, rec;
  int tp = 0, fp = 0;
  for (std::size_t di = 0; di < dets.size(); ++di) {
    if (is_ignored[di]) continue;
    if (is_tp[di]) ++tp; else ++fp;
    prec.push_back(static_cast<double>(tp) / (tp + fp));
    rec.push_back(out.n_gt > 0 ? static_cast<double>(tp) / out.n_gt : 0.0);
  }
  // Monotone envelope from the right, then sample 101 recall levels.
  for (int i = static_cast<int>(prec.size()) - 2; i >= 0; --i)
    prec[i] = std::max(prec[i], prec[i + 1]);
  double ap_sum = 0.0;
  for (int r = 0; r <= 100; ++r) {
    const double level = r / 100.0;
    const auto it = std::lower_bound(rec.begin(), rec.end(), level);
    const double p =
        it == rec.end() ? 0.0 : prec[static_cast<std::size_t>(it - rec.begin())];
    out.precision[r] = p;
    ap_sum += p;
  }
  out.ap = ap_sum / 101.0;
  return out;
}

// Classes that appear in the ground truth, ascending.
std::vector<int> gt_classes_present(const std::vector<EvalInput>& inputs) {
  std::vector<int> classes;
  for (const auto& in : inputs) {
    if (in.gt_boxes.size() != in.gt_classes.size())
      raise(ErrorCode::SizeMismatch, "evaluation: gt boxes/classes mismatch");
    for (int c : in.gt_classes) classes.push_back(c);
  }
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  return classes;
}

double mean_ap(const std::vector<EvalInput>& inputs, double thr, double lo,
               double hi, std::array<double, 101>* curve = nullptr,
               int* matched = nullptr, int* n_gt = nullptr) {
  const std::vector<int> classes = gt_classes_present(inputs);
  double sum = 0.0;
  int counted = 0;
  if (curve) curve->fill(0.0);
  for (int c : classes) {
    const ClassEval ce = eval_class(inputs, c, thr, lo, hi);
    if (matched) *matched += ce.matched;
    if (n_gt) *n_gt += ce.n_gt;
    if (ce.n_gt == 0) continue;  // class absent from this area bucket
    sum += ce.ap;
    counted += 1;
    if (curve)
      for (int r = 0; r <= 100; ++r) (*curve)[r] += ce.precision[r];
  }
  if (counted == 0) return std::numeric_limits<double>::quiet_NaN();
  if (curve)
    for (int r = 0; r <= 100; ++r) (*curve)[r] /= counted;
  return sum / counted;
}

constexpr double kInf = std::numeric_limits<double>::infinity();

}  // namespace

double ap_at_iou(const std::vector<EvalInput>& inputs, double iou_thr) {
  if (!(iou_thr > 0.0 && iou_thr <= 1.0))
    raise(ErrorCode::InvalidParameter, "ap_at_iou: threshold outside (0,1]");
  return mean_ap(inputs, iou_thr, 0.0, kInf);
}

EvalResult coco_style_ap(const std::vector<EvalInput>& inputs) {
  EvalResult result;
  for (const auto& in : inputs) {
    result.n_gt += static_cast<int>(in.gt_boxes.size());
    result.n_det += static_cast<int>(in.detections.size());
  }
  if (result.n_gt == 0) {
    // Undefined AP; flag with NaN sentinels but keep the counts.
    result.valid = false;
    const double nan = std::numeric_limits<double>::quiet_NaN();
    result.ap = result.ap50 = result.ap75 = nan;
    result.ap_small = result.ap_medium = result.ap_large = nan;
    return result;
  }
  result.valid = true;
  double sum = 0.0;
  for (int i = 0; i < 10; ++i) {
    const double thr = 0.5 + 0.05 * i;
    PrCurve curve;
    curve.iou_thr = thr;
    int matched = 0, n_gt = 0;
    const double ap = mean_ap(inputs, thr, 0.0, kInf, &curve.precision,
                              &matched, &n_gt);
    sum += ap;
    result.curves.push_back(curve);
    if (i == 0) {
      result.ap50 = ap;
      result.recall = n_gt > 0 ? static_cast<double>(matched) / n_gt : 0.0;
    }
    if (i == 5) result.ap75 = ap;
  }
  result.ap = sum / 10.0;
  result.ap_small = 0.0;
  result.ap_medium = 0.0;
  result.ap_large = 0.0;
  double small_sum = 0.0, medium_sum = 0.0, large_sum = 0.0;
  for (int i = 0; i < 10; ++i) {
    const double thr = 0.5 + 0.05 * i;
    small_sum += mean_ap(inputs, thr, 0.0, kSmallAreaCut);
    medium_sum += mean_ap(inputs, thr, kSmallAreaCut, kMediumAreaCut);
    large_sum += mean_ap(inputs, thr, kMediumAreaCut, kInf);
  }
  result.ap_small = small_sum / 10.0;
  result.ap_medium = medium_sum / 10.0;
  result.ap_large = large_sum / 10.0;
  return result;
}

}  // namespace flowdet
