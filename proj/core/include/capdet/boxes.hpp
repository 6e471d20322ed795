#pragma once

#include <array>
#include <cstdint>
#include <vector>

namespace capdet {

// Axis-aligned box in pixel coordinates, corners (x_min, y_min) and (x_max, y_max).
struct Box {
  double x_min = 0.0;
  double y_min = 0.0;
  double x_max = 0.0;
  double y_max = 0.0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const;
  bool valid() const { return x_min < x_max && y_min < y_max && x_min >= 0.0 && y_min >= 0.0; }

  friend bool operator==(const Box&, const Box&) = default;
};

double iou(const Box& a, const Box& b);

Box clip_box(const Box& box, double width, double height);

// Huber-style loss, quadratic below beta and linear above.
double smooth_l1(double pred, double target, double beta);

// Center/log-size offsets of a target box relative to a reference box.
struct BoxDelta {
  double dx = 0.0;
  double dy = 0.0;
  double dw = 0.0;
  double dh = 0.0;

  std::array<double, 4> as_array() const { return {dx, dy, dw, dh}; }
};

// Throws ConfigError when the reference box has non-positive width or height.
BoxDelta encode_delta(const Box& reference, const Box& target);
Box decode_delta(const Box& reference, const BoxDelta& delta);

// Per-coordinate division by fixed standard deviations (dx, dy, dw, dh).
using DeltaStd = std::array<double, 4>;
BoxDelta normalize_delta(const BoxDelta& delta, const DeltaStd& std);
BoxDelta denormalize_delta(const BoxDelta& delta, const DeltaStd& std);

struct Detection {
  Box box;
  int class_id = 0;
  double score = 0.0;
};

// Greedy same-class suppression. Candidates are visited by descending score,
// ties broken by lexicographic box order; a candidate is dropped when its IoU
// with an already kept detection of the same class exceeds iou_threshold.
std::vector<Detection> nms(std::vector<Detection> detections, double iou_threshold);

// ---------------------------------------------------------------------------
// Anchors and matching

struct AnchorLevel {
  int grid_h = 0;
  int grid_w = 0;
  int stride = 0;
};

struct AnchorSet {
  std::vector<Box> boxes;           // level-major, then (y, x, ratio)
  std::vector<std::int64_t> level_offsets;  // start index of each level, plus a final end
  std::vector<int> strides;
  std::vector<double> ratios;
  double scale = 0.0;

  std::size_t size() const { return boxes.size(); }
};

// One anchor size per level (scale * stride); ratio is height / width.
AnchorSet generate_anchors(const std::vector<AnchorLevel>& levels, const std::vector<double>& ratios,
                           double scale);

enum class MatchLabel : std::int8_t { negative = 0, positive = 1, ignore = -1 };

struct AnchorMatch {
  std::vector<MatchLabel> labels;
  std::vector<int> gt_index;  // argmax-IoU ground truth per anchor, -1 without ground truth
  std::vector<double> max_iou;
};

// Threshold matching; additionally every ground truth's best anchors (all
// anchors tying its maximum, when that maximum is positive) become positive.
// Forced positives keep their own argmax ground truth, lowest index on ties.
AnchorMatch match_anchors(const std::vector<Box>& anchors, const std::vector<Box>& gt_boxes,
                          double pos_threshold, double neg_threshold);

}  // namespace capdet
