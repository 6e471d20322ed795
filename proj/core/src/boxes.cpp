#include "capdet/boxes.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <tuple>

#include "capdet/error.hpp"

namespace capdet {

double Box::area() const {
  if (x_max <= x_min || y_max <= y_min) return 0.0;
  return (x_max - x_min) * (y_max - y_min);
}

double iou(const Box& a, const Box& b) {
  const double area_a = a.area();
  const double area_b = b.area();
  if (area_a <= 0.0 || area_b <= 0.0) return 0.0;
  const double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (area_a + area_b - inter);
}

Box clip_box(const Box& box, double width, double height) {
  return {std::clamp(box.x_min, 0.0, width), std::clamp(box.y_min, 0.0, height),
          std::clamp(box.x_max, 0.0, width), std::clamp(box.y_max, 0.0, height)};
}

double smooth_l1(double pred, double target, double beta) {
  const double d = std::abs(pred - target);
  return d < beta ? 0.5 * d * d / beta : d - 0.5 * beta;
}

BoxDelta encode_delta(const Box& reference, const Box& target) {
  const double rw = reference.width();
  const double rh = reference.height();
  if (!(rw > 0.0) || !(rh > 0.0)) throw ConfigError("encode_delta: degenerate reference box");
  const double rcx = reference.x_min + 0.5 * rw;
  const double rcy = reference.y_min + 0.5 * rh;
  const double tw = target.width();
  const double th = target.height();
  const double tcx = target.x_min + 0.5 * tw;
  const double tcy = target.y_min + 0.5 * th;
  return {(tcx - rcx) / rw, (tcy - rcy) / rh, std::log(tw / rw), std::log(th / rh)};
}

Box decode_delta(const Box& reference, const BoxDelta& delta) {
  const double rw = reference.width();
  const double rh = reference.height();
  const double cx = reference.x_min + 0.5 * rw + delta.dx * rw;
  const double cy = reference.y_min + 0.5 * rh + delta.dy * rh;
  const double w = rw * std::exp(delta.dw);
  const double h = rh * std::exp(delta.dh);
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

BoxDelta normalize_delta(const BoxDelta& d, const DeltaStd& std) {
  return {d.dx / std[0], d.dy / std[1], d.dw / std[2], d.dh / std[3]};
}

BoxDelta denormalize_delta(const BoxDelta& d, const DeltaStd& std) {
  return {d.dx * std[0], d.dy * std[1], d.dw * std[2], d.dh * std[3]};
}

std::vector<Detection> nms(std::vector<Detection> detections, double iou_threshold) {
  std::sort(detections.begin(), detections.end(), [](const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    return std::tie(a.box.x_min, a.box.y_min, a.box.x_max, a.box.y_max, a.class_id) <
           std::tie(b.box.x_min, b.box.y_min, b.box.x_max, b.box.y_max, b.class_id);
  });
  std::vector<Detection> kept;
  kept.reserve(detections.size());
  for (const auto& candidate : detections) {
    bool suppressed = false;
    for (const auto& k : kept) {
      if (k.class_id == candidate.class_id && iou(k.box, candidate.box) > iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(candidate);
  }
  return kept;
}

AnchorSet generate_anchors(const std::vector<AnchorLevel>& levels, const std::vector<double>& ratios,
                           double scale) {
  AnchorSet set;
  set.ratios = ratios;
  set.scale = scale;
  for (const auto& level : levels) {
    set.level_offsets.push_back(static_cast<std::int64_t>(set.boxes.size()));
    set.strides.push_back(level.stride);
    const double size = scale * level.stride;
    for (int y = 0; y < level.grid_h; ++y) {
      for (int x = 0; x < level.grid_w; ++x) {
        const double cx = (x + 0.5) * level.stride;
        const double cy = (y + 0.5) * level.stride;
        for (double ratio : ratios) {
          const double w = size / std::sqrt(ratio);
          const double h = size * std::sqrt(ratio);
          set.boxes.push_back({cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h});
        }
      }
    }
  }
  set.level_offsets.push_back(static_cast<std::int64_t>(set.boxes.size()));
  return set;
}

AnchorMatch match_anchors(const std::vector<Box>& anchors, const std::vector<Box>& gt_boxes,
                          double pos_threshold, double neg_threshold) {
  if (!(pos_threshold > neg_threshold)) {
    throw ConfigError("match_anchors: positive threshold must exceed negative threshold");
  }
  const std::size_t n = anchors.size();
  AnchorMatch match;
  match.labels.assign(n, MatchLabel::negative);
  match.gt_index.assign(n, -1);
  match.max_iou.assign(n, 0.0);
  if (gt_boxes.empty()) return match;

  std::vector<double> gt_best(gt_boxes.size(), 0.0);
  std::vector<double> ious(n * gt_boxes.size());
  for (std::size_t a = 0; a < n; ++a) {
    int best = 0;
    double best_iou = -1.0;
    for (std::size_t g = 0; g < gt_boxes.size(); ++g) {
      const double v = iou(anchors[a], gt_boxes[g]);
      ious[a * gt_boxes.size() + g] = v;
      if (v > best_iou) {
        best_iou = v;
        best = static_cast<int>(g);
      }
      gt_best[g] = std::max(gt_best[g], v);
    }
    match.gt_index[a] = best;
    match.max_iou[a] = best_iou;
    if (best_iou >= pos_threshold) {
      match.labels[a] = MatchLabel::positive;
    } else if (best_iou < neg_threshold) {
      match.labels[a] = MatchLabel::negative;
    } else {
      match.labels[a] = MatchLabel::ignore;
    }
  }
  for (std::size_t g = 0; g < gt_boxes.size(); ++g) {
    if (gt_best[g] <= 0.0) continue;
    for (std::size_t a = 0; a < n; ++a) {
      if (ious[a * gt_boxes.size() + g] == gt_best[g]) match.labels[a] = MatchLabel::positive;
    }
  }
  return match;
}

}  // namespace capdet
