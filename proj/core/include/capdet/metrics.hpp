#pragma once

#include <array>
#include <string>
#include <vector>

#include "capdet/boxes.hpp"

namespace capdet::metrics {

using Sentence = std::vector<std::string>;

struct CaptionItem {
  Sentence candidate;
  std::vector<Sentence> references;
};
using CaptionEvalSet = std::vector<CaptionItem>;

// Builds an eval set by whitespace-splitting candidate and reference strings.
CaptionEvalSet make_caption_eval_set(const std::vector<std::string>& candidates,
                                     const std::vector<std::vector<std::string>>& references);

// Corpus BLEU-n (uniform weights over orders 1..n), clipped counts, brevity
// penalty against the closest reference length (shorter on ties). Unsmoothed.
double bleu(const CaptionEvalSet& set, int n);

// All four BLEU orders at once.
std::array<double, 4> bleu_all(const CaptionEvalSet& set);

// LCS F-measure with beta 1.2; precision and recall each maximised over
// references, then averaged over images.
double rouge_l(const CaptionEvalSet& set, double beta = 1.2);
double rouge_l_sentence(const Sentence& candidate, const std::vector<Sentence>& references, double beta = 1.2);

// Plain CIDEr (no length penalty, no clipping), x10. Requires >= 2 images.
double cider(const CaptionEvalSet& set);
std::vector<double> cider_per_image(const CaptionEvalSet& set);

// ---------------------------------------------------------------------------

struct GroundTruthBox {
  Box box;
  int class_id = 0;
};

struct DetectionImage {
  std::vector<Detection> detections;
  std::vector<GroundTruthBox> ground_truth;
};

struct DetectionEvalSet {
  std::vector<DetectionImage> images;
  int num_classes = 0;
  int image_size = 640;  // rescales the small/medium/large area thresholds by (image_size/640)^2
  int max_detections = 100;
};

struct ApSummary {
  double map = 0.0;   // over IoU .50:.05:.95
  double ap50 = 0.0;
  double ap75 = 0.0;
  double ap_small = 0.0;
  double ap_medium = 0.0;
  double ap_large = 0.0;
};

// Per-detection match record, for debugging dumps.
struct MatchRecord {
  int image = 0;
  int detection = 0;
  int class_id = 0;
  double score = 0.0;
  int matched_gt = -1;  // index into the image's ground truth at IoU 0.5, -1 when unmatched
  double iou = 0.0;
};

// COCO-style AP: per class and threshold, greedy matching of score-sorted
// detections to the highest-IoU unmatched ground truth, 101-point
// interpolation. Averages skip (class, threshold) pairs without ground
// truth; a summary with no valid pair is reported as -1. Throws ConfigError
// for detection class ids outside [0, num_classes).
ApSummary coco_map(const DetectionEvalSet& set, std::vector<MatchRecord>* matches = nullptr);

// AP for a single class, IoU threshold and area range (ignore-aware); -1 when
// the class has no ground truth in range.
double average_precision(const DetectionEvalSet& set, int class_id, double iou_threshold, double area_min,
                         double area_max);

}  // namespace capdet::metrics
