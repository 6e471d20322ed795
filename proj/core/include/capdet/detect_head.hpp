#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <map>
#include <utility>
#include <vector>

#include "capdet/backbone.hpp"
#include "capdet/boxes.hpp"

namespace capdet::detect {

using backbone::FeatureMap;
using backbone::FeaturePyramid;

struct DetectConfig {
  int num_classes = 4;
  int fpn_channels = 64;

  std::vector<double> anchor_ratios{0.5, 1.0, 2.0};
  double anchor_scale = 4.0;  // anchor side = scale * level stride

  double rpn_pos_iou = 0.7;
  double rpn_neg_iou = 0.3;
  int rpn_batch_per_image = 64;
  double rpn_pos_fraction = 0.5;
  int pre_nms_top = 256;
  int post_nms_top = 64;
  double proposal_nms_iou = 0.7;
  double min_proposal_size = 1e-3;

  double roi_fg_iou = 0.5;
  int roi_batch_per_image = 32;
  double roi_fg_fraction = 0.25;
  int roi_bins = 3;
  int roi_sampling = 2;
  int roi_hidden = 256;
  double roi_canonical_size = 64.0;
  int roi_canonical_level = 2;  // index into the pooled FPN levels (stride 16)
  int roi_levels = 4;           // RoIs pool from the first four FPN levels

  double smooth_l1_beta = 1.0;
  DeltaStd delta_std{0.1, 0.1, 0.2, 0.2};

  double score_threshold = 0.05;
  double nms_iou = 0.5;
  int max_detections = 100;

  void validate() const;
};

struct GroundTruth {
  std::vector<Box> boxes;
  std::vector<int> labels;
};

struct DetectionLoss {
  torch::Tensor rpn_cls;
  torch::Tensor rpn_reg;
  torch::Tensor roi_cls;
  torch::Tensor roi_reg;
  torch::Tensor total;  // unweighted sum of the four terms
};

// Elementwise smooth-L1 on tensors.
torch::Tensor smooth_l1_loss(const torch::Tensor& pred, const torch::Tensor& target, double beta);

// Objectness BCE (mean over sampled anchors) and smooth-L1 over positives,
// summed over coordinates and divided by the positive count (0 without
// positives). Throws ConfigError when nothing was sampled.
std::pair<torch::Tensor, torch::Tensor> rpn_loss(const torch::Tensor& objectness_logits, const torch::Tensor& labels,
                                                 const torch::Tensor& positive_deltas,
                                                 const torch::Tensor& positive_targets, double beta);

// Cross-entropy over C+1 classes (background == num_classes), mean over RoIs;
// class-specific smooth-L1 over foreground RoIs divided by their count.
std::pair<torch::Tensor, torch::Tensor> roi_loss(const torch::Tensor& class_logits, const torch::Tensor& labels,
                                                 const torch::Tensor& class_deltas, const torch::Tensor& targets,
                                                 double beta);

// ---------------------------------------------------------------------------
// Modules

class FpnImpl : public torch::nn::Module {
 public:
  FpnImpl(std::vector<int> in_channels, int out_channels);

  // Four backbone maps in, five maps out (the fifth subsamples the fourth).
  FeaturePyramid forward(const FeaturePyramid& features);

  int out_channels() const { return out_channels_; }

  torch::nn::ModuleList lateral{nullptr};
  torch::nn::ModuleList output{nullptr};

 private:
  std::vector<int> in_channels_;
  int out_channels_;
};
TORCH_MODULE(Fpn);

struct RpnOutput {
  torch::Tensor objectness;  // (B, anchors)
  torch::Tensor deltas;      // (B, anchors, 4), normalized
};

class RpnHeadImpl : public torch::nn::Module {
 public:
  RpnHeadImpl(int channels, int anchors_per_location);
  RpnOutput forward(const FeaturePyramid& fpn);

  torch::nn::Conv2d conv{nullptr};
  torch::nn::Conv2d cls{nullptr};
  torch::nn::Conv2d reg{nullptr};

 private:
  int anchors_per_location_;
};
TORCH_MODULE(RpnHead);

struct RoiOutput {
  torch::Tensor class_logits;  // (N, C + 1)
  torch::Tensor deltas;        // (N, C, 4), normalized
};

class RoiHeadImpl : public torch::nn::Module {
 public:
  RoiHeadImpl(int channels, int bins, int hidden, int num_classes);
  RoiOutput forward(const torch::Tensor& pooled);  // (N, channels, bins, bins)

  torch::nn::Linear fc1{nullptr};
  torch::nn::Linear fc2{nullptr};
  torch::nn::Linear cls{nullptr};
  torch::nn::Linear reg{nullptr};

 private:
  int num_classes_;
};
TORCH_MODULE(RoiHead);

// ---------------------------------------------------------------------------
// RoI pooling

// Bilinear RoIAlign (half-pixel aligned) of boxes on one feature map
// (C, H, W); boxes are in image pixels and spatial_scale = 1 / stride.
// Returns (N, C, bins, bins).
torch::Tensor roi_align(const torch::Tensor& feature, const std::vector<Box>& boxes, double spatial_scale, int bins,
                        int sampling_ratio);

// FPN level index for a box by its scale.
int assign_level(const Box& box, double canonical_size, int canonical_level, int num_levels);

// Pools per-image proposals from the pyramid (first cfg.roi_levels maps),
// returning rows in the concatenated proposal order.
torch::Tensor roi_align_pyramid(const FeaturePyramid& fpn, const std::vector<std::vector<Box>>& proposals,
                                const DetectConfig& cfg);

// ---------------------------------------------------------------------------
// Sampling plans

struct ImagePlan {
  std::vector<std::int64_t> rpn_sampled;
  std::vector<float> rpn_labels;
  std::vector<std::int64_t> rpn_positive;
  std::vector<std::array<double, 4>> rpn_targets;
  std::vector<Box> rois;
  std::vector<std::int64_t> roi_labels;
  std::vector<std::array<double, 4>> roi_targets;
};

// Non-differentiable choices of one training step (anchor labels, sampled
// anchors, proposals, sampled RoIs). Reusing a plan makes the losses smooth
// functions of the parameters.
struct DetectionPlan {
  std::vector<ImagePlan> images;
};

// Fisher-Yates shuffle on a portable bit stream.
void deterministic_shuffle(std::vector<std::int64_t>& values, std::uint64_t seed);

// Combines a seed with further integers into a new well-mixed seed.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

// ---------------------------------------------------------------------------

class DetectionHead {
 public:
  DetectionHead(DetectConfig config, const std::vector<int>& backbone_channels);

  const DetectConfig& config() const { return config_; }

  struct Features {
    FeaturePyramid fpn;
    RpnOutput rpn;
    int image_height = 0;
    int image_width = 0;
  };

  Features run(const FeaturePyramid& backbone_features, int image_height, int image_width);

  const AnchorSet& anchors(const FeaturePyramid& fpn);

  // Top-scoring decoded anchors after clipping and NMS, per image.
  std::vector<std::vector<Box>> proposals(const Features& features);
  std::vector<Box> proposals_for_image(const Features& features, int image);

  DetectionPlan plan(const Features& features, const std::vector<GroundTruth>& targets, std::uint64_t seed);

  DetectionLoss loss(const Features& features, const DetectionPlan& plan);

  // score > score_threshold, per-class NMS, at most max_detections per image.
  std::vector<std::vector<Detection>> detect(const Features& features, double score_threshold, double nms_iou,
                                             int max_detections);

  Fpn fpn{nullptr};
  RpnHead rpn{nullptr};
  RoiHead roi{nullptr};

 private:
  DetectConfig config_;
  std::map<std::vector<std::int64_t>, AnchorSet> anchor_cache_;
};

}  // namespace capdet::detect
