#include "capdet/model.hpp"

#include <string>

#include "capdet/error.hpp"
#include "capdet/image.hpp"

namespace capdet::backbone {

void to_json(nlohmann::json& j, const BackboneConfig& c) {
  j = {{"image_size", c.image_size}, {"in_channels", c.in_channels}, {"patch_size", c.patch_size},
       {"base_channels", c.base_channels}, {"depths", c.depths}, {"heads", c.heads},
       {"window_size", c.window_size}, {"mlp_ratio", c.mlp_ratio}};
}

void from_json(const nlohmann::json& j, BackboneConfig& c) {
  c.image_size = j.value("image_size", c.image_size);
  c.in_channels = j.value("in_channels", c.in_channels);
  c.patch_size = j.value("patch_size", c.patch_size);
  c.base_channels = j.value("base_channels", c.base_channels);
  c.depths = j.value("depths", c.depths);
  c.heads = j.value("heads", c.heads);
  c.window_size = j.value("window_size", c.window_size);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
}

}  // namespace capdet::backbone

namespace capdet::detect {

void to_json(nlohmann::json& j, const DetectConfig& c) {
  j = {{"num_classes", c.num_classes},
       {"fpn_channels", c.fpn_channels},
       {"anchor_ratios", c.anchor_ratios},
       {"anchor_scale", c.anchor_scale},
       {"rpn_pos_iou", c.rpn_pos_iou},
       {"rpn_neg_iou", c.rpn_neg_iou},
       {"rpn_batch_per_image", c.rpn_batch_per_image},
       {"rpn_pos_fraction", c.rpn_pos_fraction},
       {"pre_nms_top", c.pre_nms_top},
       {"post_nms_top", c.post_nms_top},
       {"proposal_nms_iou", c.proposal_nms_iou},
       {"min_proposal_size", c.min_proposal_size},
       {"roi_fg_iou", c.roi_fg_iou},
       {"roi_batch_per_image", c.roi_batch_per_image},
       {"roi_fg_fraction", c.roi_fg_fraction},
       {"roi_bins", c.roi_bins},
       {"roi_sampling", c.roi_sampling},
       {"roi_hidden", c.roi_hidden},
       {"roi_canonical_size", c.roi_canonical_size},
       {"roi_canonical_level", c.roi_canonical_level},
       {"roi_levels", c.roi_levels},
       {"smooth_l1_beta", c.smooth_l1_beta},
       {"delta_std", c.delta_std},
       {"score_threshold", c.score_threshold},
       {"nms_iou", c.nms_iou},
       {"max_detections", c.max_detections}};
}

void from_json(const nlohmann::json& j, DetectConfig& c) {
#define CAPDET_READ(field) c.field = j.value(#field, c.field)
  CAPDET_READ(num_classes);
  CAPDET_READ(fpn_channels);
  CAPDET_READ(anchor_ratios);
  CAPDET_READ(anchor_scale);
  CAPDET_READ(rpn_pos_iou);
  CAPDET_READ(rpn_neg_iou);
  CAPDET_READ(rpn_batch_per_image);
  CAPDET_READ(rpn_pos_fraction);
  CAPDET_READ(pre_nms_top);
  CAPDET_READ(post_nms_top);
  CAPDET_READ(proposal_nms_iou);
  CAPDET_READ(min_proposal_size);
  CAPDET_READ(roi_fg_iou);
  CAPDET_READ(roi_batch_per_image);
  CAPDET_READ(roi_fg_fraction);
  CAPDET_READ(roi_bins);
  CAPDET_READ(roi_sampling);
  CAPDET_READ(roi_hidden);
  CAPDET_READ(roi_canonical_size);
  CAPDET_READ(roi_canonical_level);
  CAPDET_READ(roi_levels);
  CAPDET_READ(smooth_l1_beta);
  CAPDET_READ(delta_std);
  CAPDET_READ(score_threshold);
  CAPDET_READ(nms_iou);
  CAPDET_READ(max_detections);
#undef CAPDET_READ
}

}  // namespace capdet::detect

namespace capdet::caption {

void to_json(nlohmann::json& j, const DecoderConfig& c) {
  j = {{"layers", c.layers},         {"width", c.width},         {"heads", c.heads},
       {"max_len", c.max_len},       {"vocab_size", c.vocab_size}, {"mlp_ratio", c.mlp_ratio},
       {"max_memory_side", c.max_memory_side}};
}

void from_json(const nlohmann::json& j, DecoderConfig& c) {
  c.layers = j.value("layers", c.layers);
  c.width = j.value("width", c.width);
  c.heads = j.value("heads", c.heads);
  c.max_len = j.value("max_len", c.max_len);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  c.max_memory_side = j.value("max_memory_side", c.max_memory_side);
}

}  // namespace capdet::caption

namespace capdet {

void ModelConfig::validate() const {
  backbone.validate();
  detect.validate();
  decoder.validate();
  if (decoder.width != backbone.last_channels()) {
    throw ConfigError("model: decoder width " + std::to_string(decoder.width) + " must equal the last backbone map's " +
                      std::to_string(backbone.last_channels()) + " channels");
  }
}

ModelConfig micro_config() {
  ModelConfig c;
  c.backbone.image_size = 32;
  c.backbone.base_channels = 8;
  c.backbone.depths = {1, 1, 1, 1};
  c.backbone.heads = {1, 2, 2, 4};
  c.backbone.window_size = 2;
  c.detect.fpn_channels = 8;
  c.detect.roi_hidden = 16;
  c.detect.rpn_batch_per_image = 16;
  c.detect.roi_batch_per_image = 8;
  c.detect.pre_nms_top = 32;
  c.detect.post_nms_top = 8;
  c.decoder.width = 64;
  c.decoder.heads = 2;
  c.decoder.layers = 1;
  c.decoder.max_len = 8;
  c.decoder.vocab_size = 8;
  c.decoder.mlp_ratio = 2;
  return c;
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"backbone", c.backbone}, {"detect", c.detect}, {"decoder", c.decoder}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (j.contains("backbone")) j.at("backbone").get_to(c.backbone);
  if (j.contains("detect")) j.at("detect").get_to(c.detect);
  if (j.contains("decoder")) j.at("decoder").get_to(c.decoder);
}

std::string partition_name(Partition p) {
  switch (p) {
    case Partition::backbone: return "theta";
    case Partition::decoder: return "phi";
    case Partition::detection: return "psi";
  }
  return "?";
}

Partition partition_of(const std::string& name) {
  auto starts = [&](const char* prefix) { return name.rfind(prefix, 0) == 0; };
  if (starts("backbone.")) return Partition::backbone;
  if (starts("decoder.")) return Partition::decoder;
  if (starts("fpn.") || starts("rpn.") || starts("roi.")) return Partition::detection;
  throw ConfigError("unknown parameter partition for '" + name + "'");
}

MultitaskModelImpl::MultitaskModelImpl(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  backbone = register_module("backbone", backbone::SwinBackbone(config_.backbone));
  std::vector<int> channels;
  for (int s = 0; s < config_.backbone.num_stages(); ++s) channels.push_back(config_.backbone.stage_channels(s));
  head_ = std::make_unique<detect::DetectionHead>(config_.detect, channels);
  register_module("fpn", head_->fpn);
  register_module("rpn", head_->rpn);
  register_module("roi", head_->roi);
  decoder = register_module("decoder", caption::CaptionDecoder(config_.decoder));
}

backbone::FeaturePyramid MultitaskModelImpl::features(const torch::Tensor& images) { return backbone(images); }

detect::DetectionHead& MultitaskModelImpl::detection() {
  ++detection_accesses_;
  return *head_;
}

detect::DetectionHead::Features MultitaskModelImpl::detection_features(const backbone::FeaturePyramid& features,
                                                                       int image_height, int image_width) {
  return detection().run(features, image_height, image_width);
}

std::vector<std::pair<std::string, torch::Tensor>> MultitaskModelImpl::named_partition(Partition p) {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (const auto& item : named_parameters()) {
    if (partition_of(item.key()) == p) out.emplace_back(item.key(), item.value());
  }
  return out;
}

std::vector<torch::Tensor> MultitaskModelImpl::partition_parameters(Partition p) {
  std::vector<torch::Tensor> out;
  for (auto& [name, t] : named_partition(p)) out.push_back(t);
  return out;
}

MultitaskModel make_model(const ModelConfig& config, std::uint64_t seed) {
  torch::manual_seed(seed);
  return MultitaskModel(config);
}

torch::Tensor image_to_tensor(const Image& image) {
  auto t = torch::from_blob(const_cast<float*>(image.pixels.data()), {image.height, image.width, 3}, torch::kFloat32);
  return t.permute({2, 0, 1}).unsqueeze(0).clone();
}

}  // namespace capdet
