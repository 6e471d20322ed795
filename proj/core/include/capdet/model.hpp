#pragma once

#include <torch/torch.h>

#include <atomic>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "capdet/backbone.hpp"
#include "capdet/caption_head.hpp"
#include "capdet/detect_head.hpp"
#include "capdet/image.hpp"

namespace capdet::backbone {
void to_json(nlohmann::json& j, const BackboneConfig& c);
void from_json(const nlohmann::json& j, BackboneConfig& c);
}  // namespace capdet::backbone

namespace capdet::detect {
void to_json(nlohmann::json& j, const DetectConfig& c);
void from_json(const nlohmann::json& j, DetectConfig& c);
}  // namespace capdet::detect

namespace capdet::caption {
void to_json(nlohmann::json& j, const DecoderConfig& c);
void from_json(const nlohmann::json& j, DecoderConfig& c);
}  // namespace capdet::caption

namespace capdet {

struct ModelConfig {
  backbone::BackboneConfig backbone;
  detect::DetectConfig detect;
  caption::DecoderConfig decoder;

  // Decoder width follows the last backbone map; checks every sub-config.
  void validate() const;
};

// Tiny configuration used by gradient checks: 32x32 input, C=8, one block
// per stage, vocabulary of 8.
ModelConfig micro_config();

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// Parameter partitions: theta (backbone), phi (caption decoder), psi
// (FPN, RPN and RoI head).
enum class Partition { backbone, decoder, detection };

std::string partition_name(Partition p);        // "theta", "phi", "psi"
Partition partition_of(const std::string& parameter_name);  // throws ConfigError for unknown prefixes

class MultitaskModelImpl : public torch::nn::Module {
 public:
  explicit MultitaskModelImpl(ModelConfig config);

  const ModelConfig& config() const { return config_; }

  backbone::FeaturePyramid features(const torch::Tensor& images);

  // Detection branch; each call increments detection_accesses().
  detect::DetectionHead& detection();
  detect::DetectionHead::Features detection_features(const backbone::FeaturePyramid& features, int image_height,
                                                     int image_width);

  std::int64_t detection_accesses() const { return detection_accesses_.load(); }

  std::vector<torch::Tensor> partition_parameters(Partition p);
  std::vector<std::pair<std::string, torch::Tensor>> named_partition(Partition p);

  backbone::SwinBackbone backbone{nullptr};
  caption::CaptionDecoder decoder{nullptr};

 private:
  ModelConfig config_;
  std::unique_ptr<detect::DetectionHead> head_;
  std::atomic<std::int64_t> detection_accesses_{0};
};
TORCH_MODULE(MultitaskModel);

// Builds a model with parameters drawn from torch's generator seeded by `seed`.
MultitaskModel make_model(const ModelConfig& config, std::uint64_t seed);

// Converts a (H, W, 3) image to a (1, 3, H, W) float tensor.
torch::Tensor image_to_tensor(const Image& image);

}  // namespace capdet
