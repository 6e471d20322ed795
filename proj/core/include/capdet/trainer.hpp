#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "capdet/caption_head.hpp"
#include "capdet/checkpoint.hpp"
#include "capdet/detect_head.hpp"
#include "capdet/model.hpp"
#include "capdet/scenegen.hpp"

namespace capdet::trainer {

enum class FreezePlan { none, decoder_only, backbone_and_decoder, detection_only };

FreezePlan parse_freeze_plan(const std::string& name);  // throws ConfigError
std::string freeze_plan_name(FreezePlan plan);

struct TrainConfig {
  double lambda = 0.1;
  double learning_rate = 1e-4;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double clip_norm = 5.0;
  int batch_size = 2;
  std::int64_t steps = 2000;
  std::uint64_t seed = 0;
  FreezePlan freeze_plan = FreezePlan::none;
  std::int64_t checkpoint_every = 500;
  int caption_reference = -1;  // fixed reference index in [0, 5), or -1 for a per-step draw

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// ---------------------------------------------------------------------------
// Loss

struct JointLoss {
  detect::DetectionLoss detection;
  torch::Tensor caption;  // undefined when the caption branch is skipped
  torch::Tensor total;
  double lambda = 0.0;
};

// total = detection.total + lambda * caption. An undefined caption means
// the branch was skipped. Throws ConfigError for negative lambda.
JointLoss joint_loss(const detect::DetectionLoss& detection, const torch::Tensor& caption, double lambda);

struct LossBreakdown {
  double rpn_cls = 0.0;
  double rpn_reg = 0.0;
  double roi_cls = 0.0;
  double roi_reg = 0.0;
  std::optional<double> caption;
  double total = 0.0;
  double lambda = 0.0;

  double detection_total() const { return rpn_cls + rpn_reg + roi_cls + roi_reg; }
  nlohmann::ordered_json to_json(std::int64_t step) const;  // metrics-log line
  static LossBreakdown from_json(const nlohmann::json& j);

  friend bool operator==(const LossBreakdown&, const LossBreakdown&) = default;
};

LossBreakdown breakdown(const JointLoss& loss);

// ---------------------------------------------------------------------------
// Freezing and optimisation

struct TrainableMask {
  std::map<std::string, bool> trainable;  // parameter name -> receives updates
  std::vector<Partition> frozen;
};

// Sets requires_grad per partition and returns the resulting mask.
TrainableMask apply_freeze_plan(MultitaskModelImpl& model, FreezePlan plan);

// Adam with decoupled weight decay on parameters of rank >= 2.
class AdamW {
 public:
  AdamW(std::vector<std::pair<std::string, torch::Tensor>> parameters, const TrainConfig& config);

  // Updates parameters that require grad and have a gradient.
  void step();
  void zero_grad();

  std::int64_t steps_taken() const { return steps_; }

  void save_state(std::vector<std::pair<std::string, torch::Tensor>>& out) const;
  void load_state(const Checkpoint& checkpoint, std::int64_t steps_taken);

 private:
  struct Slot {
    std::string name;
    torch::Tensor param;
    torch::Tensor exp_avg;
    torch::Tensor exp_avg_sq;
  };
  std::vector<Slot> slots_;
  double lr_, weight_decay_, beta1_, beta2_, epsilon_;
  std::int64_t steps_ = 0;
};

// ---------------------------------------------------------------------------
// Data

struct TrainingSample {
  std::string id;
  torch::Tensor image;  // (3, H, W)
  detect::GroundTruth target;
  std::vector<std::string> captions;
  std::vector<std::vector<std::int64_t>> caption_ids;  // each ends with <end>
};

struct TrainingData {
  std::vector<TrainingSample> samples;
  scenegen::Vocabulary vocab;
};

// Throws DataError for an empty or invalid manifest, or mixed image sizes.
TrainingData load_training_data(const std::filesystem::path& manifest, const scenegen::Vocabulary& vocab,
                                int max_caption_len);
TrainingData training_data_from_records(const std::vector<scenegen::SceneRecord>& records,
                                        const scenegen::Vocabulary& vocab, int max_caption_len);

struct Batch {
  std::vector<std::size_t> indices;
  torch::Tensor images;  // (B, 3, H, W)
  std::vector<detect::GroundTruth> targets;
  caption::TeacherForcing captions;
};

// Pure function of (seed, step): per-epoch permutations of the dataset.
Batch make_batch(const TrainingData& data, const TrainConfig& config, std::int64_t step);

// Forward pass of every loss term (the caption branch is skipped under
// detection_only). Throws NumericError naming any non-finite term.
JointLoss compute_loss(MultitaskModelImpl& model, const Batch& batch, const TrainConfig& config, std::int64_t step);

LossBreakdown train_step(MultitaskModelImpl& model, AdamW& optimizer, const Batch& batch, const TrainConfig& config,
                         std::int64_t step);

// ---------------------------------------------------------------------------
// Runs

struct TrainOptions {
  bool resume = false;  // continue from out_dir/checkpoint.bin when present
  std::function<void(std::int64_t, const LossBreakdown&)> on_step;
  std::function<void(const std::string&)> log;
};

struct TrainResult {
  std::int64_t steps_completed = 0;
  std::vector<LossBreakdown> losses;  // steps run by this call
  std::filesystem::path checkpoint;
};

// Writes out_dir/metrics.jsonl (one line per step) and out_dir/checkpoint.bin
// every checkpoint_every steps and at the end.
TrainResult train(const ModelConfig& model_config, const TrainConfig& config, const TrainingData& data,
                  const std::filesystem::path& out_dir, const TrainOptions& options = {});

// Checkpoint metadata carries the model config, train config, vocabulary
// and completed step count.
void save_training_checkpoint(const std::filesystem::path& path, MultitaskModelImpl& model, const AdamW* optimizer,
                              const ModelConfig& model_config, const TrainConfig& config,
                              const scenegen::Vocabulary& vocab, std::int64_t step);

struct LoadedModel {
  MultitaskModel model{nullptr};
  ModelConfig model_config;
  TrainConfig train_config;
  scenegen::Vocabulary vocab;
  std::int64_t step = 0;
};
LoadedModel load_model(const std::filesystem::path& checkpoint);

}  // namespace capdet::trainer
