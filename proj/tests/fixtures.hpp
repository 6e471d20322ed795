#pragma once

#include "capdet/model.hpp"
#include "capdet/scenegen.hpp"
#include "capdet/trainer.hpp"

namespace testutil {

// Small model over the scene vocabulary, cheap enough for many steps on CPU.
inline capdet::ModelConfig fast_config(int image_size = 64) {
  auto c = capdet::micro_config();
  c.backbone.image_size = image_size;
  c.decoder.vocab_size = static_cast<int>(capdet::scenegen::Vocabulary::scene_default().size());
  c.decoder.max_len = 20;
  c.detect.rpn_batch_per_image = 32;
  c.detect.roi_batch_per_image = 16;
  c.detect.pre_nms_top = 64;
  c.detect.post_nms_top = 16;
  return c;
}

inline capdet::trainer::TrainingData scene_data(int count, int image_size, std::uint64_t seed) {
  capdet::scenegen::SceneConfig sc;
  sc.image_size = image_size;
  const auto records = capdet::scenegen::generate_dataset(seed, count, sc);
  return capdet::trainer::training_data_from_records(records, capdet::scenegen::Vocabulary::scene_default(), 20);
}

inline capdet::trainer::TrainConfig quick_train(std::int64_t steps, double lambda = 0.1, std::uint64_t seed = 0) {
  capdet::trainer::TrainConfig t;
  t.steps = steps;
  t.lambda = lambda;
  t.seed = seed;
  t.learning_rate = 1e-3;
  t.checkpoint_every = steps;
  return t;
}

// Bitwise snapshot of every parameter of one partition.
inline std::vector<std::pair<std::string, torch::Tensor>> snapshot(capdet::MultitaskModelImpl& model,
                                                                    capdet::Partition p) {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (auto& [name, t] : model.named_partition(p)) out.emplace_back(name, t.detach().clone());
  return out;
}

inline bool unchanged(capdet::MultitaskModelImpl& model, capdet::Partition p,
                      const std::vector<std::pair<std::string, torch::Tensor>>& before) {
  const auto now = model.named_partition(p);
  if (now.size() != before.size()) return false;
  for (std::size_t i = 0; i < now.size(); ++i) {
    if (!torch::equal(now[i].second, before[i].second)) return false;
  }
  return true;
}

}  // namespace testutil
