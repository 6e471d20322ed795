#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <functional>
#include <vector>

namespace capdet::caption {

struct DecoderConfig {
  int layers = 2;
  int width = 256;  // must equal the channels of the last backbone map
  int heads = 4;
  int max_len = 20;  // tokens per caption including <end>
  int vocab_size = 25;
  int mlp_ratio = 4;
  int max_memory_side = 64;  // largest feature grid side the memory embeddings cover

  void validate() const;
};

// Pre-norm block: causal self-attention, cross-attention to memory, MLP.
class DecoderBlockImpl : public torch::nn::Module {
 public:
  DecoderBlockImpl(int width, int heads, int mlp_ratio);

  // x: (B, T, W); memory: (B, M, W)
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& memory);

  torch::nn::LayerNorm ln1{nullptr};
  torch::nn::Linear qkv{nullptr};
  torch::nn::Linear self_proj{nullptr};
  torch::nn::LayerNorm ln2{nullptr};
  torch::nn::Linear cross_q{nullptr};
  torch::nn::Linear cross_kv{nullptr};
  torch::nn::Linear cross_proj{nullptr};
  torch::nn::LayerNorm ln3{nullptr};
  torch::nn::Linear fc1{nullptr};
  torch::nn::Linear fc2{nullptr};

 private:
  int heads_;
};
TORCH_MODULE(DecoderBlock);

class CaptionDecoderImpl : public torch::nn::Module {
 public:
  explicit CaptionDecoderImpl(DecoderConfig config);

  const DecoderConfig& config() const { return config_; }

  // Last backbone map (B, C, h, w) -> memory tokens (B, h*w, C) with
  // learned row/column embeddings added.
  torch::Tensor memory(const torch::Tensor& feature_map);

  // prefix: (B, T) token ids starting with <start>; returns (B, T, vocab).
  torch::Tensor forward_memory(const torch::Tensor& memory, const torch::Tensor& prefix);
  torch::Tensor forward(const torch::Tensor& feature_map, const torch::Tensor& prefix);

  torch::nn::Embedding token_embedding{nullptr};
  torch::nn::Embedding position_embedding{nullptr};
  torch::nn::Embedding memory_row{nullptr};
  torch::nn::Embedding memory_col{nullptr};
  torch::nn::ModuleList blocks{nullptr};
  torch::nn::LayerNorm ln_f{nullptr};

 private:
  DecoderConfig config_;
};
TORCH_MODULE(CaptionDecoder);

// Mean cross-entropy over positions whose target is not pad_id. logits:
// (T, V) or (B, T, V); target: (T) or (B, T). Throws ConfigError when every
// target position is padding or the lengths differ.
torch::Tensor caption_loss(const torch::Tensor& logits, const torch::Tensor& target, std::int64_t pad_id = 0);

// Teacher-forcing pair for one tokenized caption (ending with <end>):
// input = <start> + target[:-1].
struct TeacherForcing {
  torch::Tensor input;   // (B, T)
  torch::Tensor target;  // (B, T), padded with pad_id
};
TeacherForcing teacher_forcing(const std::vector<std::vector<std::int64_t>>& targets, std::int64_t start_id,
                               std::int64_t pad_id);

// ---------------------------------------------------------------------------
// Decoding

struct Hypothesis {
  std::vector<std::int64_t> tokens;  // generated ids, without <start>; ends with <end> when finished
  double logprob = 0.0;
};

// Log-probabilities (N, V) of the next token for N prefixes of equal length.
using StepFunction = std::function<torch::Tensor(const std::vector<std::vector<std::int64_t>>& prefixes)>;

struct DecodeOptions {
  std::int64_t start_id = 1;
  std::int64_t end_id = 2;  // negative: no token ends a hypothesis
  int max_len = 20;
};

// Argmax at every step (lowest id on ties).
Hypothesis greedy_decode(const StepFunction& step, const DecodeOptions& options);

// Keeps the `beam` best partial hypotheses by summed log-probability; a
// hypothesis ending in <end> is finished, live ones are finished at max_len.
// Returns the best finished hypothesis without length normalisation, never
// worse than the greedy one. Throws ConfigError for beam < 1.
Hypothesis beam_search(const StepFunction& step, int beam, const DecodeOptions& options);

// Step function over one image's decoder memory (1, M, W).
StepFunction decoder_step(CaptionDecoder& decoder, const torch::Tensor& memory);

}  // namespace capdet::caption
