#pragma once

#include <torch/torch.h>

#include <vector>

namespace capdet::backbone {

struct BackboneConfig {
  int image_size = 128;  // square input resolution the windows are laid out for
  int in_channels = 3;
  int patch_size = 4;
  int base_channels = 32;
  std::vector<int> depths{1, 1, 2, 1};
  std::vector<int> heads{1, 2, 4, 8};
  int window_size = 4;
  int mlp_ratio = 4;

  int num_stages() const { return static_cast<int>(depths.size()); }
  int stage_channels(int stage) const { return base_channels << stage; }
  int stage_grid(int stage) const { return image_size / (patch_size << stage); }
  // Swin clamps the window to the grid when the grid is not larger than it.
  int stage_window(int stage) const;
  int last_channels() const { return stage_channels(num_stages() - 1); }

  // Throws ConfigError.
  void validate() const;
};

struct FeatureMap {
  torch::Tensor tensor;  // (batch, channels, height, width)
  int stride = 0;
};

struct FeaturePyramid {
  std::vector<FeatureMap> maps;

  std::size_t size() const { return maps.size(); }
  const FeatureMap& operator[](std::size_t i) const { return maps[i]; }
  const FeatureMap& last() const { return maps.back(); }
};

// (B, H, W, C) -> (B * nW, w * w, C), windows in row-major order.
torch::Tensor window_partition(const torch::Tensor& x, int window);
torch::Tensor window_reverse(const torch::Tensor& windows, int window, int height, int width);

// Additive mask (nW, w*w, w*w): 0 where two tokens of a cyclically shifted
// window came from the same region of the unshifted grid, -inf elsewhere.
torch::Tensor shifted_window_mask(int height, int width, int window, int shift,
                                  const torch::TensorOptions& options);

// (w*w, w*w) indices into the (2w-1)^2 relative position bias table.
torch::Tensor relative_position_index(int window);

class WindowAttentionImpl : public torch::nn::Module {
 public:
  WindowAttentionImpl(int dim, int heads, int window);

  // windows: (N, w*w, C); mask: optional (nW, w*w, w*w) with N a multiple of nW.
  torch::Tensor forward(const torch::Tensor& windows, const torch::Tensor& mask = {});

  int dim() const { return dim_; }
  int heads() const { return heads_; }
  int window() const { return window_; }
  const torch::Tensor& bias_table() const { return bias_table_; }
  torch::Tensor relative_bias() const;  // (heads, w*w, w*w)

  torch::nn::Linear qkv{nullptr};
  torch::nn::Linear proj{nullptr};

 private:
  int dim_;
  int heads_;
  int window_;
  torch::Tensor bias_table_;
  torch::Tensor bias_index_;
};
TORCH_MODULE(WindowAttention);

// W-MSA (shift == 0) or SW-MSA (shift > 0, cyclic shift + mask) over a token
// grid (B, H, W, C). Shape preserving.
torch::Tensor window_attention(const torch::Tensor& tokens, int shift, WindowAttention& attention);

class SwinBlockImpl : public torch::nn::Module {
 public:
  SwinBlockImpl(int dim, int heads, int window, int shift, int mlp_ratio);

  torch::Tensor forward(const torch::Tensor& x);  // (B, H, W, C)

  int shift() const { return shift_; }

  torch::nn::LayerNorm norm1{nullptr};
  WindowAttention attn{nullptr};
  torch::nn::LayerNorm norm2{nullptr};
  torch::nn::Linear fc1{nullptr};
  torch::nn::Linear fc2{nullptr};

 private:
  int shift_;
};
TORCH_MODULE(SwinBlock);

// 2x2 neighbourhood concatenation, LayerNorm, linear 4C -> 2C.
class PatchMergingImpl : public torch::nn::Module {
 public:
  explicit PatchMergingImpl(int dim);
  torch::Tensor forward(const torch::Tensor& x);  // (B, H, W, C) -> (B, H/2, W/2, 2C)

  torch::nn::LayerNorm norm{nullptr};
  torch::nn::Linear reduction{nullptr};
};
TORCH_MODULE(PatchMerging);

// Non-overlapping patch projection followed by LayerNorm.
class PatchEmbedImpl : public torch::nn::Module {
 public:
  PatchEmbedImpl(int in_channels, int dim, int patch_size);
  torch::Tensor forward(const torch::Tensor& images);  // (B, 3, H, W) -> (B, H/p, W/p, C)

  torch::nn::Conv2d proj{nullptr};
  torch::nn::LayerNorm norm{nullptr};

 private:
  int patch_size_;
};
TORCH_MODULE(PatchEmbed);

class SwinBackboneImpl : public torch::nn::Module {
 public:
  explicit SwinBackboneImpl(BackboneConfig config);

  FeaturePyramid forward(const torch::Tensor& images);

  const BackboneConfig& config() const { return config_; }

  PatchEmbed patch_embed{nullptr};
  torch::nn::ModuleList stages{nullptr};   // per stage: ModuleList of SwinBlock
  torch::nn::ModuleList merges{nullptr};   // merges[i] feeds stage i + 1
  torch::nn::ModuleList out_norms{nullptr};

 private:
  BackboneConfig config_;
};
TORCH_MODULE(SwinBackbone);

// Truncated-normal (std 0.02) weights and zero biases for every Linear.
void init_transformer_weights(torch::nn::Module& module);

}  // namespace capdet::backbone
