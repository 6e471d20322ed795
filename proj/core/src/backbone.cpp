#include "capdet/backbone.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "capdet/error.hpp"

namespace capdet::backbone {

namespace F = torch::nn::functional;

int BackboneConfig::stage_window(int stage) const {
  const int grid = stage_grid(stage);
  return grid <= window_size ? grid : window_size;
}

void BackboneConfig::validate() const {
  if (depths.empty() || depths.size() != heads.size()) {
    throw ConfigError("backbone: depths and heads must be non-empty and of equal length");
  }
  if (patch_size <= 0 || base_channels <= 0 || window_size <= 0 || mlp_ratio <= 0) {
    throw ConfigError("backbone: patch size, channels, window and mlp ratio must be positive");
  }
  const int total_stride = patch_size << (num_stages() - 1);
  if (image_size <= 0 || image_size % total_stride != 0) {
    throw ConfigError("backbone: image size " + std::to_string(image_size) + " must be divisible by " +
                      std::to_string(total_stride));
  }
  for (int s = 0; s < num_stages(); ++s) {
    if (depths[s] < 1) throw ConfigError("backbone: every stage needs at least one block");
    if (stage_grid(s) % stage_window(s) != 0) {
      throw ConfigError("backbone: stage " + std::to_string(s) + " grid " + std::to_string(stage_grid(s)) +
                        " not divisible by window " + std::to_string(stage_window(s)));
    }
    if (heads[s] <= 0 || stage_channels(s) % heads[s] != 0) {
      throw ConfigError("backbone: stage " + std::to_string(s) + " channels " + std::to_string(stage_channels(s)) +
                        " not divisible by " + std::to_string(heads[s]) + " heads");
    }
  }
}

torch::Tensor window_partition(const torch::Tensor& x, int window) {
  const auto b = x.size(0), h = x.size(1), w = x.size(2), c = x.size(3);
  return x.view({b, h / window, window, w / window, window, c})
      .permute({0, 1, 3, 2, 4, 5})
      .reshape({-1, static_cast<int64_t>(window) * window, c});
}

torch::Tensor window_reverse(const torch::Tensor& windows, int window, int height, int width) {
  const auto c = windows.size(2);
  const int64_t nh = height / window, nw = width / window;
  const auto b = windows.size(0) / (nh * nw);
  return windows.view({b, nh, nw, window, window, c}).permute({0, 1, 3, 2, 4, 5}).reshape({b, height, width, c});
}

torch::Tensor shifted_window_mask(int height, int width, int window, int shift,
                                  const torch::TensorOptions& options) {
  auto regions = torch::zeros({1, height, width, 1}, torch::kFloat64);
  const int h_bounds[4] = {0, height - window, height - shift, height};
  const int w_bounds[4] = {0, width - window, width - shift, width};
  double id = 0.0;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      regions.index_put_({0, torch::indexing::Slice(h_bounds[i], h_bounds[i + 1]),
                          torch::indexing::Slice(w_bounds[j], w_bounds[j + 1]), 0},
                         id);
      id += 1.0;
    }
  }
  auto ids = window_partition(regions, window).squeeze(-1);  // (nW, L)
  auto different = ids.unsqueeze(1) != ids.unsqueeze(2);
  auto mask = torch::zeros(different.sizes(), options);
  return mask.masked_fill(different, -std::numeric_limits<double>::infinity());
}

torch::Tensor relative_position_index(int window) {
  const int64_t l = static_cast<int64_t>(window) * window;
  auto index = torch::empty({l, l}, torch::kLong);
  auto acc = index.accessor<int64_t, 2>();
  for (int64_t i = 0; i < l; ++i) {
    for (int64_t j = 0; j < l; ++j) {
      const int64_t dy = i / window - j / window + window - 1;
      const int64_t dx = i % window - j % window + window - 1;
      acc[i][j] = dy * (2 * window - 1) + dx;
    }
  }
  return index;
}

WindowAttentionImpl::WindowAttentionImpl(int dim, int heads, int window)
    : dim_(dim), heads_(heads), window_(window) {
  if (heads <= 0 || dim % heads != 0) {
    throw ConfigError("window attention: dim " + std::to_string(dim) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  qkv = register_module("qkv", torch::nn::Linear(dim, 3 * dim));
  proj = register_module("proj", torch::nn::Linear(dim, dim));
  bias_table_ = register_parameter("relative_position_bias_table",
                                   torch::zeros({(2 * window - 1) * (2 * window - 1), heads}));
  bias_index_ = relative_position_index(window);
}

torch::Tensor WindowAttentionImpl::relative_bias() const {
  const int64_t l = static_cast<int64_t>(window_) * window_;
  return bias_table_.index_select(0, bias_index_.view(-1)).view({l, l, heads_}).permute({2, 0, 1});
}

torch::Tensor WindowAttentionImpl::forward(const torch::Tensor& windows, const torch::Tensor& mask) {
  const auto n = windows.size(0), l = windows.size(1), c = windows.size(2);
  if (c != dim_) throw ConfigError("window attention: expected channel dim " + std::to_string(dim_));
  const int64_t head_dim = dim_ / heads_;
  auto qkv_out = qkv(windows).view({n, l, 3, heads_, head_dim}).permute({2, 0, 3, 1, 4});
  auto q = qkv_out[0] * (1.0 / std::sqrt(static_cast<double>(head_dim)));
  auto k = qkv_out[1];
  auto v = qkv_out[2];
  auto scores = torch::matmul(q, k.transpose(-2, -1)) + relative_bias().unsqueeze(0);
  if (mask.defined()) {
    const auto nw = mask.size(0);
    scores = (scores.view({n / nw, nw, heads_, l, l}) + mask.unsqueeze(1).unsqueeze(0)).view({n, heads_, l, l});
  }
  auto out = torch::matmul(torch::softmax(scores, -1), v).transpose(1, 2).reshape({n, l, c});
  return proj(out);
}

torch::Tensor window_attention(const torch::Tensor& tokens, int shift, WindowAttention& attention) {
  const int h = static_cast<int>(tokens.size(1));
  const int w = static_cast<int>(tokens.size(2));
  const int win = attention->window();
  if (h % win != 0 || w % win != 0) {
    throw ConfigError("window attention: grid " + std::to_string(h) + "x" + std::to_string(w) +
                      " not divisible by window " + std::to_string(win));
  }
  if (shift > 0 && (h > win || w > win)) {
    auto shifted = torch::roll(tokens, {-shift, -shift}, {1, 2});
    auto mask = shifted_window_mask(h, w, win, shift, tokens.options());
    auto out = window_reverse(attention->forward(window_partition(shifted, win), mask), win, h, w);
    return torch::roll(out, {shift, shift}, {1, 2});
  }
  return window_reverse(attention->forward(window_partition(tokens, win)), win, h, w);
}

SwinBlockImpl::SwinBlockImpl(int dim, int heads, int window, int shift, int mlp_ratio) : shift_(shift) {
  norm1 = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  attn = register_module("attn", WindowAttention(dim, heads, window));
  norm2 = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  fc1 = register_module("fc1", torch::nn::Linear(dim, dim * mlp_ratio));
  fc2 = register_module("fc2", torch::nn::Linear(dim * mlp_ratio, dim));
}

torch::Tensor SwinBlockImpl::forward(const torch::Tensor& x) {
  auto y = x + window_attention(norm1(x), shift_, attn);
  return y + fc2(F::gelu(fc1(norm2(y))));
}

PatchMergingImpl::PatchMergingImpl(int dim) {
  norm = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({4 * dim})));
  reduction = register_module("reduction", torch::nn::Linear(torch::nn::LinearOptions(4 * dim, 2 * dim).bias(false)));
}

torch::Tensor PatchMergingImpl::forward(const torch::Tensor& x) {
  using torch::indexing::Slice;
  if (x.size(1) % 2 != 0 || x.size(2) % 2 != 0) {
    throw ConfigError("patch merging: grid " + std::to_string(x.size(1)) + "x" + std::to_string(x.size(2)) +
                      " has an odd dimension");
  }
  auto x0 = x.index({Slice(), Slice(0, torch::indexing::None, 2), Slice(0, torch::indexing::None, 2)});
  auto x1 = x.index({Slice(), Slice(1, torch::indexing::None, 2), Slice(0, torch::indexing::None, 2)});
  auto x2 = x.index({Slice(), Slice(0, torch::indexing::None, 2), Slice(1, torch::indexing::None, 2)});
  auto x3 = x.index({Slice(), Slice(1, torch::indexing::None, 2), Slice(1, torch::indexing::None, 2)});
  return reduction(norm(torch::cat({x0, x1, x2, x3}, -1)));
}

PatchEmbedImpl::PatchEmbedImpl(int in_channels, int dim, int patch_size) : patch_size_(patch_size) {
  proj = register_module(
      "proj", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, dim, patch_size).stride(patch_size)));
  norm = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
}

torch::Tensor PatchEmbedImpl::forward(const torch::Tensor& images) {
  if (images.size(2) % patch_size_ != 0 || images.size(3) % patch_size_ != 0) {
    throw ConfigError("patch embedding: image " + std::to_string(images.size(2)) + "x" +
                      std::to_string(images.size(3)) + " not divisible by patch size " + std::to_string(patch_size_));
  }
  return norm(proj(images).permute({0, 2, 3, 1}));
}

SwinBackboneImpl::SwinBackboneImpl(BackboneConfig config) : config_(std::move(config)) {
  config_.validate();
  patch_embed = register_module("patch_embed",
                                PatchEmbed(config_.in_channels, config_.base_channels, config_.patch_size));
  stages = register_module("stages", torch::nn::ModuleList());
  merges = register_module("merges", torch::nn::ModuleList());
  out_norms = register_module("out_norms", torch::nn::ModuleList());
  for (int s = 0; s < config_.num_stages(); ++s) {
    const int dim = config_.stage_channels(s);
    const int window = config_.stage_window(s);
    const bool can_shift = config_.stage_grid(s) > window;
    torch::nn::ModuleList blocks;
    for (int b = 0; b < config_.depths[s]; ++b) {
      const int shift = (b % 2 == 1 && can_shift) ? window / 2 : 0;
      blocks->push_back(SwinBlock(dim, config_.heads[s], window, shift, config_.mlp_ratio));
    }
    stages->push_back(blocks);
    if (s + 1 < config_.num_stages()) merges->push_back(PatchMerging(dim));
    out_norms->push_back(torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  }
  init_transformer_weights(*this);
}

FeaturePyramid SwinBackboneImpl::forward(const torch::Tensor& images) {
  const int total_stride = config_.patch_size << (config_.num_stages() - 1);
  if (images.dim() != 4 || images.size(1) != config_.in_channels) {
    throw ConfigError("backbone: expected images shaped (batch, 3, height, width)");
  }
  if (images.size(2) % total_stride != 0 || images.size(3) % total_stride != 0) {
    throw ConfigError("backbone: image " + std::to_string(images.size(2)) + "x" + std::to_string(images.size(3)) +
                      " must be divisible by " + std::to_string(total_stride) + "; resize the input");
  }
  FeaturePyramid pyramid;
  auto x = patch_embed(images);
  for (int s = 0; s < config_.num_stages(); ++s) {
    if (s > 0) x = merges[s - 1]->as<PatchMerging>()->forward(x);
    for (const auto& block : *stages[s]->as<torch::nn::ModuleList>()) x = block->as<SwinBlock>()->forward(x);
    auto normed = out_norms[s]->as<torch::nn::LayerNorm>()->forward(x);
    pyramid.maps.push_back({normed.permute({0, 3, 1, 2}).contiguous(), config_.patch_size << s});
  }
  return pyramid;
}

void init_transformer_weights(torch::nn::Module& module) {
  torch::NoGradGuard no_grad;
  for (auto& m : module.modules(/*include_self=*/false)) {
    if (auto* linear = m->as<torch::nn::Linear>()) {
      linear->weight.normal_(0.0, 0.02).clamp_(-0.04, 0.04);
      if (linear->bias.defined()) linear->bias.zero_();
    }
  }
  for (auto& p : module.named_parameters(true)) {
    if (p.key().find("relative_position_bias_table") != std::string::npos) p.value().normal_(0.0, 0.02).clamp_(-0.04, 0.04);
  }
}

}  // namespace capdet::backbone
