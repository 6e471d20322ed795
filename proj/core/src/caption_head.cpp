#include "capdet/caption_head.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <tuple>

#include "capdet/backbone.hpp"
#include "capdet/error.hpp"

namespace capdet::caption {

void DecoderConfig::validate() const {
  if (layers < 1) throw ConfigError("decoder: layers must be >= 1");
  if (heads < 1 || width % heads != 0) throw ConfigError("decoder: width must be divisible by heads");
  if (max_len < 1) throw ConfigError("decoder: max_len must be >= 1");
  if (vocab_size < 4) throw ConfigError("decoder: vocabulary needs at least the four reserved tokens");
  if (mlp_ratio < 1 || max_memory_side < 1) throw ConfigError("decoder: invalid mlp_ratio or max_memory_side");
}

namespace {

// q: (B, Tq, W), k/v: (B, Tk, W); mask broadcastable to (B, H, Tq, Tk).
torch::Tensor attention(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v, int heads,
                        const torch::Tensor& mask) {
  const auto b = q.size(0), tq = q.size(1), tk = k.size(1), w = q.size(2);
  const auto d = w / heads;
  auto qh = q.view({b, tq, heads, d}).transpose(1, 2);
  auto kh = k.view({b, tk, heads, d}).transpose(1, 2);
  auto vh = v.view({b, tk, heads, d}).transpose(1, 2);
  auto scores = torch::matmul(qh, kh.transpose(-2, -1)) / std::sqrt(static_cast<double>(d));
  if (mask.defined()) scores = scores + mask;
  return torch::matmul(torch::softmax(scores, -1), vh).transpose(1, 2).reshape({b, tq, w});
}

}  // namespace

DecoderBlockImpl::DecoderBlockImpl(int width, int heads, int mlp_ratio) : heads_(heads) {
  ln1 = register_module("ln1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({width})));
  qkv = register_module("qkv", torch::nn::Linear(width, 3 * width));
  self_proj = register_module("self_proj", torch::nn::Linear(width, width));
  ln2 = register_module("ln2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({width})));
  cross_q = register_module("cross_q", torch::nn::Linear(width, width));
  cross_kv = register_module("cross_kv", torch::nn::Linear(width, 2 * width));
  cross_proj = register_module("cross_proj", torch::nn::Linear(width, width));
  ln3 = register_module("ln3", torch::nn::LayerNorm(torch::nn::LayerNormOptions({width})));
  fc1 = register_module("fc1", torch::nn::Linear(width, mlp_ratio * width));
  fc2 = register_module("fc2", torch::nn::Linear(mlp_ratio * width, width));
}

torch::Tensor DecoderBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& memory) {
  const auto t = x.size(1);
  auto causal = torch::full({t, t}, -std::numeric_limits<double>::infinity(), x.options()).triu(1);

  auto h = ln1(x);
  auto parts = qkv(h).chunk(3, -1);
  auto out = x + self_proj(attention(parts[0], parts[1], parts[2], heads_, causal));

  auto kv = cross_kv(memory).chunk(2, -1);
  out = out + cross_proj(attention(cross_q(ln2(out)), kv[0], kv[1], heads_, {}));

  return out + fc2(torch::gelu(fc1(ln3(out))));
}

CaptionDecoderImpl::CaptionDecoderImpl(DecoderConfig config) : config_(std::move(config)) {
  config_.validate();
  const int w = config_.width;
  token_embedding = register_module("token_embedding", torch::nn::Embedding(config_.vocab_size, w));
  position_embedding = register_module("position_embedding", torch::nn::Embedding(config_.max_len, w));
  memory_row = register_module("memory_row", torch::nn::Embedding(config_.max_memory_side, w));
  memory_col = register_module("memory_col", torch::nn::Embedding(config_.max_memory_side, w));
  blocks = register_module("blocks", torch::nn::ModuleList());
  for (int i = 0; i < config_.layers; ++i) blocks->push_back(DecoderBlock(w, config_.heads, config_.mlp_ratio));
  ln_f = register_module("ln_f", torch::nn::LayerNorm(torch::nn::LayerNormOptions({w})));

  backbone::init_transformer_weights(*this);
  torch::NoGradGuard no_grad;
  for (auto* e : {&token_embedding, &position_embedding, &memory_row, &memory_col}) {
    (*e)->weight.normal_(0.0, 0.02).clamp_(-0.04, 0.04);
  }
}

torch::Tensor CaptionDecoderImpl::memory(const torch::Tensor& feature_map) {
  if (feature_map.dim() != 4 || feature_map.size(1) != config_.width) {
    throw ConfigError("decoder: feature map must be (B, " + std::to_string(config_.width) + ", h, w)");
  }
  const auto h = feature_map.size(2), w = feature_map.size(3);
  if (h > config_.max_memory_side || w > config_.max_memory_side) {
    throw ConfigError("decoder: feature grid " + std::to_string(h) + "x" + std::to_string(w) +
                      " exceeds max_memory_side " + std::to_string(config_.max_memory_side));
  }
  auto rows = memory_row(torch::arange(h, torch::kLong)).unsqueeze(1);  // (h, 1, W)
  auto cols = memory_col(torch::arange(w, torch::kLong)).unsqueeze(0);  // (1, w, W)
  auto pos = (rows + cols).view({h * w, config_.width});
  return feature_map.flatten(2).transpose(1, 2) + pos.unsqueeze(0);
}

torch::Tensor CaptionDecoderImpl::forward_memory(const torch::Tensor& memory, const torch::Tensor& prefix) {
  if (prefix.dim() != 2 || prefix.size(1) < 1) throw ConfigError("decoder: prefix must be (B, T) with T >= 1");
  const auto t = prefix.size(1);
  if (t > config_.max_len) {
    throw ConfigError("decoder: prefix length " + std::to_string(t) + " exceeds max_len " +
                      std::to_string(config_.max_len));
  }
  auto x = token_embedding(prefix) + position_embedding(torch::arange(t, torch::kLong)).unsqueeze(0);
  for (const auto& block : *blocks) x = block->as<DecoderBlock>()->forward(x, memory);
  return torch::matmul(ln_f(x), token_embedding->weight.t());
}

torch::Tensor CaptionDecoderImpl::forward(const torch::Tensor& feature_map, const torch::Tensor& prefix) {
  return forward_memory(memory(feature_map), prefix);
}

torch::Tensor caption_loss(const torch::Tensor& logits, const torch::Tensor& target, std::int64_t pad_id) {
  if (logits.dim() != target.dim() + 1 || logits.sizes().slice(0, target.dim()) != target.sizes()) {
    throw ConfigError("caption_loss: logits and target lengths differ");
  }
  auto flat_logits = logits.reshape({-1, logits.size(-1)});
  auto flat_target = target.reshape({-1});
  if ((flat_target != pad_id).sum().item<int64_t>() == 0) throw ConfigError("caption_loss: target is all padding");
  return torch::nn::functional::cross_entropy(
      flat_logits, flat_target, torch::nn::functional::CrossEntropyFuncOptions().ignore_index(pad_id));
}

TeacherForcing teacher_forcing(const std::vector<std::vector<std::int64_t>>& targets, std::int64_t start_id,
                               std::int64_t pad_id) {
  std::size_t t = 0;
  for (const auto& seq : targets) t = std::max(t, seq.size());
  if (targets.empty() || t == 0) throw ConfigError("teacher_forcing: empty batch or caption");
  const auto b = static_cast<int64_t>(targets.size());
  auto input = torch::full({b, static_cast<int64_t>(t)}, pad_id, torch::kLong);
  auto target = torch::full({b, static_cast<int64_t>(t)}, pad_id, torch::kLong);
  auto in = input.accessor<int64_t, 2>();
  auto tg = target.accessor<int64_t, 2>();
  for (int64_t i = 0; i < b; ++i) {
    const auto& seq = targets[static_cast<std::size_t>(i)];
    in[i][0] = start_id;
    for (std::size_t j = 0; j < seq.size(); ++j) {
      tg[i][static_cast<int64_t>(j)] = seq[j];
      if (j + 1 < seq.size()) in[i][static_cast<int64_t>(j + 1)] = seq[j];
    }
  }
  return {input, target};
}

// ---------------------------------------------------------------------------

namespace {

torch::Tensor checked_step(const StepFunction& step, const std::vector<std::vector<std::int64_t>>& prefixes) {
  auto out = step(prefixes).to(torch::kFloat64).contiguous();
  if (out.dim() != 2 || out.size(0) != static_cast<int64_t>(prefixes.size())) {
    throw ConfigError("decode: step function must return (N, vocab) log-probabilities");
  }
  return out;
}

}  // namespace

Hypothesis greedy_decode(const StepFunction& step, const DecodeOptions& options) {
  Hypothesis hyp;
  std::vector<std::int64_t> prefix{options.start_id};
  for (int t = 0; t < options.max_len; ++t) {
    auto logp = checked_step(step, {prefix});
    auto row = logp.accessor<double, 2>()[0];
    std::int64_t best = 0;
    for (int64_t v = 1; v < logp.size(1); ++v) {
      if (row[v] > row[best]) best = v;
    }
    hyp.tokens.push_back(best);
    hyp.logprob += row[best];
    prefix.push_back(best);
    if (best == options.end_id) break;
  }
  return hyp;
}

Hypothesis beam_search(const StepFunction& step, int beam, const DecodeOptions& options) {
  if (beam < 1) throw ConfigError("beam_search: beam must be >= 1");
  struct Partial {
    std::vector<std::int64_t> prefix;
    double logprob;
  };
  std::vector<Partial> live{{{options.start_id}, 0.0}};
  std::vector<Hypothesis> finished;

  auto best_finished = [&]() {
    double best = -std::numeric_limits<double>::infinity();
    for (const auto& f : finished) best = std::max(best, f.logprob);
    return best;
  };

  for (int t = 0; t < options.max_len && !live.empty(); ++t) {
    std::vector<std::vector<std::int64_t>> prefixes;
    for (const auto& p : live) prefixes.push_back(p.prefix);
    auto logp = checked_step(step, prefixes);
    auto acc = logp.accessor<double, 2>();

    struct Candidate {
      double score;
      std::size_t parent;
      std::int64_t token;
    };
    std::vector<Candidate> candidates;
    for (std::size_t i = 0; i < live.size(); ++i) {
      for (int64_t v = 0; v < logp.size(1); ++v) {
        candidates.push_back({live[i].logprob + acc[static_cast<int64_t>(i)][v], i, v});
      }
    }
    const auto keep = std::min<std::size_t>(static_cast<std::size_t>(beam), candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep), candidates.end(),
                      [](const Candidate& a, const Candidate& b) {
                        if (a.score != b.score) return a.score > b.score;
                        return std::tie(a.parent, a.token) < std::tie(b.parent, b.token);
                      });

    std::vector<Partial> next;
    for (std::size_t k = 0; k < keep; ++k) {
      const auto& c = candidates[k];
      auto prefix = live[c.parent].prefix;
      prefix.push_back(c.token);
      if (c.token == options.end_id || t + 1 == options.max_len) {
        finished.push_back({std::vector<std::int64_t>(prefix.begin() + 1, prefix.end()), c.score});
      } else {
        next.push_back({std::move(prefix), c.score});
      }
    }
    live = std::move(next);
    // Log-probabilities only decrease, so no live hypothesis can overtake.
    if (!live.empty() && !finished.empty() && best_finished() >= live.front().logprob) break;
  }

  Hypothesis best;
  best.logprob = -std::numeric_limits<double>::infinity();
  for (const auto& f : finished) {
    if (f.logprob > best.logprob) best = f;
  }
  if (beam > 1) {
    auto greedy = greedy_decode(step, options);
    if (greedy.logprob > best.logprob) best = std::move(greedy);
  }
  return best;
}

StepFunction decoder_step(CaptionDecoder& decoder, const torch::Tensor& memory) {
  return [&decoder, memory](const std::vector<std::vector<std::int64_t>>& prefixes) {
    const auto n = static_cast<int64_t>(prefixes.size());
    const auto t = static_cast<int64_t>(prefixes.front().size());
    auto ids = torch::empty({n, t}, torch::kLong);
    auto acc = ids.accessor<int64_t, 2>();
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t j = 0; j < t; ++j) acc[i][j] = prefixes[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    }
    auto logits = decoder->forward_memory(memory.expand({n, memory.size(1), memory.size(2)}), ids);
    return torch::log_softmax(logits.select(1, t - 1).to(torch::kFloat64), -1);
  };
}

}  // namespace capdet::caption
