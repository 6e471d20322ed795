#include "capdet/detect_head.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "capdet/error.hpp"

namespace capdet::detect {

namespace F = torch::nn::functional;

void DetectConfig::validate() const {
  if (num_classes < 1) throw ConfigError("detect: num_classes must be >= 1");
  if (fpn_channels < 1) throw ConfigError("detect: fpn_channels must be >= 1");
  if (anchor_ratios.empty() || anchor_scale <= 0.0) throw ConfigError("detect: anchors need ratios and a scale");
  if (!(rpn_pos_iou > rpn_neg_iou)) throw ConfigError("detect: rpn positive IoU must exceed negative IoU");
  if (rpn_batch_per_image < 1 || roi_batch_per_image < 1) throw ConfigError("detect: sample sizes must be >= 1");
  if (pre_nms_top < 1 || post_nms_top < 1) throw ConfigError("detect: proposal counts must be >= 1");
  if (roi_bins < 1 || roi_sampling < 1 || roi_hidden < 1) throw ConfigError("detect: invalid RoI head sizes");
  if (roi_levels < 1 || roi_levels > 5) throw ConfigError("detect: roi_levels must be in 1..5");
  if (smooth_l1_beta <= 0.0) throw ConfigError("detect: smooth-L1 beta must be positive");
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  auto splitmix = [](std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  };
  return splitmix(splitmix(splitmix(seed) ^ a) ^ (b * 0x2545f4914f6cdd1dULL));
}

void deterministic_shuffle(std::vector<std::int64_t>& values, std::uint64_t seed) {
  std::mt19937_64 engine(seed);
  for (std::size_t i = values.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(engine() % i);
    std::swap(values[i - 1], values[j]);
  }
}

torch::Tensor smooth_l1_loss(const torch::Tensor& pred, const torch::Tensor& target, double beta) {
  auto d = (pred - target).abs();
  return torch::where(d < beta, 0.5 * d * d / beta, d - 0.5 * beta);
}

std::pair<torch::Tensor, torch::Tensor> rpn_loss(const torch::Tensor& objectness_logits, const torch::Tensor& labels,
                                                 const torch::Tensor& positive_deltas,
                                                 const torch::Tensor& positive_targets, double beta) {
  if (objectness_logits.numel() == 0) {
    throw ConfigError("rpn_loss: no anchors sampled (all-ignore sample); the sampler must provide negatives");
  }
  auto cls = F::binary_cross_entropy_with_logits(objectness_logits, labels.to(objectness_logits.dtype()));
  torch::Tensor reg;
  if (positive_deltas.size(0) == 0) {
    reg = torch::zeros({}, objectness_logits.options());
  } else {
    reg = smooth_l1_loss(positive_deltas, positive_targets, beta).sum() / static_cast<double>(positive_deltas.size(0));
  }
  return {cls, reg};
}

std::pair<torch::Tensor, torch::Tensor> roi_loss(const torch::Tensor& class_logits, const torch::Tensor& labels,
                                                 const torch::Tensor& class_deltas, const torch::Tensor& targets,
                                                 double beta) {
  if (class_logits.size(0) == 0) throw ConfigError("roi_loss: no RoIs sampled");
  const auto num_classes = class_deltas.size(1);
  auto cls = F::cross_entropy(class_logits, labels);
  auto fg = (labels < num_classes).nonzero().squeeze(1);
  torch::Tensor reg;
  if (fg.numel() == 0) {
    reg = torch::zeros({}, class_logits.options());
  } else {
    auto fg_labels = labels.index_select(0, fg);
    auto pred = class_deltas.index_select(0, fg);
    pred = pred.gather(1, fg_labels.view({-1, 1, 1}).expand({-1, 1, 4})).squeeze(1);
    reg = smooth_l1_loss(pred, targets.index_select(0, fg), beta).sum() / static_cast<double>(fg.numel());
  }
  return {cls, reg};
}

// ---------------------------------------------------------------------------

FpnImpl::FpnImpl(std::vector<int> in_channels, int out_channels)
    : in_channels_(std::move(in_channels)), out_channels_(out_channels) {
  if (in_channels_.size() != 4) throw ConfigError("fpn: expects exactly four input levels");
  lateral = register_module("lateral", torch::nn::ModuleList());
  output = register_module("output", torch::nn::ModuleList());
  for (int c : in_channels_) {
    lateral->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(c, out_channels, 1)));
    output->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(out_channels, out_channels, 3).padding(1)));
  }
  torch::NoGradGuard no_grad;
  for (auto& p : named_parameters()) {
    if (p.key().ends_with("weight")) {
      torch::nn::init::kaiming_uniform_(p.value(), 1.0);
    } else {
      p.value().zero_();
    }
  }
}

FeaturePyramid FpnImpl::forward(const FeaturePyramid& features) {
  if (features.size() != 4) {
    throw ConfigError("fpn: expected 4 backbone maps, got " + std::to_string(features.size()));
  }
  for (std::size_t i = 0; i < 4; ++i) {
    if (features[i].tensor.size(1) != in_channels_[i]) {
      throw ConfigError("fpn: level " + std::to_string(i) + " has " + std::to_string(features[i].tensor.size(1)) +
                        " channels, expected " + std::to_string(in_channels_[i]));
    }
  }
  std::vector<torch::Tensor> merged(4);
  merged[3] = lateral[3]->as<torch::nn::Conv2d>()->forward(features[3].tensor);
  for (int i = 2; i >= 0; --i) {
    auto lat = lateral[i]->as<torch::nn::Conv2d>()->forward(features[i].tensor);
    auto up = F::interpolate(merged[i + 1], F::InterpolateFuncOptions()
                                                .size(std::vector<int64_t>{lat.size(2), lat.size(3)})
                                                .mode(torch::kNearest));
    merged[i] = lat + up;
  }
  FeaturePyramid out;
  for (int i = 0; i < 4; ++i) {
    out.maps.push_back({output[i]->as<torch::nn::Conv2d>()->forward(merged[i]), features[i].stride});
  }
  out.maps.push_back({F::max_pool2d(out.maps[3].tensor, F::MaxPool2dFuncOptions(1).stride(2)), features[3].stride * 2});
  return out;
}

RpnHeadImpl::RpnHeadImpl(int channels, int anchors_per_location) : anchors_per_location_(anchors_per_location) {
  conv = register_module("conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 3).padding(1)));
  cls = register_module("cls", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, anchors_per_location, 1)));
  reg = register_module("reg", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, 4 * anchors_per_location, 1)));
  torch::NoGradGuard no_grad;
  for (auto& p : named_parameters()) {
    if (p.key().ends_with("weight")) {
      p.value().normal_(0.0, 0.01);
    } else {
      p.value().zero_();
    }
  }
}

RpnOutput RpnHeadImpl::forward(const FeaturePyramid& fpn) {
  std::vector<torch::Tensor> logits, deltas;
  for (const auto& level : fpn.maps) {
    auto h = torch::relu(conv(level.tensor));
    const auto b = h.size(0), gh = h.size(2), gw = h.size(3);
    logits.push_back(cls(h).permute({0, 2, 3, 1}).reshape({b, -1}));
    deltas.push_back(
        reg(h).view({b, anchors_per_location_, 4, gh, gw}).permute({0, 3, 4, 1, 2}).reshape({b, -1, 4}));
  }
  return {torch::cat(logits, 1), torch::cat(deltas, 1)};
}

RoiHeadImpl::RoiHeadImpl(int channels, int bins, int hidden, int num_classes) : num_classes_(num_classes) {
  fc1 = register_module("fc1", torch::nn::Linear(channels * bins * bins, hidden));
  fc2 = register_module("fc2", torch::nn::Linear(hidden, hidden));
  cls = register_module("cls", torch::nn::Linear(hidden, num_classes + 1));
  reg = register_module("reg", torch::nn::Linear(hidden, 4 * num_classes));
  torch::NoGradGuard no_grad;
  cls->weight.normal_(0.0, 0.01);
  cls->bias.zero_();
  reg->weight.normal_(0.0, 0.001);
  reg->bias.zero_();
  fc1->bias.zero_();
  fc2->bias.zero_();
}

RoiOutput RoiHeadImpl::forward(const torch::Tensor& pooled) {
  auto x = torch::relu(fc1(pooled.flatten(1)));
  x = torch::relu(fc2(x));
  return {cls(x), reg(x).view({-1, num_classes_, 4})};
}

// ---------------------------------------------------------------------------

torch::Tensor roi_align(const torch::Tensor& feature, const std::vector<Box>& boxes, double spatial_scale, int bins,
                        int sampling_ratio) {
  const auto channels = feature.size(0);
  const int height = static_cast<int>(feature.size(1));
  const int width = static_cast<int>(feature.size(2));
  const auto n = static_cast<int64_t>(boxes.size());
  if (n == 0) return torch::zeros({0, channels, bins, bins}, feature.options());

  const int64_t samples = static_cast<int64_t>(bins) * sampling_ratio;
  const int64_t points = n * samples * samples;
  auto index = torch::zeros({4, points}, torch::kLong);
  auto weight = torch::zeros({4, points}, torch::kFloat64);
  auto idx = index.accessor<int64_t, 2>();
  auto wgt = weight.accessor<double, 2>();

  int64_t p = 0;
  for (const auto& box : boxes) {
    const double x1 = box.x_min * spatial_scale - 0.5;
    const double y1 = box.y_min * spatial_scale - 0.5;
    const double bin_w = (box.x_max - box.x_min) * spatial_scale / bins;
    const double bin_h = (box.y_max - box.y_min) * spatial_scale / bins;
    for (int64_t sy = 0; sy < samples; ++sy) {
      const double y_raw = y1 + (static_cast<double>(sy) + 0.5) * bin_h / sampling_ratio;
      for (int64_t sx = 0; sx < samples; ++sx, ++p) {
        const double x_raw = x1 + (static_cast<double>(sx) + 0.5) * bin_w / sampling_ratio;
        if (y_raw < -1.0 || y_raw > height || x_raw < -1.0 || x_raw > width) continue;
        double y = std::max(y_raw, 0.0);
        double x = std::max(x_raw, 0.0);
        int y_lo = static_cast<int>(y), x_lo = static_cast<int>(x);
        int y_hi, x_hi;
        if (y_lo >= height - 1) {
          y_lo = y_hi = height - 1;
          y = y_lo;
        } else {
          y_hi = y_lo + 1;
        }
        if (x_lo >= width - 1) {
          x_lo = x_hi = width - 1;
          x = x_lo;
        } else {
          x_hi = x_lo + 1;
        }
        const double ly = y - y_lo, lx = x - x_lo, hy = 1.0 - ly, hx = 1.0 - lx;
        idx[0][p] = static_cast<int64_t>(y_lo) * width + x_lo;
        idx[1][p] = static_cast<int64_t>(y_lo) * width + x_hi;
        idx[2][p] = static_cast<int64_t>(y_hi) * width + x_lo;
        idx[3][p] = static_cast<int64_t>(y_hi) * width + x_hi;
        wgt[0][p] = hy * hx;
        wgt[1][p] = hy * lx;
        wgt[2][p] = ly * hx;
        wgt[3][p] = ly * lx;
      }
    }
  }
  auto flat = feature.reshape({channels, static_cast<int64_t>(height) * width});
  auto gathered = flat.index_select(1, index.view(-1)).view({channels, 4, points});
  auto values = (gathered * weight.to(feature.dtype()).unsqueeze(0)).sum(1);  // (C, points)
  return values.view({channels, n, bins, sampling_ratio, bins, sampling_ratio})
      .mean({3, 5})
      .permute({1, 0, 2, 3})
      .contiguous();
}

int assign_level(const Box& box, double canonical_size, int canonical_level, int num_levels) {
  const double scale = std::sqrt(std::max(box.area(), 1e-12));
  const int level = static_cast<int>(std::floor(canonical_level + std::log2(scale / canonical_size) + 1e-6));
  return std::clamp(level, 0, num_levels - 1);
}

torch::Tensor roi_align_pyramid(const FeaturePyramid& fpn, const std::vector<std::vector<Box>>& proposals,
                                const DetectConfig& cfg) {
  const int levels = std::min<int>(cfg.roi_levels, static_cast<int>(fpn.size()));
  const auto channels = fpn[0].tensor.size(1);
  int64_t total = 0;
  for (const auto& p : proposals) total += static_cast<int64_t>(p.size());
  if (total == 0) return torch::zeros({0, channels, cfg.roi_bins, cfg.roi_bins}, fpn[0].tensor.options());

  std::vector<torch::Tensor> parts;
  std::vector<int64_t> order;
  int64_t offset = 0;
  for (std::size_t b = 0; b < proposals.size(); ++b) {
    std::vector<std::vector<Box>> by_level(static_cast<std::size_t>(levels));
    std::vector<std::vector<int64_t>> rows(static_cast<std::size_t>(levels));
    for (std::size_t i = 0; i < proposals[b].size(); ++i) {
      const int l = assign_level(proposals[b][i], cfg.roi_canonical_size, cfg.roi_canonical_level, levels);
      by_level[l].push_back(proposals[b][i]);
      rows[l].push_back(offset + static_cast<int64_t>(i));
    }
    for (int l = 0; l < levels; ++l) {
      if (by_level[l].empty()) continue;
      parts.push_back(roi_align(fpn[l].tensor[static_cast<int64_t>(b)], by_level[l], 1.0 / fpn[l].stride,
                                cfg.roi_bins, cfg.roi_sampling));
      order.insert(order.end(), rows[l].begin(), rows[l].end());
    }
    offset += static_cast<int64_t>(proposals[b].size());
  }
  auto pooled = torch::cat(parts, 0);
  // Scatter rows back into proposal order.
  std::vector<int64_t> inverse(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) inverse[static_cast<std::size_t>(order[i])] = static_cast<int64_t>(i);
  return pooled.index_select(0, torch::tensor(inverse, torch::kLong));
}

// ---------------------------------------------------------------------------

DetectionHead::DetectionHead(DetectConfig config, const std::vector<int>& backbone_channels)
    : config_(std::move(config)) {
  config_.validate();
  fpn = Fpn(backbone_channels, config_.fpn_channels);
  rpn = RpnHead(config_.fpn_channels, static_cast<int>(config_.anchor_ratios.size()));
  roi = RoiHead(config_.fpn_channels, config_.roi_bins, config_.roi_hidden, config_.num_classes);
}

DetectionHead::Features DetectionHead::run(const FeaturePyramid& backbone_features, int image_height,
                                           int image_width) {
  Features f;
  f.fpn = fpn->forward(backbone_features);
  f.rpn = rpn->forward(f.fpn);
  f.image_height = image_height;
  f.image_width = image_width;
  return f;
}

const AnchorSet& DetectionHead::anchors(const FeaturePyramid& fpn_maps) {
  std::vector<std::int64_t> key;
  std::vector<AnchorLevel> levels;
  for (const auto& m : fpn_maps.maps) {
    key.insert(key.end(), {m.tensor.size(2), m.tensor.size(3), m.stride});
    levels.push_back({static_cast<int>(m.tensor.size(2)), static_cast<int>(m.tensor.size(3)), m.stride});
  }
  auto it = anchor_cache_.find(key);
  if (it == anchor_cache_.end()) {
    it = anchor_cache_.emplace(key, generate_anchors(levels, config_.anchor_ratios, config_.anchor_scale)).first;
  }
  return it->second;
}

std::vector<Box> DetectionHead::proposals_for_image(const Features& features, int image) {
  const auto& anchor_set = anchors(features.fpn);
  auto obj = features.rpn.objectness[image].detach().to(torch::kFloat64).contiguous();
  auto del = features.rpn.deltas[image].detach().to(torch::kFloat64).contiguous();
  const auto n = obj.size(0);
  auto o = obj.accessor<double, 1>();
  auto d = del.accessor<double, 2>();

  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  const auto top = std::min<std::int64_t>(config_.pre_nms_top, n);
  std::partial_sort(order.begin(), order.begin() + top, order.end(), [&](std::int64_t a, std::int64_t b) {
    if (o[a] != o[b]) return o[a] > o[b];
    return a < b;
  });
  order.resize(static_cast<std::size_t>(top));

  std::vector<Detection> candidates;
  for (auto a : order) {
    const BoxDelta delta = denormalize_delta({d[a][0], d[a][1], d[a][2], d[a][3]}, config_.delta_std);
    BoxDelta safe = delta;
    const double max_log = std::log(1000.0 / 16.0);
    safe.dw = std::min(safe.dw, max_log);
    safe.dh = std::min(safe.dh, max_log);
    const Box box = clip_box(decode_delta(anchor_set.boxes[static_cast<std::size_t>(a)], safe), features.image_width,
                             features.image_height);
    if (box.width() < config_.min_proposal_size || box.height() < config_.min_proposal_size) continue;
    candidates.push_back({box, 0, 1.0 / (1.0 + std::exp(-o[a]))});
  }
  auto kept = nms(std::move(candidates), config_.proposal_nms_iou);
  if (static_cast<int>(kept.size()) > config_.post_nms_top) kept.resize(static_cast<std::size_t>(config_.post_nms_top));
  std::vector<Box> boxes;
  boxes.reserve(kept.size());
  for (const auto& k : kept) boxes.push_back(k.box);
  return boxes;
}

std::vector<std::vector<Box>> DetectionHead::proposals(const Features& features) {
  std::vector<std::vector<Box>> out;
  for (int b = 0; b < features.rpn.objectness.size(0); ++b) out.push_back(proposals_for_image(features, b));
  return out;
}

DetectionPlan DetectionHead::plan(const Features& features, const std::vector<GroundTruth>& targets,
                                  std::uint64_t seed) {
  const auto& anchor_set = anchors(features.fpn);
  const auto batch = features.rpn.objectness.size(0);
  if (static_cast<int64_t>(targets.size()) != batch) throw ConfigError("detection plan: one target per image required");
  DetectionPlan plan;
  for (int b = 0; b < batch; ++b) {
    const auto& gt = targets[static_cast<std::size_t>(b)];
    ImagePlan ip;

    // RPN anchors.
    const auto match = match_anchors(anchor_set.boxes, gt.boxes, config_.rpn_pos_iou, config_.rpn_neg_iou);
    std::vector<std::int64_t> pos, neg;
    for (std::size_t a = 0; a < match.labels.size(); ++a) {
      if (match.labels[a] == MatchLabel::positive) pos.push_back(static_cast<std::int64_t>(a));
      if (match.labels[a] == MatchLabel::negative) neg.push_back(static_cast<std::int64_t>(a));
    }
    deterministic_shuffle(pos, mix_seed(seed, static_cast<std::uint64_t>(b), 1));
    deterministic_shuffle(neg, mix_seed(seed, static_cast<std::uint64_t>(b), 2));
    const auto max_pos = static_cast<std::size_t>(config_.rpn_batch_per_image * config_.rpn_pos_fraction);
    pos.resize(std::min(pos.size(), max_pos));
    neg.resize(std::min(neg.size(), static_cast<std::size_t>(config_.rpn_batch_per_image) - pos.size()));
    for (auto a : pos) {
      ip.rpn_sampled.push_back(a);
      ip.rpn_labels.push_back(1.0f);
      ip.rpn_positive.push_back(a);
      const auto& g = gt.boxes[static_cast<std::size_t>(match.gt_index[static_cast<std::size_t>(a)])];
      ip.rpn_targets.push_back(
          normalize_delta(encode_delta(anchor_set.boxes[static_cast<std::size_t>(a)], g), config_.delta_std).as_array());
    }
    for (auto a : neg) {
      ip.rpn_sampled.push_back(a);
      ip.rpn_labels.push_back(0.0f);
    }

    // RoIs: proposals plus ground truth.
    auto candidates = proposals_for_image(features, b);
    candidates.insert(candidates.end(), gt.boxes.begin(), gt.boxes.end());
    std::vector<std::int64_t> fg, bg;
    std::vector<int> best_gt(candidates.size(), -1);
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      double best = 0.0;
      for (std::size_t g = 0; g < gt.boxes.size(); ++g) {
        const double v = iou(candidates[i], gt.boxes[g]);
        if (v > best) {
          best = v;
          best_gt[i] = static_cast<int>(g);
        }
      }
      if (best >= config_.roi_fg_iou) {
        fg.push_back(static_cast<std::int64_t>(i));
      } else {
        bg.push_back(static_cast<std::int64_t>(i));
      }
    }
    deterministic_shuffle(fg, mix_seed(seed, static_cast<std::uint64_t>(b), 3));
    deterministic_shuffle(bg, mix_seed(seed, static_cast<std::uint64_t>(b), 4));
    const auto max_fg = static_cast<std::size_t>(config_.roi_batch_per_image * config_.roi_fg_fraction);
    fg.resize(std::min(fg.size(), max_fg));
    bg.resize(std::min(bg.size(), static_cast<std::size_t>(config_.roi_batch_per_image) - fg.size()));
    for (auto i : fg) {
      const auto& roi_box = candidates[static_cast<std::size_t>(i)];
      const int g = best_gt[static_cast<std::size_t>(i)];
      ip.rois.push_back(roi_box);
      ip.roi_labels.push_back(gt.labels[static_cast<std::size_t>(g)]);
      ip.roi_targets.push_back(
          normalize_delta(encode_delta(roi_box, gt.boxes[static_cast<std::size_t>(g)]), config_.delta_std).as_array());
    }
    for (auto i : bg) {
      ip.rois.push_back(candidates[static_cast<std::size_t>(i)]);
      ip.roi_labels.push_back(config_.num_classes);
      ip.roi_targets.push_back({0.0, 0.0, 0.0, 0.0});
    }
    plan.images.push_back(std::move(ip));
  }
  return plan;
}

namespace {

torch::Tensor to_tensor(const std::vector<std::array<double, 4>>& rows, const torch::TensorOptions& options) {
  auto t = torch::empty({static_cast<int64_t>(rows.size()), 4}, torch::kFloat64);
  auto a = t.accessor<double, 2>();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (int k = 0; k < 4; ++k) a[static_cast<int64_t>(i)][k] = rows[i][static_cast<std::size_t>(k)];
  }
  return t.to(options);
}

}  // namespace

DetectionLoss DetectionHead::loss(const Features& features, const DetectionPlan& plan) {
  const auto options = features.rpn.objectness.options();
  std::vector<torch::Tensor> logits, labels, pos_pred, pos_target;
  std::vector<std::vector<Box>> rois;
  std::vector<std::int64_t> roi_labels;
  std::vector<std::array<double, 4>> roi_targets;
  for (std::size_t b = 0; b < plan.images.size(); ++b) {
    const auto& ip = plan.images[b];
    const auto bi = static_cast<int64_t>(b);
    logits.push_back(features.rpn.objectness[bi].index_select(0, torch::tensor(ip.rpn_sampled, torch::kLong)));
    labels.push_back(torch::tensor(ip.rpn_labels, torch::kFloat32).to(options));
    pos_pred.push_back(features.rpn.deltas[bi].index_select(0, torch::tensor(ip.rpn_positive, torch::kLong)));
    pos_target.push_back(to_tensor(ip.rpn_targets, options));
    rois.push_back(ip.rois);
    roi_labels.insert(roi_labels.end(), ip.roi_labels.begin(), ip.roi_labels.end());
    roi_targets.insert(roi_targets.end(), ip.roi_targets.begin(), ip.roi_targets.end());
  }
  DetectionLoss out;
  std::tie(out.rpn_cls, out.rpn_reg) = rpn_loss(torch::cat(logits), torch::cat(labels), torch::cat(pos_pred),
                                                torch::cat(pos_target), config_.smooth_l1_beta);
  auto pooled = roi_align_pyramid(features.fpn, rois, config_);
  auto head = roi->forward(pooled);
  std::tie(out.roi_cls, out.roi_reg) = roi_loss(head.class_logits, torch::tensor(roi_labels, torch::kLong), head.deltas,
                                                to_tensor(roi_targets, options), config_.smooth_l1_beta);
  out.total = out.rpn_cls + out.rpn_reg + out.roi_cls + out.roi_reg;
  return out;
}

std::vector<std::vector<Detection>> DetectionHead::detect(const Features& features, double score_threshold,
                                                          double nms_iou, int max_detections) {
  const auto props = proposals(features);
  std::vector<std::vector<Detection>> results(props.size());
  auto pooled = roi_align_pyramid(features.fpn, props, config_);
  if (pooled.size(0) == 0) return results;
  auto head = roi->forward(pooled);
  auto probs = torch::softmax(head.class_logits.to(torch::kFloat64), -1).contiguous();
  auto deltas = head.deltas.to(torch::kFloat64).contiguous();
  auto pa = probs.accessor<double, 2>();
  auto da = deltas.accessor<double, 3>();
  int64_t row = 0;
  for (std::size_t b = 0; b < props.size(); ++b) {
    std::vector<Detection> candidates;
    for (const auto& proposal : props[b]) {
      for (int c = 0; c < config_.num_classes; ++c) {
        const double score = pa[row][c];
        if (!(score > score_threshold)) continue;
        BoxDelta delta = denormalize_delta({da[row][c][0], da[row][c][1], da[row][c][2], da[row][c][3]},
                                           config_.delta_std);
        delta.dw = std::min(delta.dw, std::log(1000.0 / 16.0));
        delta.dh = std::min(delta.dh, std::log(1000.0 / 16.0));
        const Box box = clip_box(decode_delta(proposal, delta), features.image_width, features.image_height);
        if (box.width() < config_.min_proposal_size || box.height() < config_.min_proposal_size) continue;
        candidates.push_back({box, c, score});
      }
      ++row;
    }
    auto kept = nms(std::move(candidates), nms_iou);
    if (static_cast<int>(kept.size()) > max_detections) kept.resize(static_cast<std::size_t>(max_detections));
    results[b] = std::move(kept);
  }
  return results;
}

}  // namespace capdet::detect
