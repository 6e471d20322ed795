#include "capdet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "capdet/error.hpp"

namespace capdet::trainer {

FreezePlan parse_freeze_plan(const std::string& name) {
  if (name == "none") return FreezePlan::none;
  if (name == "decoder_only") return FreezePlan::decoder_only;
  if (name == "backbone_and_decoder") return FreezePlan::backbone_and_decoder;
  if (name == "detection_only") return FreezePlan::detection_only;
  throw ConfigError("unknown freeze plan '" + name +
                    "' (expected none, decoder_only, backbone_and_decoder or detection_only)");
}

std::string freeze_plan_name(FreezePlan plan) {
  switch (plan) {
    case FreezePlan::none: return "none";
    case FreezePlan::decoder_only: return "decoder_only";
    case FreezePlan::backbone_and_decoder: return "backbone_and_decoder";
    case FreezePlan::detection_only: return "detection_only";
  }
  return "none";
}

void TrainConfig::validate() const {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("train: lambda must be a finite value >= 0");
  if (steps < 1) throw ConfigError("train: steps must be >= 1");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (learning_rate < 0.0 || weight_decay < 0.0) throw ConfigError("train: learning rate and weight decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) || epsilon <= 0.0) {
    throw ConfigError("train: invalid Adam betas or epsilon");
  }
  if (clip_norm <= 0.0) throw ConfigError("train: clip_norm must be positive");
  if (checkpoint_every < 1) throw ConfigError("train: checkpoint_every must be >= 1");
  if (caption_reference < -1 || caption_reference >= scenegen::kCaptionsPerRecord) {
    throw ConfigError("train: caption_reference must be -1 or in [0, 5)");
  }
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lambda", c.lambda},
       {"learning_rate", c.learning_rate},
       {"weight_decay", c.weight_decay},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"epsilon", c.epsilon},
       {"clip_norm", c.clip_norm},
       {"batch_size", c.batch_size},
       {"steps", c.steps},
       {"seed", c.seed},
       {"freeze_plan", freeze_plan_name(c.freeze_plan)},
       {"checkpoint_every", c.checkpoint_every},
       {"caption_reference", c.caption_reference}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.lambda = j.value("lambda", c.lambda);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.epsilon = j.value("epsilon", c.epsilon);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.steps = j.value("steps", c.steps);
  c.seed = j.value("seed", c.seed);
  if (j.contains("freeze_plan")) c.freeze_plan = parse_freeze_plan(j.at("freeze_plan").get<std::string>());
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.caption_reference = j.value("caption_reference", c.caption_reference);
}

// ---------------------------------------------------------------------------

JointLoss joint_loss(const detect::DetectionLoss& detection, const torch::Tensor& caption, double lambda) {
  if (!(lambda >= 0.0)) throw ConfigError("joint_loss: lambda must be >= 0");
  JointLoss out;
  out.detection = detection;
  out.caption = caption;
  out.lambda = lambda;
  out.total = caption.defined() ? detection.total + lambda * caption : detection.total;
  return out;
}

nlohmann::ordered_json LossBreakdown::to_json(std::int64_t step) const {
  nlohmann::ordered_json j = {{"step", step},         {"rpn_cls", rpn_cls}, {"rpn_reg", rpn_reg}, {"roi_cls", roi_cls},
                      {"roi_reg", roi_reg},   {"caption", nullptr}, {"total", total},     {"lambda", lambda}};
  if (caption) j["caption"] = *caption;
  return j;
}

LossBreakdown LossBreakdown::from_json(const nlohmann::json& j) {
  LossBreakdown b;
  b.rpn_cls = j.at("rpn_cls").get<double>();
  b.rpn_reg = j.at("rpn_reg").get<double>();
  b.roi_cls = j.at("roi_cls").get<double>();
  b.roi_reg = j.at("roi_reg").get<double>();
  if (!j.at("caption").is_null()) b.caption = j.at("caption").get<double>();
  b.total = j.at("total").get<double>();
  b.lambda = j.at("lambda").get<double>();
  return b;
}

LossBreakdown breakdown(const JointLoss& loss) {
  LossBreakdown b;
  b.rpn_cls = loss.detection.rpn_cls.item<double>();
  b.rpn_reg = loss.detection.rpn_reg.item<double>();
  b.roi_cls = loss.detection.roi_cls.item<double>();
  b.roi_reg = loss.detection.roi_reg.item<double>();
  if (loss.caption.defined()) b.caption = loss.caption.item<double>();
  b.total = loss.total.item<double>();
  b.lambda = loss.lambda;
  return b;
}

// ---------------------------------------------------------------------------

TrainableMask apply_freeze_plan(MultitaskModelImpl& model, FreezePlan plan) {
  TrainableMask mask;
  switch (plan) {
    case FreezePlan::none: break;
    case FreezePlan::decoder_only: mask.frozen = {Partition::backbone, Partition::detection}; break;
    case FreezePlan::backbone_and_decoder: mask.frozen = {Partition::detection}; break;
    case FreezePlan::detection_only: mask.frozen = {Partition::decoder}; break;
  }
  for (auto& p : model.named_parameters()) {
    const auto part = partition_of(p.key());
    const bool trainable = std::find(mask.frozen.begin(), mask.frozen.end(), part) == mask.frozen.end();
    p.value().set_requires_grad(trainable);
    mask.trainable[p.key()] = trainable;
  }
  return mask;
}

AdamW::AdamW(std::vector<std::pair<std::string, torch::Tensor>> parameters, const TrainConfig& config)
    : lr_(config.learning_rate),
      weight_decay_(config.weight_decay),
      beta1_(config.beta1),
      beta2_(config.beta2),
      epsilon_(config.epsilon) {
  for (auto& [name, p] : parameters) {
    slots_.push_back({name, p, torch::zeros_like(p), torch::zeros_like(p)});
  }
}

void AdamW::zero_grad() {
  for (auto& s : slots_) {
    if (s.param.grad().defined()) s.param.mutable_grad() = torch::Tensor();
  }
}

void AdamW::step() {
  torch::NoGradGuard no_grad;
  ++steps_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
  for (auto& s : slots_) {
    if (!s.param.requires_grad() || !s.param.grad().defined()) continue;
    const auto& g = s.param.grad();
    if (s.param.dim() >= 2 && weight_decay_ > 0.0) s.param.mul_(1.0 - lr_ * weight_decay_);
    s.exp_avg.mul_(beta1_).add_(g, 1.0 - beta1_);
    s.exp_avg_sq.mul_(beta2_).addcmul_(g, g, 1.0 - beta2_);
    auto denom = (s.exp_avg_sq / bc2).sqrt_().add_(epsilon_);
    s.param.addcdiv_(s.exp_avg, denom, -lr_ / bc1);
  }
}

void AdamW::save_state(std::vector<std::pair<std::string, torch::Tensor>>& out) const {
  for (const auto& s : slots_) {
    out.emplace_back("optim.exp_avg." + s.name, s.exp_avg);
    out.emplace_back("optim.exp_avg_sq." + s.name, s.exp_avg_sq);
  }
}

void AdamW::load_state(const Checkpoint& checkpoint, std::int64_t steps_taken) {
  torch::NoGradGuard no_grad;
  for (auto& s : slots_) {
    const auto* m = checkpoint.find("optim.exp_avg." + s.name);
    const auto* v = checkpoint.find("optim.exp_avg_sq." + s.name);
    if (m == nullptr || v == nullptr) throw DataError("checkpoint lacks optimizer state for " + s.name);
    s.exp_avg.copy_(*m);
    s.exp_avg_sq.copy_(*v);
  }
  steps_ = steps_taken;
}

// ---------------------------------------------------------------------------

namespace {

TrainingSample make_sample(const std::string& id, const Image& image, const std::vector<Box>& boxes,
                           const std::vector<int>& labels, const std::vector<std::string>& captions,
                           const scenegen::Vocabulary& vocab, int max_caption_len) {
  TrainingSample s;
  s.id = id;
  s.image = image_to_tensor(image).squeeze(0);
  s.target.boxes = boxes;
  s.target.labels = labels;
  s.captions = captions;
  for (const auto& c : captions) {
    auto ids = scenegen::tokenize(c, vocab);  // ends with <end>
    if (static_cast<int>(ids.size()) > max_caption_len) {
      throw DataError("record " + id + ": caption '" + c + "' exceeds " + std::to_string(max_caption_len) +
                      " tokens including <end>");
    }
    s.caption_ids.push_back(std::move(ids));
  }
  return s;
}

void check_sizes(const TrainingData& data) {
  if (data.samples.empty()) throw DataError("training data is empty");
  const auto& first = data.samples.front().image;
  for (const auto& s : data.samples) {
    if (s.image.sizes() != first.sizes()) {
      throw DataError("record " + s.id + ": image size differs from the first record; all images must share a size");
    }
  }
}

}  // namespace

TrainingData load_training_data(const std::filesystem::path& manifest, const scenegen::Vocabulary& vocab,
                                int max_caption_len) {
  const auto entries = scenegen::read_manifest(manifest);
  if (entries.empty()) throw DataError("manifest " + manifest.string() + " has no records");
  TrainingData data;
  data.vocab = vocab;
  for (const auto& e : entries) {
    auto path = std::filesystem::path(e.image);
    if (path.is_relative()) path = manifest.parent_path() / path;
    if (!std::filesystem::exists(path)) throw DataError("record " + e.id + ": image file not found: " + path.string());
    data.samples.push_back(make_sample(e.id, read_ppm(path), e.boxes, e.labels, e.captions, vocab, max_caption_len));
  }
  check_sizes(data);
  return data;
}

TrainingData training_data_from_records(const std::vector<scenegen::SceneRecord>& records,
                                        const scenegen::Vocabulary& vocab, int max_caption_len) {
  TrainingData data;
  data.vocab = vocab;
  for (const auto& r : records) {
    data.samples.push_back(make_sample(r.id, r.image, r.boxes, r.labels, r.captions, vocab, max_caption_len));
  }
  check_sizes(data);
  return data;
}

Batch make_batch(const TrainingData& data, const TrainConfig& config, std::int64_t step) {
  const auto n = static_cast<std::int64_t>(data.samples.size());
  if (n == 0) throw DataError("training data is empty");
  Batch batch;
  std::vector<torch::Tensor> images;
  std::vector<std::vector<std::int64_t>> captions;
  std::int64_t cached_epoch = -1;
  std::vector<std::int64_t> perm;
  for (int j = 0; j < config.batch_size; ++j) {
    const std::int64_t k = step * config.batch_size + j;
    const std::int64_t epoch = k / n;
    if (epoch != cached_epoch) {
      perm.resize(static_cast<std::size_t>(n));
      std::iota(perm.begin(), perm.end(), 0);
      detect::deterministic_shuffle(perm, detect::mix_seed(config.seed, static_cast<std::uint64_t>(epoch), 0xE90C));
      cached_epoch = epoch;
    }
    const auto index = static_cast<std::size_t>(perm[static_cast<std::size_t>(k % n)]);
    const auto& sample = data.samples[index];
    batch.indices.push_back(index);
    images.push_back(sample.image);
    batch.targets.push_back(sample.target);
    int ref = config.caption_reference;
    if (ref < 0) {
      std::mt19937_64 engine(detect::mix_seed(config.seed, static_cast<std::uint64_t>(step), 0xCA9 + j));
      ref = static_cast<int>(engine() % sample.caption_ids.size());
    }
    captions.push_back(sample.caption_ids[static_cast<std::size_t>(ref)]);
  }
  batch.images = torch::stack(images);
  batch.captions = caption::teacher_forcing(captions, scenegen::Vocabulary::kStart, scenegen::Vocabulary::kPad);
  return batch;
}

JointLoss compute_loss(MultitaskModelImpl& model, const Batch& batch, const TrainConfig& config, std::int64_t step) {
  const auto dtype = model.backbone->patch_embed->proj->weight.scalar_type();
  auto images = batch.images.to(dtype);
  const int h = static_cast<int>(images.size(2));
  const int w = static_cast<int>(images.size(3));
  auto pyramid = model.features(images);

  auto det_features = model.detection_features(pyramid, h, w);
  auto& head = model.detection();
  const auto plan = head.plan(det_features, batch.targets, detect::mix_seed(config.seed, static_cast<std::uint64_t>(step), 0xDE7));
  auto detection = head.loss(det_features, plan);

  torch::Tensor caption;
  double lambda = config.lambda;
  if (config.freeze_plan != FreezePlan::detection_only) {
    auto logits = model.decoder->forward(pyramid.last().tensor, batch.captions.input);
    caption = caption::caption_loss(logits, batch.captions.target, scenegen::Vocabulary::kPad);
  } else {
    lambda = 0.0;
  }
  auto loss = joint_loss(detection, caption, lambda);

  const std::pair<const char*, const torch::Tensor*> terms[] = {
      {"rpn_cls", &loss.detection.rpn_cls}, {"rpn_reg", &loss.detection.rpn_reg},
      {"roi_cls", &loss.detection.roi_cls}, {"roi_reg", &loss.detection.roi_reg},
      {"caption", &loss.caption},           {"total", &loss.total}};
  for (const auto& [name, t] : terms) {
    if (t->defined() && !std::isfinite(t->item<double>())) {
      throw NumericError("non-finite loss term '" + std::string(name) + "' at step " + std::to_string(step) +
                         " (value " + std::to_string(t->item<double>()) + ")");
    }
  }
  return loss;
}

LossBreakdown train_step(MultitaskModelImpl& model, AdamW& optimizer, const Batch& batch, const TrainConfig& config,
                         std::int64_t step) {
  model.train();
  optimizer.zero_grad();
  auto loss = compute_loss(model, batch, config, step);
  auto result = breakdown(loss);
  loss.total.backward();

  std::vector<torch::Tensor> grads;
  for (auto& p : model.parameters()) {
    if (p.requires_grad() && p.grad().defined()) grads.push_back(p);
  }
  if (!grads.empty()) torch::nn::utils::clip_grad_norm_(grads, config.clip_norm);
  optimizer.step();
  return result;
}

// ---------------------------------------------------------------------------

void save_training_checkpoint(const std::filesystem::path& path, MultitaskModelImpl& model, const AdamW* optimizer,
                              const ModelConfig& model_config, const TrainConfig& config,
                              const scenegen::Vocabulary& vocab, std::int64_t step) {
  Checkpoint ck;
  ck.tensors = module_tensors(model);
  if (optimizer != nullptr) optimizer->save_state(ck.tensors);
  ck.meta = {{"step", step},
             {"model", model_config},
             {"train", config},
             {"vocab", vocab.tokens()},
             {"optimizer_steps", optimizer != nullptr ? optimizer->steps_taken() : 0}};
  save_checkpoint(path, ck);
}

LoadedModel load_model(const std::filesystem::path& checkpoint) {
  const auto ck = load_checkpoint(checkpoint);
  LoadedModel out;
  try {
    ck.meta.at("model").get_to(out.model_config);
    ck.meta.at("train").get_to(out.train_config);
    out.vocab = scenegen::Vocabulary::from_tokens(ck.meta.at("vocab").get<std::vector<std::string>>());
    out.step = ck.meta.at("step").get<std::int64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint " + checkpoint.string() + " has invalid metadata: " + e.what());
  }
  out.model = MultitaskModel(out.model_config);
  load_into(*out.model, ck);
  out.model->eval();
  return out;
}

namespace {

// Keeps the first `keep` lines of the metrics log (used on resume).
void truncate_log(const std::filesystem::path& path, std::int64_t keep) {
  std::vector<std::string> lines;
  {
    std::ifstream in(path);
    std::string line;
    while (static_cast<std::int64_t>(lines.size()) < keep && std::getline(in, line)) lines.push_back(line);
  }
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : lines) out << l << '\n';
}

}  // namespace

TrainResult train(const ModelConfig& model_config, const TrainConfig& config, const TrainingData& data,
                  const std::filesystem::path& out_dir, const TrainOptions& options) {
  config.validate();
  model_config.validate();
  if (data.samples.empty()) throw DataError("training data is empty");
  if (data.vocab.size() != model_config.decoder.vocab_size) {
    throw ConfigError("vocabulary has " + std::to_string(data.vocab.size()) + " tokens but the decoder expects " +
                      std::to_string(model_config.decoder.vocab_size));
  }
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir)) {
    throw DataError("cannot create output directory " + out_dir.string());
  }
  const auto ckpt_path = out_dir / "checkpoint.bin";
  const auto log_path = out_dir / "metrics.jsonl";

  auto model = make_model(model_config, config.seed);
  const auto mask = apply_freeze_plan(*model, config.freeze_plan);
  if (options.log && !mask.frozen.empty()) {
    std::string names;
    for (auto p : mask.frozen) names += (names.empty() ? "" : ", ") + partition_name(p);
    options.log("freeze plan " + freeze_plan_name(config.freeze_plan) + ": frozen partitions " + names);
  }
  std::vector<std::pair<std::string, torch::Tensor>> named;
  for (auto& p : model->named_parameters()) named.emplace_back(p.key(), p.value());
  AdamW optimizer(named, config);

  std::int64_t start = 0;
  if (options.resume && std::filesystem::exists(ckpt_path)) {
    const auto ck = load_checkpoint(ckpt_path);
    load_into(*model, ck);
    start = ck.meta.at("step").get<std::int64_t>();
    optimizer.load_state(ck, ck.meta.value("optimizer_steps", start));
    truncate_log(log_path, start);
    if (options.log) options.log("resumed from step " + std::to_string(start));
  }

  std::ofstream log(log_path, start > 0 ? std::ios::app : std::ios::trunc);
  if (!log) throw DataError("cannot write metrics log " + log_path.string());

  TrainResult result;
  for (std::int64_t step = start; step < config.steps; ++step) {
    const auto batch = make_batch(data, config, step);
    const auto b = train_step(*model, optimizer, batch, config, step);
    log << b.to_json(step + 1).dump() << '\n';
    log.flush();
    result.losses.push_back(b);
    if (options.on_step) options.on_step(step + 1, b);
    if ((step + 1) % config.checkpoint_every == 0 && step + 1 < config.steps) {
      save_training_checkpoint(ckpt_path, *model, &optimizer, model_config, config, data.vocab, step + 1);
    }
  }
  save_training_checkpoint(ckpt_path, *model, &optimizer, model_config, config, data.vocab,
                           std::max(start, config.steps));
  result.steps_completed = std::max(start, config.steps);
  result.checkpoint = ckpt_path;
  return result;
}

}  // namespace capdet::trainer
