// capdet: dataset generation, training, evaluation, inference, lambda sweeps
// and report collation. Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "capdet/checkpoint.hpp"
#include "capdet/error.hpp"
#include "capdet/evaluate.hpp"
#include "capdet/model.hpp"
#include "capdet/overlay.hpp"
#include "capdet/scenegen.hpp"
#include "capdet/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace capdet;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

void note(const std::string& message) { std::cerr << "capdet: " << message << '\n'; }

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
}

void write_json_file(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

Image tensor_to_image(const torch::Tensor& chw) {
  Image img(static_cast<int>(chw.size(1)), static_cast<int>(chw.size(2)));
  auto hwc = chw.to(torch::kFloat32).permute({1, 2, 0}).contiguous();
  std::copy(hwc.data_ptr<float>(), hwc.data_ptr<float>() + hwc.numel(), img.pixels.begin());
  return img;
}

// Flags that were given on the command line override the resolved config.
struct TrainFlags {
  std::string config;
  std::string data;
  std::string manifest;
  std::string val_manifest;
  std::string vocab;
  std::string out;
  std::string preset = "small";
  std::optional<double> lambda;
  std::optional<std::string> freeze_plan;
  std::optional<std::int64_t> steps;
  std::optional<std::uint64_t> seed;
  std::optional<int> batch_size;
  std::optional<double> learning_rate;
  std::optional<std::int64_t> checkpoint_every;
  std::optional<int> caption_reference;
  bool resume = false;
  bool no_eval = false;
};

void add_train_flags(CLI::App* cmd, TrainFlags& f, bool with_out) {
  cmd->add_option("--config", f.config, "JSON config file (flags take precedence)");
  cmd->add_option("--data", f.data, "dataset directory written by gen-data");
  cmd->add_option("--manifest", f.manifest, "training manifest (overrides --data)");
  cmd->add_option("--val-manifest", f.val_manifest, "validation manifest (overrides --data)");
  cmd->add_option("--vocab", f.vocab, "vocabulary file (overrides --data)");
  if (with_out) cmd->add_option("--out", f.out, "run output directory")->required();
  cmd->add_option("--preset", f.preset, "small (lambda 0.1) or large (lambda 0.2)")
      ->check(CLI::IsMember({"small", "large"}));
  cmd->add_option("--lambda", f.lambda, "caption loss weight");
  cmd->add_option("--freeze-plan", f.freeze_plan, "none|decoder_only|backbone_and_decoder|detection_only");
  cmd->add_option("--steps", f.steps, "optimizer steps");
  cmd->add_option("--seed", f.seed, "random seed");
  cmd->add_option("--batch-size", f.batch_size, "images per step");
  cmd->add_option("--lr", f.learning_rate, "learning rate");
  cmd->add_option("--checkpoint-every", f.checkpoint_every, "steps between checkpoints");
  cmd->add_option("--caption-reference", f.caption_reference, "fixed reference caption index, -1 draws per step");
}

// Built-in defaults < config file < flags.
json resolve_train_config(const TrainFlags& f) {
  trainer::TrainConfig train;
  if (f.preset == "large") train.lambda = 0.2;
  json j = {{"model", ModelConfig{}}, {"train", train}, {"data", {{"manifest", ""}, {"val_manifest", ""}, {"vocab", ""}}}};
  if (!f.config.empty()) j.merge_patch(read_json_file(f.config));

  auto& data = j["data"];
  if (!f.data.empty()) {
    const fs::path d = f.data;
    data["manifest"] = fs::absolute(d / "train" / "manifest.jsonl").string();
    data["val_manifest"] = fs::absolute(d / "val" / "manifest.jsonl").string();
    data["vocab"] = fs::absolute(d / "vocab.txt").string();
  }
  if (!f.manifest.empty()) data["manifest"] = fs::absolute(f.manifest).string();
  if (!f.val_manifest.empty()) data["val_manifest"] = fs::absolute(f.val_manifest).string();
  if (!f.vocab.empty()) data["vocab"] = fs::absolute(f.vocab).string();

  auto& t = j["train"];
  if (f.lambda) t["lambda"] = *f.lambda;
  if (f.freeze_plan) t["freeze_plan"] = *f.freeze_plan;
  if (f.steps) t["steps"] = *f.steps;
  if (f.seed) t["seed"] = *f.seed;
  if (f.batch_size) t["batch_size"] = *f.batch_size;
  if (f.learning_rate) t["learning_rate"] = *f.learning_rate;
  if (f.checkpoint_every) t["checkpoint_every"] = *f.checkpoint_every;
  if (f.caption_reference) t["caption_reference"] = *f.caption_reference;
  return j;
}

struct ResolvedRun {
  ModelConfig model;
  trainer::TrainConfig train;
  trainer::TrainingData train_data;
  std::optional<trainer::TrainingData> val_data;
  json echo;
};

ResolvedRun load_run(json j, bool load_val) {
  ResolvedRun run;
  try {
    j.at("model").get_to(run.model);
    j.at("train").get_to(run.train);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid configuration: ") + e.what());
  }
  run.train.validate();
  const auto& data = j.at("data");
  const std::string manifest = data.value("manifest", "");
  if (manifest.empty()) throw ConfigError("no training manifest: pass --data or --manifest");
  const std::string vocab_path = data.value("vocab", "");
  const auto vocab = vocab_path.empty() ? scenegen::Vocabulary::scene_default() : scenegen::Vocabulary::load(vocab_path);

  run.train_data = trainer::load_training_data(manifest, vocab, run.model.decoder.max_len);
  const int image_size = static_cast<int>(run.train_data.samples.front().image.size(1));
  if (run.model.backbone.image_size != image_size) {
    note("backbone image_size set to the dataset's " + std::to_string(image_size));
    run.model.backbone.image_size = image_size;
  }
  if (run.model.decoder.vocab_size != vocab.size()) {
    note("decoder vocab_size set to the vocabulary's " + std::to_string(vocab.size()));
    run.model.decoder.vocab_size = static_cast<int>(vocab.size());
  }
  run.model.validate();
  const std::string val = data.value("val_manifest", "");
  if (load_val && !val.empty() && fs::exists(val)) run.val_data = trainer::load_training_data(val, vocab, run.model.decoder.max_len);

  j["model"] = run.model;
  j["train"] = run.train;
  run.echo = j;
  return run;
}

void write_overlays(const fs::path& dir, const std::vector<metrics::ImagePrediction>& predictions,
                    const trainer::TrainingData& data, const std::vector<std::string>& names, std::size_t limit) {
  fs::create_directories(dir);
  for (std::size_t i = 0; i < std::min(limit, predictions.size()); ++i) {
    const auto& p = predictions[i];
    const auto dets = p.detections ? *p.detections : std::vector<Detection>{};
    write_ppm(dir / (p.id + ".ppm"), render_overlay(tensor_to_image(data.samples[i].image), dets, names, p.caption_text));
  }
}

void print_report(const metrics::EvalReport& r) {
  const auto values = r.values();
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::cout << metrics::EvalReport::columns()[i] << (i + 1 < values.size() ? "," : "\n");
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::cout << metrics::format_metric(values[i]) << (i + 1 < values.size() ? "," : "\n");
  }
}

void write_eval_outputs(const fs::path& out, const metrics::EvalResult& result, const trainer::TrainingData& data,
                        const ModelConfig& model, bool dump_matches) {
  fs::create_directories(out);
  metrics::write_report_csv(out / "report.csv", result.report);
  metrics::write_report_json(out / "report.json", result.report);
  const auto names = metrics::default_class_names(model.detect.num_classes);
  metrics::write_predictions(out / "captions.jsonl", out / "detections.jsonl", result.predictions, names);
  if (dump_matches) metrics::write_matches(out / "matches.jsonl", result.matches, result.predictions);
  write_overlays(out / "overlays", result.predictions, data, names, 16);
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const fs::path& out, int num_train, int num_val, std::uint64_t seed, int image_size) {
  scenegen::SceneConfig cfg;
  cfg.image_size = image_size;
  cfg.validate();
  if (num_train < 1 || num_val < 0) throw ConfigError("--num-train must be >= 1 and --num-val >= 0");
  const auto train = scenegen::generate_dataset(seed << 32, num_train, cfg, "train_");
  const auto val = scenegen::generate_dataset((seed << 32) + (1ULL << 31), num_val, cfg, "val_");
  scenegen::write_dataset(train, out / "train");
  scenegen::write_dataset(val, out / "val");
  scenegen::Vocabulary::scene_default().save(out / "vocab.txt");
  std::cout << "train: " << train.size() << " records\nval: " << val.size() << " records\n";
  return 0;
}

int cmd_train(const TrainFlags& flags) {
  auto run = load_run(resolve_train_config(flags), !flags.no_eval);
  const fs::path out = flags.out;
  fs::create_directories(out);
  write_json_file(out / "config.json", run.echo);

  trainer::TrainOptions options;
  options.resume = flags.resume;
  options.log = note;
  const auto every = std::max<std::int64_t>(1, run.train.steps / 20);
  options.on_step = [&](std::int64_t step, const trainer::LossBreakdown& b) {
    if (step % every == 0 || step == run.train.steps) {
      std::ostringstream msg;
      msg << "step " << step << " total " << b.total << " det " << b.detection_total();
      if (b.caption) msg << " caption " << *b.caption;
      note(msg.str());
    }
  };
  const auto result = trainer::train(run.model, run.train, run.train_data, out, options);
  std::cout << "checkpoint: " << result.checkpoint.string() << '\n';

  if (run.val_data && !flags.no_eval) {
    auto loaded = trainer::load_model(result.checkpoint);
    const auto eval = metrics::evaluate(*loaded.model, *run.val_data, 5);
    write_eval_outputs(out, eval, *run.val_data, run.model, false);
    print_report(eval.report);
  }
  return 0;
}

int cmd_eval(const fs::path& checkpoint, const fs::path& manifest, int beam, std::string out, bool dump_matches) {
  auto loaded = trainer::load_model(checkpoint);
  const auto data = trainer::load_training_data(manifest, loaded.vocab, loaded.model_config.decoder.max_len);
  const auto result = metrics::evaluate(*loaded.model, data, beam);
  const fs::path dir = out.empty() ? checkpoint.parent_path() / "eval" : fs::path(out);
  write_eval_outputs(dir, result, data, loaded.model_config, dump_matches);
  print_report(result.report);
  return 0;
}

int cmd_infer(const fs::path& checkpoint, const fs::path& image_path, const std::string& detect, int beam,
              const std::string& out) {
  auto loaded = trainer::load_model(checkpoint);
  const auto image = read_ppm(image_path);
  if (image.height % 32 != 0 || image.width % 32 != 0) {
    throw ConfigError("image " + std::to_string(image.width) + "x" + std::to_string(image.height) +
                      " must have sides divisible by 32; resize it first");
  }
  const bool detect_on = detect == "on";
  auto pred = metrics::infer(*loaded.model, image_to_tensor(image).squeeze(0), loaded.vocab, {beam, detect_on});
  pred.id = image_path.stem().string();
  if (!detect_on && loaded.model->detection_accesses() != 0) {
    throw std::logic_error("detection branch was accessed with --detect off");
  }

  auto j = metrics::caption_json(pred);
  if (detect_on) {
    const auto names = metrics::default_class_names(loaded.model_config.detect.num_classes);
    j["detections"] = metrics::detections_json(pred, names)["detections"];
    const fs::path dir = (out.empty() ? checkpoint.parent_path() : fs::path(out)) / "overlays";
    fs::create_directories(dir);
    const auto overlay = dir / (pred.id + ".ppm");
    write_ppm(overlay, render_overlay(image, *pred.detections, names, pred.caption_text));
    note("overlay written to " + overlay.string());
  }
  std::cout << j.dump() << '\n';
  return 0;
}

std::vector<double> parse_lambdas(const std::string& text) {
  std::vector<double> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("--lambdas expects comma-separated numbers, got '" + item + "'");
    }
  }
  if (out.empty()) throw ConfigError("--lambdas is empty");
  return out;
}

int cmd_sweep(const TrainFlags& flags, const std::string& lambdas_text) {
  const auto lambdas = lambdas_text.empty() ? trainer::sweep_lambdas() : parse_lambdas(lambdas_text);
  auto run = load_run(resolve_train_config(flags), true);
  if (!run.val_data) throw ConfigError("sweep needs a validation manifest (--data or --val-manifest)");
  const fs::path out = flags.out;
  fs::create_directories(out);
  write_json_file(out / "config.json", run.echo);
  trainer::TrainOptions options;
  options.log = note;
  const auto rows = trainer::lambda_sweep(run.model, run.train, lambdas, run.train_data, *run.val_data, out, options);
  std::ifstream md(out / "sweep.md");
  std::cout << md.rdbuf();
  for (const auto& r : rows) {
    if (!r.error.empty()) return kExitRuntime;
  }
  return 0;
}

int cmd_report(const fs::path& runs_dir) {
  const int n = metrics::collate_runs(runs_dir);
  std::ifstream md(runs_dir / "summary.md");
  std::cout << md.rdbuf();
  note(std::to_string(n) + " runs collated into " + (runs_dir / "summary.csv").string());
  return 0;
}

int cmd_ingest_coco(const fs::path& annotations, const fs::path& images, const std::string& captions,
                    const fs::path& out) {
  std::optional<fs::path> cap;
  if (!captions.empty()) cap = captions;
  const auto result = scenegen::ingest_coco(annotations, images, cap);
  scenegen::write_manifest(result.entries, out);
  std::cout << "records: " << result.entries.size() << "\nskipped without captions: "
            << result.skipped_without_captions << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Joint object detection and image captioning on a windowed-attention backbone"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic shapes corpus");
  std::string gen_out;
  int num_train = 64, num_val = 16, image_size = 128;
  std::uint64_t gen_seed = 0;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--num-train", num_train, "training records");
  gen->add_option("--num-val", num_val, "validation records");
  gen->add_option("--seed", gen_seed, "base seed");
  gen->add_option("--image-size", image_size, "square image side, a multiple of 32");

  TrainFlags train_flags;
  auto* train = app.add_subcommand("train", "train the joint model");
  add_train_flags(train, train_flags, true);
  train->add_flag("--resume", train_flags.resume, "continue from <out>/checkpoint.bin");
  train->add_flag("--no-eval", train_flags.no_eval, "skip evaluation on the validation split");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a manifest");
  std::string eval_ckpt, eval_manifest, eval_out;
  int eval_beam = 5;
  bool dump_matches = false;
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--manifest", eval_manifest, "manifest to evaluate")->required();
  eval->add_option("--beam", eval_beam, "beam size")->check(CLI::PositiveNumber);
  eval->add_option("--out", eval_out, "output directory (default <checkpoint dir>/eval)");
  eval->add_flag("--dump-matches", dump_matches, "write per-detection matches as JSON Lines");

  auto* infer = app.add_subcommand("infer", "caption (and detect) a single PPM image");
  std::string infer_ckpt, infer_image, infer_detect = "on", infer_out;
  int infer_beam = 5;
  infer->add_option("--checkpoint", infer_ckpt, "checkpoint file")->required();
  infer->add_option("--image", infer_image, "P6 PPM image")->required();
  infer->add_option("--detect", infer_detect, "on|off")->check(CLI::IsMember({"on", "off"}));
  infer->add_option("--beam", infer_beam, "beam size")->check(CLI::PositiveNumber);
  infer->add_option("--out", infer_out, "directory for overlays/ (default: the checkpoint's)");

  TrainFlags sweep_flags;
  std::string lambdas;
  auto* sweep = app.add_subcommand("sweep", "train and evaluate one model per lambda");
  add_train_flags(sweep, sweep_flags, true);
  sweep->add_option("--lambdas", lambdas, "comma-separated lambda values (default 0.01,0.1,0.2,0.5,10)");

  auto* report = app.add_subcommand("report", "collate run reports into summary tables");
  std::string runs_dir;
  report->add_option("--runs-dir", runs_dir, "directory holding run directories")->required();

  auto* coco = app.add_subcommand("ingest-coco", "convert COCO annotations into a manifest");
  std::string coco_ann, coco_images, coco_captions, coco_out;
  coco->add_option("--annotations", coco_ann, "instances JSON")->required();
  coco->add_option("--images", coco_images, "image directory")->required();
  coco->add_option("--captions", coco_captions, "captions JSON");
  coco->add_option("--out", coco_out, "manifest to write")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*gen) return cmd_gen_data(gen_out, num_train, num_val, gen_seed, image_size);
    if (*train) return cmd_train(train_flags);
    if (*eval) return cmd_eval(eval_ckpt, eval_manifest, eval_beam, eval_out, dump_matches);
    if (*infer) return cmd_infer(infer_ckpt, infer_image, infer_detect, infer_beam, infer_out);
    if (*sweep) return cmd_sweep(sweep_flags, lambdas);
    if (*report) return cmd_report(runs_dir);
    if (*coco) return cmd_ingest_coco(coco_ann, coco_images, coco_captions, coco_out);
  } catch (const ConfigError& e) {
    note(std::string("error: ") + e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    note(std::string("error: ") + e.what());
    return kExitRuntime;
  }
  return kExitUsage;
}
