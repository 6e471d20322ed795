#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "capdet/caption_head.hpp"
#include "capdet/metrics.hpp"
#include "capdet/model.hpp"
#include "capdet/scenegen.hpp"
#include "capdet/trainer.hpp"

namespace capdet::metrics {

struct EvalReport {
  double b1 = 0.0, b2 = 0.0, b3 = 0.0, b4 = 0.0;
  double rouge_l = 0.0;
  double cider = 0.0;
  double map = 0.0, ap50 = 0.0, ap75 = 0.0;
  double ap_small = 0.0, ap_medium = 0.0, ap_large = 0.0;

  // B1, B2, B3, B4, RougeL, CIDEr, mAP, AP50, AP75, AP_S, AP_M, AP_L
  static const std::vector<std::string>& columns();
  std::vector<double> values() const;
  nlohmann::json to_json() const;
  static EvalReport from_values(const std::vector<double>& values);

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

struct InferOptions {
  int beam = 5;
  bool detect = true;
};

struct ImagePrediction {
  std::string id;
  caption::Hypothesis caption;
  std::string caption_text;
  std::optional<std::vector<Detection>> detections;  // absent with detection turned off
};

// Single image (3, H, W). With detect off only the backbone and decoder run.
ImagePrediction infer(MultitaskModelImpl& model, const torch::Tensor& image, const scenegen::Vocabulary& vocab,
                      const InferOptions& options);

struct EvalResult {
  EvalReport report;
  std::vector<ImagePrediction> predictions;
  std::vector<MatchRecord> matches;
};

// Beam captioning and detection over every sample; CIDEr is NaN for a
// single-image split.
EvalResult evaluate(MultitaskModelImpl& model, const trainer::TrainingData& data, int beam = 5);

// Shape names for the synthetic corpus, "class_<i>" beyond them.
std::vector<std::string> default_class_names(int num_classes);

// Fixed six-decimal formatting shared by all CSV writers.
std::string format_metric(double value);

void write_report_csv(const std::filesystem::path& path, const EvalReport& report);
void write_report_json(const std::filesystem::path& path, const EvalReport& report);
EvalReport read_report_csv(const std::filesystem::path& path);

// {"id","caption","logprob"} and {"id","detections":[{"box","class","score"}]}
nlohmann::ordered_json caption_json(const ImagePrediction& p);
nlohmann::ordered_json detections_json(const ImagePrediction& p, const std::vector<std::string>& class_names);
void write_predictions(const std::filesystem::path& captions_path, const std::filesystem::path& detections_path,
                       const std::vector<ImagePrediction>& predictions, const std::vector<std::string>& class_names);
void write_matches(const std::filesystem::path& path, const std::vector<MatchRecord>& matches,
                   const std::vector<ImagePrediction>& predictions);

// Collates every run directory below runs_dir holding a report.csv into
// runs_dir/summary.csv and runs_dir/summary.md (one row per run with its
// freeze plan and lambda). Returns the row count; throws DataError when no
// run is found.
int collate_runs(const std::filesystem::path& runs_dir);

}  // namespace capdet::metrics

namespace capdet::trainer {

struct SweepRow {
  double lambda = 0.0;
  std::optional<metrics::EvalReport> report;
  double final_detection_loss = 0.0;
  std::string error;  // non-empty for a failed lambda
};

// Default lambda values for the sweep command.
const std::vector<double>& sweep_lambdas();

// Fresh training per lambda from the same seed into out_dir/lambda_<value>,
// evaluation on val, then out_dir/sweep.csv and out_dir/sweep.md. A failed
// lambda is recorded in its row rather than aborting the sweep.
std::vector<SweepRow> lambda_sweep(const ModelConfig& model_config, const TrainConfig& config,
                                   const std::vector<double>& lambdas, const TrainingData& train_data,
                                   const TrainingData& val_data, const std::filesystem::path& out_dir,
                                   const TrainOptions& options = {});

std::string format_lambda(double lambda);

}  // namespace capdet::trainer
