#include "capdet/metrics.hpp"

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "capdet/error.hpp"
#include "capdet/scenegen.hpp"

namespace capdet::metrics {

namespace {

using NgramCounts = std::map<std::vector<std::string>, int>;

NgramCounts count_ngrams(const Sentence& s, int n) {
  NgramCounts counts;
  if (static_cast<int>(s.size()) < n) return counts;
  for (std::size_t i = 0; i + n <= s.size(); ++i) {
    ++counts[std::vector<std::string>(s.begin() + static_cast<std::ptrdiff_t>(i),
                                      s.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

void require_non_empty(const CaptionEvalSet& set, const char* metric) {
  if (set.empty()) throw ConfigError(std::string(metric) + ": empty candidate set");
  for (const auto& item : set) {
    if (item.references.empty()) throw ConfigError(std::string(metric) + ": item without references");
  }
}

std::size_t lcs_length(const Sentence& a, const Sentence& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace

CaptionEvalSet make_caption_eval_set(const std::vector<std::string>& candidates,
                                     const std::vector<std::vector<std::string>>& references) {
  if (candidates.size() != references.size()) {
    throw ConfigError("candidate and reference lists differ in length");
  }
  CaptionEvalSet set;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    CaptionItem item;
    item.candidate = scenegen::split_words(candidates[i]);
    for (const auto& r : references[i]) item.references.push_back(scenegen::split_words(r));
    set.push_back(std::move(item));
  }
  return set;
}

std::array<double, 4> bleu_all(const CaptionEvalSet& set) {
  require_non_empty(set, "bleu");
  std::array<double, 4> matched{}, total{};
  double cand_len = 0.0, ref_len = 0.0;
  for (const auto& item : set) {
    const double c = static_cast<double>(item.candidate.size());
    cand_len += c;
    double closest = -1.0;
    for (const auto& r : item.references) {
      const double len = static_cast<double>(r.size());
      if (closest < 0.0 || std::abs(len - c) < std::abs(closest - c) ||
          (std::abs(len - c) == std::abs(closest - c) && len < closest)) {
        closest = len;
      }
    }
    ref_len += closest;
    for (int n = 1; n <= 4; ++n) {
      const auto cand = count_ngrams(item.candidate, n);
      NgramCounts max_ref;
      for (const auto& r : item.references) {
        for (const auto& [g, cnt] : count_ngrams(r, n)) max_ref[g] = std::max(max_ref[g], cnt);
      }
      for (const auto& [g, cnt] : cand) {
        total[n - 1] += cnt;
        const auto it = max_ref.find(g);
        if (it != max_ref.end()) matched[n - 1] += std::min(cnt, it->second);
      }
    }
  }
  std::array<double, 4> scores{};
  if (cand_len <= 0.0) return scores;
  const double bp = cand_len < ref_len ? std::exp(1.0 - ref_len / cand_len) : 1.0;
  double log_sum = 0.0;
  bool zero = false;
  for (int n = 1; n <= 4; ++n) {
    if (matched[n - 1] <= 0.0 || total[n - 1] <= 0.0) zero = true;
    if (!zero) log_sum += std::log(matched[n - 1] / total[n - 1]);
    scores[n - 1] = zero ? 0.0 : bp * std::exp(log_sum / n);
  }
  return scores;
}

double bleu(const CaptionEvalSet& set, int n) {
  if (n < 1 || n > 4) throw ConfigError("bleu order must be in 1..4");
  return bleu_all(set)[static_cast<std::size_t>(n - 1)];
}

double rouge_l_sentence(const Sentence& candidate, const std::vector<Sentence>& references, double beta) {
  if (candidate.empty()) return 0.0;
  double best_p = 0.0, best_r = 0.0;
  for (const auto& r : references) {
    if (r.empty()) continue;
    const double lcs = static_cast<double>(lcs_length(candidate, r));
    best_p = std::max(best_p, lcs / static_cast<double>(candidate.size()));
    best_r = std::max(best_r, lcs / static_cast<double>(r.size()));
  }
  if (best_p <= 0.0 || best_r <= 0.0) return 0.0;
  const double b2 = beta * beta;
  return (1.0 + b2) * best_p * best_r / (best_r + b2 * best_p);
}

double rouge_l(const CaptionEvalSet& set, double beta) {
  require_non_empty(set, "rouge_l");
  double sum = 0.0;
  for (const auto& item : set) sum += rouge_l_sentence(item.candidate, item.references, beta);
  return sum / static_cast<double>(set.size());
}

std::vector<double> cider_per_image(const CaptionEvalSet& set) {
  require_non_empty(set, "cider");
  if (set.size() < 2) {
    throw ConfigError("cider: document frequencies need a corpus of at least 2 images, got " +
                      std::to_string(set.size()));
  }
  constexpr int kMaxN = 4;
  // Document frequency: number of images whose references contain the n-gram.
  std::map<std::vector<std::string>, int> df;
  for (const auto& item : set) {
    std::set<std::vector<std::string>> seen;
    for (const auto& r : item.references) {
      for (int n = 1; n <= kMaxN; ++n) {
        for (const auto& [g, cnt] : count_ngrams(r, n)) seen.insert(g);
      }
    }
    for (const auto& g : seen) ++df[g];
  }
  const double log_corpus = std::log(static_cast<double>(set.size()));

  struct Vec {
    std::array<std::map<std::vector<std::string>, double>, kMaxN> weights;
    std::array<double, kMaxN> norm{};
  };
  const auto vectorize = [&](const Sentence& s) {
    Vec v;
    for (int n = 1; n <= kMaxN; ++n) {
      for (const auto& [g, tf] : count_ngrams(s, n)) {
        const auto it = df.find(g);
        const double doc_freq = it == df.end() ? 0.0 : static_cast<double>(it->second);
        const double w = tf * (log_corpus - std::log(std::max(1.0, doc_freq)));
        v.weights[n - 1][g] = w;
        v.norm[n - 1] += w * w;
      }
      v.norm[n - 1] = std::sqrt(v.norm[n - 1]);
    }
    return v;
  };

  std::vector<double> scores;
  scores.reserve(set.size());
  for (const auto& item : set) {
    const Vec cand = vectorize(item.candidate);
    std::array<double, kMaxN> acc{};
    for (const auto& r : item.references) {
      const Vec ref = vectorize(r);
      for (int n = 0; n < kMaxN; ++n) {
        double dot = 0.0;
        for (const auto& [g, w] : cand.weights[n]) {
          const auto it = ref.weights[n].find(g);
          if (it != ref.weights[n].end()) dot += w * it->second;
        }
        if (cand.norm[n] != 0.0 && ref.norm[n] != 0.0) dot /= cand.norm[n] * ref.norm[n];
        acc[n] += dot;
      }
    }
    double mean = 0.0;
    for (double a : acc) mean += a / static_cast<double>(item.references.size());
    scores.push_back(10.0 * mean / kMaxN);
  }
  return scores;
}

double cider(const CaptionEvalSet& set) {
  const auto per_image = cider_per_image(set);
  return std::accumulate(per_image.begin(), per_image.end(), 0.0) / static_cast<double>(per_image.size());
}

// ---------------------------------------------------------------------------

namespace {

struct ScoredMatch {
  double score;
  bool matched;
  bool ignored;
};

// Matches one image's detections of one class at one threshold. Returns the
// detections in processing order; fills the matched ground-truth index.
std::vector<ScoredMatch> match_image(const DetectionImage& image, int class_id, double iou_threshold,
                                     double area_min, double area_max, int max_detections,
                                     std::vector<std::pair<int, int>>* assignments) {
  std::vector<int> gts;
  for (int g = 0; g < static_cast<int>(image.ground_truth.size()); ++g) {
    if (image.ground_truth[g].class_id == class_id) gts.push_back(g);
  }
  const auto gt_ignored = [&](int g) {
    const double a = image.ground_truth[g].box.area();
    return a < area_min || a > area_max;
  };
  std::stable_sort(gts.begin(), gts.end(), [&](int a, int b) { return !gt_ignored(a) && gt_ignored(b); });

  std::vector<int> dts;
  for (int d = 0; d < static_cast<int>(image.detections.size()); ++d) {
    if (image.detections[d].class_id == class_id) dts.push_back(d);
  }
  std::stable_sort(dts.begin(), dts.end(),
                   [&](int a, int b) { return image.detections[a].score > image.detections[b].score; });
  if (static_cast<int>(dts.size()) > max_detections) dts.resize(static_cast<std::size_t>(max_detections));

  std::vector<bool> gt_taken(gts.size(), false);
  std::vector<ScoredMatch> out;
  out.reserve(dts.size());
  for (int d : dts) {
    const auto& det = image.detections[d];
    double best = std::min(iou_threshold, 1.0 - 1e-10);
    int m = -1;
    for (std::size_t gi = 0; gi < gts.size(); ++gi) {
      if (gt_taken[gi]) continue;
      if (m > -1 && !gt_ignored(gts[static_cast<std::size_t>(m)]) && gt_ignored(gts[gi])) break;
      const double v = iou(det.box, image.ground_truth[gts[gi]].box);
      if (v < best) continue;
      best = v;
      m = static_cast<int>(gi);
    }
    ScoredMatch sm{det.score, false, false};
    if (m > -1) {
      gt_taken[static_cast<std::size_t>(m)] = true;
      sm.matched = true;
      sm.ignored = gt_ignored(gts[static_cast<std::size_t>(m)]);
      if (assignments) assignments->emplace_back(d, gts[static_cast<std::size_t>(m)]);
    } else {
      const double a = det.box.area();
      sm.ignored = a < area_min || a > area_max;
    }
    out.push_back(sm);
  }
  return out;
}

int count_gt_in_range(const DetectionEvalSet& set, int class_id, double area_min, double area_max) {
  int n = 0;
  for (const auto& image : set.images) {
    for (const auto& g : image.ground_truth) {
      const double a = g.box.area();
      if (g.class_id == class_id && a >= area_min && a <= area_max) ++n;
    }
  }
  return n;
}

constexpr double kAreaMax = 1e10;

}  // namespace

double average_precision(const DetectionEvalSet& set, int class_id, double iou_threshold, double area_min,
                         double area_max) {
  const int positives = count_gt_in_range(set, class_id, area_min, area_max);
  if (positives == 0) return -1.0;
  std::vector<ScoredMatch> all;
  for (const auto& image : set.images) {
    auto m = match_image(image, class_id, iou_threshold, area_min, area_max, set.max_detections, nullptr);
    all.insert(all.end(), m.begin(), m.end());
  }
  std::stable_sort(all.begin(), all.end(), [](const ScoredMatch& a, const ScoredMatch& b) { return a.score > b.score; });
  std::vector<double> precision, recall;
  double tp = 0.0, fp = 0.0;
  for (const auto& m : all) {
    if (m.ignored) continue;
    if (m.matched) {
      tp += 1.0;
    } else {
      fp += 1.0;
    }
    recall.push_back(tp / positives);
    precision.push_back(tp / (tp + fp + DBL_EPSILON));
  }
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double sum = 0.0;
  constexpr int kRecallPoints = 101;
  for (int k = 0; k < kRecallPoints; ++k) {
    const double r = k / 100.0;
    const auto it = std::lower_bound(recall.begin(), recall.end(), r);
    if (it != recall.end()) sum += precision[static_cast<std::size_t>(it - recall.begin())];
  }
  return sum / kRecallPoints;
}

ApSummary coco_map(const DetectionEvalSet& set, std::vector<MatchRecord>* matches) {
  for (const auto& image : set.images) {
    for (const auto& d : image.detections) {
      if (d.class_id < 0 || d.class_id >= set.num_classes) {
        throw ConfigError("coco_map: detection class " + std::to_string(d.class_id) + " outside label space of " +
                          std::to_string(set.num_classes) + " classes");
      }
    }
  }
  const double scale = std::pow(static_cast<double>(set.image_size) / 640.0, 2.0);
  const double small_max = 32.0 * 32.0 * scale;
  const double medium_max = 96.0 * 96.0 * scale;

  const auto mean_ap = [&](const std::vector<double>& thresholds, double lo, double hi) {
    double sum = 0.0;
    int n = 0;
    for (int c = 0; c < set.num_classes; ++c) {
      for (double t : thresholds) {
        const double ap = average_precision(set, c, t, lo, hi);
        if (ap < 0.0) continue;
        sum += ap;
        ++n;
      }
    }
    return n == 0 ? -1.0 : sum / n;
  };

  std::vector<double> thresholds;
  for (int k = 0; k < 10; ++k) thresholds.push_back((50 + 5 * k) / 100.0);

  ApSummary s;
  s.map = mean_ap(thresholds, 0.0, kAreaMax);
  s.ap50 = mean_ap({0.5}, 0.0, kAreaMax);
  s.ap75 = mean_ap({0.75}, 0.0, kAreaMax);
  s.ap_small = mean_ap(thresholds, 0.0, small_max);
  s.ap_medium = mean_ap(thresholds, small_max, medium_max);
  s.ap_large = mean_ap(thresholds, medium_max, kAreaMax);

  if (matches) {
    matches->clear();
    for (int i = 0; i < static_cast<int>(set.images.size()); ++i) {
      const auto& image = set.images[static_cast<std::size_t>(i)];
      std::vector<std::pair<int, int>> assigned;
      for (int c = 0; c < set.num_classes; ++c) {
        match_image(image, c, 0.5, 0.0, kAreaMax, set.max_detections, &assigned);
      }
      for (int d = 0; d < static_cast<int>(image.detections.size()); ++d) {
        const auto& det = image.detections[static_cast<std::size_t>(d)];
        MatchRecord r{i, d, det.class_id, det.score, -1, 0.0};
        for (const auto& [dd, g] : assigned) {
          if (dd == d) {
            r.matched_gt = g;
            r.iou = iou(det.box, image.ground_truth[static_cast<std::size_t>(g)].box);
          }
        }
        matches->push_back(r);
      }
    }
  }
  return s;
}

}  // namespace capdet::metrics
