#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "capdet/boxes.hpp"
#include "capdet/image.hpp"

namespace capdet::scenegen {

enum class ShapeKind : std::uint8_t { circle = 0, square = 1, triangle = 2, cross = 3 };
enum class Color : std::uint8_t { red = 0, green = 1, blue = 2, yellow = 3, purple = 4 };

inline constexpr int kNumShapeKinds = 4;
inline constexpr int kNumColors = 5;
inline constexpr int kCaptionsPerRecord = 5;
inline constexpr int kNumTemplates = 5;

std::string_view shape_name(ShapeKind kind);
std::string_view color_name(Color color);
std::array<std::uint8_t, 3> color_rgb(Color color);
std::array<std::uint8_t, 3> background_rgb();

struct SceneObject {
  ShapeKind shape = ShapeKind::circle;
  Color color = Color::red;
  Box box;
};

struct SceneSpec {
  std::vector<SceneObject> objects;
  int image_size = 128;
  std::uint64_t seed = 0;
};

struct SceneConfig {
  int image_size = 128;
  int min_objects = 1;
  int max_objects = 4;
  // Object side length as a fraction of the image size.
  double min_object_fraction = 0.125;
  double max_object_fraction = 0.375;
  double max_pair_iou = 0.25;
  int max_placement_retries = 100;
  std::vector<ShapeKind> shapes{ShapeKind::circle, ShapeKind::square, ShapeKind::triangle,
                                ShapeKind::cross};
  std::vector<Color> colors{Color::red, Color::green, Color::blue, Color::yellow, Color::purple};

  // Throws ConfigError.
  void validate() const;
};

struct SceneRecord {
  std::string id;
  Image image;
  std::vector<Box> boxes;
  std::vector<int> labels;
  std::vector<std::string> captions;

  // Throws DataError naming the record when an invariant is violated.
  void validate() const;

  friend bool operator==(const SceneRecord&, const SceneRecord&) = default;
};

// Samples a scene layout. Throws ConfigError for an invalid config and
// DataError when non-overlapping placement fails after the retry budget.
SceneSpec sample_scene(std::uint64_t seed, const SceneConfig& config);

Image render_image(const SceneSpec& spec);

// Caption text for a given template id in [0, kNumTemplates).
std::string caption_from_template(const SceneSpec& spec, int template_id);

SceneRecord generate_scene(std::uint64_t seed, const SceneConfig& config);

// Record i uses seed base_seed + i and id "<prefix><i>".
std::vector<SceneRecord> generate_dataset(std::uint64_t base_seed, int count, const SceneConfig& config,
                                          const std::string& id_prefix = "scene_");

// ---------------------------------------------------------------------------
// Vocabulary and tokenizer

class Vocabulary {
 public:
  static constexpr std::int64_t kPad = 0;
  static constexpr std::int64_t kStart = 1;
  static constexpr std::int64_t kEnd = 2;
  static constexpr std::int64_t kUnk = 3;

  // Reserved tokens are prepended; duplicates throw ConfigError.
  explicit Vocabulary(const std::vector<std::string>& words = {});

  // Word list covering every caption template.
  static Vocabulary scene_default();

  static Vocabulary from_tokens(const std::vector<std::string>& tokens);

  std::int64_t id(std::string_view token) const;
  const std::string& token(std::int64_t id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }
  std::int64_t size() const { return static_cast<std::int64_t>(tokens_.size()); }

  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
};

// Whitespace split; unknown words map to <unk>; <end> is appended.
std::vector<std::int64_t> tokenize(std::string_view text, const Vocabulary& vocab);

// Inverse of tokenize: stops at <end>, skips <start> and <pad>.
std::string detokenize(const std::vector<std::int64_t>& ids, const Vocabulary& vocab);

// Whitespace split without vocabulary lookup (used by metrics).
std::vector<std::string> split_words(std::string_view text);

// ---------------------------------------------------------------------------
// Manifest datasets (JSON Lines + PPM images)

struct ManifestEntry {
  std::string id;
  std::string image;  // path relative to the manifest directory (or absolute)
  std::vector<Box> boxes;
  std::vector<int> labels;
  std::vector<std::string> captions;
};

// Writes images/<id>.ppm and the manifest file; returns the manifest path.
std::filesystem::path write_dataset(const std::vector<SceneRecord>& records, const std::filesystem::path& dir,
                                    const std::string& manifest_name = "manifest.jsonl");

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& manifest);
void write_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& manifest);

// Loads every record and its image. Throws DataError naming the record id
// (missing image) or path (corrupt image).
std::vector<SceneRecord> read_dataset(const std::filesystem::path& manifest);

// ---------------------------------------------------------------------------
// COCO ingestion

struct CocoIngestResult {
  std::vector<ManifestEntry> entries;
  int skipped_without_captions = 0;
  std::vector<std::string> category_names;  // label id -> name
};

// Reads COCO instances and captions annotations (one merged file, or a
// separate captions file), converts (x, y, w, h) boxes to corners, maps
// category ids to contiguous labels, and pads/truncates captions to five.
CocoIngestResult ingest_coco(const std::filesystem::path& annotation_file, const std::filesystem::path& image_dir,
                             const std::optional<std::filesystem::path>& captions_file = std::nullopt);

}  // namespace capdet::scenegen
