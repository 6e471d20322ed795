#include "capdet/scenegen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <tuple>

#include "capdet/error.hpp"
#include <nlohmann/json.hpp>

namespace capdet::scenegen {

using json = nlohmann::json;

std::string_view shape_name(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::circle: return "circle";
    case ShapeKind::square: return "square";
    case ShapeKind::triangle: return "triangle";
    case ShapeKind::cross: return "cross";
  }
  return "?";
}

std::string_view color_name(Color color) {
  switch (color) {
    case Color::red: return "red";
    case Color::green: return "green";
    case Color::blue: return "blue";
    case Color::yellow: return "yellow";
    case Color::purple: return "purple";
  }
  return "?";
}

std::array<std::uint8_t, 3> color_rgb(Color color) {
  switch (color) {
    case Color::red: return {220, 40, 40};
    case Color::green: return {40, 180, 60};
    case Color::blue: return {40, 80, 220};
    case Color::yellow: return {230, 210, 40};
    case Color::purple: return {150, 60, 190};
  }
  return {255, 255, 255};
}

std::array<std::uint8_t, 3> background_rgb() { return {24, 24, 24}; }

void SceneConfig::validate() const {
  if (image_size <= 0 || image_size % 32 != 0) {
    throw ConfigError("image_size must be a positive multiple of 32 (backbone stride), got " +
                      std::to_string(image_size));
  }
  if (shapes.empty() || colors.empty()) throw ConfigError("shape and color palettes must be non-empty");
  if (min_objects < 1 || max_objects < min_objects || max_objects > 4) {
    throw ConfigError("object count range must satisfy 1 <= min <= max <= 4");
  }
  if (!(min_object_fraction > 0.0) || max_object_fraction < min_object_fraction || max_object_fraction > 1.0) {
    throw ConfigError("object size fractions must satisfy 0 < min <= max <= 1");
  }
  if (max_placement_retries < 1) throw ConfigError("max_placement_retries must be >= 1");
}

void SceneRecord::validate() const {
  if (boxes.size() != labels.size()) {
    throw DataError("record " + id + ": boxes and labels differ in length");
  }
  if (captions.size() != static_cast<std::size_t>(kCaptionsPerRecord)) {
    throw DataError("record " + id + ": expected 5 captions, found " + std::to_string(captions.size()));
  }
  for (const auto& b : boxes) {
    if (!b.valid()) throw DataError("record " + id + ": invalid box");
  }
}

namespace {

// Portable uniform draws on top of the standardized mt19937_64 bit stream.
class SceneRng {
 public:
  explicit SceneRng(std::uint64_t seed) : engine_(seed) {}
  int uniform_int(int lo, int hi) {  // inclusive
    const auto span = static_cast<std::uint64_t>(hi - lo + 1);
    return lo + static_cast<int>(engine_() % span);
  }

 private:
  std::mt19937_64 engine_;
};

bool inside_shape(ShapeKind kind, const Box& box, double px, double py) {
  const double s = box.width();
  const double cx = box.x_min + 0.5 * s;
  const double cy = box.y_min + 0.5 * box.height();
  switch (kind) {
    case ShapeKind::square:
      return px >= box.x_min && px < box.x_max && py >= box.y_min && py < box.y_max;
    case ShapeKind::circle: {
      const double r = 0.5 * s;
      return (px - cx) * (px - cx) + (py - cy) * (py - cy) <= r * r;
    }
    case ShapeKind::triangle: {
      if (py < box.y_min || py > box.y_max) return false;
      const double half = 0.5 * (py - box.y_min) * s / box.height();
      return std::abs(px - cx) <= half;
    }
    case ShapeKind::cross: {
      if (px < box.x_min || px >= box.x_max || py < box.y_min || py >= box.y_max) return false;
      const double arm = std::max(2.0, std::round(s / 3.0));
      return std::abs(px - cx) <= 0.5 * arm || std::abs(py - cy) <= 0.5 * arm;
    }
  }
  return false;
}

std::string phrase(const SceneObject& o) {
  return "a " + std::string(color_name(o.color)) + " " + std::string(shape_name(o.shape));
}

std::string join_phrases(const std::vector<SceneObject>& objects, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < objects.size(); ++i) {
    if (i > 0) out.append(sep);
    out += phrase(objects[i]);
  }
  return out;
}

std::vector<SceneObject> sorted_by(const std::vector<SceneObject>& objects, bool horizontal) {
  auto sorted = objects;
  std::stable_sort(sorted.begin(), sorted.end(), [horizontal](const SceneObject& a, const SceneObject& b) {
    const double ka = horizontal ? a.box.x_min + a.box.x_max : a.box.y_min + a.box.y_max;
    const double kb = horizontal ? b.box.x_min + b.box.x_max : b.box.y_min + b.box.y_max;
    if (ka != kb) return ka < kb;
    return std::tie(a.shape, a.color) < std::tie(b.shape, b.color);
  });
  return sorted;
}

}  // namespace

SceneSpec sample_scene(std::uint64_t seed, const SceneConfig& config) {
  config.validate();
  SceneRng rng(seed);
  SceneSpec spec;
  spec.image_size = config.image_size;
  spec.seed = seed;
  const int count = rng.uniform_int(config.min_objects, config.max_objects);
  const int min_side = std::max(4, static_cast<int>(std::lround(config.min_object_fraction * config.image_size)));
  const int max_side =
      std::max(min_side, static_cast<int>(std::lround(config.max_object_fraction * config.image_size)));
  for (int i = 0; i < count; ++i) {
    SceneObject obj;
    obj.shape = config.shapes[rng.uniform_int(0, static_cast<int>(config.shapes.size()) - 1)];
    obj.color = config.colors[rng.uniform_int(0, static_cast<int>(config.colors.size()) - 1)];
    bool placed = false;
    for (int attempt = 0; attempt < config.max_placement_retries && !placed; ++attempt) {
      const int side = rng.uniform_int(min_side, max_side);
      const int x = rng.uniform_int(0, config.image_size - side);
      const int y = rng.uniform_int(0, config.image_size - side);
      obj.box = {static_cast<double>(x), static_cast<double>(y), static_cast<double>(x + side),
                 static_cast<double>(y + side)};
      placed = std::all_of(spec.objects.begin(), spec.objects.end(),
                           [&](const SceneObject& o) { return iou(o.box, obj.box) <= config.max_pair_iou; });
    }
    if (!placed) {
      throw DataError("scene seed " + std::to_string(seed) + ": could not place object " + std::to_string(i) +
                      " within IoU " + std::to_string(config.max_pair_iou) + " after " +
                      std::to_string(config.max_placement_retries) + " retries");
    }
    spec.objects.push_back(obj);
  }
  return spec;
}

Image render_image(const SceneSpec& spec) {
  Image image(spec.image_size, spec.image_size);
  const auto bg = background_rgb();
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      for (int c = 0; c < 3; ++c) image.at(y, x, c) = bg[c] / 255.0f;
    }
  }
  for (const auto& obj : spec.objects) {
    const auto rgb = color_rgb(obj.color);
    const int x0 = std::max(0, static_cast<int>(std::floor(obj.box.x_min)));
    const int y0 = std::max(0, static_cast<int>(std::floor(obj.box.y_min)));
    const int x1 = std::min(image.width, static_cast<int>(std::ceil(obj.box.x_max)));
    const int y1 = std::min(image.height, static_cast<int>(std::ceil(obj.box.y_max)));
    for (int y = y0; y < y1; ++y) {
      for (int x = x0; x < x1; ++x) {
        if (!inside_shape(obj.shape, obj.box, x + 0.5, y + 0.5)) continue;
        for (int c = 0; c < 3; ++c) image.at(y, x, c) = rgb[c] / 255.0f;
      }
    }
  }
  return image;
}

std::string caption_from_template(const SceneSpec& spec, int template_id) {
  const auto horizontal = sorted_by(spec.objects, true);
  const bool single = spec.objects.size() == 1;
  switch (template_id) {
    case 0: return join_phrases(horizontal, " and ");
    case 1: return "there is " + join_phrases(horizontal, " and ");
    case 2: return "an image with " + join_phrases(horizontal, " and ");
    case 3:
      if (single) return "a single " + std::string(color_name(horizontal[0].color)) + " " +
                         std::string(shape_name(horizontal[0].shape));
      return join_phrases(horizontal, " left of ");
    case 4:
      if (single) return "a picture of " + phrase(horizontal[0]);
      return join_phrases(sorted_by(spec.objects, false), " above ");
    default: throw ConfigError("caption template id out of range: " + std::to_string(template_id));
  }
}

SceneRecord generate_scene(std::uint64_t seed, const SceneConfig& config) {
  const SceneSpec spec = sample_scene(seed, config);
  SceneRecord record;
  record.id = "scene_" + std::to_string(seed);
  record.image = render_image(spec);
  for (const auto& obj : spec.objects) {
    record.boxes.push_back(obj.box);
    record.labels.push_back(static_cast<int>(obj.shape));
  }
  for (int t = 0; t < kNumTemplates; ++t) record.captions.push_back(caption_from_template(spec, t));
  return record;
}

std::vector<SceneRecord> generate_dataset(std::uint64_t base_seed, int count, const SceneConfig& config,
                                          const std::string& id_prefix) {
  std::vector<SceneRecord> records;
  records.reserve(static_cast<std::size_t>(std::max(count, 0)));
  for (int i = 0; i < count; ++i) {
    auto record = generate_scene(base_seed + static_cast<std::uint64_t>(i), config);
    record.id = id_prefix + std::to_string(i);
    records.push_back(std::move(record));
  }
  return records;
}

// ---------------------------------------------------------------------------

Vocabulary::Vocabulary(const std::vector<std::string>& words)
    : tokens_{"<pad>", "<start>", "<end>", "<unk>"} {
  for (const auto& w : words) {
    if (std::find(tokens_.begin(), tokens_.end(), w) != tokens_.end()) {
      throw ConfigError("duplicate vocabulary token: " + w);
    }
    tokens_.push_back(w);
  }
}

Vocabulary Vocabulary::scene_default() {
  std::vector<std::string> words{"a", "an", "and", "there", "is", "image", "with",
                                 "left", "of", "above", "single", "picture"};
  for (int c = 0; c < kNumColors; ++c) words.emplace_back(color_name(static_cast<Color>(c)));
  for (int s = 0; s < kNumShapeKinds; ++s) words.emplace_back(shape_name(static_cast<ShapeKind>(s)));
  return Vocabulary(words);
}

Vocabulary Vocabulary::from_tokens(const std::vector<std::string>& tokens) {
  static const std::vector<std::string> reserved{"<pad>", "<start>", "<end>", "<unk>"};
  if (tokens.size() < reserved.size() || !std::equal(reserved.begin(), reserved.end(), tokens.begin())) {
    throw DataError("vocabulary must begin with <pad>, <start>, <end>, <unk>");
  }
  return Vocabulary(std::vector<std::string>(tokens.begin() + 4, tokens.end()));
}

std::int64_t Vocabulary::id(std::string_view token) const {
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i] == token) return static_cast<std::int64_t>(i);
  }
  return kUnk;
}

const std::string& Vocabulary::token(std::int64_t id) const {
  if (id < 0 || id >= size()) return tokens_[kUnk];
  return tokens_[static_cast<std::size_t>(id)];
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write vocabulary: " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read vocabulary: " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) tokens.push_back(line);
  }
  return from_tokens(tokens);
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string current;
  for (char c : text) {
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
      if (!current.empty()) words.push_back(std::move(current));
      current.clear();
    } else {
      current.push_back(c);
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

std::vector<std::int64_t> tokenize(std::string_view text, const Vocabulary& vocab) {
  std::vector<std::int64_t> ids;
  for (const auto& w : split_words(text)) ids.push_back(vocab.id(w));
  ids.push_back(Vocabulary::kEnd);
  return ids;
}

std::string detokenize(const std::vector<std::int64_t>& ids, const Vocabulary& vocab) {
  std::string out;
  for (auto id : ids) {
    if (id == Vocabulary::kEnd) break;
    if (id == Vocabulary::kStart || id == Vocabulary::kPad) continue;
    if (!out.empty()) out.push_back(' ');
    out += vocab.token(id);
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

nlohmann::ordered_json entry_to_json(const ManifestEntry& e) {
  nlohmann::ordered_json boxes = nlohmann::ordered_json::array();
  for (const auto& b : e.boxes) boxes.push_back({b.x_min, b.y_min, b.x_max, b.y_max});
  return {{"id", e.id}, {"image", e.image}, {"boxes", boxes}, {"labels", e.labels}, {"captions", e.captions}};
}

ManifestEntry entry_from_json(const json& j, std::size_t line_no, const std::filesystem::path& manifest) {
  const auto where = [&] { return manifest.string() + ":" + std::to_string(line_no); };
  ManifestEntry e;
  try {
    e.id = j.at("id").get<std::string>();
    e.image = j.at("image").get<std::string>();
    for (const auto& b : j.at("boxes")) {
      if (b.size() != 4) throw DataError(where() + ": box must have 4 coordinates");
      e.boxes.push_back({b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()});
    }
    e.labels = j.at("labels").get<std::vector<int>>();
    e.captions = j.at("captions").get<std::vector<std::string>>();
  } catch (const json::exception& ex) {
    throw DataError(where() + ": malformed manifest entry (" + ex.what() + ")");
  }
  if (e.boxes.size() != e.labels.size()) {
    throw DataError(where() + ": record " + e.id + " has " + std::to_string(e.boxes.size()) + " boxes but " +
                    std::to_string(e.labels.size()) + " labels");
  }
  if (e.captions.size() != static_cast<std::size_t>(kCaptionsPerRecord)) {
    throw DataError(where() + ": record " + e.id + " must have exactly 5 captions, found " +
                    std::to_string(e.captions.size()));
  }
  for (const auto& b : e.boxes) {
    if (!b.valid()) throw DataError(where() + ": record " + e.id + " has an invalid box");
  }
  return e;
}

}  // namespace

void write_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& manifest) {
  std::ofstream out(manifest);
  if (!out) throw DataError("cannot write manifest: " + manifest.string());
  for (const auto& e : entries) out << entry_to_json(e).dump() << '\n';
}

std::filesystem::path write_dataset(const std::vector<SceneRecord>& records, const std::filesystem::path& dir,
                                    const std::string& manifest_name) {
  std::filesystem::create_directories(dir / "images");
  std::vector<ManifestEntry> entries;
  entries.reserve(records.size());
  for (const auto& r : records) {
    r.validate();
    const std::string rel = "images/" + r.id + ".ppm";
    write_ppm(dir / rel, r.image);
    entries.push_back({r.id, rel, r.boxes, r.labels, r.captions});
  }
  const auto manifest = dir / manifest_name;
  write_manifest(entries, manifest);
  return manifest;
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw DataError("cannot open manifest: " + manifest.string());
  std::vector<ManifestEntry> entries;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& ex) {
      throw DataError(manifest.string() + ":" + std::to_string(line_no) + ": invalid JSON (" + ex.what() + ")");
    }
    entries.push_back(entry_from_json(j, line_no, manifest));
  }
  return entries;
}

std::vector<SceneRecord> read_dataset(const std::filesystem::path& manifest) {
  const auto entries = read_manifest(manifest);
  const auto base = manifest.parent_path();
  std::vector<SceneRecord> records;
  records.reserve(entries.size());
  for (const auto& e : entries) {
    const std::filesystem::path image_path =
        std::filesystem::path(e.image).is_absolute() ? std::filesystem::path(e.image) : base / e.image;
    if (!std::filesystem::exists(image_path)) {
      throw DataError("record " + e.id + ": image file not found: " + image_path.string());
    }
    SceneRecord r;
    r.id = e.id;
    r.image = read_ppm(image_path);
    r.boxes = e.boxes;
    r.labels = e.labels;
    r.captions = e.captions;
    records.push_back(std::move(r));
  }
  return records;
}

}  // namespace capdet::scenegen
