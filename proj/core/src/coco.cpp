#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>

#include "capdet/error.hpp"
#include "capdet/scenegen.hpp"
#include <nlohmann/json.hpp>

namespace capdet::scenegen {

using json = nlohmann::json;

namespace {

json load_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open COCO annotation file: " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& ex) {
    throw DataError("invalid COCO JSON in " + path.string() + ": " + ex.what());
  }
}

// Lowercase, drop punctuation, collapse whitespace.
std::string normalize_caption(const std::string& raw) {
  std::string cleaned;
  for (unsigned char c : raw) {
    if (std::isalnum(c) || c == '\'') {
      cleaned.push_back(static_cast<char>(std::tolower(c)));
    } else {
      cleaned.push_back(' ');
    }
  }
  std::string out;
  for (const auto& w : split_words(cleaned)) {
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

struct PendingImage {
  std::string file_name;
  std::vector<Box> boxes;
  std::vector<int> labels;
  std::vector<std::string> captions;
};

}  // namespace

CocoIngestResult ingest_coco(const std::filesystem::path& annotation_file, const std::filesystem::path& image_dir,
                             const std::optional<std::filesystem::path>& captions_file) {
  const json root = load_json(annotation_file);
  CocoIngestResult result;

  std::map<std::int64_t, int> category_label;
  if (root.contains("categories")) {
    std::vector<std::pair<std::int64_t, std::string>> cats;
    for (const auto& c : root.at("categories")) {
      cats.emplace_back(c.at("id").get<std::int64_t>(), c.value("name", std::string{}));
    }
    std::sort(cats.begin(), cats.end());
    for (const auto& [id, name] : cats) {
      category_label[id] = static_cast<int>(result.category_names.size());
      result.category_names.push_back(name);
    }
  }

  std::vector<std::int64_t> order;
  std::map<std::int64_t, PendingImage> images;
  for (const auto& img : root.at("images")) {
    const auto id = img.at("id").get<std::int64_t>();
    if (!images.count(id)) order.push_back(id);
    images[id].file_name = img.at("file_name").get<std::string>();
  }

  const auto absorb = [&](const json& annotations) {
    for (const auto& a : annotations) {
      const auto image_id = a.at("image_id").get<std::int64_t>();
      auto it = images.find(image_id);
      if (it == images.end()) throw DataError("annotation references unknown image id " + std::to_string(image_id));
      if (a.contains("caption")) it->second.captions.push_back(normalize_caption(a.at("caption").get<std::string>()));
      if (a.contains("bbox")) {
        const auto category = a.at("category_id").get<std::int64_t>();
        const auto label = category_label.find(category);
        if (label == category_label.end()) {
          throw DataError("annotation references unknown category id " + std::to_string(category));
        }
        const auto& b = a.at("bbox");
        const double x = b.at(0).get<double>(), y = b.at(1).get<double>();
        const double w = b.at(2).get<double>(), h = b.at(3).get<double>();
        if (w <= 0.0 || h <= 0.0) continue;
        it->second.boxes.push_back({x, y, x + w, y + h});
        it->second.labels.push_back(label->second);
      }
    }
  };
  if (root.contains("annotations")) absorb(root.at("annotations"));
  if (captions_file) {
    const json caps = load_json(*captions_file);
    if (caps.contains("annotations")) absorb(caps.at("annotations"));
  }

  for (auto id : order) {
    auto& p = images.at(id);
    if (p.captions.empty()) {
      ++result.skipped_without_captions;
      continue;
    }
    while (p.captions.size() < static_cast<std::size_t>(kCaptionsPerRecord)) p.captions.push_back(p.captions.back());
    p.captions.resize(kCaptionsPerRecord);
    ManifestEntry e;
    e.id = std::to_string(id);
    e.image = (image_dir / p.file_name).string();
    e.boxes = std::move(p.boxes);
    e.labels = std::move(p.labels);
    e.captions = std::move(p.captions);
    result.entries.push_back(std::move(e));
  }
  return result;
}

}  // namespace capdet::scenegen
