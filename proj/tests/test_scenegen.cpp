#include <doctest.h>

#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "capdet/error.hpp"
#include "capdet/scenegen.hpp"
#include "test_util.hpp"

using namespace capdet;
using namespace capdet::scenegen;

namespace {

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool is_background(const Image& img, int y, int x) {
  const auto bg = background_rgb();
  for (int c = 0; c < 3; ++c) {
    if (std::lround(img.at(y, x, c) * 255.0f) != bg[static_cast<std::size_t>(c)]) return false;
  }
  return true;
}

// Tight box of the non-background pixels, in the same pixel-edge convention.
Box scan_box(const Image& img) {
  int x0 = img.width, y0 = img.height, x1 = -1, y1 = -1;
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      if (is_background(img, y, x)) continue;
      x0 = std::min(x0, x);
      y0 = std::min(y0, y);
      x1 = std::max(x1, x);
      y1 = std::max(y1, y);
    }
  }
  return {double(x0), double(y0), double(x1 + 1), double(y1 + 1)};
}

}  // namespace

TEST_SUITE("scenegen") {
  TEST_CASE("generation is deterministic and valid") {
    SceneConfig cfg;
    const auto a = generate_scene(7, cfg);
    const auto b = generate_scene(7, cfg);
    CHECK(a == b);
    CHECK_NOTHROW(a.validate());
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      const auto spec = sample_scene(seed, cfg);
      REQUIRE(spec.objects.size() >= 1);
      REQUIRE(spec.objects.size() <= 4);
      for (std::size_t i = 0; i < spec.objects.size(); ++i) {
        const auto& box = spec.objects[i].box;
        CHECK(box.valid());
        CHECK(box.x_max <= cfg.image_size);
        CHECK(box.y_max <= cfg.image_size);
        for (std::size_t j = i + 1; j < spec.objects.size(); ++j) CHECK(iou(box, spec.objects[j].box) <= 0.25);
      }
    }
  }

  TEST_CASE("single object captions name its color and shape") {
    SceneConfig cfg;
    cfg.min_objects = cfg.max_objects = 1;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const auto spec = sample_scene(seed, cfg);
      const auto rec = generate_scene(seed, cfg);
      REQUIRE(rec.boxes.size() == 1);
      REQUIRE(rec.captions.size() == 5);
      for (const auto& c : rec.captions) {
        CHECK(c.find(std::string(color_name(spec.objects[0].color))) != std::string::npos);
        CHECK(c.find(std::string(shape_name(spec.objects[0].shape))) != std::string::npos);
      }
    }
  }

  TEST_CASE("every caption mentions every object") {
    SceneConfig cfg;
    for (std::uint64_t seed = 100; seed < 140; ++seed) {
      const auto spec = sample_scene(seed, cfg);
      for (int t = 0; t < kNumTemplates; ++t) {
        const auto words = split_words(caption_from_template(spec, t));
        for (const auto& o : spec.objects) {
          CHECK(std::find(words.begin(), words.end(), std::string(color_name(o.color))) != words.end());
          CHECK(std::find(words.begin(), words.end(), std::string(shape_name(o.shape))) != words.end());
        }
      }
      // Captions are a deterministic function of the spec and template id.
      const auto rec = generate_scene(seed, cfg);
      for (int t = 0; t < kNumTemplates; ++t) CHECK(rec.captions[static_cast<std::size_t>(t)] == caption_from_template(spec, t));
    }
  }

  TEST_CASE("class histogram is close to uniform") {
    std::map<int, int> counts;
    int total = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      for (int label : generate_scene(seed, SceneConfig{}).labels) {
        ++counts[label];
        ++total;
      }
    }
    const double expected = double(total) / kNumShapeKinds;
    for (int c = 0; c < kNumShapeKinds; ++c) {
      CHECK(counts[c] >= 0.8 * expected);
      CHECK(counts[c] <= 1.2 * expected);
    }
  }

  TEST_CASE("image size must be divisible by 32") {
    SceneConfig cfg;
    cfg.image_size = 100;
    CHECK_THROWS_WITH_AS(generate_scene(0, cfg), doctest::Contains("32"), ConfigError);
  }

  TEST_CASE("rendering geometry") {
    SceneSpec empty;
    empty.image_size = 32;
    const auto blank = render_image(empty);
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) CHECK(is_background(blank, y, x));

    SceneSpec spec;
    spec.image_size = 32;
    spec.objects.push_back({ShapeKind::square, Color::red, {8, 8, 24, 24}});
    const auto img = render_image(spec);
    const auto red = color_rgb(Color::red);
    for (int c = 0; c < 3; ++c) CHECK(std::lround(img.at(16, 16, c) * 255) == red[static_cast<std::size_t>(c)]);
    CHECK(is_background(img, 0, 0));
    for (float v : img.pixels) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
  }

  TEST_CASE("rendered tight boxes match spec boxes within one pixel") {
    SceneConfig cfg;
    int checked = 0;
    for (std::uint64_t seed = 0; checked < 50; ++seed) {
      const auto spec = sample_scene(seed, cfg);
      for (const auto& o : spec.objects) {
        SceneSpec single{{o}, spec.image_size, spec.seed};
        const auto got = scan_box(render_image(single));
        CHECK(std::abs(got.x_min - o.box.x_min) <= 1.0);
        CHECK(std::abs(got.y_min - o.box.y_min) <= 1.0);
        CHECK(std::abs(got.x_max - o.box.x_max) <= 1.0);
        CHECK(std::abs(got.y_max - o.box.y_max) <= 1.0);
        ++checked;
      }
    }
  }

  TEST_CASE("tokenizer") {
    const auto vocab = Vocabulary::scene_default();
    const auto ids = tokenize("a red circle", vocab);
    CHECK(ids == std::vector<std::int64_t>{vocab.id("a"), vocab.id("red"), vocab.id("circle"), Vocabulary::kEnd});
    CHECK(tokenize("a zebra", vocab)[1] == Vocabulary::kUnk);
    CHECK(tokenize("", vocab) == std::vector<std::int64_t>{Vocabulary::kEnd});
    CHECK(vocab.token(0) == "<pad>");
    CHECK(vocab.token(3) == "<unk>");
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      for (const auto& c : generate_scene(seed, SceneConfig{}).captions) {
        const auto t = tokenize(c, vocab);
        CHECK(std::count(t.begin(), t.end(), Vocabulary::kUnk) == 0);
        CHECK(detokenize(t, vocab) == c);
      }
    }
  }

  TEST_CASE("vocabulary file") {
    testutil::TempDir dir("vocab");
    const auto vocab = Vocabulary::scene_default();
    vocab.save(dir / "vocab.txt");
    std::ifstream in(dir / "vocab.txt");
    std::vector<std::string> lines;
    for (std::string l; std::getline(in, l);) lines.push_back(l);
    REQUIRE(lines.size() == static_cast<std::size_t>(vocab.size()));
    CHECK(lines[0] == "<pad>");
    CHECK(lines[1] == "<start>");
    CHECK(lines[2] == "<end>");
    CHECK(lines[3] == "<unk>");
    CHECK(Vocabulary::load(dir / "vocab.txt") == vocab);
  }

  TEST_CASE("dataset round trip and determinism") {
    testutil::TempDir a("ds_a"), b("ds_b");
    const auto records = generate_dataset(42, 10, SceneConfig{});
    const auto manifest = write_dataset(records, a.path());
    CHECK((read_dataset(manifest) == records));
    write_dataset(generate_dataset(42, 10, SceneConfig{}), b.path());
    CHECK(read_file(manifest) == read_file(b / "manifest.jsonl"));
    CHECK(read_file(a / "images/scene_3.ppm") == read_file(b / "images/scene_3.ppm"));

    // Key order of the interface.
    std::ifstream in(manifest);
    std::string line;
    std::getline(in, line);
    CHECK(line.rfind("{\"id\":", 0) == 0);
    CHECK(line.find("\"image\"") < line.find("\"boxes\""));
    CHECK(line.find("\"labels\"") < line.find("\"captions\""));
  }

  TEST_CASE("manifest validation errors") {
    testutil::TempDir dir("bad_manifest");
    auto records = generate_dataset(1, 2, SceneConfig{});
    write_dataset(records, dir.path());
    auto entries = read_manifest(dir / "manifest.jsonl");
    entries[1].captions.pop_back();
    write_manifest(entries, dir / "four.jsonl");
    CHECK_THROWS_WITH_AS(read_manifest(dir / "four.jsonl"), doctest::Contains("exactly 5 captions"), DataError);
    CHECK_THROWS_WITH_AS(read_manifest(dir / "four.jsonl"), doctest::Contains(":2"), DataError);

    entries = read_manifest(dir / "manifest.jsonl");
    entries[0].image = "images/missing.ppm";
    write_manifest(entries, dir / "missing.jsonl");
    CHECK_THROWS_WITH_AS(read_dataset(dir / "missing.jsonl"), doctest::Contains(entries[0].id.c_str()), DataError);

    {
      std::ofstream bad(dir / "images/scene_1.ppm", std::ios::binary | std::ios::trunc);
      bad << "P3\n1 1\n255\n0 0 0\n";
    }
    CHECK_THROWS_WITH_AS(read_ppm(dir / "images/scene_1.ppm"), doctest::Contains("scene_1.ppm"), DataError);
  }

  TEST_CASE("ppm round trip") {
    testutil::TempDir dir("ppm");
    Image img(2, 3);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = float(i * 13 % 256) / 255.0f;
    write_ppm(dir / "x.ppm", img);
    const auto back = read_ppm(dir / "x.ppm");
    CHECK(back.height == 2);
    CHECK(back.width == 3);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) CHECK(back.pixels[i] == doctest::Approx(img.pixels[i]));
  }

  TEST_CASE("coco ingestion") {
    testutil::TempDir dir("coco");
    {
      std::ofstream ann(dir / "instances.json");
      ann << R"({"images":[{"id":5,"file_name":"five.jpg"},{"id":9,"file_name":"nine.jpg"},{"id":11,"file_name":"eleven.jpg"}],
                 "categories":[{"id":3,"name":"dog"},{"id":1,"name":"cat"}],
                 "annotations":[{"image_id":5,"category_id":3,"bbox":[10,20,30,40]},
                                {"image_id":9,"category_id":1,"bbox":[0,0,5,5]}]})";
      std::ofstream caps(dir / "captions.json");
      caps << R"({"annotations":[{"image_id":5,"caption":"A Dog."},{"image_id":5,"caption":"two"},
        {"image_id":5,"caption":"three"},{"image_id":5,"caption":"four"},{"image_id":5,"caption":"five"},
        {"image_id":5,"caption":"six"},{"image_id":5,"caption":"seven"},
        {"image_id":9,"caption":"a cat"},{"image_id":9,"caption":"the cat"}]})";
    }
    const auto result = ingest_coco(dir / "instances.json", dir / "imgs", dir / "captions.json");
    REQUIRE(result.entries.size() == 2);
    CHECK(result.skipped_without_captions == 1);
    CHECK(result.entries[0].id == "5");
    CHECK(result.entries[1].id == "9");
    CHECK(result.entries[0].boxes[0] == Box{10, 20, 40, 60});
    CHECK(result.entries[0].labels[0] == 1);  // categories sorted by id: cat=0, dog=1
    CHECK(result.entries[0].captions ==
          std::vector<std::string>{"a dog", "two", "three", "four", "five"});
    CHECK(result.entries[1].captions ==
          std::vector<std::string>{"a cat", "the cat", "the cat", "the cat", "the cat"});

    {
      std::ofstream ann(dir / "bad.json");
      ann << R"({"images":[{"id":1,"file_name":"a.jpg"}],"categories":[{"id":1,"name":"x"}],
                 "annotations":[{"image_id":1,"category_id":7,"bbox":[0,0,1,1]}]})";
    }
    CHECK_THROWS_WITH_AS(ingest_coco(dir / "bad.json", dir.path()), doctest::Contains("category"), DataError);
  }
}
