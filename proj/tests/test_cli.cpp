#include <doctest.h>

#include <sys/wait.h>

#include <fstream>
#include <sstream>

#include "capdet/model.hpp"
#include "capdet/scenegen.hpp"
#include "fixtures.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Run capdet_cli(const std::string& args, const testutil::TempDir& scratch) {
  const auto out = scratch / "stdout.txt", err = scratch / "stderr.txt";
  const std::string cmd = std::string(CAPDET_CLI_PATH) + " " + args + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

int count_lines(const fs::path& p) {
  std::ifstream in(p);
  int n = 0;
  for (std::string l; std::getline(in, l);) ++n;
  return n;
}

// Tiny model config for CLI runs on 32x32 scenes.
fs::path write_tiny_config(const fs::path& dir) {
  nlohmann::json j = {{"model", testutil::fast_config(32)}, {"train", {{"steps", 4}, {"checkpoint_every", 2}}}};
  std::ofstream(dir / "tiny.json") << j.dump(2);
  return dir / "tiny.json";
}

bool same_tree(const fs::path& a, const fs::path& b) {
  std::vector<fs::path> fa, fb;
  for (const auto& e : fs::recursive_directory_iterator(a)) fa.push_back(fs::relative(e.path(), a));
  for (const auto& e : fs::recursive_directory_iterator(b)) fb.push_back(fs::relative(e.path(), b));
  std::sort(fa.begin(), fa.end());
  std::sort(fb.begin(), fb.end());
  if (fa != fb) return false;
  for (const auto& rel : fa) {
    if (fs::is_regular_file(a / rel) && slurp(a / rel) != slurp(b / rel)) return false;
  }
  return true;
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("usage errors exit with 1") {
    testutil::TempDir t("cli_usage");
    CHECK(capdet_cli("", t).code == 1);
    CHECK(capdet_cli("frobnicate", t).code == 1);
    const auto r = capdet_cli("gen-data --out " + (t / "d").string() + " --image-size 100", t);
    CHECK(r.code == 1);
    CHECK(r.err.find("32") != std::string::npos);
    CHECK(capdet_cli("train --out " + (t / "r").string() + " --lambda -1 --data " + (t / "d").string(), t).code == 1);
    CHECK(capdet_cli("train --out " + (t / "r").string() + " --freeze-plan sideways", t).code == 1);
  }

  TEST_CASE("gen-data writes deterministic manifests") {
    testutil::TempDir t("cli_gen");
    const auto r = capdet_cli("gen-data --out " + (t / "a").string() + " --num-train 8 --num-val 4 --seed 3 --image-size 32", t);
    REQUIRE(r.code == 0);
    CHECK(r.out.find("train: 8") != std::string::npos);
    CHECK(count_lines(t / "a/train/manifest.jsonl") == 8);
    CHECK(count_lines(t / "a/val/manifest.jsonl") == 4);
    CHECK(capdet::scenegen::Vocabulary::load(t / "a/vocab.txt") == capdet::scenegen::Vocabulary::scene_default());
    REQUIRE(capdet_cli("gen-data --out " + (t / "b").string() + " --num-train 8 --num-val 4 --seed 3 --image-size 32", t).code == 0);
    CHECK(same_tree(t / "a", t / "b"));
  }

  TEST_CASE("train, eval, infer and report") {
    testutil::TempDir t("cli_flow");
    const auto cfg = write_tiny_config(t.path());
    const auto data = (t / "data").string();
    REQUIRE(capdet_cli("gen-data --out " + data + " --num-train 4 --num-val 2 --seed 1 --image-size 32", t).code == 0);

    // Missing manifest: runtime failure, no run directory content.
    auto r = capdet_cli("train --config " + cfg.string() + " --manifest " + (t / "nope.jsonl").string() + " --out " +
                            (t / "bad").string(),
                        t);
    CHECK(r.code == 2);
    CHECK(!fs::exists(t / "bad/checkpoint.bin"));

    r = capdet_cli("train --config " + cfg.string() + " --data " + data + " --lambda 0.2 --out " + (t / "run").string(), t);
    REQUIRE(r.code == 0);
    for (const char* f : {"config.json", "checkpoint.bin", "metrics.jsonl", "report.csv", "report.json", "overlays"}) {
      CHECK(fs::exists(t / "run" / f));
    }
    {
      std::ifstream log(t / "run/metrics.jsonl");
      int n = 0;
      for (std::string line; std::getline(log, line); ++n) {
        const auto j = nlohmann::json::parse(line);
        CHECK(j["lambda"] == 0.2);
        std::vector<std::string> keys;
        for (auto it = j.begin(); it != j.end(); ++it) keys.push_back(it.key());
        CHECK(line.rfind("{\"step\":", 0) == 0);
        CHECK(j.size() == 8);
      }
      CHECK(n == 4);
    }

    // Feeding the echoed config back reproduces the run.
    r = capdet_cli("train --config " + (t / "run/config.json").string() + " --out " + (t / "again").string(), t);
    REQUIRE(r.code == 0);
    CHECK(slurp(t / "run/metrics.jsonl") == slurp(t / "again/metrics.jsonl"));
    CHECK(slurp(t / "run/config.json") == slurp(t / "again/config.json"));

    r = capdet_cli("train --config " + cfg.string() + " --data " + data + " --freeze-plan decoder_only --no-eval --out " +
                       (t / "frozen").string(),
                   t);
    REQUIRE(r.code == 0);
    CHECK(r.err.find("frozen partitions theta, psi") != std::string::npos);

    // Eval twice gives identical bytes.
    const auto ckpt = (t / "run/checkpoint.bin").string();
    const auto val = data + "/val/manifest.jsonl";
    REQUIRE(capdet_cli("eval --checkpoint " + ckpt + " --manifest " + val + " --out " + (t / "e1").string(), t).code == 0);
    REQUIRE(capdet_cli("eval --checkpoint " + ckpt + " --manifest " + val + " --out " + (t / "e2").string() +
                           " --dump-matches",
                       t)
                .code == 0);
    CHECK(slurp(t / "e1/report.csv") == slurp(t / "e2/report.csv"));
    CHECK(slurp(t / "e1/report.csv").rfind("B1,B2,B3,B4,RougeL,CIDEr,mAP,AP50,AP75,AP_S,AP_M,AP_L\n", 0) == 0);
    CHECK(fs::exists(t / "e2/matches.jsonl"));
    CHECK(count_lines(t / "e1/captions.jsonl") == 2);

    // Inference with and without the detection branch.
    const auto image = data + "/val/images/val_0.ppm";
    r = capdet_cli("infer --checkpoint " + ckpt + " --image " + image + " --detect off --out " + (t / "inf").string(), t);
    REQUIRE(r.code == 0);
    auto j = nlohmann::json::parse(r.out);
    CHECK(j.contains("caption"));
    CHECK(!j.contains("detections"));
    r = capdet_cli("infer --checkpoint " + ckpt + " --image " + image + " --out " + (t / "inf").string(), t);
    REQUIRE(r.code == 0);
    j = nlohmann::json::parse(r.out);
    CHECK(j.contains("detections"));
    CHECK(fs::exists(t / "inf/overlays/val_0.ppm"));
    const auto beam1 = nlohmann::json::parse(
        capdet_cli("infer --checkpoint " + ckpt + " --image " + image + " --beam 1 --detect off --out " + (t / "inf").string(), t).out);
    CHECK(beam1["caption"].is_string());

    capdet::Image odd(40, 32);
    capdet::write_ppm(t / "odd.ppm", odd);
    r = capdet_cli("infer --checkpoint " + ckpt + " --image " + (t / "odd.ppm").string(), t);
    CHECK(r.code != 0);
    CHECK(r.err.find("32") != std::string::npos);

    // Report over three runs, then over an empty directory.
    fs::create_directories(t / "runs");
    for (const char* name : {"run", "again", "frozen"}) fs::copy(t / name, t / "runs" / name, fs::copy_options::recursive);
    fs::copy_file(t / "e1/report.csv", t / "runs/frozen/report.csv", fs::copy_options::overwrite_existing);
    r = capdet_cli("report --runs-dir " + (t / "runs").string(), t);
    REQUIRE(r.code == 0);
    CHECK(count_lines(t / "runs/summary.csv") == 4);
    CHECK(slurp(t / "runs/summary.csv").find("decoder_only") != std::string::npos);
    fs::create_directories(t / "empty");
    CHECK(capdet_cli("report --runs-dir " + (t / "empty").string(), t).code == 2);
  }
}

#include "capdet/evaluate.hpp"

TEST_SUITE("cli") {
  TEST_CASE("inference without detection never touches the detection branch") {
    auto model = capdet::make_model(testutil::fast_config(32), 5);
    model->eval();
    const auto before = model->detection_accesses();
    const auto vocab = capdet::scenegen::Vocabulary::scene_default();
    const auto img = torch::rand({3, 32, 32});
    const auto off = capdet::metrics::infer(*model, img, vocab, {5, false});
    CHECK(model->detection_accesses() == before);
    CHECK(!off.detections.has_value());
    const auto on = capdet::metrics::infer(*model, img, vocab, {5, true});
    CHECK(model->detection_accesses() > before);
    CHECK(on.detections.has_value());
    CHECK(on.caption_text == off.caption_text);
  }
}
