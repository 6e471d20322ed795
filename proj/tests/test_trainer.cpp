#include <doctest.h>

#include <fstream>
#include <set>

#include "capdet/error.hpp"
#include "capdet/evaluate.hpp"
#include "capdet/trainer.hpp"
#include "fixtures.hpp"
#include "test_util.hpp"

using namespace capdet;
using namespace capdet::trainer;

namespace {

detect::DetectionLoss det_loss(double a, double b, double c, double d) {
  auto s = [](double v) { return torch::tensor(v, torch::kFloat64); };
  detect::DetectionLoss l{s(a), s(b), s(c), s(d), {}};
  l.total = l.rpn_cls + l.rpn_reg + l.roi_cls + l.roi_reg;
  return l;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_SUITE("trainer") {
  TEST_CASE("joint loss arithmetic") {
    const auto det = det_loss(0.5, 0.25, 1.0, 0.25);
    auto cap = torch::tensor(3.0, torch::kFloat64);
    CHECK(joint_loss(det, cap, 0.2).total.item<double>() == doctest::Approx(2.6).epsilon(1e-15));
    CHECK(joint_loss(det, cap, 0.0).total.item<double>() == det.total.item<double>());
    CHECK(joint_loss(det, torch::Tensor(), 5.0).total.item<double>() == det.total.item<double>());
    CHECK_THROWS_AS(joint_loss(det, cap, -0.1), ConfigError);
    for (double lambda : sweep_lambdas()) CHECK_NOTHROW(joint_loss(det, cap, lambda));
    CHECK((sweep_lambdas() == std::vector<double>{0.01, 0.1, 0.2, 0.5, 10}));

    // Linearity in both arguments.
    const double t1 = joint_loss(det_loss(1, 2, 3, 4), torch::tensor(5.0, torch::kFloat64), 0.5).total.item<double>();
    const double t2 = joint_loss(det_loss(2, 4, 6, 8), torch::tensor(10.0, torch::kFloat64), 0.5).total.item<double>();
    CHECK(t2 == doctest::Approx(2 * t1).epsilon(1e-15));

    const auto b = breakdown(joint_loss(det, cap, 0.2));
    CHECK(b.caption.has_value());
    CHECK(b.total == doctest::Approx(b.detection_total() + 0.2 * *b.caption));
    CHECK(b.to_json(3).dump() ==
          R"({"step":3,"rpn_cls":0.5,"rpn_reg":0.25,"roi_cls":1.0,"roi_reg":0.25,"caption":3.0,"total":2.6,"lambda":0.2})");
    CHECK(LossBreakdown::from_json(nlohmann::json::parse(b.to_json(3).dump())) == b);
    CHECK(breakdown(joint_loss(det, torch::Tensor(), 0.2)).to_json(1)["caption"].is_null());
  }

  TEST_CASE("config defaults and validation") {
    TrainConfig c;
    CHECK(c.learning_rate == 1e-4);
    CHECK(c.weight_decay == 0.05);
    CHECK(c.lambda == 0.1);
    c.steps = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = TrainConfig{};
    c.lambda = -1;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    CHECK_THROWS_AS(parse_freeze_plan("everything"), ConfigError);
    for (auto p : {FreezePlan::none, FreezePlan::decoder_only, FreezePlan::backbone_and_decoder, FreezePlan::detection_only}) {
      CHECK(parse_freeze_plan(freeze_plan_name(p)) == p);
    }
    nlohmann::json j = TrainConfig{};
    CHECK(j.get<TrainConfig>().learning_rate == 1e-4);
  }

  TEST_CASE("partitions are disjoint and exhaustive") {
    auto model = make_model(testutil::fast_config(), 0);
    std::set<std::string> seen;
    std::size_t total = 0;
    for (auto p : {Partition::backbone, Partition::decoder, Partition::detection}) {
      for (auto& [name, t] : model->named_partition(p)) {
        CHECK(seen.insert(name).second);
        ++total;
      }
    }
    CHECK(total == model->named_parameters().size());
    CHECK(partition_of("backbone.patch_embed.proj.weight") == Partition::backbone);
    CHECK(partition_of("decoder.ln_f.weight") == Partition::decoder);
    CHECK(partition_of("fpn.lateral.0.weight") == Partition::detection);
    CHECK(partition_of("rpn.conv.weight") == Partition::detection);
    CHECK(partition_of("roi.fc1.weight") == Partition::detection);
    CHECK_THROWS_AS(partition_of("mystery.weight"), ConfigError);
  }

  TEST_CASE("freeze plans") {
    const auto data = testutil::scene_data(4, 64, 3);
    auto cfg = testutil::quick_train(10);
    auto run = [&](FreezePlan plan) {
      cfg.freeze_plan = plan;
      auto model = make_model(testutil::fast_config(), 1);
      const auto mask = apply_freeze_plan(*model, plan);
      std::vector<std::pair<std::string, torch::Tensor>> named;
      for (auto& p : model->named_parameters()) named.emplace_back(p.key(), p.value());
      AdamW opt(named, cfg);
      const auto theta = testutil::snapshot(*model, Partition::backbone);
      const auto phi = testutil::snapshot(*model, Partition::decoder);
      const auto psi = testutil::snapshot(*model, Partition::detection);
      std::vector<LossBreakdown> losses;
      for (int s = 0; s < 10; ++s) losses.push_back(train_step(*model, opt, make_batch(data, cfg, s), cfg, s));
      return std::tuple{testutil::unchanged(*model, Partition::backbone, theta),
                        testutil::unchanged(*model, Partition::decoder, phi),
                        testutil::unchanged(*model, Partition::detection, psi), losses, mask};
    };
    {
      auto [theta, phi, psi, losses, mask] = run(FreezePlan::decoder_only);
      CHECK(theta);
      CHECK(!phi);
      CHECK(psi);
      CHECK((mask.frozen == std::vector<Partition>{Partition::backbone, Partition::detection}));
    }
    {
      auto [theta, phi, psi, losses, mask] = run(FreezePlan::backbone_and_decoder);
      CHECK(!theta);
      CHECK(!phi);
      CHECK(psi);
    }
    {
      auto [theta, phi, psi, losses, mask] = run(FreezePlan::detection_only);
      CHECK(!theta);
      CHECK(phi);
      CHECK(!psi);
      for (const auto& l : losses) {
        CHECK(!l.caption.has_value());
        CHECK(l.lambda == 0.0);
      }
    }
    {
      auto [theta, phi, psi, losses, mask] = run(FreezePlan::none);
      CHECK(!theta);
      CHECK(!phi);
      CHECK(!psi);
      CHECK(mask.frozen.empty());
    }
  }

  TEST_CASE("zero learning rate leaves parameters and the loss stream unchanged") {
    const auto data = testutil::scene_data(4, 64, 4);
    auto cfg = testutil::quick_train(5);
    cfg.learning_rate = 0.0;
    auto model = make_model(testutil::fast_config(), 2);
    auto fresh = make_model(testutil::fast_config(), 2);
    std::vector<std::pair<std::string, torch::Tensor>> named;
    for (auto& p : model->named_parameters()) named.emplace_back(p.key(), p.value());
    AdamW opt(named, cfg);
    const auto all = testutil::snapshot(*model, Partition::backbone);
    for (int s = 0; s < 5; ++s) {
      const auto batch = make_batch(data, cfg, s);
      const auto got = train_step(*model, opt, batch, cfg, s);
      const auto want = breakdown(compute_loss(*fresh, batch, cfg, s));
      CHECK(got == want);
    }
    CHECK(testutil::unchanged(*model, Partition::backbone, all));
  }

  TEST_CASE("batches are a pure function of seed and step") {
    const auto data = testutil::scene_data(5, 64, 5);
    auto cfg = testutil::quick_train(10);
    for (int s = 0; s < 6; ++s) {
      const auto a = make_batch(data, cfg, s), b = make_batch(data, cfg, s);
      CHECK(a.indices == b.indices);
      CHECK(torch::equal(a.captions.target, b.captions.target));
    }
    // Every sample appears once per epoch, in the first two full batches plus a partial wrap.
    std::multiset<std::size_t> epoch;
    for (int s = 0; s < 2; ++s) {
      for (auto i : make_batch(data, cfg, s).indices) epoch.insert(i);
    }
    CHECK(epoch.size() == 4);
    CHECK(std::set<std::size_t>(epoch.begin(), epoch.end()).size() == 4);
  }

  TEST_CASE("training runs are deterministic and resumable") {
    const auto data = testutil::scene_data(4, 64, 6);
    testutil::TempDir a("run_a"), b("run_b"), c("run_c");
    const auto model_cfg = testutil::fast_config();
    auto cfg = testutil::quick_train(12);
    cfg.checkpoint_every = 5;
    train(model_cfg, cfg, data, a.path());
    train(model_cfg, cfg, data, b.path());
    CHECK(read_file(a / "metrics.jsonl") == read_file(b / "metrics.jsonl"));
    CHECK(read_file(a / "checkpoint.bin") == read_file(b / "checkpoint.bin"));

    auto half = cfg;
    half.steps = 6;
    train(model_cfg, half, data, c.path());
    const auto resumed = train(model_cfg, cfg, data, c.path(), TrainOptions{true, {}, {}});
    CHECK(resumed.losses.size() == 6);
    CHECK(read_file(a / "metrics.jsonl") == read_file(c / "metrics.jsonl"));
    CHECK(read_file(a / "checkpoint.bin") == read_file(c / "checkpoint.bin"));

    const auto loaded = load_model(a / "checkpoint.bin");
    CHECK(loaded.step == 12);
    CHECK(loaded.vocab == data.vocab);
    CHECK(loaded.train_config.steps == 12);
    std::ifstream log(a / "metrics.jsonl");
    int lines = 0;
    for (std::string line; std::getline(log, line); ++lines) {
      const auto j = nlohmann::json::parse(line);
      CHECK(j["step"] == lines + 1);
      const auto l = LossBreakdown::from_json(j);
      CHECK(l.total == doctest::Approx(l.detection_total() + l.lambda * l.caption.value()).epsilon(1e-6));
    }
    CHECK(lines == 12);
  }

  TEST_CASE("data validation") {
    testutil::TempDir dir("empty");
    { std::ofstream(dir / "manifest.jsonl"); }
    CHECK_THROWS_AS(load_training_data(dir / "manifest.jsonl", scenegen::Vocabulary::scene_default(), 20), DataError);
    CHECK_THROWS_AS(training_data_from_records({}, scenegen::Vocabulary::scene_default(), 20), DataError);
    const auto data = testutil::scene_data(2, 64, 1);
    auto wrong = testutil::fast_config();
    wrong.decoder.vocab_size = 10;
    CHECK_THROWS_AS(train(wrong, testutil::quick_train(1), data, dir / "out"), ConfigError);
  }

  TEST_CASE("non-finite losses name the offending term") {
    const auto data = testutil::scene_data(2, 64, 2);
    auto model = make_model(testutil::fast_config(), 3);
    {
      torch::NoGradGuard g;
      for (auto& t : model->partition_parameters(Partition::decoder)) t.fill_(std::nan(""));
    }
    const auto cfg = testutil::quick_train(1);
    CHECK_THROWS_WITH_AS(compute_loss(*model, make_batch(data, cfg, 0), cfg, 0), doctest::Contains("caption"),
                         NumericError);
  }

  TEST_CASE("gradient structure of the joint loss") {
    const auto data = testutil::scene_data(2, 64, 8);
    auto model = make_model(testutil::fast_config(), 4);
    model->to(torch::kFloat64);
    auto cfg = testutil::quick_train(1);
    const auto batch = make_batch(data, cfg, 0);
    auto grads = [&](double lambda) {
      cfg.lambda = lambda;
      model->zero_grad();
      compute_loss(*model, batch, cfg, 0).total.backward();
      std::map<std::string, torch::Tensor> out;
      for (auto& p : model->named_parameters()) {
        out[p.key()] = p.value().grad().defined() ? p.value().grad().clone() : torch::zeros_like(p.value());
      }
      return out;
    };
    auto small = grads(0.1), large = grads(10.0);
    double psi_err = 0.0, phi_err = 0.0;
    for (auto& [name, g] : small) {
      const auto part = partition_of(name);
      if (part == Partition::detection) {
        psi_err = std::max(psi_err, ((large[name] - g).norm() / g.norm().clamp_min(1e-300)).item<double>());
      } else if (part == Partition::decoder) {
        phi_err = std::max(phi_err, ((large[name] - 100.0 * g).norm() / (100.0 * g).norm().clamp_min(1e-300)).item<double>());
      }
    }
    CHECK(psi_err <= 1e-9);
    CHECK(phi_err <= 1e-6);
  }

  TEST_CASE("single batch training decreases the loss window by window") {
    const auto data = testutil::scene_data(2, 64, 9);
    auto cfg = testutil::quick_train(300);
    cfg.caption_reference = 0;
    testutil::TempDir dir("decrease");
    const auto res = train(testutil::fast_config(), cfg, data, dir.path());
    std::vector<double> means;
    for (std::size_t w = 0; w < 6; ++w) {
      double s = 0.0;
      for (std::size_t i = w * 50; i < (w + 1) * 50; ++i) s += res.losses[i].total;
      means.push_back(s / 50);
    }
    for (std::size_t w = 1; w < means.size(); ++w) {
      CAPTURE(w);
      CHECK(means[w] < means[w - 1]);
    }
  }
}
