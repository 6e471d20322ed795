#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "capdet/boxes.hpp"
#include "capdet/error.hpp"

using namespace capdet;

namespace {

Box random_box(std::mt19937_64& rng, double extent) {
  std::uniform_real_distribution<double> pos(0.0, extent), size(1.0, extent / 2);
  const double x = pos(rng), y = pos(rng);
  return {x, y, x + size(rng), y + size(rng)};
}

// Rule-by-rule reference for anchor labelling.
AnchorMatch match_oracle(const std::vector<Box>& anchors, const std::vector<Box>& gts, double pos, double neg) {
  AnchorMatch m;
  for (const auto& a : anchors) {
    double best = -1.0;
    int arg = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (iou(a, gts[g]) > best) {
        best = iou(a, gts[g]);
        arg = static_cast<int>(g);
      }
    }
    m.gt_index.push_back(gts.empty() ? -1 : arg);
    m.max_iou.push_back(gts.empty() ? 0.0 : best);
    MatchLabel label = MatchLabel::ignore;
    if (gts.empty() || best < neg) label = MatchLabel::negative;
    if (!gts.empty() && best >= pos) label = MatchLabel::positive;
    m.labels.push_back(label);
  }
  for (const auto& g : gts) {
    double best = 0.0;
    for (const auto& a : anchors) best = std::max(best, iou(a, g));
    if (best <= 0.0) continue;
    for (std::size_t i = 0; i < anchors.size(); ++i) {
      if (iou(anchors[i], g) == best) m.labels[i] = MatchLabel::positive;
    }
  }
  return m;
}

// Greedy NMS written as repeated arg-max selection.
std::vector<Detection> nms_oracle(std::vector<Detection> remaining, double thr) {
  std::vector<Detection> kept;
  while (!remaining.empty()) {
    auto best = remaining.begin();
    for (auto it = remaining.begin(); it != remaining.end(); ++it) {
      const auto key = [](const Detection& d) {
        return std::make_tuple(-d.score, d.box.x_min, d.box.y_min, d.box.x_max, d.box.y_max, d.class_id);
      };
      if (key(*it) < key(*best)) best = it;
    }
    const Detection chosen = *best;
    kept.push_back(chosen);
    std::vector<Detection> next;
    for (auto it = remaining.begin(); it != remaining.end(); ++it) {
      if (it == best) continue;
      if (it->class_id == chosen.class_id && iou(it->box, chosen.box) > thr) continue;
      next.push_back(*it);
    }
    remaining = std::move(next);
  }
  return kept;
}

}  // namespace

TEST_SUITE("boxes") {
  TEST_CASE("iou of hand fixtures") {
    const Box a{0, 0, 2, 2}, b{1, 1, 3, 3};
    CHECK(iou(a, a) == doctest::Approx(1.0));
    CHECK(iou(a, Box{5, 5, 6, 6}) == 0.0);
    CHECK(iou(a, b) == doctest::Approx(1.0 / 7.0).epsilon(1e-12));
    CHECK(iou(a, b) == iou(b, a));
    CHECK(iou(a, Box{1, 1, 1, 3}) == 0.0);
  }

  TEST_CASE("smooth l1 is quadratic then linear") {
    CHECK(smooth_l1(0.0, 0.0, 1.0) == 0.0);
    CHECK(smooth_l1(0.5, 0.0, 1.0) == doctest::Approx(0.125));
    CHECK(smooth_l1(3.0, 0.0, 1.0) == doctest::Approx(2.5));
    const double eps = 1e-7;
    CHECK(smooth_l1(1.0 - eps, 0.0, 1.0) == doctest::Approx(smooth_l1(1.0 + eps, 0.0, 1.0)).epsilon(1e-6));
    const double left = (smooth_l1(1.0, 0.0, 1.0) - smooth_l1(1.0 - eps, 0.0, 1.0)) / eps;
    const double right = (smooth_l1(1.0 + eps, 0.0, 1.0) - smooth_l1(1.0, 0.0, 1.0)) / eps;
    CHECK(left == doctest::Approx(right).epsilon(1e-5));
  }

  TEST_CASE("delta encoding") {
    const Box anchor{0, 0, 10, 10};
    const auto zero = encode_delta(anchor, anchor);
    CHECK(zero.dx == 0.0);
    CHECK(zero.dw == 0.0);
    const auto d = encode_delta(anchor, Box{0, 0, 20, 20});
    CHECK(d.dx == doctest::Approx(0.5));
    CHECK(d.dy == doctest::Approx(0.5));
    CHECK(d.dw == doctest::Approx(std::log(2.0)));
    CHECK(d.dh == doctest::Approx(std::log(2.0)));
    CHECK_THROWS_AS(encode_delta(Box{1, 1, 1, 5}, anchor), ConfigError);

    std::mt19937_64 rng(11);
    for (int i = 0; i < 1000; ++i) {
      const Box ref = random_box(rng, 100.0), target = random_box(rng, 100.0);
      const DeltaStd stds{0.1, 0.1, 0.2, 0.2};
      const auto back = decode_delta(ref, denormalize_delta(normalize_delta(encode_delta(ref, target), stds), stds));
      CHECK(std::abs(back.x_min - target.x_min) < 1e-5);
      CHECK(std::abs(back.y_min - target.y_min) < 1e-5);
      CHECK(std::abs(back.x_max - target.x_max) < 1e-5);
      CHECK(std::abs(back.y_max - target.y_max) < 1e-5);
    }
  }

  TEST_CASE("nms fixtures") {
    CHECK(nms({{{0, 0, 4, 4}, 0, 0.5}}, 0.5).size() == 1);
    const auto kept = nms({{{0, 0, 4, 4}, 1, 0.8}, {{0, 0, 4, 4}, 1, 0.9}}, 0.5);
    REQUIRE(kept.size() == 1);
    CHECK(kept[0].score == 0.9);
    CHECK(nms({{{0, 0, 4, 4}, 0, 0.8}, {{0, 0, 4, 4}, 1, 0.9}}, 0.5).size() == 2);
  }

  TEST_CASE("nms equals the greedy oracle on random sets") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> score(0.0, 1.0);
    for (int trial = 0; trial < 300; ++trial) {
      std::vector<Detection> dets;
      const int n = 1 + static_cast<int>(rng() % 8);
      for (int i = 0; i < n; ++i) {
        // Coarse scores force ties.
        dets.push_back({random_box(rng, 20.0), static_cast<int>(rng() % 2), std::round(score(rng) * 4) / 4});
      }
      const auto got = nms(dets, 0.3);
      const auto want = nms_oracle(dets, 0.3);
      REQUIRE(got.size() == want.size());
      for (std::size_t i = 0; i < got.size(); ++i) {
        CHECK(got[i].box == want[i].box);
        CHECK(got[i].score == want[i].score);
        CHECK(got[i].class_id == want[i].class_id);
      }
    }
  }

  TEST_CASE("anchor layout") {
    const auto set = generate_anchors({{2, 3, 8}, {1, 1, 16}}, {0.5, 1.0, 2.0}, 4.0);
    CHECK(set.size() == 2 * 3 * 3 + 1 * 1 * 3);
    CHECK(set.level_offsets == std::vector<std::int64_t>{0, 18, 21});
    // (y=0, x=1, ratio 1): centre (12, 4), side 32.
    const Box b = set.boxes[1 * 3 + 1];
    CHECK((b.x_min + b.x_max) / 2 == doctest::Approx(12.0));
    CHECK((b.y_min + b.y_max) / 2 == doctest::Approx(4.0));
    CHECK(b.width() == doctest::Approx(32.0));
    const Box tall = set.boxes[2];
    CHECK(tall.height() / tall.width() == doctest::Approx(2.0));
    CHECK(tall.area() == doctest::Approx(32.0 * 32.0));
    CHECK(set.boxes[0].x_min < 0.0);  // anchors may cross the border
  }

  TEST_CASE("anchor matching rules") {
    const std::vector<Box> anchors{{0, 0, 10, 10}, {20, 20, 30, 30}, {0, 0, 9, 10}};
    auto m = match_anchors(anchors, {{0, 0, 10, 10}}, 0.7, 0.3);
    CHECK(m.labels[0] == MatchLabel::positive);
    CHECK(m.gt_index[0] == 0);
    CHECK(m.labels[1] == MatchLabel::negative);
    CHECK(m.labels[2] == MatchLabel::positive);

    m = match_anchors(anchors, {}, 0.7, 0.3);
    CHECK(std::count(m.labels.begin(), m.labels.end(), MatchLabel::positive) == 0);
    CHECK_THROWS_AS(match_anchors(anchors, {}, 0.3, 0.3), ConfigError);

    // A gt overlapping nothing above threshold still gets its best anchor.
    m = match_anchors(anchors, {{25, 25, 40, 40}}, 0.7, 0.3);
    CHECK(m.labels[1] == MatchLabel::positive);
  }

  TEST_CASE("anchor matching equals the rule oracle") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 300; ++trial) {
      std::vector<Box> anchors, gts;
      const int na = 1 + static_cast<int>(rng() % 16), ng = static_cast<int>(rng() % 4);
      for (int i = 0; i < na; ++i) anchors.push_back(random_box(rng, 16.0));
      for (int i = 0; i < ng; ++i) gts.push_back(random_box(rng, 16.0));
      // Duplicate an anchor now and then so maxima tie.
      if (na > 1 && rng() % 3 == 0) anchors.back() = anchors.front();
      const auto got = match_anchors(anchors, gts, 0.5, 0.2);
      const auto want = match_oracle(anchors, gts, 0.5, 0.2);
      CHECK((got.labels == want.labels));
      CHECK(got.gt_index == want.gt_index);
    }
  }
}
