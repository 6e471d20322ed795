#include <doctest.h>

#include <fstream>

#include "capdet/checkpoint.hpp"
#include "capdet/error.hpp"
#include "capdet/model.hpp"
#include "test_util.hpp"

using namespace capdet;

TEST_SUITE("checkpoint") {
  TEST_CASE("round trip of tensors and metadata") {
    testutil::TempDir dir("ckpt");
    Checkpoint ck;
    ck.tensors.emplace_back("a.weight", torch::randn({3, 4}));
    ck.tensors.emplace_back("b.bias", torch::arange(5, torch::kFloat32));
    ck.tensors.emplace_back("scalar", torch::tensor(2.5f));
    ck.meta = {{"step", 7}, {"note", "x"}};
    save_checkpoint(dir / "c.bin", ck);
    CHECK(!std::filesystem::exists(dir / "c.bin.tmp"));
    const auto back = load_checkpoint(dir / "c.bin");
    REQUIRE(back.tensors.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(back.tensors[i].first == ck.tensors[i].first);
      CHECK(testutil::bitwise_equal(back.tensors[i].second, ck.tensors[i].second));
    }
    CHECK(back.meta == ck.meta);
    CHECK(back.find("b.bias") != nullptr);
    CHECK(back.find("nope") == nullptr);

    // Header layout: u64 little-endian length, then JSON with dtype/shape/offset.
    std::ifstream in(dir / "c.bin", std::ios::binary);
    unsigned char len_bytes[8];
    in.read(reinterpret_cast<char*>(len_bytes), 8);
    std::uint64_t len = 0;
    for (int i = 7; i >= 0; --i) len = len << 8 | len_bytes[i];
    std::string header(len, '\0');
    in.read(header.data(), static_cast<std::streamsize>(len));
    const auto j = nlohmann::json::parse(header);
    CHECK(j["a.weight"]["dtype"] == "f32");
    CHECK(j["a.weight"]["shape"] == nlohmann::json::array({3, 4}));
    CHECK(j["a.weight"]["offset"] == 0);
    CHECK(j["b.bias"]["offset"] == 48);
    CHECK(j["__meta__"]["step"] == 7);
    float payload[5];
    in.seekg(static_cast<std::streamoff>(8 + len + 48));
    in.read(reinterpret_cast<char*>(payload), sizeof(payload));
    CHECK(payload[3] == 3.0f);
  }

  TEST_CASE("model parameters survive a round trip") {
    testutil::TempDir dir("ckpt_model");
    auto a = make_model(micro_config(), 1);
    auto b = make_model(micro_config(), 2);
    Checkpoint ck;
    ck.tensors = module_tensors(*a);
    save_checkpoint(dir / "m.bin", ck);
    load_into(*b, load_checkpoint(dir / "m.bin"));
    auto pa = a->named_parameters(), pb = b->named_parameters();
    for (const auto& item : pa) CHECK(torch::equal(item.value(), pb[item.key()]));
    bool prefixes = true;
    for (const auto& [name, t] : ck.tensors) {
      prefixes = prefixes && (name.rfind("backbone.", 0) == 0 || name.rfind("decoder.", 0) == 0 ||
                              name.rfind("fpn.", 0) == 0 || name.rfind("rpn.", 0) == 0 || name.rfind("roi.", 0) == 0);
    }
    CHECK(prefixes);

    auto other = micro_config();
    other.detect.roi_hidden = 32;
    auto c = make_model(other, 3);
    CHECK_THROWS_AS(load_into(*c, load_checkpoint(dir / "m.bin")), DataError);
  }

  TEST_CASE("truncated and malformed files") {
    testutil::TempDir dir("ckpt_bad");
    Checkpoint ck;
    ck.tensors.emplace_back("w", torch::randn({16}));
    save_checkpoint(dir / "ok.bin", ck);
    const auto size = std::filesystem::file_size(dir / "ok.bin");
    std::filesystem::copy_file(dir / "ok.bin", dir / "short.bin");
    std::filesystem::resize_file(dir / "short.bin", size - 4);
    CHECK_THROWS_AS(load_checkpoint(dir / "short.bin"), DataError);
    { std::ofstream(dir / "junk.bin") << "not a checkpoint at all"; }
    CHECK_THROWS_AS(load_checkpoint(dir / "junk.bin"), DataError);
    CHECK_THROWS_AS(load_checkpoint(dir / "missing.bin"), DataError);
  }
}
