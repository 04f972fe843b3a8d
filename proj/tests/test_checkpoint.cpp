// Weight-container format: round trips, corruption detection, and the
// atomic write protocol.
#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "usketch/checkpoint.hpp"
#include "usketch/rng.hpp"

using namespace usketch;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::MessageMatches;

namespace {

namespace fs = std::filesystem;

Checkpoint sample_checkpoint(uint64_t seed) {
    Rng rng(seed);
    Checkpoint ck;
    ck.meta = {{"kind", "test"}, {"labels", {"a", "b"}}, {"nested", {{"x", 1}, {"y", 2.5}}}};
    Tensor<float> w(3, 4, 5), b(1, 1, 3);
    for (auto& v : w.v) v = static_cast<float>(rng.normal());
    for (auto& v : b.v) v = static_cast<float>(rng.normal());
    ck.blocks.emplace_back("layer.weight", std::move(w));
    ck.blocks.emplace_back("layer.bias", std::move(b));
    return ck;
}

std::vector<char> slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    REQUIRE(is.good());
    return std::vector<char>(std::istreambuf_iterator<char>(is),
                             std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const std::vector<char>& bytes) {
    std::ofstream os(path, std::ios::binary);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

struct Scratch {
    fs::path dir = "ckpt_scratch";
    Scratch() {
        fs::remove_all(dir);
        fs::create_directories(dir);
    }
    std::string operator/(const std::string& name) const { return (dir / name).string(); }
};

}  // namespace

TEST_CASE("checkpoints round trip bitwise", "[checkpoint]") {
    Scratch scratch;
    const Checkpoint ck = sample_checkpoint(42);
    const std::string path = scratch / "a.ckpt";
    save_checkpoint(ck, path);

    const Checkpoint back = load_checkpoint(path);
    REQUIRE(back.meta == ck.meta);
    REQUIRE(back.blocks.size() == ck.blocks.size());
    for (size_t i = 0; i < ck.blocks.size(); ++i) {
        REQUIRE(back.blocks[i].first == ck.blocks[i].first);   // order preserved
        REQUIRE(back.blocks[i].second.c == ck.blocks[i].second.c);
        REQUIRE(back.blocks[i].second.h == ck.blocks[i].second.h);
        REQUIRE(back.blocks[i].second.w == ck.blocks[i].second.w);
        REQUIRE(back.blocks[i].second.v == ck.blocks[i].second.v);  // bit-exact floats
    }

    SECTION("block lookup by name") {
        REQUIRE(back.has_block("layer.bias"));
        REQUIRE_FALSE(back.has_block("layer.gamma"));
        REQUIRE(back.block("layer.weight").v == ck.blocks[0].second.v);
        REQUIRE_THROWS_MATCHES(back.block("layer.gamma"), IncompatibilityError,
                               MessageMatches(ContainsSubstring("missing block")));
    }
}

TEST_CASE("checkpoint saves are byte-deterministic and atomic", "[checkpoint]") {
    Scratch scratch;
    const Checkpoint ck = sample_checkpoint(7);
    save_checkpoint(ck, scratch / "x1.ckpt");
    save_checkpoint(ck, scratch / "x2.ckpt");
    REQUIRE(slurp(scratch / "x1.ckpt") == slurp(scratch / "x2.ckpt"));

    // The write-then-rename protocol leaves no temporary behind, and
    // re-saving over an existing file works.
    REQUIRE_FALSE(fs::exists(scratch / "x1.ckpt.tmp"));
    save_checkpoint(sample_checkpoint(8), scratch / "x1.ckpt");
    REQUIRE(load_checkpoint(scratch / "x1.ckpt").block("layer.weight").v ==
            sample_checkpoint(8).blocks[0].second.v);
}

TEST_CASE("corrupt checkpoint files are rejected", "[checkpoint]") {
    Scratch scratch;
    const std::string good_path = scratch / "good.ckpt";
    save_checkpoint(sample_checkpoint(3), good_path);
    const std::vector<char> good = slurp(good_path);

    SECTION("missing file") {
        REQUIRE_THROWS_MATCHES(load_checkpoint(scratch / "absent.ckpt"), IoError,
                               MessageMatches(ContainsSubstring("cannot open")));
    }

    SECTION("wrong magic") {
        std::vector<char> bad = good;
        bad[0] = 'X';
        spit(scratch / "magic.ckpt", bad);
        REQUIRE_THROWS_MATCHES(load_checkpoint(scratch / "magic.ckpt"), IoError,
                               MessageMatches(ContainsSubstring("not a checkpoint")));
    }

    SECTION("unsupported format version") {
        std::vector<char> bad = good;
        bad[8] = 99;  // version field follows the 8-byte magic
        spit(scratch / "version.ckpt", bad);
        REQUIRE_THROWS_MATCHES(load_checkpoint(scratch / "version.ckpt"), IncompatibilityError,
                               MessageMatches(ContainsSubstring("format version 99")));
    }

    SECTION("corrupt metadata") {
        std::vector<char> bad = good;
        // The JSON document starts right after magic+version+length.
        bad[8 + 4 + 8] = '!';
        spit(scratch / "meta.ckpt", bad);
        REQUIRE_THROWS_MATCHES(load_checkpoint(scratch / "meta.ckpt"), IoError,
                               MessageMatches(ContainsSubstring("corrupt metadata")));
    }

    SECTION("truncation at every prefix is caught") {
        // Cutting the file anywhere must produce a clean error, never a
        // silent partial load. Step through a spread of prefix lengths.
        for (size_t cut = 4; cut < good.size() - 1; cut += 97) {
            std::vector<char> bad(good.begin(), good.begin() + static_cast<long>(cut));
            const std::string path = scratch / "trunc.ckpt";
            spit(path, bad);
            INFO("prefix " << cut << " of " << good.size());
            REQUIRE_THROWS_AS(load_checkpoint(path), Error);
        }
    }

    SECTION("whole file intact loads fine") {
        REQUIRE_NOTHROW(load_checkpoint(good_path));
    }
}
