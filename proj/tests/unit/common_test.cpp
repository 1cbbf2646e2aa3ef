#include <doctest.h>

#include <cstdint>
#include <set>
#include <string>

#include "pulsediff/common.hpp"

using namespace pulsediff;

TEST_SUITE("common") {

TEST_CASE("mix_seed is a pure function of its inputs") {
    CHECK(mix_seed(42, "train.noise", 3) == mix_seed(42, "train.noise", 3));
    CHECK(mix_seed(42, "train.noise", 3) != mix_seed(42, "train.noise", 4));
    CHECK(mix_seed(42, "train.noise") != mix_seed(42, "train.batch"));
    CHECK(mix_seed(42, "train.noise") != mix_seed(43, "train.noise"));
}

TEST_CASE("mix_seed streams do not collide across a realistic tag set") {
    std::set<std::uint64_t> seen;
    const char* tags[] = {"train.batch", "train.t",  "train.noise", "train.drop",
                          "inflate",     "sample",   "case",        "phantom.speckle",
                          "embed.image", "model.init"};
    for (std::uint64_t base = 0; base < 16; ++base)
        for (const char* tag : tags)
            for (std::uint64_t idx = 0; idx < 16; ++idx)
                CHECK(seen.insert(mix_seed(base, tag, idx)).second);
}

TEST_CASE("content_hash matches an independent FNV-1a computation") {
    // Reference implementation straight from the FNV-1a definition.
    auto reference = [](const std::string& s) {
        std::uint64_t h = 14695981039346656037ull;
        for (unsigned char c : s) {
            h ^= c;
            h *= 1099511628211ull;
        }
        char buf[17];
        std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
        return std::string(buf);
    };
    CHECK(content_hash("") == reference(""));
    CHECK(content_hash("a") == reference("a"));
    CHECK(content_hash("{\"steps\":200}") == reference("{\"steps\":200}"));
    CHECK(content_hash("") == "cbf29ce484222325");  // the FNV offset basis
}

TEST_CASE("cpu_generator reproduces draws for a fixed seed") {
    auto a = torch::randn({16}, cpu_generator(99));
    auto b = torch::randn({16}, cpu_generator(99));
    auto c = torch::randn({16}, cpu_generator(100));
    CHECK(torch::equal(a, b));
    CHECK_FALSE(torch::equal(a, c));
}

TEST_CASE("check_finite flags NaN and Inf") {
    CHECK_NOTHROW(check_finite(torch::ones({4}), "x"));
    auto bad = torch::ones({4});
    bad[2] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(check_finite(bad, "x"), RuntimeError);
    bad[2] = std::numeric_limits<float>::infinity();
    CHECK_THROWS_AS(check_finite(bad, "x"), RuntimeError);
}

TEST_CASE("shape_str formats sizes for diagnostics") {
    CHECK(shape_str(torch::zeros({2, 8, 4})) == "(2, 8, 4)");
}

}  // TEST_SUITE
