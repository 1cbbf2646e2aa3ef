#include "pulsediff/common.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <iomanip>
#include <sstream>

namespace pulsediff {

namespace {

constexpr std::uint64_t kFnvOffset = 14695981039346656037ull;
constexpr std::uint64_t kFnvPrime = 1099511628211ull;

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t base, std::string_view tag, std::uint64_t index) {
    std::uint64_t h = kFnvOffset;
    for (char c : tag) {
        h ^= static_cast<unsigned char>(c);
        h *= kFnvPrime;
    }
    return splitmix64(base ^ splitmix64(h ^ splitmix64(index)));
}

std::string content_hash(std::string_view data) {
    std::uint64_t h = kFnvOffset;
    for (char c : data) {
        h ^= static_cast<unsigned char>(c);
        h *= kFnvPrime;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

torch::Generator cpu_generator(std::uint64_t seed) {
    auto gen = at::detail::createCPUGenerator();
    gen.set_current_seed(seed);
    return gen;
}

std::string shape_str(torch::IntArrayRef sizes) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < sizes.size(); ++i) {
        if (i) os << ", ";
        os << sizes[i];
    }
    os << ")";
    return os.str();
}

std::string shape_str(const torch::Tensor& t) {
    if (!t.defined()) return "(undefined)";
    return shape_str(t.sizes());
}

}  // namespace pulsediff
