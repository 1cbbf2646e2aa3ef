#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace pulsediff {

// Bad inputs: violated preconditions, malformed configs, layout errors.
// The CLI maps these to exit code 2.
class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Failures during otherwise valid work (divergence, IO, incompatible
// checkpoints). The CLI maps these to exit code 3.
class RuntimeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline void check_arg(bool cond, const std::string& msg) {
    if (!cond) throw ValidationError(msg);
}

inline void check_state(bool cond, const std::string& msg) {
    if (!cond) throw RuntimeError(msg);
}

// Derives an independent RNG stream from a base seed and a purpose tag.
// Stable across platforms; every stochastic component gets its own stream
// so adding a consumer never shifts another one's draws.
std::uint64_t mix_seed(std::uint64_t base, std::string_view tag, std::uint64_t index = 0);

// 64-bit FNV-1a content hash as 16 hex chars; used to fingerprint resolved
// configs in manifests and checkpoints.
std::string content_hash(std::string_view data);

// Seeded CPU generator for torch::randn / torch::rand / randperm.
torch::Generator cpu_generator(std::uint64_t seed);

// Shape helper: "(2, 8, 4, 8, 8)" for error messages.
std::string shape_str(const torch::Tensor& t);
std::string shape_str(torch::IntArrayRef sizes);

inline void check_finite(const torch::Tensor& t, const std::string& what) {
    if (!torch::isfinite(t).all().item<bool>()) {
        throw RuntimeError(what + " contains non-finite values");
    }
}

}  // namespace pulsediff
