#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <string>

namespace pulsediff {

// Precomputed beta/alpha/alpha_bar sequences driving forward and reverse
// diffusion. Arrays are float64 and indexed by step t in [0, T).
struct NoiseSchedule {
    std::int64_t T = 0;
    torch::Tensor betas;       // (T,) in (0,1)
    torch::Tensor alphas;      // 1 - beta_t
    torch::Tensor alpha_bars;  // running product of alphas, strictly decreasing

    // Serialized form inside checkpoints: {T, beta_start, beta_end, family}.
    double beta_start = 0.0;
    double beta_end = 0.0;
    std::string family = "linear";

    void validate() const;

    // alpha_bar values for per-batch step indices, reshaped to broadcast
    // against a tensor with `ndim` dimensions: (B, 1, 1, ...).
    torch::Tensor alpha_bar_at(const torch::Tensor& t, std::int64_t ndim) const;
};

NoiseSchedule make_linear_schedule(std::int64_t T, double beta_start, double beta_end);

}  // namespace pulsediff
