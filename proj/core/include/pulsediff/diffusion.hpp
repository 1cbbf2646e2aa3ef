#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <vector>

#include "pulsediff/conditions.hpp"
#include "pulsediff/schedule.hpp"

namespace pulsediff {

// Noise predictor interface: eps_theta(z_t, c, t).
// z_t (B, F, C_lat, h, w), t (B,) int64 step indices, returns a tensor
// shaped like z_t.
class Denoiser {
public:
    virtual ~Denoiser() = default;
    virtual torch::Tensor predict(const torch::Tensor& z_t, const torch::Tensor& t,
                                  const ConditionBundle& c) = 0;
};

// Closed-form forward marginal z_t = sqrt(abar_t) z0 + sqrt(1-abar_t) eps.
// t holds one step index per batch entry.
torch::Tensor q_sample(const torch::Tensor& z0, const torch::Tensor& t, const torch::Tensor& eps,
                       const NoiseSchedule& schedule);

// Epsilon-prediction objective: mean squared deviation between eps and
// eps_theta(q_sample(z0, t, eps), c, t). Differentiable w.r.t. model params.
torch::Tensor training_loss(Denoiser& model, const torch::Tensor& z0, const ConditionBundle& c,
                            const torch::Tensor& t, const torch::Tensor& eps,
                            const NoiseSchedule& schedule);

// Classifier-free guidance: eps_hat = eps_uncond + scale * (eps_cond - eps_uncond).
// scale 0 gives the unconditional prediction, scale 1 the conditional one;
// at those endpoints only the needed branch is evaluated.
struct GuidanceSpec {
    double scale = 1.0;
    ConditionBundle null_bundle;  // default: everything absent
};

// Ancestral DDPM sampler, t = T-1 .. 0, reverse variance sigma_t^2 = beta_t.
// Fully deterministic given the seed. Throws RuntimeError if any
// intermediate latent goes non-finite.
//
// Draw order contract (for reproducibility and oracles): the initial latent
// is drawn first, then one noise tensor per step while t > 0.
torch::Tensor ddpm_sample(Denoiser& model, const std::vector<std::int64_t>& shape,
                          const ConditionBundle& c, const NoiseSchedule& schedule,
                          const GuidanceSpec& guidance, std::uint64_t seed);

}  // namespace pulsediff
