#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <vector>

namespace pulsediff {

struct VAEConfig {
    std::int64_t latent_channels = 4;  // C_lat
    std::int64_t downsample = 4;       // f_ds, power of two
    std::int64_t base_channels = 32;
    double kl_weight = 1e-6;

    void validate() const;
};

// Compact convolutional VAE providing the latent space. Fully
// convolutional: any H, W divisible by the downsample factor works, and
// frames are encoded independently (fold F into batch), so clips are never
// mixed across time.
class VAEImpl : public torch::nn::Module {
public:
    explicit VAEImpl(const VAEConfig& cfg);

    // (B, F, 1, H, W) in [-1,1] -> distribution mean (B, F, C_lat, h, w).
    // Deterministic; this is the encoding diffusion trains on.
    torch::Tensor encode(const torch::Tensor& x);

    // (B, F, C_lat, h, w) -> (B, F, 1, H, W), clamped to [-1, 1].
    torch::Tensor decode(const torch::Tensor& z);

    // Training-path pieces on folded frame batches (N, 1, H, W):
    // posterior moments and the unclamped reconstruction.
    std::pair<torch::Tensor, torch::Tensor> moments(const torch::Tensor& frames);
    torch::Tensor reconstruct_raw(const torch::Tensor& z);  // (N, C_lat, h, w) -> (N, 1, H, W)

    const VAEConfig& config() const { return cfg_; }

private:
    VAEConfig cfg_;
    torch::nn::Sequential enc_{nullptr}, dec_{nullptr};
};
TORCH_MODULE(VAE);

struct VAETrainOptions {
    std::int64_t steps = 400;
    std::int64_t batch_size = 16;
    double lr = 1e-3;
    std::uint64_t seed = 0;
};

struct VAETrainLog {
    std::vector<double> loss;        // total objective per step
    std::vector<double> recon_loss;  // reconstruction term per step
};

// Minimizes reconstruction MSE + kl_weight * KL(q(z|x) || N(0,I)) on
// individual frames (N, 1, H, W). Deterministic given the seed.
VAETrainLog train_vae(VAE& vae, const torch::Tensor& frames, const VAETrainOptions& opts);

}  // namespace pulsediff
