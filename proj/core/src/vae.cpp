#include "pulsediff/vae.hpp"

#include "pulsediff/attention.hpp"
#include "pulsediff/common.hpp"

#include <cmath>
#include <random>

namespace pulsediff {

namespace {

class VaeResBlockImpl : public torch::nn::Module {
public:
    explicit VaeResBlockImpl(std::int64_t channels) {
        norm1 = register_module("norm1", torch::nn::GroupNorm(torch::nn::GroupNormOptions(
                                             norm_groups_for(channels), channels)));
        conv1 = register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(
                                             channels, channels, 3).padding(1)));
        norm2 = register_module("norm2", torch::nn::GroupNorm(torch::nn::GroupNormOptions(
                                             norm_groups_for(channels), channels)));
        conv2 = register_module("conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(
                                             channels, channels, 3).padding(1)));
    }

    torch::Tensor forward(const torch::Tensor& x) {
        auto h = conv1(torch::silu(norm1(x)));
        h = conv2(torch::silu(norm2(h)));
        return x + h;
    }

private:
    torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
    torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
};
TORCH_MODULE(VaeResBlock);

std::int64_t stages_for(std::int64_t downsample) {
    std::int64_t s = 0;
    while ((std::int64_t{1} << s) < downsample) ++s;
    return s;
}

}  // namespace

void VAEConfig::validate() const {
    check_arg(latent_channels >= 1, "VAEConfig: latent_channels must be positive");
    check_arg(downsample >= 2 && (downsample & (downsample - 1)) == 0,
              "VAEConfig: downsample must be a power of two >= 2");
    check_arg(base_channels >= 1, "VAEConfig: base_channels must be positive");
    check_arg(kl_weight >= 0.0, "VAEConfig: kl_weight must be >= 0");
}

VAEImpl::VAEImpl(const VAEConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    const auto stages = stages_for(cfg_.downsample);
    const auto b = cfg_.base_channels;

    enc_ = torch::nn::Sequential();
    std::int64_t ch = b;
    enc_->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(1, ch, 3).padding(1)));
    enc_->push_back(VaeResBlock(ch));
    for (std::int64_t s = 0; s < stages; ++s) {
        enc_->push_back(torch::nn::Conv2d(
            torch::nn::Conv2dOptions(ch, ch * 2, 3).stride(2).padding(1)));
        ch *= 2;
        enc_->push_back(VaeResBlock(ch));
    }
    enc_->push_back(torch::nn::GroupNorm(torch::nn::GroupNormOptions(norm_groups_for(ch), ch)));
    enc_->push_back(torch::nn::SiLU());
    enc_->push_back(torch::nn::Conv2d(
        torch::nn::Conv2dOptions(ch, cfg_.latent_channels * 2, 3).padding(1)));
    register_module("enc", enc_);

    dec_ = torch::nn::Sequential();
    dec_->push_back(torch::nn::Conv2d(
        torch::nn::Conv2dOptions(cfg_.latent_channels, ch, 3).padding(1)));
    dec_->push_back(VaeResBlock(ch));
    for (std::int64_t s = 0; s < stages; ++s) {
        dec_->push_back(torch::nn::Upsample(
            torch::nn::UpsampleOptions().scale_factor(std::vector<double>{2.0, 2.0})
                .mode(torch::kNearest)));
        dec_->push_back(torch::nn::Conv2d(
            torch::nn::Conv2dOptions(ch, ch / 2, 3).padding(1)));
        ch /= 2;
        dec_->push_back(VaeResBlock(ch));
    }
    dec_->push_back(torch::nn::GroupNorm(torch::nn::GroupNormOptions(norm_groups_for(ch), ch)));
    dec_->push_back(torch::nn::SiLU());
    dec_->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(ch, 1, 3).padding(1)));
    register_module("dec", dec_);
}

std::pair<torch::Tensor, torch::Tensor> VAEImpl::moments(const torch::Tensor& frames) {
    check_arg(frames.dim() == 4 && frames.size(1) == 1,
              "VAE: expected frames (N, 1, H, W), got " + shape_str(frames));
    check_arg(frames.size(2) % cfg_.downsample == 0 && frames.size(3) % cfg_.downsample == 0,
              "VAE: H and W must be divisible by the downsample factor " +
                  std::to_string(cfg_.downsample));
    check_arg(frames.size(2) / cfg_.downsample >= 4 && frames.size(3) / cfg_.downsample >= 4,
              "VAE: latent spatial dims must be >= 4");
    auto both = enc_->forward(frames);
    auto mu = both.narrow(1, 0, cfg_.latent_channels);
    auto logvar = both.narrow(1, cfg_.latent_channels, cfg_.latent_channels).clamp(-30.0, 20.0);
    return {mu, logvar};
}

torch::Tensor VAEImpl::reconstruct_raw(const torch::Tensor& z) {
    check_arg(z.dim() == 4 && z.size(1) == cfg_.latent_channels,
              "VAE: expected latents (N, C_lat, h, w), got " + shape_str(z));
    return dec_->forward(z);
}

torch::Tensor VAEImpl::encode(const torch::Tensor& x) {
    check_arg(x.dim() == 5 && x.size(2) == 1,
              "VAE: expected clip (B, F, 1, H, W), got " + shape_str(x));
    const auto B = x.size(0), F = x.size(1), H = x.size(3), W = x.size(4);
    auto mu = moments(x.reshape({B * F, 1, H, W})).first;
    return mu.reshape({B, F, cfg_.latent_channels, H / cfg_.downsample, W / cfg_.downsample});
}

torch::Tensor VAEImpl::decode(const torch::Tensor& z) {
    check_arg(z.dim() == 5 && z.size(2) == cfg_.latent_channels,
              "VAE: expected latent clip (B, F, C_lat, h, w), got " + shape_str(z));
    const auto B = z.size(0), F = z.size(1), h = z.size(3), w = z.size(4);
    auto px = reconstruct_raw(z.reshape({B * F, cfg_.latent_channels, h, w})).clamp(-1.0, 1.0);
    return px.reshape({B, F, 1, h * cfg_.downsample, w * cfg_.downsample});
}

VAETrainLog train_vae(VAE& vae, const torch::Tensor& frames, const VAETrainOptions& opts) {
    check_arg(frames.defined() && frames.dim() == 4 && frames.size(0) >= 1,
              "train_vae: dataset must provide at least one frame");
    check_arg(opts.steps >= 1 && opts.batch_size >= 1, "train_vae: steps and batch_size >= 1");

    const auto N = frames.size(0);
    const double kl_weight = vae->config().kl_weight;
    torch::optim::Adam optim(vae->parameters(), torch::optim::AdamOptions(opts.lr));
    std::mt19937_64 pick(mix_seed(opts.seed, "vae.batch"));
    auto noise_gen = cpu_generator(mix_seed(opts.seed, "vae.noise"));

    VAETrainLog log;
    for (std::int64_t step = 0; step < opts.steps; ++step) {
        std::vector<std::int64_t> idx(opts.batch_size);
        for (auto& i : idx) i = static_cast<std::int64_t>(pick() % static_cast<std::uint64_t>(N));
        auto batch = frames.index_select(0, torch::tensor(idx, torch::kInt64));

        auto [mu, logvar] = vae->moments(batch);
        auto eps = torch::randn(mu.sizes(), noise_gen, mu.options());
        auto z = mu + torch::exp(0.5 * logvar) * eps;
        auto recon = vae->reconstruct_raw(z);

        auto recon_loss = torch::mean(torch::square(recon - batch));
        // KL(q || N(0,I)) summed over latent dims, averaged over the batch.
        auto kl = 0.5 * torch::sum(mu.square() + logvar.exp() - 1.0 - logvar) /
                  static_cast<double>(batch.size(0));
        auto loss = kl_weight == 0.0 ? recon_loss : recon_loss + kl_weight * kl;

        optim.zero_grad();
        loss.backward();
        optim.step();

        log.loss.push_back(loss.item<double>());
        log.recon_loss.push_back(recon_loss.item<double>());
    }
    return log;
}

}  // namespace pulsediff
