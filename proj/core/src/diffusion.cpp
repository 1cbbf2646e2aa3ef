#include "pulsediff/diffusion.hpp"

#include "pulsediff/common.hpp"

#include <cmath>

namespace pulsediff {

torch::Tensor q_sample(const torch::Tensor& z0, const torch::Tensor& t, const torch::Tensor& eps,
                       const NoiseSchedule& schedule) {
    check_arg(z0.defined() && eps.defined(), "q_sample: undefined input");
    check_arg(z0.sizes() == eps.sizes(), "q_sample: eps shape " + shape_str(eps) +
                                             " does not match z0 shape " + shape_str(z0));
    check_arg(t.numel() == z0.size(0), "q_sample: need one step index per batch entry");
    auto abar = schedule.alpha_bar_at(t, z0.dim()).to(z0.dtype());
    return torch::sqrt(abar) * z0 + torch::sqrt(1.0 - abar) * eps;
}

torch::Tensor training_loss(Denoiser& model, const torch::Tensor& z0, const ConditionBundle& c,
                            const torch::Tensor& t, const torch::Tensor& eps,
                            const NoiseSchedule& schedule) {
    auto z_t = q_sample(z0, t, eps, schedule);
    auto eps_hat = model.predict(z_t, t, c);
    check_arg(eps_hat.sizes() == eps.sizes(),
              "training_loss: model output shape " + shape_str(eps_hat) +
                  " does not match noise shape " + shape_str(eps));
    return torch::mean(torch::square(eps_hat - eps));
}

torch::Tensor ddpm_sample(Denoiser& model, const std::vector<std::int64_t>& shape,
                          const ConditionBundle& c, const NoiseSchedule& schedule,
                          const GuidanceSpec& guidance, std::uint64_t seed) {
    check_arg(!shape.empty(), "ddpm_sample: empty shape");
    check_arg(guidance.scale >= 0.0, "ddpm_sample: guidance scale must be nonnegative");
    schedule.validate();

    torch::NoGradGuard no_grad;
    auto gen = cpu_generator(seed);
    auto x = torch::randn(shape, gen, torch::kFloat32);
    const std::int64_t B = shape[0];

    auto abar = schedule.alpha_bars.accessor<double, 1>();
    auto beta = schedule.betas.accessor<double, 1>();
    auto alpha = schedule.alphas.accessor<double, 1>();

    for (std::int64_t t = schedule.T - 1; t >= 0; --t) {
        auto t_batch = torch::full({B}, t, torch::kInt64);

        torch::Tensor eps_hat;
        if (guidance.scale == 1.0) {
            eps_hat = model.predict(x, t_batch, c);
        } else if (guidance.scale == 0.0) {
            eps_hat = model.predict(x, t_batch, guidance.null_bundle);
        } else {
            auto eps_uncond = model.predict(x, t_batch, guidance.null_bundle);
            auto eps_cond = model.predict(x, t_batch, c);
            eps_hat = eps_uncond + guidance.scale * (eps_cond - eps_uncond);
        }
        check_arg(eps_hat.sizes() == x.sizes(), "ddpm_sample: model output shape mismatch");

        const double coef = beta[t] / std::sqrt(1.0 - abar[t]);
        x = (x - coef * eps_hat) / std::sqrt(alpha[t]);
        if (t > 0) {
            auto noise = torch::randn(shape, gen, torch::kFloat32);
            x = x + std::sqrt(beta[t]) * noise;
        }
        if (!torch::isfinite(x).all().item<bool>()) {
            throw RuntimeError("ddpm_sample: non-finite latent at step t=" + std::to_string(t) +
                               " (sampler diverged)");
        }
    }
    return x;
}

}  // namespace pulsediff
