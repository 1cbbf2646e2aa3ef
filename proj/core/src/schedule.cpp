#include "pulsediff/schedule.hpp"

#include "pulsediff/common.hpp"

#include <cmath>

namespace pulsediff {

void NoiseSchedule::validate() const {
    check_arg(T >= 2, "NoiseSchedule: T must be >= 2");
    check_arg(betas.defined() && betas.numel() == T, "NoiseSchedule: betas has wrong length");
    check_arg(alphas.defined() && alphas.numel() == T, "NoiseSchedule: alphas has wrong length");
    check_arg(alpha_bars.defined() && alpha_bars.numel() == T,
              "NoiseSchedule: alpha_bars has wrong length");

    auto b = betas.accessor<double, 1>();
    auto a = alphas.accessor<double, 1>();
    auto ab = alpha_bars.accessor<double, 1>();
    double running = 1.0;
    double prev = 1.0;
    for (std::int64_t t = 0; t < T; ++t) {
        check_arg(b[t] > 0.0 && b[t] < 1.0, "NoiseSchedule: beta out of (0,1) at t=" + std::to_string(t));
        check_arg(std::abs(a[t] - (1.0 - b[t])) <= 1e-15, "NoiseSchedule: alpha != 1-beta");
        running *= a[t];
        check_arg(std::abs(ab[t] - running) <= 1e-12,
                  "NoiseSchedule: alpha_bar inconsistent with running product at t=" + std::to_string(t));
        check_arg(ab[t] > 0.0 && ab[t] < 1.0, "NoiseSchedule: alpha_bar out of (0,1)");
        check_arg(ab[t] < prev, "NoiseSchedule: alpha_bar not strictly decreasing");
        prev = ab[t];
    }
}

torch::Tensor NoiseSchedule::alpha_bar_at(const torch::Tensor& t, std::int64_t ndim) const {
    check_arg(t.dtype() == torch::kInt64, "step indices must be int64");
    check_arg((t >= 0).all().item<bool>() && (t < T).all().item<bool>(),
              "step index out of range [0, " + std::to_string(T) + ")");
    auto ab = alpha_bars.index_select(0, t.reshape({-1}));
    std::vector<std::int64_t> shape(static_cast<size_t>(ndim), 1);
    shape[0] = ab.numel();
    return ab.reshape(shape);
}

NoiseSchedule make_linear_schedule(std::int64_t T, double beta_start, double beta_end) {
    check_arg(T >= 2, "make_linear_schedule: T must be >= 2");
    check_arg(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
              "make_linear_schedule: need 0 < beta_start <= beta_end < 1");

    NoiseSchedule s;
    s.T = T;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    s.betas = torch::linspace(beta_start, beta_end, T, torch::kFloat64);
    s.alphas = 1.0 - s.betas;
    s.alpha_bars = torch::cumprod(s.alphas, 0);
    s.validate();
    return s;
}

}  // namespace pulsediff
