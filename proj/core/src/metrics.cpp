#include "pulsediff/metrics.hpp"

#include "pulsediff/common.hpp"

#include <cmath>
#include <limits>

namespace pulsediff {

namespace {

torch::Tensor gaussian_window() {
    constexpr double kSigma = 1.5;
    auto x = torch::arange(7, torch::kFloat64) - 3.0;
    auto g = torch::exp(-torch::square(x) / (2.0 * kSigma * kSigma));
    g /= g.sum();
    return torch::outer(g, g).reshape({1, 1, 7, 7});
}

}  // namespace

double ssim(const torch::Tensor& a, const torch::Tensor& b) {
    check_arg(a.dim() == 4 && a.size(1) == 1, "ssim: expected (N, 1, H, W)");
    check_arg(a.sizes() == b.sizes(), "ssim: shape mismatch " + shape_str(a.sizes()) + " vs " +
                                          shape_str(b.sizes()));
    check_arg(a.size(2) >= 7 && a.size(3) >= 7, "ssim: images smaller than the 7x7 window");
    constexpr double kC1 = 0.01 * 0.01;
    constexpr double kC2 = 0.03 * 0.03;

    auto x = a.to(torch::kFloat64);
    auto y = b.to(torch::kFloat64);
    auto w = gaussian_window();
    auto mu_x = torch::conv2d(x, w);
    auto mu_y = torch::conv2d(y, w);
    auto var_x = torch::conv2d(x * x, w) - mu_x * mu_x;
    auto var_y = torch::conv2d(y * y, w) - mu_y * mu_y;
    auto cov = torch::conv2d(x * y, w) - mu_x * mu_y;

    auto map = ((2.0 * mu_x * mu_y + kC1) * (2.0 * cov + kC2)) /
               ((mu_x * mu_x + mu_y * mu_y + kC1) * (var_x + var_y + kC2));
    return map.mean().item<double>();
}

double psnr(const torch::Tensor& a, const torch::Tensor& b, double peak) {
    check_arg(a.sizes() == b.sizes(), "psnr: shape mismatch");
    check_arg(peak > 0.0, "psnr: peak must be positive");
    const double mse =
        torch::mean(torch::square(a.to(torch::kFloat64) - b.to(torch::kFloat64)))
            .item<double>();
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / mse);
}

GaussianStats fit_gaussian(const torch::Tensor& features) {
    check_arg(features.dim() == 2, "fit_gaussian: expected (N, D)");
    const auto n = features.size(0);
    check_arg(n >= 2, "fit_gaussian: need at least 2 samples, got " + std::to_string(n));
    check_finite(features, "fit_gaussian features");
    auto x = features.to(torch::kFloat64);
    GaussianStats s;
    s.mean = x.mean(0);
    auto centered = x - s.mean.unsqueeze(0);
    s.cov = centered.t().matmul(centered) / static_cast<double>(n - 1) +
            1e-6 * torch::eye(x.size(1), torch::kFloat64);
    return s;
}

namespace {

// Symmetric PSD square root; eigenvalues only slightly negative from
// round-off are treated as zero.
torch::Tensor psd_sqrt(const torch::Tensor& m, const char* what) {
    auto sym = 0.5 * (m + m.t());
    auto [evals, evecs] = torch::linalg_eigh(sym);
    const double emax = evals.abs().max().item<double>();
    const double tol = 1e-8 * std::max(1.0, emax);
    if ((evals < -tol).any().item<bool>())
        throw RuntimeError(std::string(what) + " is not positive semi-definite (min eigenvalue " +
                           std::to_string(evals.min().item<double>()) + ")");
    auto root = torch::sqrt(evals.clamp_min(0.0));
    return evecs.matmul(torch::diag(root)).matmul(evecs.t());
}

}  // namespace

double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
    check_arg(a.mean.dim() == 1 && b.mean.dim() == 1 && a.mean.size(0) == b.mean.size(0),
              "frechet_distance: mean dimension mismatch");
    const auto d = a.mean.size(0);
    check_arg(a.cov.sizes() == torch::IntArrayRef({d, d}) &&
                  b.cov.sizes() == torch::IntArrayRef({d, d}),
              "frechet_distance: covariance shape mismatch");
    auto mu1 = a.mean.to(torch::kFloat64), mu2 = b.mean.to(torch::kFloat64);
    auto c1 = a.cov.to(torch::kFloat64), c2 = b.cov.to(torch::kFloat64);

    const double mean_term = torch::square(mu1 - mu2).sum().item<double>();
    auto s1 = psd_sqrt(c1, "first covariance");
    auto inner = psd_sqrt(s1.matmul(c2).matmul(s1), "covariance product");
    const double trace_term = (torch::trace(c1) + torch::trace(c2)).item<double>() -
                              2.0 * torch::trace(inner).item<double>();
    return mean_term + trace_term;
}

namespace {

class RandConvImageEmbedder : public ImageEmbedder {
 public:
    explicit RandConvImageEmbedder(std::uint64_t seed) {
        torch::manual_seed(mix_seed(seed, "embed.image"));
        conv1_ = torch::nn::Conv2d(torch::nn::Conv2dOptions(1, 16, 3).stride(2).padding(1));
        conv2_ = torch::nn::Conv2d(torch::nn::Conv2dOptions(16, 32, 3).stride(2).padding(1));
        for (auto& p : conv1_->parameters()) p.set_requires_grad(false);
        for (auto& p : conv2_->parameters()) p.set_requires_grad(false);
    }

    std::string id() const override { return "img-embed:randconv-v1"; }

    torch::Tensor embed(const torch::Tensor& images) const override {
        check_arg(images.dim() == 4 && images.size(1) == 1,
                  "image embedder: expected (N, 1, H, W)");
        check_arg(images.size(2) >= 8 && images.size(3) >= 8,
                  "image embedder: images must be at least 8x8");
        check_finite(images, "image embedder input");
        torch::NoGradGuard no_grad;
        auto h = torch::tanh(conv1_->forward(images.to(torch::kFloat32)));
        h = torch::tanh(conv2_->forward(h));
        h = torch::adaptive_avg_pool2d(h, {2, 2});
        return h.flatten(1);  // (N, 128)
    }

 private:
    // embed() is logically const; libtorch's forward() is not.
    mutable torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
};

class FrameDiffVideoEmbedder : public VideoEmbedder {
 public:
    explicit FrameDiffVideoEmbedder(std::shared_ptr<ImageEmbedder> frames)
        : frames_(std::move(frames)) {}

    std::string id() const override { return "vid-embed:framediff-v1[" + frames_->id() + "]"; }

    torch::Tensor embed(const torch::Tensor& videos) const override {
        check_arg(videos.dim() == 5 && videos.size(2) == 1,
                  "video embedder: expected (N, F, 1, H, W)");
        const auto n = videos.size(0), f = videos.size(1);
        auto flat = videos.reshape({n * f, 1, videos.size(3), videos.size(4)});
        auto feats = frames_->embed(flat).reshape({n, f, -1});
        auto mean = feats.mean(1);
        auto motion = f > 1 ? (feats.slice(1, 1) - feats.slice(1, 0, f - 1)).abs().mean(1)
                            : torch::zeros_like(mean);
        return torch::cat({mean, motion}, 1);  // (N, 2D)
    }

 private:
    std::shared_ptr<ImageEmbedder> frames_;
};

}  // namespace

std::shared_ptr<ImageEmbedder> make_default_image_embedder(std::uint64_t seed) {
    return std::make_shared<RandConvImageEmbedder>(seed);
}

std::shared_ptr<VideoEmbedder> make_default_video_embedder(std::uint64_t seed) {
    return std::make_shared<FrameDiffVideoEmbedder>(make_default_image_embedder(seed));
}

double fid(const torch::Tensor& real, const torch::Tensor& fake, const ImageEmbedder& embedder) {
    return frechet_distance(fit_gaussian(embedder.embed(real)),
                            fit_gaussian(embedder.embed(fake)));
}

double fvd(const torch::Tensor& real, const torch::Tensor& fake, const VideoEmbedder& embedder) {
    return frechet_distance(fit_gaussian(embedder.embed(real)),
                            fit_gaussian(embedder.embed(fake)));
}

}  // namespace pulsediff
