#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <memory>
#include <string>

namespace pulsediff {

// Mean SSIM between two image batches (N, 1, H, W) with values in [0, 1].
// 7x7 Gaussian window (sigma 1.5), C1 = 0.01^2, C2 = 0.03^2, computed in
// double precision. ssim(x, x) is exactly 1.0.
double ssim(const torch::Tensor& a, const torch::Tensor& b);

// PSNR in dB over all elements; `peak` is the value range (2.0 for [-1, 1]
// data). Identical inputs give +inf.
double psnr(const torch::Tensor& a, const torch::Tensor& b, double peak = 2.0);

// Moment-matched Gaussian over a feature cloud.
struct GaussianStats {
    torch::Tensor mean;  // (D,) float64
    torch::Tensor cov;   // (D, D) float64
};

// Sample mean and unbiased covariance of `features` (N, D), N >= 2, with
// 1e-6 * I added to the covariance so downstream matrix square roots stay
// well conditioned for degenerate clouds.
GaussianStats fit_gaussian(const torch::Tensor& features);

// Squared Frechet distance between two Gaussians:
//   |mu1 - mu2|^2 + tr(C1 + C2 - 2 (C1^1/2 C2 C1^1/2)^1/2)
// Matrix square roots go through symmetric eigendecompositions; eigenvalues
// mildly negative from round-off are clamped to zero, anything worse is an
// error.
double frechet_distance(const GaussianStats& a, const GaussianStats& b);

// Feature extractors behind the distribution metrics. Implementations must
// be deterministic for a fixed construction seed, and id() must change
// whenever the features would, so reports stay comparable.
class ImageEmbedder {
 public:
    virtual ~ImageEmbedder() = default;
    virtual std::string id() const = 0;
    // (N, 1, H, W) -> (N, D)
    virtual torch::Tensor embed(const torch::Tensor& images) const = 0;
};

class VideoEmbedder {
 public:
    virtual ~VideoEmbedder() = default;
    virtual std::string id() const = 0;
    // (N, F, 1, H, W) -> (N, D)
    virtual torch::Tensor embed(const torch::Tensor& videos) const = 0;
};

// Frozen random two-layer conv net ("img-embed:randconv-v1").
std::shared_ptr<ImageEmbedder> make_default_image_embedder(std::uint64_t seed = 0);

// Per-frame image features reduced to [mean over frames, mean abs frame
// difference] ("vid-embed:framediff-v1"); sensitive to temporal order.
std::shared_ptr<VideoEmbedder> make_default_video_embedder(std::uint64_t seed = 0);

// Frechet distance between embedded real and generated sets.
double fid(const torch::Tensor& real, const torch::Tensor& fake, const ImageEmbedder& embedder);
double fvd(const torch::Tensor& real, const torch::Tensor& fake, const VideoEmbedder& embedder);

}  // namespace pulsediff
