#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <optional>
#include <string>

namespace pulsediff {

// The six multimodal conditions. Four local (spatially aligned maps), two
// global (text prompt, image prior).
enum class Condition : int {
    kSketch = 0,
    kMask = 1,
    kMvSkeleton = 2,
    kFlow = 3,
    kText = 4,
    kImagePrior = 5,
};

inline constexpr int kNumConditions = 6;
inline constexpr int kNumMaskLabels = 4;  // 0=bg, 1=chamber, 2=myocardium, 3=valve

extern const std::array<const char*, kNumConditions> kConditionNames;

// Parses "sketch", "mask", "mv_skeleton", "flow", "text", "image_prior".
Condition condition_from_name(const std::string& name);

// Container for one batch worth of conditions. Absent conditions carry an
// undefined tensor (or nullopt text) and a false presence flag.
//
//   sketch       (B, 1, H, W)      static edge map
//   mask         (B, F, 1, H, W)   integer semantic labels, stored as float
//   mv_skeleton  (B, F, 2, H, W)   ch0 skeleton polyline, ch1 motion stroke
//   flow         (B, F-1, 2, H, W) pixel displacements (u, v) per frame pair
//   text         prompt string shared by the batch
//   image_prior  (B, 1, H, W)      single reference frame
struct ConditionBundle {
    torch::Tensor sketch;
    torch::Tensor mask;
    torch::Tensor mv_skeleton;
    torch::Tensor flow;
    std::optional<std::string> text;
    torch::Tensor image_prior;
    std::array<bool, kNumConditions> present{};

    bool has(Condition c) const { return present[static_cast<int>(c)]; }
    void set_absent(Condition c);
    bool any_present() const;

    // Checks flag/field consistency, shared (B, H, W), mask label range and
    // the F-1 flow length. expected_frames < 0 skips the frame-count check.
    void validate(std::int64_t expected_frames = -1) const;

    // Batch size from the first present tensor field; 0 if fully null.
    std::int64_t batch_size() const;
};

// Independently absents each condition with its probability, and with
// drop_all_prob absents everything (the classifier-free null). Exactly
// seven uniform draws are consumed per call regardless of outcomes, so the
// decision vector depends only on the seed.
ConditionBundle drop_conditions(const ConditionBundle& bundle,
                                const std::array<double, kNumConditions>& drop_probs,
                                double drop_all_prob,
                                std::uint64_t rng_seed);

// Channel-order contract: latent channels first, condition channels second.
// z (B, F, C_lat, h, w) + feats (B, F, C_cond, h, w) -> (B, F, C_lat+C_cond, h, w).
torch::Tensor concat_with_latent(const torch::Tensor& z, const torch::Tensor& feats);

enum class CondStage { kImage, kVideo };

struct LocalCondConfig {
    std::int64_t image_size = 32;     // H = W
    std::int64_t downsample = 4;      // latent h = H / downsample (power of two)
    std::int64_t cond_channels = 4;   // C_cond, matches C_lat by default
    std::int64_t width = 32;          // hidden width of each encoder
};

// One lightweight condition encoder: stride-2 conv stack down to latent
// resolution. Every condition uses this same architecture with its own
// weights; only in_channels differs.
class LocalConditionEncoderImpl : public torch::nn::Module {
public:
    LocalConditionEncoderImpl(std::int64_t in_channels, const LocalCondConfig& cfg);

    // (N, in_channels, H, W) -> (N, C_cond, h, w)
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::nn::Sequential net_;
};
TORCH_MODULE(LocalConditionEncoder);

// The four per-condition encoders plus addition-fusion. The flow encoder
// exists only in the video stage (it is the stage-2 addition).
class LocalConditionStackImpl : public torch::nn::Module {
public:
    LocalConditionStackImpl(const LocalCondConfig& cfg, CondStage stage);

    // Fused local feature map (B, F, C_cond, h, w). Absent conditions
    // contribute zeros; sketch is broadcast across F; flow (F-1 slices)
    // is right-padded with one zero slice before encoding.
    torch::Tensor encode_local(const ConditionBundle& bundle, std::int64_t batch,
                               std::int64_t frames);

    const LocalCondConfig& config() const { return cfg_; }
    CondStage stage() const { return stage_; }

private:
    LocalCondConfig cfg_;
    CondStage stage_;
    LocalConditionEncoder sketch_encoder_{nullptr};
    LocalConditionEncoder mask_encoder_{nullptr};
    LocalConditionEncoder mv_encoder_{nullptr};
    LocalConditionEncoder flow_encoder_{nullptr};
};
TORCH_MODULE(LocalConditionStack);

}  // namespace pulsediff
