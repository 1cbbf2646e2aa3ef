#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pulsediff/conditions.hpp"
#include "pulsediff/diffusion.hpp"
#include "pulsediff/global_conditions.hpp"
#include "pulsediff/unet.hpp"

namespace pulsediff {

struct ModelConfig {
    UNetConfig unet;
    LocalCondConfig local;
    GlobalCondConfig global;
    bool video = false;
    std::int64_t frames = 1;  // F the model is trained with (1 for image stage)

    void validate() const;  // cross-module consistency checks
};

// The conditional denoiser: local-condition encoders feeding channel
// concatenation, global-condition tokens feeding the cross-attention
// layers, and the UNet. Implements the noise-predictor interface used by
// the diffusion core.
class DiffusionModelImpl : public torch::nn::Module, public Denoiser {
public:
    explicit DiffusionModelImpl(const ModelConfig& cfg);

    // z_t (B, F, C_lat, h, w), t (B,), c validated against F.
    torch::Tensor predict(const torch::Tensor& z_t, const torch::Tensor& t,
                          const ConditionBundle& c) override;

    const ModelConfig& config() const { return cfg_; }

    // Parameters under their checkpoint/freeze contract names, in
    // registration order. Names are unique.
    std::vector<std::pair<std::string, torch::Tensor>> contract_named_parameters() const;

    Unet unet{nullptr};
    LocalConditionStack cond{nullptr};
    GlobalConditioner global{nullptr};

private:
    ModelConfig cfg_;
};
TORCH_MODULE(DiffusionModel);

// Contract name for one torch parameter path of DiffusionModel:
//   "unet.*"   -> unet.spatial.* / unet.xattn.{q_text,q_img,kv_text,kv_img}.*
//                 / unet.temporal.*
//   "cond.*"   -> unchanged (local encoders; cond.flow_encoder.* is the
//                 stage-2 trainable group)
//   "global.*" -> cond.* (text table, image-prior encoder, adapter)
std::string contract_param_name(const std::string& torch_name);

// Builds the video model from a trained image model: the UNet is inflated
// (spatial convs gain a singleton temporal dimension, temporal attention
// appears zero-initialized), condition encoders and global modules are
// copied, and the flow encoder is created fresh. The report lists every
// mapped parameter plus the new temporal and flow groups.
std::pair<DiffusionModel, InflationReport> inflate_model(const DiffusionModel& image_model,
                                                         std::int64_t frames,
                                                         std::uint64_t init_seed);

}  // namespace pulsediff
