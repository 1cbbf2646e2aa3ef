#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pulsediff/attention.hpp"

namespace pulsediff {

struct UNetConfig {
    std::int64_t in_channels = 8;    // C_lat + local condition channels
    std::int64_t out_channels = 4;   // C_lat
    std::int64_t local_cond_channels = 4;
    std::int64_t base_channels = 64;
    std::vector<std::int64_t> channel_multipliers = {1, 2};
    std::int64_t num_blocks_per_level = 2;
    std::vector<std::int64_t> attention_levels = {1};  // levels with self+cross attention
    std::int64_t context_dim = 128;
    std::int64_t heads = 4;
    std::int64_t max_frames = 8;  // temporal attention table size (video nets)

    std::int64_t levels() const { return static_cast<std::int64_t>(channel_multipliers.size()); }
    bool has_attention(std::int64_t level) const;
    void validate() const;
};

// Spatial k x k convolution that can live in image nets (4-d weight) or in
// inflated video nets, where the weight carries a singleton temporal
// dimension (C_out, C_in, 1, k, k) and is applied per frame.
class SpatialConvImpl : public torch::nn::Module {
public:
    SpatialConvImpl(std::int64_t in_channels, std::int64_t out_channels, std::int64_t kernel,
                    std::int64_t stride, std::int64_t padding, bool inflated);

    torch::Tensor forward(const torch::Tensor& x);  // (N, C_in, h, w)

    torch::Tensor weight;
    torch::Tensor bias;
    bool inflated() const { return inflated_; }

private:
    std::int64_t stride_, padding_;
    bool inflated_;
};
TORCH_MODULE(SpatialConv);

class ResBlockImpl : public torch::nn::Module {
public:
    ResBlockImpl(std::int64_t in_channels, std::int64_t out_channels, std::int64_t time_dim,
                 bool inflated);

    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& t_emb);

private:
    torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
    SpatialConv conv1{nullptr}, conv2{nullptr}, skip{nullptr};
    torch::nn::Linear time_proj{nullptr};
};
TORCH_MODULE(ResBlock);

// LayerNorm + factorized text/image cross-attention over spatial tokens,
// with residual. The norm and the output projection inside the attention
// are shared between the two branches.
class CrossAttnBlockImpl : public torch::nn::Module {
public:
    CrossAttnBlockImpl(std::int64_t channels, std::int64_t context_dim, std::int64_t heads);

    torch::Tensor forward(const torch::Tensor& x, const ContextPack& ctx);  // (N, C, h, w)

    FactorizedCrossAttention attn{nullptr};

private:
    torch::nn::LayerNorm ln{nullptr};
};
TORCH_MODULE(CrossAttnBlock);

// Denoising UNet. Stacked blocks of spatial convolution, spatial
// self-attention and factorized cross-attention at the configured levels;
// video nets additionally run temporal self-attention after each
// cross-attention layer and in the middle block.
//
// The net always consumes the folded (B*F, C, h, w) layout; spatial layers
// never mix frames. Image nets are the F=1 case.
class UnetImpl : public torch::nn::Module {
public:
    UnetImpl(const UNetConfig& cfg, bool video);

    // x (N, in_channels, h, w), t (N,) int64, ctx token blocks with
    // leading dim N. frames must divide N; it is ignored by image nets.
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& t, const ContextPack& ctx,
                          std::int64_t frames = 1);

    const UNetConfig& config() const { return cfg_; }
    bool video() const { return video_; }

private:
    torch::Tensor time_embedding(const torch::Tensor& t) const;

    UNetConfig cfg_;
    bool video_;

    SpatialConv conv_in_{nullptr};
    torch::nn::Sequential time_mlp_{nullptr};

    torch::nn::ModuleList down_res_, down_sattn_, down_xattn_, down_temporal_, downsample_;
    ResBlock mid_res1_{nullptr}, mid_res2_{nullptr};
    SpatialSelfAttention mid_sattn_{nullptr};
    CrossAttnBlock mid_xattn_{nullptr};
    TemporalSelfAttention mid_temporal_{nullptr};
    torch::nn::ModuleList up_res_, up_sattn_, up_xattn_, up_temporal_, upsample_;
    torch::nn::GroupNorm norm_out_{nullptr};
    SpatialConv conv_out_{nullptr};

    // flattened-block-index -> level bookkeeping
    std::vector<std::int64_t> down_block_level_, up_block_level_;
    std::vector<std::int64_t> down_attn_index_, up_attn_index_;  // -1 when no attention
};
TORCH_MODULE(Unet);

// Maps a torch parameter path of a Unet to its checkpoint/freeze group name:
//   unet.spatial.*        everything spatial (convs, norms, self-attn, time MLP,
//                         shared cross-attention norm and output projection)
//   unet.xattn.q_text.*   private text-branch query projections
//   unet.xattn.q_img.*    private image-branch query projections
//   unet.xattn.kv_text.*  private text-branch key/value projections
//   unet.xattn.kv_img.*   private image-branch key/value projections
//   unet.temporal.*       temporal attention layers (video nets)
std::string unet_contract_name(const std::string& torch_param_name);

struct InflationReport {
    // 2D parameter name -> 3D parameter name (contract names; spatial conv
    // weights gain the singleton temporal dimension, values bitwise equal).
    std::vector<std::pair<std::string, std::string>> mapped;
    std::vector<std::string> new_temporal;
    std::vector<std::string> new_flow;
};

// 2D -> 3D inflation: every spatial k x k convolution becomes 1 x k x k with
// identical weights; temporal self-attention layers are inserted after the
// cross-attention layers with zero-initialized output projections, so the
// inflated net initially equals the per-frame 2D net.
std::pair<Unet, InflationReport> inflate(const Unet& unet2d, std::int64_t max_frames,
                                         std::uint64_t init_seed);

}  // namespace pulsediff
