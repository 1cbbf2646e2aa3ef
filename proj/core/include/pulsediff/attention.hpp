#pragma once

#include <torch/torch.h>

#include <cstdint>

namespace pulsediff {

// Global-condition token blocks consumed by the cross-attention layers.
//   f_t (N, N_T, C) text tokens, f_i (N, N_I, C) image-prior tokens,
// where N is the flattened batch*frames dimension.
struct ContextPack {
    torch::Tensor f_t;
    torch::Tensor f_i;
};

// Standard sinusoidal embedding: first half sin, second half cos, with
// frequencies spaced geometrically from 1 down to 1/10000. Computed in
// float64; t = 0 maps to (0...0, 1...1). dim must be even.
torch::Tensor sinusoidal_time_embedding(const torch::Tensor& t, std::int64_t dim);

// Largest power-of-two group count <= 32 that divides the channel count.
std::int64_t norm_groups_for(std::int64_t channels);

// Multi-head scaled-dot-product attention without output projection.
// q (N, Lq, C), k/v (N, Lk, C) -> (N, Lq, C). Optional additive logit bias
// (heads, Lq, Lk).
torch::Tensor multihead_attention(const torch::Tensor& q, const torch::Tensor& k,
                                  const torch::Tensor& v, std::int64_t heads,
                                  const torch::Tensor& bias = {});

// Key/value projection pair for one cross-attention branch.
class KVProjectionImpl : public torch::nn::Module {
public:
    KVProjectionImpl(std::int64_t context_dim, std::int64_t inner_dim);
    torch::nn::Linear k{nullptr}, v{nullptr};
};
TORCH_MODULE(KVProjection);

// Sum of two cross-attention branches with separate QKV projections: one
// attends to text tokens, the other to image-prior tokens. The output
// projection is shared; the image branch value projection starts at zero
// so enabling it does not perturb the text pathway.
//
//   forward(h, f_t, f_i) = out( CA(Q^T(h), K^T, V^T) + CA(Q^I(h), K^I, V^I) )
//
// All projections are bias-free, so zero value projections give exactly
// zero output. The caller applies norm and residual.
class FactorizedCrossAttentionImpl : public torch::nn::Module {
public:
    FactorizedCrossAttentionImpl(std::int64_t query_dim, std::int64_t context_dim,
                                 std::int64_t heads);

    // h (N, L, query_dim), f_t (N, N_T, context_dim), f_i (N, N_I, context_dim)
    torch::Tensor forward(const torch::Tensor& h, const torch::Tensor& f_t,
                          const torch::Tensor& f_i);

    // Per-branch attention outputs before the shared projection.
    torch::Tensor text_branch(const torch::Tensor& h, const torch::Tensor& f_t);
    torch::Tensor image_branch(const torch::Tensor& h, const torch::Tensor& f_i);

    torch::nn::Linear q_text{nullptr}, q_img{nullptr};
    KVProjection kv_text{nullptr}, kv_img{nullptr};
    torch::nn::Linear out{nullptr};

private:
    std::int64_t heads_;
};
TORCH_MODULE(FactorizedCrossAttention);

// Self-attention over spatial positions of one frame. GroupNorm in, zero-
// initialized output projection, residual inside.
class SpatialSelfAttentionImpl : public torch::nn::Module {
public:
    SpatialSelfAttentionImpl(std::int64_t channels, std::int64_t heads);

    // (N, C, h, w) -> (N, C, h, w)
    torch::Tensor forward(const torch::Tensor& x);

private:
    std::int64_t heads_;
    torch::nn::GroupNorm norm{nullptr};
    torch::nn::Linear qkv{nullptr};
    torch::nn::Linear proj{nullptr};
};
TORCH_MODULE(SpatialSelfAttention);

// Self-attention across frames at each spatial location, with a learned
// relative position bias over frame offsets. The output projection is
// zero-initialized: right after inflation the layer is an exact no-op.
class TemporalSelfAttentionImpl : public torch::nn::Module {
public:
    TemporalSelfAttentionImpl(std::int64_t channels, std::int64_t heads,
                              std::int64_t max_frames);

    // x is the folded (B*F, C, h, w) layout.
    torch::Tensor forward(const torch::Tensor& x, std::int64_t batch, std::int64_t frames);

    std::int64_t max_frames() const { return max_frames_; }

private:
    std::int64_t heads_;
    std::int64_t max_frames_;
    torch::nn::LayerNorm norm{nullptr};
    torch::nn::Linear qkv{nullptr};
    torch::nn::Linear proj{nullptr};
    torch::Tensor rel_bias_;  // (2*max_frames-1, heads)
};
TORCH_MODULE(TemporalSelfAttention);

}  // namespace pulsediff
