#include "pulsediff/attention.hpp"

#include "pulsediff/common.hpp"

#include <cmath>

namespace pulsediff {

torch::Tensor sinusoidal_time_embedding(const torch::Tensor& t, std::int64_t dim) {
    check_arg(dim >= 2 && dim % 2 == 0, "sinusoidal_time_embedding: dim must be even");
    const std::int64_t half = dim / 2;
    auto tt = t.to(torch::kFloat64).reshape({-1, 1});
    auto freqs = torch::exp(torch::arange(half, torch::kFloat64) *
                            (-std::log(10000.0) / static_cast<double>(half)));
    auto args = tt * freqs.unsqueeze(0);  // (N, half)
    return torch::cat({torch::sin(args), torch::cos(args)}, 1);
}

torch::Tensor multihead_attention(const torch::Tensor& q, const torch::Tensor& k,
                                  const torch::Tensor& v, std::int64_t heads,
                                  const torch::Tensor& bias) {
    const auto N = q.size(0), Lq = q.size(1), C = q.size(2);
    const auto Lk = k.size(1);
    check_arg(C % heads == 0, "multihead_attention: channel dim not divisible by heads");
    const auto dh = C / heads;

    auto split = [&](const torch::Tensor& x, std::int64_t L) {
        return x.reshape({N, L, heads, dh}).permute({0, 2, 1, 3});  // (N, H, L, dh)
    };
    auto qh = split(q, Lq);
    auto kh = split(k, Lk);
    auto vh = split(v, Lk);

    auto logits = torch::matmul(qh, kh.transpose(-2, -1)) / std::sqrt(static_cast<double>(dh));
    if (bias.defined()) {
        logits = logits + bias.unsqueeze(0);  // (N, H, Lq, Lk) + (1, H, Lq, Lk)
    }
    auto attn = torch::softmax(logits, -1);
    auto out = torch::matmul(attn, vh);  // (N, H, Lq, dh)
    return out.permute({0, 2, 1, 3}).reshape({N, Lq, C});
}

KVProjectionImpl::KVProjectionImpl(std::int64_t context_dim, std::int64_t inner_dim) {
    k = register_module("k", torch::nn::Linear(
                                 torch::nn::LinearOptions(context_dim, inner_dim).bias(false)));
    v = register_module("v", torch::nn::Linear(
                                 torch::nn::LinearOptions(context_dim, inner_dim).bias(false)));
}

FactorizedCrossAttentionImpl::FactorizedCrossAttentionImpl(std::int64_t query_dim,
                                                           std::int64_t context_dim,
                                                           std::int64_t heads)
    : heads_(heads) {
    check_arg(query_dim % heads == 0, "FactorizedCrossAttention: query_dim % heads != 0");
    q_text = register_module(
        "q_text", torch::nn::Linear(torch::nn::LinearOptions(query_dim, query_dim).bias(false)));
    q_img = register_module(
        "q_img", torch::nn::Linear(torch::nn::LinearOptions(query_dim, query_dim).bias(false)));
    kv_text = register_module("kv_text", KVProjection(context_dim, query_dim));
    kv_img = register_module("kv_img", KVProjection(context_dim, query_dim));
    out = register_module(
        "out", torch::nn::Linear(torch::nn::LinearOptions(query_dim, query_dim).bias(false)));
    torch::NoGradGuard no_grad;
    kv_img->v->weight.zero_();
}

torch::Tensor FactorizedCrossAttentionImpl::text_branch(const torch::Tensor& h,
                                                        const torch::Tensor& f_t) {
    return multihead_attention(q_text(h), kv_text->k(f_t), kv_text->v(f_t), heads_);
}

torch::Tensor FactorizedCrossAttentionImpl::image_branch(const torch::Tensor& h,
                                                         const torch::Tensor& f_i) {
    return multihead_attention(q_img(h), kv_img->k(f_i), kv_img->v(f_i), heads_);
}

torch::Tensor FactorizedCrossAttentionImpl::forward(const torch::Tensor& h,
                                                    const torch::Tensor& f_t,
                                                    const torch::Tensor& f_i) {
    check_arg(h.defined() && f_t.defined() && f_i.defined(),
              "FactorizedCrossAttention: undefined input");
    check_arg(f_t.size(2) == f_i.size(2), "FactorizedCrossAttention: context dims disagree");
    return out(text_branch(h, f_t) + image_branch(h, f_i));
}

std::int64_t norm_groups_for(std::int64_t channels) {
    std::int64_t g = 32;
    while (g > 1 && channels % g != 0) g /= 2;
    return g;
}

SpatialSelfAttentionImpl::SpatialSelfAttentionImpl(std::int64_t channels, std::int64_t heads)
    : heads_(heads) {
    check_arg(channels % heads == 0, "SpatialSelfAttention: channels % heads != 0");
    norm = register_module(
        "norm", torch::nn::GroupNorm(torch::nn::GroupNormOptions(norm_groups_for(channels), channels)));
    qkv = register_module("qkv", torch::nn::Linear(channels, channels * 3));
    proj = register_module("proj", torch::nn::Linear(channels, channels));
    torch::NoGradGuard no_grad;
    proj->weight.zero_();
    proj->bias.zero_();
}

torch::Tensor SpatialSelfAttentionImpl::forward(const torch::Tensor& x) {
    const auto N = x.size(0), C = x.size(1), h = x.size(2), w = x.size(3);
    auto tokens = norm(x).reshape({N, C, h * w}).transpose(1, 2);  // (N, hw, C)
    auto qkv_out = qkv(tokens).chunk(3, /*dim=*/2);
    auto attn = multihead_attention(qkv_out[0], qkv_out[1], qkv_out[2], heads_);
    auto y = proj(attn).transpose(1, 2).reshape({N, C, h, w});
    return x + y;
}

TemporalSelfAttentionImpl::TemporalSelfAttentionImpl(std::int64_t channels, std::int64_t heads,
                                                     std::int64_t max_frames)
    : heads_(heads), max_frames_(max_frames) {
    check_arg(channels % heads == 0, "TemporalSelfAttention: channels % heads != 0");
    check_arg(max_frames >= 1, "TemporalSelfAttention: max_frames must be >= 1");
    norm = register_module("norm",
                           torch::nn::LayerNorm(torch::nn::LayerNormOptions({channels})));
    qkv = register_module(
        "qkv", torch::nn::Linear(torch::nn::LinearOptions(channels, channels * 3).bias(false)));
    proj = register_module("proj", torch::nn::Linear(channels, channels));
    rel_bias_ = register_parameter("rel_bias", torch::zeros({2 * max_frames - 1, heads}));
    torch::NoGradGuard no_grad;
    proj->weight.zero_();
    proj->bias.zero_();
}

torch::Tensor TemporalSelfAttentionImpl::forward(const torch::Tensor& x, std::int64_t batch,
                                                 std::int64_t frames) {
    check_arg(frames <= max_frames_, "TemporalSelfAttention: clip longer than max_frames");
    const auto C = x.size(1), h = x.size(2), w = x.size(3);
    check_arg(x.size(0) == batch * frames, "TemporalSelfAttention: folded batch mismatch");

    // (B*F, C, h, w) -> (B*h*w, F, C)
    auto tokens = x.reshape({batch, frames, C, h, w})
                      .permute({0, 3, 4, 1, 2})
                      .reshape({batch * h * w, frames, C});

    // Relative position bias: offset f_q - f_k indexes the learned table.
    auto offsets = torch::arange(frames, torch::kInt64).unsqueeze(1) -
                   torch::arange(frames, torch::kInt64).unsqueeze(0) + (max_frames_ - 1);
    auto bias = rel_bias_.index_select(0, offsets.reshape({-1}))
                    .reshape({frames, frames, heads_})
                    .permute({2, 0, 1});  // (H, F, F)

    auto qkv_out = qkv(norm(tokens)).chunk(3, /*dim=*/2);
    auto attn = multihead_attention(qkv_out[0], qkv_out[1], qkv_out[2], heads_, bias);
    auto y = tokens + proj(attn);

    return y.reshape({batch, h, w, frames, C})
        .permute({0, 3, 4, 1, 2})
        .reshape({batch * frames, C, h, w});
}

}  // namespace pulsediff
