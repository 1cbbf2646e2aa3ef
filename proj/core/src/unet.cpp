#include "pulsediff/unet.hpp"

#include "pulsediff/common.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace pulsediff {

bool UNetConfig::has_attention(std::int64_t level) const {
    return std::find(attention_levels.begin(), attention_levels.end(), level) !=
           attention_levels.end();
}

void UNetConfig::validate() const {
    check_arg(in_channels >= 1 && out_channels >= 1, "UNetConfig: channel counts must be positive");
    check_arg(local_cond_channels >= 0, "UNetConfig: local_cond_channels must be >= 0");
    check_arg(in_channels == out_channels + local_cond_channels,
              "UNetConfig: in_channels must equal out_channels + local_cond_channels");
    check_arg(base_channels >= 2 && base_channels % 2 == 0,
              "UNetConfig: base_channels must be even (time embedding)");
    check_arg(!channel_multipliers.empty(), "UNetConfig: channel_multipliers empty");
    for (auto m : channel_multipliers)
        check_arg(m >= 1, "UNetConfig: channel multipliers must be >= 1");
    check_arg(num_blocks_per_level >= 1, "UNetConfig: num_blocks_per_level must be >= 1");
    for (auto l : attention_levels)
        check_arg(l >= 0 && l < levels(), "UNetConfig: attention level out of range");
    check_arg(context_dim >= 1, "UNetConfig: context_dim must be positive");
    check_arg(heads >= 1, "UNetConfig: heads must be positive");
    for (auto m : channel_multipliers)
        check_arg((base_channels * m) % heads == 0,
                  "UNetConfig: head count must divide every level width");
    check_arg(max_frames >= 1, "UNetConfig: max_frames must be >= 1");
}

SpatialConvImpl::SpatialConvImpl(std::int64_t in_channels, std::int64_t out_channels,
                                 std::int64_t kernel, std::int64_t stride, std::int64_t padding,
                                 bool inflated)
    : stride_(stride), padding_(padding), inflated_(inflated) {
    auto shape = inflated ? std::vector<std::int64_t>{out_channels, in_channels, 1, kernel, kernel}
                          : std::vector<std::int64_t>{out_channels, in_channels, kernel, kernel};
    weight = register_parameter("weight", torch::empty(shape));
    bias = register_parameter("bias", torch::empty({out_channels}));
    torch::NoGradGuard no_grad;
    torch::nn::init::kaiming_uniform_(weight, std::sqrt(5.0));
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_channels * kernel * kernel));
    bias.uniform_(-bound, bound);
}

torch::Tensor SpatialConvImpl::forward(const torch::Tensor& x) {
    auto w = inflated_ ? weight.squeeze(2) : weight;
    return torch::conv2d(x, w, bias, stride_, padding_);
}

ResBlockImpl::ResBlockImpl(std::int64_t in_channels, std::int64_t out_channels,
                           std::int64_t time_dim, bool inflated) {
    norm1 = register_module("norm1", torch::nn::GroupNorm(torch::nn::GroupNormOptions(
                                         norm_groups_for(in_channels), in_channels)));
    conv1 = register_module("conv1", SpatialConv(in_channels, out_channels, 3, 1, 1, inflated));
    time_proj = register_module("time_proj", torch::nn::Linear(time_dim, out_channels));
    norm2 = register_module("norm2", torch::nn::GroupNorm(torch::nn::GroupNormOptions(
                                         norm_groups_for(out_channels), out_channels)));
    conv2 = register_module("conv2", SpatialConv(out_channels, out_channels, 3, 1, 1, inflated));
    if (in_channels != out_channels)
        skip = register_module("skip", SpatialConv(in_channels, out_channels, 1, 1, 0, inflated));
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& t_emb) {
    auto h = conv1(torch::silu(norm1(x)));
    h = h + time_proj(torch::silu(t_emb)).unsqueeze(-1).unsqueeze(-1);
    h = conv2(torch::silu(norm2(h)));
    return (skip ? skip(x) : x) + h;
}

CrossAttnBlockImpl::CrossAttnBlockImpl(std::int64_t channels, std::int64_t context_dim,
                                       std::int64_t heads) {
    ln = register_module("ln", torch::nn::LayerNorm(torch::nn::LayerNormOptions({channels})));
    attn = register_module("attn", FactorizedCrossAttention(channels, context_dim, heads));
}

torch::Tensor CrossAttnBlockImpl::forward(const torch::Tensor& x, const ContextPack& ctx) {
    const auto N = x.size(0), C = x.size(1), h = x.size(2), w = x.size(3);
    auto tokens = x.reshape({N, C, h * w}).transpose(1, 2);  // (N, hw, C)
    tokens = tokens + attn(ln(tokens), ctx.f_t, ctx.f_i);
    return tokens.transpose(1, 2).reshape({N, C, h, w});
}

UnetImpl::UnetImpl(const UNetConfig& cfg, bool video) : cfg_(cfg), video_(video) {
    cfg_.validate();
    const auto L = cfg_.levels();
    const auto nb = cfg_.num_blocks_per_level;
    const auto time_dim = cfg_.base_channels * 4;
    std::vector<std::int64_t> chans(L);
    for (std::int64_t i = 0; i < L; ++i) chans[i] = cfg_.base_channels * cfg_.channel_multipliers[i];

    conv_in_ = register_module("conv_in",
                               SpatialConv(cfg_.in_channels, chans[0], 3, 1, 1, video_));
    time_mlp_ = register_module(
        "time_mlp", torch::nn::Sequential(torch::nn::Linear(cfg_.base_channels, time_dim),
                                          torch::nn::SiLU(),
                                          torch::nn::Linear(time_dim, time_dim)));

    down_res_ = register_module("down_res", torch::nn::ModuleList());
    down_sattn_ = register_module("down_sattn", torch::nn::ModuleList());
    down_xattn_ = register_module("down_xattn", torch::nn::ModuleList());
    if (video_) down_temporal_ = register_module("down_temporal", torch::nn::ModuleList());
    downsample_ = register_module("downsample", torch::nn::ModuleList());
    up_res_ = register_module("up_res", torch::nn::ModuleList());
    up_sattn_ = register_module("up_sattn", torch::nn::ModuleList());
    up_xattn_ = register_module("up_xattn", torch::nn::ModuleList());
    if (video_) up_temporal_ = register_module("up_temporal", torch::nn::ModuleList());
    upsample_ = register_module("upsample", torch::nn::ModuleList());

    auto add_attention = [&](torch::nn::ModuleList& sattn, torch::nn::ModuleList& xattn,
                             torch::nn::ModuleList& temporal, std::int64_t ch) {
        sattn->push_back(SpatialSelfAttention(ch, cfg_.heads));
        xattn->push_back(CrossAttnBlock(ch, cfg_.context_dim, cfg_.heads));
        if (video_) temporal->push_back(TemporalSelfAttention(ch, cfg_.heads, cfg_.max_frames));
    };

    std::vector<std::int64_t> skip_chans;
    std::int64_t ch = chans[0];
    skip_chans.push_back(ch);
    for (std::int64_t i = 0; i < L; ++i) {
        for (std::int64_t j = 0; j < nb; ++j) {
            down_res_->push_back(ResBlock(ch, chans[i], time_dim, video_));
            ch = chans[i];
            down_block_level_.push_back(i);
            if (cfg_.has_attention(i)) {
                down_attn_index_.push_back(static_cast<std::int64_t>(down_sattn_->size()));
                add_attention(down_sattn_, down_xattn_, down_temporal_, ch);
            } else {
                down_attn_index_.push_back(-1);
            }
            skip_chans.push_back(ch);
        }
        if (i < L - 1) {
            downsample_->push_back(SpatialConv(ch, ch, 3, 2, 1, video_));
            skip_chans.push_back(ch);
        }
    }

    mid_res1_ = register_module("mid_res1", ResBlock(ch, ch, time_dim, video_));
    mid_sattn_ = register_module("mid_sattn", SpatialSelfAttention(ch, cfg_.heads));
    mid_xattn_ = register_module("mid_xattn", CrossAttnBlock(ch, cfg_.context_dim, cfg_.heads));
    if (video_)
        mid_temporal_ = register_module(
            "mid_temporal", TemporalSelfAttention(ch, cfg_.heads, cfg_.max_frames));
    mid_res2_ = register_module("mid_res2", ResBlock(ch, ch, time_dim, video_));

    for (std::int64_t i = L - 1; i >= 0; --i) {
        for (std::int64_t j = 0; j <= nb; ++j) {
            const auto sc = skip_chans.back();
            skip_chans.pop_back();
            up_res_->push_back(ResBlock(ch + sc, chans[i], time_dim, video_));
            ch = chans[i];
            up_block_level_.push_back(i);
            if (cfg_.has_attention(i)) {
                up_attn_index_.push_back(static_cast<std::int64_t>(up_sattn_->size()));
                add_attention(up_sattn_, up_xattn_, up_temporal_, ch);
            } else {
                up_attn_index_.push_back(-1);
            }
        }
        if (i > 0) upsample_->push_back(SpatialConv(ch, ch, 3, 1, 1, video_));
    }
    check_state(skip_chans.empty(), "Unet: skip bookkeeping out of balance");

    norm_out_ = register_module("norm_out", torch::nn::GroupNorm(torch::nn::GroupNormOptions(
                                                norm_groups_for(ch), ch)));
    conv_out_ = register_module("conv_out", SpatialConv(ch, cfg_.out_channels, 3, 1, 1, video_));
    torch::NoGradGuard no_grad;
    conv_out_->weight.zero_();
    conv_out_->bias.zero_();
}

torch::Tensor UnetImpl::time_embedding(const torch::Tensor& t) const {
    return sinusoidal_time_embedding(t, cfg_.base_channels).to(conv_in_->weight.dtype());
}

torch::Tensor UnetImpl::forward(const torch::Tensor& x, const torch::Tensor& t,
                                const ContextPack& ctx, std::int64_t frames) {
    check_arg(x.dim() == 4, "Unet: expected folded (N, C, h, w) input, got " + shape_str(x));
    const auto N = x.size(0);
    check_arg(x.size(1) == cfg_.in_channels,
              "Unet: input has " + std::to_string(x.size(1)) + " channels, config wants " +
                  std::to_string(cfg_.in_channels));
    check_arg(t.dim() == 1 && t.size(0) == N, "Unet: t must be (N,)");
    check_arg(frames >= 1 && N % frames == 0, "Unet: frames must divide the folded batch");
    check_arg(ctx.f_t.defined() && ctx.f_i.defined(), "Unet: context tokens undefined");
    check_arg(ctx.f_t.size(0) == N && ctx.f_i.size(0) == N,
              "Unet: context leading dim must match folded batch");
    check_arg(ctx.f_t.size(2) == cfg_.context_dim && ctx.f_i.size(2) == cfg_.context_dim,
              "Unet: context dim mismatch");
    if (video_)
        check_arg(frames <= cfg_.max_frames, "Unet: clip longer than configured max_frames");
    const auto batch = N / frames;

    auto temb = time_mlp_->forward(time_embedding(t));

    auto run_attention = [&](torch::Tensor h, torch::nn::ModuleList& sattn,
                             torch::nn::ModuleList& xattn, torch::nn::ModuleList& temporal,
                             std::int64_t ai) {
        h = sattn->at<SpatialSelfAttentionImpl>(ai).forward(h);
        h = xattn->at<CrossAttnBlockImpl>(ai).forward(h, ctx);
        if (video_) h = temporal->at<TemporalSelfAttentionImpl>(ai).forward(h, batch, frames);
        return h;
    };

    auto h = conv_in_(x);
    std::vector<torch::Tensor> hs{h};
    const auto L = cfg_.levels();
    std::size_t b = 0, ds = 0;
    for (std::int64_t i = 0; i < L; ++i) {
        for (std::int64_t j = 0; j < cfg_.num_blocks_per_level; ++j, ++b) {
            h = down_res_->at<ResBlockImpl>(b).forward(h, temb);
            if (down_attn_index_[b] >= 0)
                h = run_attention(h, down_sattn_, down_xattn_, down_temporal_,
                                  down_attn_index_[b]);
            hs.push_back(h);
        }
        if (i < L - 1) {
            h = downsample_->at<SpatialConvImpl>(ds++).forward(h);
            hs.push_back(h);
        }
    }

    h = mid_res1_(h, temb);
    h = mid_sattn_(h);
    h = mid_xattn_(h, ctx);
    if (video_) h = mid_temporal_(h, batch, frames);
    h = mid_res2_(h, temb);

    b = 0;
    std::size_t us = 0;
    for (std::int64_t i = L - 1; i >= 0; --i) {
        for (std::int64_t j = 0; j <= cfg_.num_blocks_per_level; ++j, ++b) {
            auto skip = hs.back();
            hs.pop_back();
            h = up_res_->at<ResBlockImpl>(b).forward(torch::cat({h, skip}, 1), temb);
            if (up_attn_index_[b] >= 0)
                h = run_attention(h, up_sattn_, up_xattn_, up_temporal_, up_attn_index_[b]);
        }
        if (i > 0) {
            namespace F = torch::nn::functional;
            h = F::interpolate(h, F::InterpolateFuncOptions()
                                      .scale_factor(std::vector<double>{2.0, 2.0})
                                      .mode(torch::kNearest));
            h = upsample_->at<SpatialConvImpl>(us++).forward(h);
        }
    }
    check_state(hs.empty(), "Unet: unconsumed skip activations");

    return conv_out_(torch::silu(norm_out_(h)));
}

std::string unet_contract_name(const std::string& torch_param_name) {
    static const char* kGroups[] = {"q_text", "q_img", "kv_text", "kv_img"};
    for (const char* g : kGroups) {
        const std::string token = std::string(".") + g + ".";
        const auto pos = torch_param_name.find(token);
        if (pos != std::string::npos) {
            // Drop the group component from the path; the group becomes the prefix.
            auto rest = torch_param_name.substr(0, pos) +
                        torch_param_name.substr(pos + token.size() - 1);
            return "unet.xattn." + std::string(g) + "." + rest;
        }
    }
    if (torch_param_name.find("temporal") != std::string::npos)
        return "unet.temporal." + torch_param_name;
    return "unet.spatial." + torch_param_name;
}

std::pair<Unet, InflationReport> inflate(const Unet& unet2d, std::int64_t max_frames,
                                         std::uint64_t init_seed) {
    check_arg(!unet2d->video(), "inflate: source net is already a video net");
    auto cfg = unet2d->config();
    cfg.max_frames = max_frames;

    torch::manual_seed(init_seed);
    Unet unet3d(cfg, /*video=*/true);

    auto src = unet2d->named_parameters();
    auto dst = unet3d->named_parameters();
    InflationReport report;
    std::set<std::string> src_names;

    torch::NoGradGuard no_grad;
    for (const auto& item : src) {
        src_names.insert(item.key());
        auto* target = dst.find(item.key());
        check_state(target != nullptr, "inflate: video net lacks parameter " + item.key());
        const auto& value = item.value();
        if (target->dim() == value.dim() + 1) {
            check_state(value.dim() == 4 && target->size(2) == 1,
                        "inflate: unexpected rank change for " + item.key());
            target->copy_(value.unsqueeze(2));
        } else {
            check_state(target->sizes() == value.sizes(),
                        "inflate: shape mismatch for " + item.key());
            target->copy_(value);
        }
        const auto name = unet_contract_name(item.key());
        report.mapped.emplace_back(name, name);
    }
    for (const auto& item : dst) {
        if (src_names.count(item.key())) continue;
        const auto name = unet_contract_name(item.key());
        check_state(name.rfind("unet.temporal.", 0) == 0,
                    "inflate: unexpected non-temporal parameter " + name);
        report.new_temporal.push_back(name);
    }
    return {unet3d, report};
}

}  // namespace pulsediff
