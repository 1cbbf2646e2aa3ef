#include "pulsediff/global_conditions.hpp"

#include "pulsediff/common.hpp"

namespace pulsediff {

std::string prompt_for_view(const std::string& view) {
    if (view == kViewA2C) return kPromptA2C;
    if (view == kViewA4C) return kPromptA4C;
    throw ValidationError("unknown view label: " + view);
}

std::string view_for_prompt(const std::string& prompt) {
    if (prompt == kPromptA2C) return kViewA2C;
    if (prompt == kPromptA4C) return kViewA4C;
    throw ValidationError("unknown prompt: " + prompt);
}

void GlobalCondConfig::validate() const {
    check_arg(context_dim >= 1, "GlobalCondConfig: context_dim must be positive");
    check_arg(raw_dim >= 1, "GlobalCondConfig: raw_dim must be positive");
    check_arg(text_tokens >= 1, "GlobalCondConfig: text_tokens must be positive");
    check_arg(patch_size >= 1 && image_size >= patch_size,
              "GlobalCondConfig: patch_size must divide image_size");
    check_arg(image_size % patch_size == 0,
              "GlobalCondConfig: patch_size must divide image_size");
}

TextEmbedderImpl::TextEmbedderImpl(const GlobalCondConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    table = register_parameter(
        "table", torch::randn({2, cfg_.text_tokens, cfg_.context_dim}) * 0.02);
}

torch::Tensor TextEmbedderImpl::embed(const std::optional<std::string>& prompt) const {
    if (!prompt.has_value())
        return torch::zeros({cfg_.text_tokens, cfg_.context_dim}, table.options());
    if (*prompt == kPromptA2C) return table[0];
    if (*prompt == kPromptA4C) return table[1];
    throw ValidationError("prompt outside the fixed vocabulary: " + *prompt);
}

ImagePriorEncoderImpl::ImagePriorEncoderImpl(const GlobalCondConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    conv = register_module(
        "conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(1, cfg_.raw_dim, cfg_.patch_size)
                                      .stride(cfg_.patch_size)));
    for (auto& p : conv->parameters()) p.set_requires_grad(false);
}

torch::Tensor ImagePriorEncoderImpl::forward(const torch::Tensor& frame) {
    check_arg(frame.dim() == 4 && frame.size(1) == 1,
              "ImagePriorEncoder: expected (B, 1, H, W), got " + shape_str(frame));
    check_arg(frame.size(2) == cfg_.image_size && frame.size(3) == cfg_.image_size,
              "ImagePriorEncoder: frame resolution mismatch");
    check_arg(frame.min().item<double>() >= -1.0 - 1e-6 &&
                  frame.max().item<double>() <= 1.0 + 1e-6,
              "ImagePriorEncoder: frame values outside [-1, 1]");
    auto feats = conv(frame);  // (B, raw_dim, side, side)
    const auto B = feats.size(0);
    return feats.reshape({B, cfg_.raw_dim, cfg_.image_tokens()}).transpose(1, 2);
}

GlobalAdapterImpl::GlobalAdapterImpl(std::int64_t raw_dim, std::int64_t context_dim) {
    fc1 = register_module("fc1", torch::nn::Linear(raw_dim, context_dim));
    fc2 = register_module("fc2", torch::nn::Linear(context_dim, context_dim));
    torch::NoGradGuard no_grad;
    fc2->weight.zero_();
    fc2->bias.zero_();
}

torch::Tensor GlobalAdapterImpl::forward(const torch::Tensor& raw) {
    return fc2(torch::silu(fc1(raw)));
}

GlobalConditionerImpl::GlobalConditionerImpl(const GlobalCondConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    text_embed = register_module("text_embed", TextEmbedder(cfg_));
    image_prior = register_module("image_prior", ImagePriorEncoder(cfg_));
    adapter = register_module("adapter", GlobalAdapter(cfg_.raw_dim, cfg_.context_dim));
}

ContextPack GlobalConditionerImpl::make_context(const ConditionBundle& bundle,
                                                std::int64_t batch, std::int64_t frames) {
    check_arg(batch >= 1 && frames >= 1, "make_context: batch and frames must be positive");

    auto f_t_one = text_embed->embed(bundle.has(Condition::kText) ? bundle.text : std::nullopt);
    auto f_t = f_t_one.unsqueeze(0).expand({batch, cfg_.text_tokens, cfg_.context_dim});

    const auto dtype = text_embed->table.dtype();
    torch::Tensor f_i;
    if (bundle.has(Condition::kImagePrior)) {
        check_arg(bundle.image_prior.size(0) == batch,
                  "make_context: image prior batch mismatch");
        f_i = adapter(image_prior(bundle.image_prior.to(dtype)));
    } else {
        f_i = torch::zeros({batch, cfg_.image_tokens(), cfg_.context_dim},
                           torch::TensorOptions().dtype(dtype));
    }

    return {f_t.repeat_interleave(frames, 0), f_i.repeat_interleave(frames, 0)};
}

}  // namespace pulsediff
