#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <optional>
#include <string>

#include "pulsediff/attention.hpp"
#include "pulsediff/conditions.hpp"

namespace pulsediff {

// Embedder identifiers recorded in checkpoints; sampling refuses mismatches.
inline constexpr const char* kTextEmbedderId = "text:lookup-v1";
inline constexpr const char* kImageEmbedderId = "img:convpatch-v1";

inline constexpr const char* kViewA2C = "A2C";
inline constexpr const char* kViewA4C = "A4C";
inline constexpr const char* kPromptA2C = "An ECHO with 2-chamber view.";
inline constexpr const char* kPromptA4C = "An ECHO with 4-chamber view.";

// View label <-> prompt bijection. Unknown inputs raise ValidationError.
std::string prompt_for_view(const std::string& view);
std::string view_for_prompt(const std::string& prompt);

struct GlobalCondConfig {
    std::int64_t context_dim = 128;
    std::int64_t raw_dim = 64;
    std::int64_t text_tokens = 8;  // N_T
    std::int64_t image_size = 32;
    std::int64_t patch_size = 8;

    std::int64_t image_tokens() const {  // N_I
        const auto side = image_size / patch_size;
        return side * side;
    }
    void validate() const;
};

// Learned lookup over the fixed prompt set. One token block per prompt;
// the null prompt maps to a reserved all-zero block.
class TextEmbedderImpl : public torch::nn::Module {
public:
    explicit TextEmbedderImpl(const GlobalCondConfig& cfg);

    // -> (N_T, context_dim); rows of the learned table, so gradients flow.
    torch::Tensor embed(const std::optional<std::string>& prompt) const;

    torch::Tensor table;  // (num prompts, N_T, context_dim)

private:
    GlobalCondConfig cfg_;
};
TORCH_MODULE(TextEmbedder);

// Frozen randomly-initialized patch encoder standing in for a pretrained
// image feature extractor. Conv with kernel = stride = patch_size; its
// parameters never receive gradients.
class ImagePriorEncoderImpl : public torch::nn::Module {
public:
    explicit ImagePriorEncoderImpl(const GlobalCondConfig& cfg);

    // frame (B, 1, H, W) in [-1, 1] -> raw tokens (B, N_I, raw_dim)
    torch::Tensor forward(const torch::Tensor& frame);

private:
    GlobalCondConfig cfg_;
    torch::nn::Conv2d conv{nullptr};
};
TORCH_MODULE(ImagePriorEncoder);

// Per-token 2-layer MLP aligning raw image features to the text-token
// dimension. The final layer starts at zero, so the image branch is silent
// until trained.
class GlobalAdapterImpl : public torch::nn::Module {
public:
    GlobalAdapterImpl(std::int64_t raw_dim, std::int64_t context_dim);

    torch::Tensor forward(const torch::Tensor& raw);  // (..., raw_dim) -> (..., context_dim)

private:
    torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(GlobalAdapter);

// Bundles the two global-condition paths and produces the token blocks the
// cross-attention layers consume.
class GlobalConditionerImpl : public torch::nn::Module {
public:
    explicit GlobalConditionerImpl(const GlobalCondConfig& cfg);

    // Tokens for one bundle, expanded to the folded (B*F) layout. Absent
    // conditions yield zero token blocks.
    ContextPack make_context(const ConditionBundle& bundle, std::int64_t batch,
                             std::int64_t frames);

    const GlobalCondConfig& config() const { return cfg_; }

    TextEmbedder text_embed{nullptr};
    ImagePriorEncoder image_prior{nullptr};
    GlobalAdapter adapter{nullptr};

private:
    GlobalCondConfig cfg_;
};
TORCH_MODULE(GlobalConditioner);

}  // namespace pulsediff
