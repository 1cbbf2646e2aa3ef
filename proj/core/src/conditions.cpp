#include "pulsediff/conditions.hpp"

#include "pulsediff/common.hpp"

#include <cmath>
#include <random>

namespace pulsediff {

const std::array<const char*, kNumConditions> kConditionNames = {
    "sketch", "mask", "mv_skeleton", "flow", "text", "image_prior"};

Condition condition_from_name(const std::string& name) {
    for (int i = 0; i < kNumConditions; ++i) {
        if (name == kConditionNames[i]) return static_cast<Condition>(i);
    }
    throw ValidationError("unknown condition name: '" + name + "'");
}

void ConditionBundle::set_absent(Condition c) {
    switch (c) {
        case Condition::kSketch: sketch = torch::Tensor(); break;
        case Condition::kMask: mask = torch::Tensor(); break;
        case Condition::kMvSkeleton: mv_skeleton = torch::Tensor(); break;
        case Condition::kFlow: flow = torch::Tensor(); break;
        case Condition::kText: text.reset(); break;
        case Condition::kImagePrior: image_prior = torch::Tensor(); break;
    }
    present[static_cast<int>(c)] = false;
}

bool ConditionBundle::any_present() const {
    for (bool p : present) {
        if (p) return true;
    }
    return false;
}

std::int64_t ConditionBundle::batch_size() const {
    for (const auto* t : {&sketch, &mask, &mv_skeleton, &flow, &image_prior}) {
        if (t->defined()) return t->size(0);
    }
    return 0;
}

namespace {

void check_presence(bool flag, const torch::Tensor& t, const char* name) {
    check_arg(flag == t.defined(),
              std::string("ConditionBundle: presence flag for '") + name +
                  "' inconsistent with field population");
}

void check_dims(const torch::Tensor& t, std::int64_t ndim, std::int64_t channels, const char* name) {
    check_arg(t.dim() == ndim && t.size(ndim - 3) == channels,
              std::string("ConditionBundle: '") + name + "' has shape " + shape_str(t) +
                  ", expected " + std::to_string(ndim) + "-d with " + std::to_string(channels) +
                  " channels");
}

}  // namespace

void ConditionBundle::validate(std::int64_t expected_frames) const {
    check_presence(has(Condition::kSketch), sketch, "sketch");
    check_presence(has(Condition::kMask), mask, "mask");
    check_presence(has(Condition::kMvSkeleton), mv_skeleton, "mv_skeleton");
    check_presence(has(Condition::kFlow), flow, "flow");
    check_arg(has(Condition::kText) == text.has_value(),
              "ConditionBundle: presence flag for 'text' inconsistent with field population");
    check_presence(has(Condition::kImagePrior), image_prior, "image_prior");

    std::int64_t B = -1, H = -1, W = -1, F = -1;
    auto meet = [&](std::int64_t& slot, std::int64_t v, const char* what) {
        if (slot < 0) {
            slot = v;
        } else {
            check_arg(slot == v, std::string("ConditionBundle: inconsistent ") + what +
                                     " across present conditions");
        }
    };
    auto meet_spatial = [&](const torch::Tensor& t) {
        meet(B, t.size(0), "batch size");
        meet(H, t.size(t.dim() - 2), "height");
        meet(W, t.size(t.dim() - 1), "width");
    };

    if (sketch.defined()) {
        check_dims(sketch, 4, 1, "sketch");
        meet_spatial(sketch);
    }
    if (mask.defined()) {
        check_dims(mask, 5, 1, "mask");
        meet_spatial(mask);
        meet(F, mask.size(1), "frame count");
        check_arg(torch::frac(mask).abs().max().item<double>() == 0.0 &&
                      mask.min().item<double>() >= 0.0 &&
                      mask.max().item<double>() <= kNumMaskLabels - 1,
                  "ConditionBundle: mask labels outside the configured label set {0.." +
                      std::to_string(kNumMaskLabels - 1) + "}");
    }
    if (mv_skeleton.defined()) {
        check_dims(mv_skeleton, 5, 2, "mv_skeleton");
        meet_spatial(mv_skeleton);
        meet(F, mv_skeleton.size(1), "frame count");
    }
    if (image_prior.defined()) {
        check_dims(image_prior, 4, 1, "image_prior");
        meet_spatial(image_prior);
    }
    if (expected_frames >= 0) meet(F, expected_frames, "frame count");
    if (flow.defined()) {
        check_dims(flow, 5, 2, "flow");
        meet_spatial(flow);
        if (F >= 0) {
            check_arg(flow.size(1) == F - 1,
                      "ConditionBundle: flow has " + std::to_string(flow.size(1)) +
                          " temporal slices, expected F-1 = " + std::to_string(F - 1));
        }
    }
}

ConditionBundle drop_conditions(const ConditionBundle& bundle,
                                const std::array<double, kNumConditions>& drop_probs,
                                double drop_all_prob,
                                std::uint64_t rng_seed) {
    for (double p : drop_probs) {
        check_arg(p >= 0.0 && p <= 1.0, "drop_conditions: probabilities must be in [0,1]");
    }
    check_arg(drop_all_prob >= 0.0 && drop_all_prob <= 1.0,
              "drop_conditions: drop_all_prob must be in [0,1]");

    // Fixed draw budget: one drop-all decision plus one per condition, in
    // condition order. The decision vector is a pure function of the seed.
    std::mt19937_64 rng(rng_seed);
    auto uniform = [&rng]() { return static_cast<double>(rng() >> 11) * 0x1.0p-53; };
    const double u_all = uniform();
    std::array<double, kNumConditions> u{};
    for (int i = 0; i < kNumConditions; ++i) u[i] = uniform();

    ConditionBundle out = bundle;
    if (u_all < drop_all_prob) {
        for (int i = 0; i < kNumConditions; ++i) out.set_absent(static_cast<Condition>(i));
        return out;
    }
    for (int i = 0; i < kNumConditions; ++i) {
        if (u[i] < drop_probs[i]) out.set_absent(static_cast<Condition>(i));
    }
    return out;
}

torch::Tensor concat_with_latent(const torch::Tensor& z, const torch::Tensor& feats) {
    check_arg(z.defined() && feats.defined() && z.dim() == 5 && feats.dim() == 5,
              "concat_with_latent: expected 5-d (B, F, C, h, w) tensors");
    check_arg(z.size(0) == feats.size(0) && z.size(1) == feats.size(1) &&
                  z.size(3) == feats.size(3) && z.size(4) == feats.size(4),
              "concat_with_latent: latent " + shape_str(z) + " and features " + shape_str(feats) +
                  " disagree on batch/frame/spatial dims");
    return torch::cat({z, feats}, /*dim=*/2);
}

LocalConditionEncoderImpl::LocalConditionEncoderImpl(std::int64_t in_channels,
                                                     const LocalCondConfig& cfg) {
    check_arg(cfg.downsample >= 1 && (cfg.downsample & (cfg.downsample - 1)) == 0,
              "LocalConditionEncoder: downsample must be a power of two");
    std::int64_t w = cfg.width;
    net_->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, w, 3).padding(1)));
    net_->push_back(torch::nn::SiLU());
    for (std::int64_t f = cfg.downsample; f > 1; f /= 2) {
        std::int64_t w_out = std::min<std::int64_t>(w * 2, cfg.width * 2);
        net_->push_back(
            torch::nn::Conv2d(torch::nn::Conv2dOptions(w, w_out, 3).stride(2).padding(1)));
        net_->push_back(torch::nn::SiLU());
        w = w_out;
    }
    net_->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(w, cfg.cond_channels, 3).padding(1)));
    register_module("net", net_);
}

torch::Tensor LocalConditionEncoderImpl::forward(const torch::Tensor& x) {
    return net_->forward(x);
}

LocalConditionStackImpl::LocalConditionStackImpl(const LocalCondConfig& cfg, CondStage stage)
    : cfg_(cfg), stage_(stage) {
    sketch_encoder_ = register_module("sketch_encoder", LocalConditionEncoder(1, cfg));
    mask_encoder_ = register_module("mask_encoder", LocalConditionEncoder(1, cfg));
    mv_encoder_ = register_module("mv_encoder", LocalConditionEncoder(2, cfg));
    if (stage == CondStage::kVideo) {
        flow_encoder_ = register_module("flow_encoder", LocalConditionEncoder(2, cfg));
    }
}

torch::Tensor LocalConditionStackImpl::encode_local(const ConditionBundle& bundle,
                                                    std::int64_t batch, std::int64_t frames) {
    check_arg(batch >= 1 && frames >= 1, "encode_local: batch and frames must be >= 1");
    bundle.validate(frames);
    if (stage_ == CondStage::kImage) {
        check_arg(frames == 1, "encode_local: image stage requires F=1");
        check_arg(!bundle.has(Condition::kFlow),
                  "encode_local: flow condition is not allowed in the image stage");
    }
    if (bundle.batch_size() > 0) {
        check_arg(bundle.batch_size() == batch, "encode_local: bundle batch size mismatch");
    }

    const auto dtype = sketch_encoder_->parameters()[0].dtype();
    const std::int64_t H = cfg_.image_size, W = cfg_.image_size;
    const std::int64_t h = H / cfg_.downsample, w = W / cfg_.downsample;
    auto out = torch::zeros({batch, frames, cfg_.cond_channels, h, w},
                            torch::TensorOptions().dtype(dtype));

    auto check_res = [&](const torch::Tensor& t, const char* name) {
        check_arg(t.size(t.dim() - 2) == H && t.size(t.dim() - 1) == W,
                  std::string("encode_local: '") + name + "' resolution " + shape_str(t) +
                      " does not match configured " + std::to_string(H) + "x" + std::to_string(W));
    };

    if (bundle.has(Condition::kSketch)) {
        check_res(bundle.sketch, "sketch");
        auto f = sketch_encoder_->forward(bundle.sketch.to(dtype));  // (B, C, h, w)
        out = out + f.unsqueeze(1).expand({batch, frames, cfg_.cond_channels, h, w});
    }
    if (bundle.has(Condition::kMask)) {
        check_res(bundle.mask, "mask");
        auto x = bundle.mask.to(dtype) / static_cast<double>(kNumMaskLabels - 1);
        auto f = mask_encoder_->forward(x.reshape({batch * frames, 1, H, W}));
        out = out + f.reshape({batch, frames, cfg_.cond_channels, h, w});
    }
    if (bundle.has(Condition::kMvSkeleton)) {
        check_res(bundle.mv_skeleton, "mv_skeleton");
        auto f = mv_encoder_->forward(bundle.mv_skeleton.to(dtype).reshape({batch * frames, 2, H, W}));
        out = out + f.reshape({batch, frames, cfg_.cond_channels, h, w});
    }
    if (bundle.has(Condition::kFlow)) {
        check_res(bundle.flow, "flow");
        auto pad = torch::zeros({batch, 1, 2, H, W}, bundle.flow.options());
        auto x = torch::cat({bundle.flow, pad}, 1).to(dtype);  // (B, F, 2, H, W)
        auto f = flow_encoder_->forward(x.reshape({batch * frames, 2, H, W}));
        out = out + f.reshape({batch, frames, cfg_.cond_channels, h, w});
    }
    return out;
}

}  // namespace pulsediff
