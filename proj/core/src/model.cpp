#include "pulsediff/model.hpp"

#include "pulsediff/common.hpp"

#include <set>

namespace pulsediff {

void ModelConfig::validate() const {
    unet.validate();
    global.validate();
    check_arg(unet.local_cond_channels == local.cond_channels,
              "ModelConfig: unet.local_cond_channels must equal local.cond_channels");
    check_arg(unet.context_dim == global.context_dim,
              "ModelConfig: unet.context_dim must equal global.context_dim");
    check_arg(local.image_size == global.image_size,
              "ModelConfig: local and global image sizes disagree");
    check_arg(frames >= 1, "ModelConfig: frames must be >= 1");
    if (!video)
        check_arg(frames == 1, "ModelConfig: image models use frames=1");
    else
        check_arg(frames <= unet.max_frames,
                  "ModelConfig: frames exceeds unet.max_frames");
}

DiffusionModelImpl::DiffusionModelImpl(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    unet = register_module("unet", Unet(cfg_.unet, cfg_.video));
    cond = register_module(
        "cond", LocalConditionStack(cfg_.local, cfg_.video ? CondStage::kVideo
                                                           : CondStage::kImage));
    global = register_module("global", GlobalConditioner(cfg_.global));
}

torch::Tensor DiffusionModelImpl::predict(const torch::Tensor& z_t, const torch::Tensor& t,
                                          const ConditionBundle& c) {
    check_arg(z_t.dim() == 5, "DiffusionModel: expected (B, F, C_lat, h, w), got " +
                                  shape_str(z_t));
    const auto B = z_t.size(0), F = z_t.size(1), C = z_t.size(2);
    const auto h = z_t.size(3), w = z_t.size(4);
    check_arg(C == cfg_.unet.out_channels, "DiffusionModel: latent channel mismatch");
    check_arg(F == cfg_.frames, "DiffusionModel: clip length " + std::to_string(F) +
                                    " != configured frames " + std::to_string(cfg_.frames));
    c.validate(F);

    auto feats = cond->encode_local(c, B, F);            // (B, F, C_cond, h, w)
    auto x = concat_with_latent(z_t, feats);             // (B, F, C_in, h, w)
    auto ctx = global->make_context(c, B, F);            // tokens on (B*F, ., .)
    auto folded = x.reshape({B * F, cfg_.unet.in_channels, h, w});
    auto t_rep = t.repeat_interleave(F);
    auto eps = unet(folded, t_rep, ctx, F);
    return eps.reshape({B, F, C, h, w});
}

std::vector<std::pair<std::string, torch::Tensor>>
DiffusionModelImpl::contract_named_parameters() const {
    std::vector<std::pair<std::string, torch::Tensor>> out;
    std::set<std::string> seen;
    for (const auto& item : named_parameters()) {
        auto name = contract_param_name(item.key());
        check_state(seen.insert(name).second,
                    "contract_named_parameters: duplicate name " + name);
        out.emplace_back(std::move(name), item.value());
    }
    return out;
}

std::string contract_param_name(const std::string& torch_name) {
    if (torch_name.rfind("unet.", 0) == 0) return unet_contract_name(torch_name.substr(5));
    if (torch_name.rfind("cond.", 0) == 0) return torch_name;
    if (torch_name.rfind("global.", 0) == 0) return "cond." + torch_name.substr(7);
    throw RuntimeError("contract_param_name: unexpected parameter path " + torch_name);
}

std::pair<DiffusionModel, InflationReport> inflate_model(const DiffusionModel& image_model,
                                                         std::int64_t frames,
                                                         std::uint64_t init_seed) {
    check_arg(!image_model->config().video, "inflate_model: source is already a video model");
    check_arg(frames >= 1, "inflate_model: frames must be >= 1");

    auto cfg = image_model->config();
    cfg.video = true;
    cfg.frames = frames;
    cfg.unet.max_frames = frames;

    torch::manual_seed(init_seed);
    DiffusionModel video_model(cfg);

    auto src = image_model->named_parameters();
    auto dst = video_model->named_parameters();
    InflationReport report;
    std::set<std::string> src_names;

    torch::NoGradGuard no_grad;
    for (const auto& item : src) {
        src_names.insert(item.key());
        auto* target = dst.find(item.key());
        check_state(target != nullptr,
                    "inflate_model: video model lacks parameter " + item.key());
        const auto& value = item.value();
        if (target->dim() == value.dim() + 1) {
            check_state(value.dim() == 4 && target->size(2) == 1,
                        "inflate_model: unexpected rank change for " + item.key());
            target->copy_(value.unsqueeze(2));
        } else {
            check_state(target->sizes() == value.sizes(),
                        "inflate_model: shape mismatch for " + item.key());
            target->copy_(value);
        }
        const auto name = contract_param_name(item.key());
        report.mapped.emplace_back(name, name);
    }
    for (const auto& item : dst) {
        if (src_names.count(item.key())) continue;
        const auto name = contract_param_name(item.key());
        if (name.rfind("unet.temporal.", 0) == 0) {
            report.new_temporal.push_back(name);
        } else if (name.rfind("cond.flow_encoder.", 0) == 0) {
            report.new_flow.push_back(name);
        } else {
            throw RuntimeError("inflate_model: unexpected new parameter " + name);
        }
    }
    check_state(!report.new_temporal.empty(), "inflate_model: no temporal layers created");
    check_state(!report.new_flow.empty(), "inflate_model: no flow encoder created");
    return {video_model, report};
}

}  // namespace pulsediff
