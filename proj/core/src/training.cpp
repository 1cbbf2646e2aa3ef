#include "pulsediff/training.hpp"

#include "pulsediff/checkpoint.hpp"
#include "pulsediff/common.hpp"
#include "pulsediff/diffusion.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <random>

namespace pulsediff {

namespace {

constexpr double kPi = 3.14159265358979323846;

const std::array<const char*, kNumConditions> kDropKeys = {
    "sketch", "mask", "mv_skeleton", "flow", "text", "image_prior"};

}  // namespace

TrainStage train_stage_from_name(const std::string& name) {
    if (name == "vae") return TrainStage::kVae;
    if (name == "1") return TrainStage::kStage1;
    if (name == "2") return TrainStage::kStage2;
    if (name == "cmr") return TrainStage::kCmr;
    throw ValidationError("unknown training stage: " + name + " (expected vae, 1, 2 or cmr)");
}

std::string train_stage_name(TrainStage stage) {
    switch (stage) {
        case TrainStage::kVae: return "vae";
        case TrainStage::kStage1: return "1";
        case TrainStage::kStage2: return "2";
        case TrainStage::kCmr: return "cmr";
    }
    throw RuntimeError("invalid TrainStage value");
}

// Collects every problem before throwing so a bad config file surfaces all
// of its mistakes in one pass.
void TrainConfig::validate() const {
    std::vector<std::string> issues;
    auto req = [&](bool ok, const std::string& msg) {
        if (!ok) issues.push_back(msg);
    };
    req(steps >= 1, "steps must be >= 1");
    req(batch_size >= 1, "batch_size must be >= 1");
    req(lr_peak > 0.0, "lr_peak must be positive");
    req(warmup_steps >= 1, "warmup_steps must be >= 1");
    req(warmup_steps < steps, "warmup_steps must be < steps");
    if (stage == TrainStage::kStage1)
        req(frames == 1, "stage 1 trains single frames (frames must be 1)");
    if (stage == TrainStage::kStage2 || stage == TrainStage::kCmr)
        req(frames >= 2, "video stages need frames >= 2");
    req(schedule_steps >= 2, "schedule_steps must be >= 2");
    req(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
        "betas must satisfy 0 < beta_start <= beta_end < 1");
    for (int i = 0; i < kNumConditions; ++i)
        req(drop_probs[i] >= 0.0 && drop_probs[i] <= 1.0,
            std::string("drop probability for ") + kDropKeys[i] + " outside [0, 1]");
    req(drop_all_prob >= 0.0 && drop_all_prob <= 1.0, "drop_all probability outside [0, 1]");
    req(vae_lr > 0.0, "vae_lr must be positive");
    if (issues.empty()) {
        // Cross-module geometry checks only make sense once the scalar
        // fields are individually sane.
        try {
            if (stage != TrainStage::kVae)
                make_model_config(*this, stage != TrainStage::kStage1);
            make_vae_config(*this).validate();
        } catch (const ValidationError& e) {
            issues.emplace_back(e.what());
        }
    }
    if (!issues.empty()) {
        std::string msg = "invalid training config:";
        for (const auto& s : issues) msg += "\n  - " + s;
        throw ValidationError(msg);
    }
}

ModelConfig make_model_config(const TrainConfig& cfg, bool video) {
    ModelConfig m;
    m.video = video;
    m.frames = video ? cfg.frames : 1;
    m.unet.out_channels = cfg.latent_channels;
    m.unet.local_cond_channels = cfg.cond_channels;
    m.unet.in_channels = cfg.latent_channels + cfg.cond_channels;
    m.unet.base_channels = cfg.base_channels;
    m.unet.context_dim = cfg.context_dim;
    m.unet.heads = cfg.heads;
    m.unet.max_frames = video ? cfg.frames : 1;
    m.local.image_size = cfg.image_size;
    m.local.downsample = cfg.downsample;
    m.local.cond_channels = cfg.cond_channels;
    m.global.context_dim = cfg.context_dim;
    m.global.image_size = cfg.image_size;
    m.validate();
    return m;
}

VAEConfig make_vae_config(const TrainConfig& cfg) {
    VAEConfig v;
    v.latent_channels = cfg.latent_channels;
    v.downsample = cfg.downsample;
    return v;
}

// ---- config JSON ----

TrainConfig train_config_from_json(const std::string& text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("malformed config JSON: ") + e.what());
    }
    check_arg(doc.is_object(), "config JSON must be an object");

    TrainConfig cfg;
    for (const auto& [key, value] : doc.items()) {
        try {
            if (key == "stage") cfg.stage = train_stage_from_name(value.get<std::string>());
            else if (key == "steps") cfg.steps = value.get<std::int64_t>();
            else if (key == "batch_size") cfg.batch_size = value.get<std::int64_t>();
            else if (key == "lr_peak") cfg.lr_peak = value.get<double>();
            else if (key == "warmup_steps") cfg.warmup_steps = value.get<std::int64_t>();
            else if (key == "frames") cfg.frames = value.get<std::int64_t>();
            else if (key == "image_size") cfg.image_size = value.get<std::int64_t>();
            else if (key == "latent_channels") cfg.latent_channels = value.get<std::int64_t>();
            else if (key == "cond_channels") cfg.cond_channels = value.get<std::int64_t>();
            else if (key == "downsample") cfg.downsample = value.get<std::int64_t>();
            else if (key == "base_channels") cfg.base_channels = value.get<std::int64_t>();
            else if (key == "context_dim") cfg.context_dim = value.get<std::int64_t>();
            else if (key == "heads") cfg.heads = value.get<std::int64_t>();
            else if (key == "schedule_steps") cfg.schedule_steps = value.get<std::int64_t>();
            else if (key == "beta_start") cfg.beta_start = value.get<double>();
            else if (key == "beta_end") cfg.beta_end = value.get<double>();
            else if (key == "seed") cfg.seed = value.get<std::uint64_t>();
            else if (key == "vae_lr") cfg.vae_lr = value.get<double>();
            else if (key == "dataset_kind") cfg.dataset_kind = value.get<std::string>();
            else if (key == "drop_probs") {
                check_arg(value.is_object(), "config: drop_probs must be an object");
                for (const auto& [ck, cv] : value.items()) {
                    if (ck == "all") {
                        cfg.drop_all_prob = cv.get<double>();
                        continue;
                    }
                    cfg.drop_probs[static_cast<int>(condition_from_name(ck))] = cv.get<double>();
                }
            } else {
                throw ValidationError("config: unknown key \"" + key + "\"");
            }
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError("config: bad value for \"" + key + "\": " + e.what());
        }
    }
    cfg.validate();
    return cfg;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open config: " + path.string());
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return train_config_from_json(text);
}

std::string train_config_to_json(const TrainConfig& cfg) {
    nlohmann::json drops;
    for (int i = 0; i < kNumConditions; ++i) drops[kDropKeys[i]] = cfg.drop_probs[i];
    drops["all"] = cfg.drop_all_prob;
    nlohmann::json doc{{"stage", train_stage_name(cfg.stage)},
                       {"steps", cfg.steps},
                       {"batch_size", cfg.batch_size},
                       {"lr_peak", cfg.lr_peak},
                       {"warmup_steps", cfg.warmup_steps},
                       {"frames", cfg.frames},
                       {"image_size", cfg.image_size},
                       {"latent_channels", cfg.latent_channels},
                       {"cond_channels", cfg.cond_channels},
                       {"downsample", cfg.downsample},
                       {"base_channels", cfg.base_channels},
                       {"context_dim", cfg.context_dim},
                       {"heads", cfg.heads},
                       {"schedule_steps", cfg.schedule_steps},
                       {"beta_start", cfg.beta_start},
                       {"beta_end", cfg.beta_end},
                       {"drop_probs", drops},
                       {"seed", cfg.seed},
                       {"vae_lr", cfg.vae_lr},
                       {"dataset_kind", cfg.dataset_kind}};
    return doc.dump(2) + "\n";
}

// ---- schedule / freeze policy ----

double lr_at(std::int64_t step, std::int64_t total_steps, std::int64_t warmup_steps,
             double lr_peak) {
    check_arg(step >= 0, "lr_at: step must be >= 0");
    check_arg(warmup_steps >= 1 && warmup_steps < total_steps, "lr_at: bad warmup/total split");
    check_arg(lr_peak > 0.0, "lr_at: lr_peak must be positive");
    if (step <= warmup_steps)
        return lr_peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
    if (step >= total_steps) return 0.0;
    const double progress = static_cast<double>(step - warmup_steps) /
                            static_cast<double>(total_steps - warmup_steps);
    return lr_peak * 0.5 * (1.0 + std::cos(kPi * progress));
}

double lr_at(std::int64_t step, const TrainConfig& cfg) {
    return lr_at(step, cfg.steps, cfg.warmup_steps, cfg.lr_peak);
}

bool FreezeMask::is_trainable(const std::string& contract_name) const {
    if (contract_name.rfind("cond.image_prior.", 0) == 0) return false;
    for (const auto& prefix : trainable)
        if (contract_name.rfind(prefix, 0) == 0) return true;
    return false;
}

void FreezeMask::apply(const std::vector<std::pair<std::string, torch::Tensor>>& params) const {
    for (const auto& prefix : trainable) {
        bool hit = false;
        for (const auto& [name, p] : params)
            if (name.rfind(prefix, 0) == 0) {
                hit = true;
                break;
            }
        if (!hit)
            throw ValidationError("freeze mask pattern matches no parameter: " + prefix);
    }
    for (const auto& [name, p] : params) p.set_requires_grad(is_trainable(name));
}

FreezeMask stage1_freeze_mask() { return FreezeMask{{"unet.", "cond."}}; }

FreezeMask stage2_freeze_mask() {
    return FreezeMask{
        {"unet.temporal.", "cond.flow_encoder.", "unet.xattn.q_text.", "unet.xattn.q_img."}};
}

ConditionBundle force_mask_only(const ConditionBundle& bundle) {
    ConditionBundle out = bundle;
    for (int i = 0; i < kNumConditions; ++i)
        if (i != static_cast<int>(Condition::kMask)) out.set_absent(static_cast<Condition>(i));
    return out;
}

void enforce_mask_only(const ConditionBundle& bundle) {
    for (int i = 0; i < kNumConditions; ++i)
        if (i != static_cast<int>(Condition::kMask) && bundle.present[i])
            throw ValidationError(std::string("condition leak in mask-only finetune: ") +
                                  kConditionNames[i] + " is present");
}

// ---- orchestration ----

namespace {

void write_loss_csv(const std::filesystem::path& path, const std::vector<double>& lrs,
                    const std::vector<double>& losses) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw RuntimeError("cannot open for writing: " + path.string());
    out << "step,lr,loss\n";
    out.precision(12);
    for (std::size_t i = 0; i < losses.size(); ++i)
        out << i << "," << lrs[i] << "," << losses[i] << "\n";
    if (!out) throw RuntimeError("write failed: " + path.string());
}

CheckpointMeta make_meta(const TrainConfig& cfg, const NoiseSchedule& schedule) {
    CheckpointMeta meta;
    meta.stage = train_stage_name(cfg.stage);
    meta.step = cfg.steps;
    meta.config_json = train_config_to_json(cfg);
    meta.config_hash = content_hash(meta.config_json);
    store_schedule(meta, schedule);
    meta.text_embedder_id = kTextEmbedderId;
    meta.image_embedder_id = kImageEmbedderId;
    return meta;
}

TrainRunResult run_vae_stage(const TrainConfig& cfg, const Dataset& ds,
                             const std::filesystem::path& out_dir) {
    auto records = ds.load_all();
    check_arg(!records.empty(), "vae training: dataset is empty");
    std::vector<torch::Tensor> all;
    for (const auto& rec : records) {
        check_arg(rec.frames.size(2) == cfg.image_size && rec.frames.size(3) == cfg.image_size,
                  "vae training: dataset resolution does not match config image_size");
        all.push_back(rec.frames);
    }
    auto frames = torch::cat(all, 0);  // (N, 1, H, W)

    torch::manual_seed(mix_seed(cfg.seed, "model.init"));
    VAE vae(make_vae_config(cfg));
    VAETrainOptions opts;
    opts.steps = cfg.steps;
    opts.batch_size = cfg.batch_size;
    opts.lr = cfg.vae_lr;
    opts.seed = cfg.seed;
    auto log = train_vae(vae, frames, opts);

    // The VAE trains at a fixed rate; the warmup/cosine schedule belongs to
    // the diffusion stages.
    auto schedule = make_linear_schedule(cfg.schedule_steps, cfg.beta_start, cfg.beta_end);
    Checkpoint ckpt;
    ckpt.meta = make_meta(cfg, schedule);
    ckpt.tensors = snapshot_params(vae_contract_named_parameters(vae));

    TrainRunResult result;
    result.checkpoint_path = out_dir / "checkpoint.pdck";
    result.loss_csv_path = out_dir / "loss.csv";
    result.losses = log.loss;
    save_checkpoint(result.checkpoint_path, ckpt);
    write_loss_csv(result.loss_csv_path, std::vector<double>(log.loss.size(), cfg.vae_lr),
                   log.loss);
    return result;
}

}  // namespace

TrainRunResult run_training(const TrainConfig& cfg, const std::filesystem::path& data_root,
                            const std::optional<std::filesystem::path>& init_ckpt,
                            const std::filesystem::path& out_dir) {
    cfg.validate();
    std::filesystem::create_directories(out_dir);

    const auto kind = cfg.stage == TrainStage::kCmr ? DatasetKind::kCmrLike
                                                    : dataset_kind_from_name(cfg.dataset_kind);
    auto ds = load_dataset(data_root, kind);
    if (cfg.stage == TrainStage::kVae) return run_vae_stage(cfg, ds, out_dir);

    if (!init_ckpt)
        throw ValidationError("stage " + train_stage_name(cfg.stage) +
                              " requires --init-ckpt (" +
                              (cfg.stage == TrainStage::kStage1
                                   ? "the pretrained VAE checkpoint"
                                   : cfg.stage == TrainStage::kStage2
                                         ? "the stage-1 checkpoint"
                                         : "the stage-2 checkpoint") +
                              ")");
    auto init = load_checkpoint(*init_ckpt);

    auto records = ds.load_all();
    check_arg(!records.empty(), "training: dataset is empty");
    for (const auto& rec : records) {
        check_arg(rec.frames.size(2) == cfg.image_size && rec.frames.size(3) == cfg.image_size,
                  "training: dataset resolution does not match config image_size");
        if (cfg.stage != TrainStage::kStage1)
            check_arg(rec.num_frames() >= cfg.frames,
                      "training: case shorter than the configured clip length");
    }

    const bool video = cfg.stage != TrainStage::kStage1;
    auto schedule = make_linear_schedule(cfg.schedule_steps, cfg.beta_start, cfg.beta_end);

    torch::manual_seed(mix_seed(cfg.seed, "model.init"));
    VAE vae(make_vae_config(cfg));
    if (!init.has_group("vae."))
        throw RuntimeError("init checkpoint is missing the vae.* parameter group");
    assign_params(vae_contract_named_parameters(vae), init);
    for (auto& p : vae->parameters()) p.set_requires_grad(false);

    DiffusionModel model{nullptr};
    FreezeMask freeze;
    if (cfg.stage == TrainStage::kStage1) {
        model = DiffusionModel(make_model_config(cfg, false));
        freeze = stage1_freeze_mask();
    } else if (cfg.stage == TrainStage::kStage2) {
        DiffusionModel image_model(make_model_config(cfg, false));
        assign_params(image_model->contract_named_parameters(), init);
        auto [video_model, report] = inflate_model(image_model, cfg.frames,
                                                   mix_seed(cfg.seed, "inflate"));
        model = video_model;
        freeze = stage2_freeze_mask();
    } else {  // cmr: the checkpoint already holds a full video model
        model = DiffusionModel(make_model_config(cfg, true));
        assign_params(model->contract_named_parameters(), init);
        freeze = stage2_freeze_mask();
    }
    auto contract = model->contract_named_parameters();
    freeze.apply(contract);

    std::vector<torch::Tensor> trainable;
    for (const auto& [name, p] : contract)
        if (p.requires_grad()) trainable.push_back(p);
    check_state(!trainable.empty(), "training: freeze mask left nothing trainable");

    torch::optim::Adam opt(trainable,
                           torch::optim::AdamOptions(cfg.lr_peak).betas({0.9, 0.999}));

    std::mt19937_64 pick(mix_seed(cfg.seed, "train.batch"));
    std::mt19937_64 step_rng(mix_seed(cfg.seed, "train.t"));
    auto noise_gen = cpu_generator(mix_seed(cfg.seed, "train.noise"));
    std::uint64_t drop_counter = 0;

    std::vector<double> losses, lrs;
    losses.reserve(cfg.steps);
    for (std::int64_t step = 0; step < cfg.steps; ++step) {
        const double lr = lr_at(step, cfg);
        for (auto& group : opt.param_groups())
            static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
        opt.zero_grad();

        torch::Tensor loss_sum = torch::zeros({}, torch::kFloat32);
        for (std::int64_t b = 0; b < cfg.batch_size; ++b) {
            const auto& rec = records[pick() % records.size()];
            ConditionBundle bundle;
            torch::Tensor x;  // (1, F, 1, H, W)
            if (cfg.stage == TrainStage::kStage1) {
                const auto k = static_cast<std::int64_t>(pick() % rec.num_frames());
                bundle = bundle_for_frame(rec, k);
                x = rec.frames[k].unsqueeze(0).unsqueeze(0);
            } else {
                const auto span = rec.num_frames() - cfg.frames;
                const auto start =
                    span > 0 ? static_cast<std::int64_t>(pick() % (span + 1)) : 0;
                auto win = window_record(rec, start, cfg.frames);
                if (cfg.stage == TrainStage::kCmr) {
                    bundle = force_mask_only(bundle_for_clip(win));
                    enforce_mask_only(bundle);
                } else {
                    bundle = bundle_for_clip(win);
                }
                x = win.frames.unsqueeze(0);
            }
            bundle = drop_conditions(bundle, cfg.drop_probs, cfg.drop_all_prob,
                                     mix_seed(cfg.seed, "train.drop", drop_counter++));

            torch::Tensor z0;
            {
                torch::NoGradGuard no_grad;
                z0 = vae->encode(x);
            }
            auto t = torch::full(
                {1},
                static_cast<std::int64_t>(step_rng() % static_cast<std::uint64_t>(schedule.T)),
                torch::kInt64);
            auto eps = torch::randn(z0.sizes(), noise_gen,
                                    torch::TensorOptions().dtype(torch::kFloat32));
            loss_sum = loss_sum + training_loss(*model, z0, bundle, t, eps, schedule);
        }
        auto loss = loss_sum / static_cast<double>(cfg.batch_size);
        loss.backward();
        opt.step();
        losses.push_back(loss.item<double>());
        lrs.push_back(lr);
    }

    Checkpoint ckpt;
    ckpt.meta = make_meta(cfg, schedule);
    ckpt.tensors = snapshot_params(model->contract_named_parameters());
    auto vae_params = snapshot_params(vae_contract_named_parameters(vae));
    ckpt.tensors.insert(ckpt.tensors.end(), vae_params.begin(), vae_params.end());

    TrainRunResult result;
    result.checkpoint_path = out_dir / "checkpoint.pdck";
    result.loss_csv_path = out_dir / "loss.csv";
    result.losses = std::move(losses);
    save_checkpoint(result.checkpoint_path, ckpt);
    write_loss_csv(result.loss_csv_path, lrs, result.losses);
    return result;
}

}  // namespace pulsediff
