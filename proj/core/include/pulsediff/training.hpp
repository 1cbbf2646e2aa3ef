#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "pulsediff/conditions.hpp"
#include "pulsediff/data.hpp"
#include "pulsediff/model.hpp"
#include "pulsediff/vae.hpp"

namespace pulsediff {

// "vae" pretrains the autoencoder, "1" the image diffusion model, "2" the
// inflated video model, "cmr" the mask-only volume finetune.
enum class TrainStage { kVae, kStage1, kStage2, kCmr };

TrainStage train_stage_from_name(const std::string& name);
std::string train_stage_name(TrainStage stage);

struct TrainConfig {
    TrainStage stage = TrainStage::kStage1;
    std::int64_t steps = 200;  // optimizer-step budget (stands in for epochs)
    std::int64_t batch_size = 16;
    double lr_peak = 1e-4;
    std::int64_t warmup_steps = 20;
    std::int64_t frames = 1;  // F; must be 1 for stage 1
    std::int64_t image_size = 32;

    // Model scale. Defaults are the desk-scale geometry; tests shrink them.
    std::int64_t latent_channels = 4;
    std::int64_t cond_channels = 4;
    std::int64_t downsample = 4;
    std::int64_t base_channels = 64;
    std::int64_t context_dim = 128;
    std::int64_t heads = 4;

    // Diffusion schedule.
    std::int64_t schedule_steps = 64;
    double beta_start = 1e-4;
    double beta_end = 0.02;

    // Joint-training condition dropping (order follows Condition).
    std::array<double, kNumConditions> drop_probs{0.1, 0.1, 0.1, 0.1, 0.1, 0.1};
    double drop_all_prob = 0.1;

    std::uint64_t seed = 0;
    double vae_lr = 1e-3;               // stage "vae" only
    std::string dataset_kind = "phantom";  // ignored for stage "cmr" (always cmr-like)

    void validate() const;
};

// JSON round-trip; parsing starts from the defaults above, rejects unknown
// keys, and accepts partial documents.
TrainConfig train_config_from_json(const std::string& text);
TrainConfig load_train_config(const std::filesystem::path& path);
std::string train_config_to_json(const TrainConfig& cfg);

// Learning rate at an optimizer step: linear ramp 0 -> lr_peak over
// warmup_steps, then cosine decay reaching 0 at total_steps. Continuous at
// the junction.
double lr_at(std::int64_t step, std::int64_t total_steps, std::int64_t warmup_steps,
             double lr_peak);
double lr_at(std::int64_t step, const TrainConfig& cfg);

// Which contract-named parameters stay trainable; everything else is
// frozen. Patterns are name prefixes. The image-prior encoder is a frozen
// feature extractor and is never enabled, whatever the patterns say.
struct FreezeMask {
    std::vector<std::string> trainable;

    bool is_trainable(const std::string& contract_name) const;

    // Sets requires_grad on every parameter; each pattern must match at
    // least one name.
    void apply(const std::vector<std::pair<std::string, torch::Tensor>>& params) const;
};

FreezeMask stage1_freeze_mask();  // everything (minus the image-prior encoder)
FreezeMask stage2_freeze_mask();  // temporal, flow encoder, both xattn query projections

// Keeps the mask, absents everything else. The mask-only guard for the CMR
// finetune; enforce_mask_only throws if any other condition is present.
ConditionBundle force_mask_only(const ConditionBundle& bundle);
void enforce_mask_only(const ConditionBundle& bundle);

// Expands the scalar knobs into the module configs.
ModelConfig make_model_config(const TrainConfig& cfg, bool video);
VAEConfig make_vae_config(const TrainConfig& cfg);

struct TrainRunResult {
    std::filesystem::path checkpoint_path;  // <out>/checkpoint.pdck
    std::filesystem::path loss_csv_path;    // <out>/loss.csv
    std::vector<double> losses;             // one entry per optimizer step
};

// Full orchestration for one stage: loads the dataset under data_root,
// builds and initializes the models (init_ckpt is required for every stage
// except "vae"), applies the freeze policy, runs the loop, and writes
// checkpoint plus loss log into out_dir. Deterministic for a fixed config.
TrainRunResult run_training(const TrainConfig& cfg, const std::filesystem::path& data_root,
                            const std::optional<std::filesystem::path>& init_ckpt,
                            const std::filesystem::path& out_dir);

}  // namespace pulsediff
