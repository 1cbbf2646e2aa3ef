#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "pulsediff/schedule.hpp"
#include "pulsediff/vae.hpp"

namespace pulsediff {

// Contents are chosen for bitwise reproducibility: no timestamps, no
// machine identifiers. config_json is the fully resolved training config
// that produced the checkpoint; config_hash fingerprints it.
struct CheckpointMeta {
    std::string stage;  // "vae" | "1" | "2" | "cmr"
    std::int64_t step = 0;
    std::string config_hash;
    std::string config_json;
    std::int64_t schedule_T = 0;
    double beta_start = 0.0;
    double beta_end = 0.0;
    std::string schedule_family = "linear";
    std::string text_embedder_id;
    std::string image_embedder_id;
};

// Archive of named little-endian float32 tensors plus JSON metadata.
struct Checkpoint {
    CheckpointMeta meta;
    std::vector<std::pair<std::string, torch::Tensor>> tensors;

    const torch::Tensor* find(const std::string& name) const;
    bool has_group(const std::string& prefix) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Detached float32 CPU copies of live parameters, ready for writing.
std::vector<std::pair<std::string, torch::Tensor>> snapshot_params(
    const std::vector<std::pair<std::string, torch::Tensor>>& live);

// Copies checkpoint values into live parameters by exact name. Every live
// name must exist in the checkpoint; extra checkpoint entries outside the
// listed names are ignored (they belong to other groups).
void assign_params(const std::vector<std::pair<std::string, torch::Tensor>>& live,
                   const Checkpoint& ckpt);

// VAE parameters under the "vae." group prefix.
std::vector<std::pair<std::string, torch::Tensor>> vae_contract_named_parameters(const VAE& vae);

// Schedule round-trip through checkpoint metadata.
void store_schedule(CheckpointMeta& meta, const NoiseSchedule& schedule);
NoiseSchedule schedule_from_meta(const CheckpointMeta& meta);

}  // namespace pulsediff
