#pragma once

// Shared helpers for the unit and acceptance tests: scratch directories,
// tiny model configs that keep runtimes low, and a subprocess runner for
// CLI round-trips.

#include <torch/torch.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "pulsediff/data.hpp"
#include "pulsediff/model.hpp"
#include "pulsediff/training.hpp"

namespace testsupport {

namespace fs = std::filesystem;

// Self-deleting scratch directory under the system temp root.
class TempDir {
public:
    explicit TempDir(const std::string& tag = "scratch") {
        auto base = fs::temp_directory_path() / ("pulsediff_" + tag + ".XXXXXX");
        std::string tmpl = base.string();
        if (!mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp failed for " + tmpl);
        path_ = tmpl;
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& leaf) const { return path_ / leaf; }

private:
    fs::path path_;
};

inline std::string read_text(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

inline void write_text(const fs::path& p, const std::string& text) {
    fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    out << text;
}

struct CliResult {
    int exit_code = -1;
    std::string out;
    std::string err;
};

// Runs the installed CLI binary with the given arguments. Arguments are
// shell-quoted; stdout/stderr are captured through scratch files.
inline CliResult run_cli(const std::vector<std::string>& args) {
#ifndef PULSEDIFF_CLI_PATH
    throw std::runtime_error("CLI tests require the pulsediff tool target");
#else
    TempDir cap("cli_capture");
    auto quote = [](const std::string& s) {
        std::string q = "'";
        for (char c : s) {
            if (c == '\'')
                q += "'\\''";
            else
                q += c;
        }
        return q + "'";
    };
    std::string cmd = quote(PULSEDIFF_CLI_PATH);
    for (const auto& a : args) cmd += " " + quote(a);
    cmd += " >" + quote((cap / "out").string()) + " 2>" + quote((cap / "err").string());
    int rc = std::system(cmd.c_str());
    CliResult r;
    r.exit_code = (rc >= 0 && WIFEXITED(rc)) ? WEXITSTATUS(rc) : -1;
    r.out = read_text(cap / "out");
    r.err = read_text(cap / "err");
    return r;
#endif
}

// Smallest model geometry that still exercises every code path: two levels
// with attention at the top of the stack, 16x16 pixels, 8x8 latents.
inline pulsediff::ModelConfig tiny_model_config(bool video, std::int64_t frames) {
    pulsediff::ModelConfig cfg;
    cfg.unet.in_channels = 4;
    cfg.unet.out_channels = 2;
    cfg.unet.local_cond_channels = 2;
    cfg.unet.base_channels = 8;
    cfg.unet.channel_multipliers = {1, 2};
    cfg.unet.num_blocks_per_level = 1;
    cfg.unet.attention_levels = {1};
    cfg.unet.context_dim = 16;
    cfg.unet.heads = 2;
    cfg.unet.max_frames = video ? frames : 1;
    cfg.local.image_size = 16;
    cfg.local.downsample = 2;
    cfg.local.cond_channels = 2;
    cfg.local.width = 8;
    cfg.global.context_dim = 16;
    cfg.global.raw_dim = 8;
    cfg.global.text_tokens = 2;
    cfg.global.image_size = 16;
    cfg.global.patch_size = 8;
    cfg.video = video;
    cfg.frames = video ? frames : 1;
    return cfg;
}

// Matching training config for run_training smoke tests.
inline pulsediff::TrainConfig tiny_train_config(pulsediff::TrainStage stage) {
    pulsediff::TrainConfig cfg;
    cfg.stage = stage;
    cfg.steps = 4;
    cfg.batch_size = 2;
    cfg.warmup_steps = 2;
    cfg.frames = stage == pulsediff::TrainStage::kStage1 ? 1 : 4;
    cfg.image_size = 16;
    cfg.latent_channels = 2;
    cfg.cond_channels = 2;
    cfg.downsample = 2;
    cfg.base_channels = 8;
    cfg.context_dim = 16;
    cfg.heads = 2;
    cfg.schedule_steps = 8;
    return cfg;
}

// A deterministic phantom dataset on disk; returns the root directory.
inline fs::path make_phantom_dataset(const fs::path& dir, const std::string& name, int cases,
                                     std::int64_t F = 4, std::int64_t H = 16, std::int64_t W = 16,
                                     std::uint64_t seed = 7) {
    auto root = name.empty() ? dir : dir / name;
    for (int i = 0; i < cases; ++i) {
        pulsediff::PhantomParams params;
        params.chambers = 1 + (i % 2);
        params.period = 4 + (i % 2) * 2;
        auto rec = pulsediff::generate_phantom(params, F, H, W,
                                               pulsediff::mix_seed(seed, "case", i));
        char leaf[32];
        std::snprintf(leaf, sizeof(leaf), "case_%04d", i);
        pulsediff::write_case(root / leaf, rec);
    }
    return root;
}

// Full six-condition bundle with synthetic content, batch 1.
inline pulsediff::ConditionBundle full_bundle(std::int64_t frames, std::int64_t H, std::int64_t W,
                                              std::uint64_t seed) {
    auto gen = pulsediff::cpu_generator(seed);
    pulsediff::ConditionBundle b;
    b.sketch = (torch::rand({1, 1, H, W}, gen) < 0.1).to(torch::kFloat32);
    b.mask = torch::randint(0, pulsediff::kNumMaskLabels, {1, frames, 1, H, W}, gen)
                 .to(torch::kFloat32);
    b.mv_skeleton = (torch::rand({1, frames, 2, H, W}, gen) < 0.05).to(torch::kFloat32);
    if (frames > 1) {
        b.flow = torch::randn({1, frames - 1, 2, H, W}, gen);
        b.present[static_cast<int>(pulsediff::Condition::kFlow)] = true;
    }
    b.text = pulsediff::kPromptA2C;
    b.image_prior = torch::rand({1, 1, H, W}, gen) * 2.0 - 1.0;
    b.present[static_cast<int>(pulsediff::Condition::kSketch)] = true;
    b.present[static_cast<int>(pulsediff::Condition::kMask)] = true;
    b.present[static_cast<int>(pulsediff::Condition::kMvSkeleton)] = true;
    b.present[static_cast<int>(pulsediff::Condition::kText)] = true;
    b.present[static_cast<int>(pulsediff::Condition::kImagePrior)] = true;
    return b;
}

inline double max_abs_diff(const torch::Tensor& a, const torch::Tensor& b) {
    return (a.to(torch::kFloat64) - b.to(torch::kFloat64)).abs().max().item<double>();
}

inline bool bitwise_equal(const torch::Tensor& a, const torch::Tensor& b) {
    return a.sizes() == b.sizes() && a.dtype() == b.dtype() && torch::equal(a, b);
}

}  // namespace testsupport
