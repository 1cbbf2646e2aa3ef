// pulsediff: phantom data generation, two-stage diffusion training, video
// sampling and distribution metrics, from one binary.
//
// Exit codes: 0 ok, 2 validation error, 3 runtime error. Diagnostics go to
// stderr. Every command writes a manifest.json into its output directory
// before doing work; re-running with the same flags and seed reproduces
// all outputs bitwise (manifest timestamps aside).

#include <CLI11.hpp>
#include <json.hpp>

#include "pulsediff/checkpoint.hpp"
#include "pulsediff/common.hpp"
#include "pulsediff/data.hpp"
#include "pulsediff/diffusion.hpp"
#include "pulsediff/metrics.hpp"
#include "pulsediff/model.hpp"
#include "pulsediff/training.hpp"
#include "pulsediff/vae.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <string>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string iso_now() {
    const auto now = std::chrono::system_clock::now();
    const auto t = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw pulsediff::RuntimeError("cannot open for writing: " + path.string());
    out << text;
    if (!out) throw pulsediff::RuntimeError("write failed: " + path.string());
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw pulsediff::ValidationError("cannot open: " + path.string());
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

// Reproducibility record. config_hash covers the config file when the
// command takes one, otherwise the resolved argument set, so a manifest
// pins everything needed to re-run the command.
class Manifest {
 public:
    Manifest(std::string command, const fs::path& out_dir, std::string config_path,
             const std::string& config_content, std::uint64_t seed)
        : path_(out_dir / "manifest.json") {
        doc_["command"] = std::move(command);
        doc_["config_path"] = std::move(config_path);
        doc_["config_hash"] = pulsediff::content_hash(config_content);
        doc_["seed"] = seed;
        doc_["output_dir"] = out_dir.string();
        doc_["started_at"] = iso_now();
        doc_["finished_at"] = nullptr;
        fs::create_directories(out_dir);
        write_text(path_, doc_.dump(2) + "\n");
    }

    void finish() {
        doc_["finished_at"] = iso_now();
        write_text(path_, doc_.dump(2) + "\n");
    }

 private:
    fs::path path_;
    json doc_;
};

// ---- gen-data ----

int cmd_gen_data(const fs::path& out, std::int64_t cases, std::int64_t frames, std::int64_t size,
                 std::uint64_t seed, double view_mix) {
    pulsediff::check_arg(cases >= 1, "--cases must be >= 1");
    pulsediff::check_arg(view_mix >= 0.0 && view_mix <= 1.0, "--view-mix must be in [0, 1]");

    const json args{{"cases", cases}, {"frames", frames},   {"size", size},
                    {"seed", seed},   {"view_mix", view_mix}};
    Manifest manifest("gen-data", out, "", args.dump(), seed);

    const auto n_a2c = std::llround(view_mix * static_cast<double>(cases));
    for (std::int64_t i = 0; i < cases; ++i) {
        const auto case_seed = pulsediff::mix_seed(seed, "case", static_cast<std::uint64_t>(i));
        std::mt19937_64 rng(pulsediff::mix_seed(case_seed, "params"));
        auto uniform = [&](double lo, double hi) {
            return lo + (hi - lo) * (static_cast<double>(rng() >> 11) * 0x1.0p-53);
        };
        pulsediff::PhantomParams params;
        params.chambers = i < n_a2c ? 1 : 2;
        params.period = 6 + 2 * static_cast<std::int64_t>(rng() % 3);  // 6, 8 or 10
        params.radius_amplitude = uniform(0.06, 0.14);
        params.valve_sweep = uniform(0.5, 1.1);
        params.speckle_contrast = uniform(0.35, 0.6);

        auto rec = pulsediff::generate_phantom(params, frames, size, size, case_seed);
        char name[32];
        std::snprintf(name, sizeof(name), "case_%04d", static_cast<int>(i));
        pulsediff::write_case(out / name, rec);
    }
    manifest.finish();
    std::cout << "wrote " << cases << " cases under " << out.string() << "\n";
    return 0;
}

// ---- train ----

int cmd_train(const std::string& stage_flag, const fs::path& config_path, const fs::path& data,
              const std::optional<fs::path>& init_ckpt, const fs::path& out) {
    const auto config_text = read_text(config_path);
    auto cfg = pulsediff::train_config_from_json(config_text);
    if (!stage_flag.empty()) {
        cfg.stage = pulsediff::train_stage_from_name(stage_flag);
        cfg.validate();
    }
    if ((cfg.stage == pulsediff::TrainStage::kStage2 ||
         cfg.stage == pulsediff::TrainStage::kCmr) &&
        !init_ckpt)
        throw pulsediff::ValidationError("--stage " + pulsediff::train_stage_name(cfg.stage) +
                                         " requires --init-ckpt");

    Manifest manifest("train", out, config_path.string(), config_text, cfg.seed);
    auto result = pulsediff::run_training(cfg, data, init_ckpt, out);
    manifest.finish();
    std::cout << "checkpoint: " << result.checkpoint_path.string() << "\n"
              << "loss log:   " << result.loss_csv_path.string() << "\n"
              << "final loss: " << (result.losses.empty() ? 0.0 : result.losses.back()) << "\n";
    return 0;
}

// ---- sample ----

int cmd_sample(const fs::path& ckpt_path, const std::optional<fs::path>& conditions_dir,
               const std::string& drop_list, double guidance_scale, std::uint64_t seed,
               const fs::path& out) {
    const json args{{"ckpt", ckpt_path.string()},
                    {"conditions", conditions_dir ? conditions_dir->string() : ""},
                    {"drop", drop_list},
                    {"guidance_scale", guidance_scale},
                    {"seed", seed}};
    Manifest manifest("sample", out, "", args.dump(), seed);

    auto ckpt = pulsediff::load_checkpoint(ckpt_path);
    if (ckpt.meta.stage == "vae")
        throw pulsediff::ValidationError(
            "checkpoint holds only a VAE; sampling needs a stage 1/2/cmr checkpoint");
    auto cfg = pulsediff::train_config_from_json(ckpt.meta.config_json);
    const bool video = ckpt.meta.stage != "1";

    torch::manual_seed(pulsediff::mix_seed(cfg.seed, "model.init"));
    pulsediff::VAE vae(pulsediff::make_vae_config(cfg));
    pulsediff::assign_params(pulsediff::vae_contract_named_parameters(vae), ckpt);
    pulsediff::DiffusionModel model(pulsediff::make_model_config(cfg, video));
    pulsediff::assign_params(model->contract_named_parameters(), ckpt);
    model->eval();
    auto schedule = pulsediff::schedule_from_meta(ckpt.meta);

    const auto frames = video ? cfg.frames : 1;
    pulsediff::ConditionBundle bundle;  // default: everything absent
    if (conditions_dir) {
        auto rec = pulsediff::load_case(*conditions_dir, pulsediff::DatasetKind::kCamusLike);
        pulsediff::check_arg(rec.num_frames() >= frames,
                             "conditioning case has fewer frames than the model generates");
        pulsediff::check_arg(rec.frames.size(2) == cfg.image_size &&
                                 rec.frames.size(3) == cfg.image_size,
                             "conditioning case resolution does not match the checkpoint");
        auto win = pulsediff::window_record(rec, 0, frames);
        bundle = video ? pulsediff::bundle_for_clip(win) : pulsediff::bundle_for_frame(rec, 0);
    }
    if (!drop_list.empty())
        for (std::size_t pos = 0; pos < drop_list.size();) {
            auto comma = drop_list.find(',', pos);
            if (comma == std::string::npos) comma = drop_list.size();
            bundle.set_absent(
                pulsediff::condition_from_name(drop_list.substr(pos, comma - pos)));
            pos = comma + 1;
        }

    pulsediff::GuidanceSpec guidance;
    guidance.scale = guidance_scale;
    const auto latent = cfg.image_size / cfg.downsample;
    auto z = pulsediff::ddpm_sample(*model, {1, frames, cfg.latent_channels, latent, latent},
                                    bundle, schedule, guidance,
                                    pulsediff::mix_seed(seed, "sample"));
    torch::Tensor decoded;
    {
        torch::NoGradGuard no_grad;
        decoded = vae->decode(z);  // (1, F, 1, H, W)
    }

    fs::create_directories(out / "frames");
    for (std::int64_t k = 0; k < frames; ++k) {
        char name[16];
        std::snprintf(name, sizeof(name), "%04d.pgm", static_cast<int>(k));
        pulsediff::write_pgm16(out / "frames" / name, decoded[0][k][0]);
    }

    json used = json::array(), absent = json::array();
    for (int i = 0; i < pulsediff::kNumConditions; ++i)
        (bundle.present[i] ? used : absent).push_back(pulsediff::kConditionNames[i]);
    const json report{{"stage", ckpt.meta.stage},
                      {"frames", frames},
                      {"image_size", cfg.image_size},
                      {"guidance_scale", guidance_scale},
                      {"seed", seed},
                      {"conditions_used", used},
                      {"conditions_absent", absent},
                      {"text_embedder_id", ckpt.meta.text_embedder_id},
                      {"image_embedder_id", ckpt.meta.image_embedder_id}};
    write_text(out / "report.json", report.dump(2) + "\n");
    manifest.finish();
    std::cout << "wrote " << frames << " frames under " << (out / "frames").string() << "\n";
    return 0;
}

// ---- evaluate ----

int cmd_evaluate(const fs::path& real_dir, const fs::path& fake_dir, const fs::path& out,
                 std::uint64_t seed) {
    const json args{{"real", real_dir.string()}, {"fake", fake_dir.string()}, {"seed", seed}};
    Manifest manifest("evaluate", out, "", args.dump(), seed);

    auto load_split = [](const fs::path& root) {
        auto ds = pulsediff::load_dataset(root, pulsediff::DatasetKind::kCamusLike);
        pulsediff::check_arg(!ds.cases.empty(), "no cases under " + root.string());
        return ds;
    };
    auto real_ds = load_split(real_dir);
    auto fake_ds = load_split(fake_dir);
    auto real = real_ds.load_all();
    auto fake = fake_ds.load_all();

    auto clips = [](const std::vector<pulsediff::SampleRecord>& recs, const char* which) {
        const auto F = recs.front().num_frames();
        std::vector<torch::Tensor> vs;
        for (const auto& r : recs) {
            pulsediff::check_arg(r.num_frames() == F,
                                 std::string(which) + " set has mixed clip lengths");
            vs.push_back(r.frames);
        }
        return torch::stack(vs, 0);  // (N, F, 1, H, W)
    };
    auto real_clips = clips(real, "real");
    auto fake_clips = clips(fake, "fake");

    auto image_embedder = pulsediff::make_default_image_embedder(seed);
    auto video_embedder = pulsediff::make_default_video_embedder(seed);
    const double fid = pulsediff::fid(real_clips.flatten(0, 1), fake_clips.flatten(0, 1),
                                      *image_embedder);
    const double fvd = pulsediff::fvd(real_clips, fake_clips, *video_embedder);

    // SSIM pairs generated cases with the real cases carrying the same id
    // (same conditions), frame by frame, on [0,1] intensities.
    json per_case = json::array();
    double ssim_sum = 0.0;
    std::size_t paired = 0;
    for (std::size_t i = 0; i < real_ds.cases.size(); ++i)
        for (std::size_t j = 0; j < fake_ds.cases.size(); ++j)
            if (fake_ds.cases[j].id == real_ds.cases[i].id) {
                const auto& a = real[i];
                const auto& b = fake[j];
                const auto F = std::min(a.num_frames(), b.num_frames());
                pulsediff::check_arg(a.frames.size(2) == b.frames.size(2) &&
                                         a.frames.size(3) == b.frames.size(3),
                                     "paired case resolution mismatch: " + real_ds.cases[i].id);
                const double s =
                    pulsediff::ssim((a.frames.slice(0, 0, F) + 1.0) / 2.0,
                                    (b.frames.slice(0, 0, F) + 1.0) / 2.0);
                per_case.push_back({{"id", real_ds.cases[i].id}, {"ssim", s}});
                ssim_sum += s;
                ++paired;
            }
    pulsediff::check_arg(paired > 0,
                         "no case ids shared between --real and --fake; SSIM needs pairs");

    const json report{{"fid", fid},
                      {"fvd", fvd},
                      {"ssim_mean", ssim_sum / static_cast<double>(paired)},
                      {"ssim_per_case", per_case},
                      {"n_real", real.size()},
                      {"n_fake", fake.size()},
                      {"embedder_id",
                       {{"image", image_embedder->id()}, {"video", video_embedder->id()}}},
                      {"seed", seed}};
    write_text(out / "report.json", report.dump(2) + "\n");
    manifest.finish();
    std::cout << report.dump(2) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    // One deterministic compute thread unless the caller opts out; intra-op
    // parallelism would make training/sampling reruns hardware dependent.
    if (const char* threads = std::getenv("PULSEDIFF_TORCH_THREADS"))
        torch::set_num_threads(std::max(1, std::atoi(threads)));
    else
        torch::set_num_threads(1);

    CLI::App app{"multimodal-conditioned latent video diffusion, desk scale"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("gen-data", "generate a phantom dataset");
    fs::path gen_out;
    std::int64_t gen_cases = 8, gen_frames = 8, gen_size = 32;
    std::uint64_t gen_seed = 0;
    double view_mix = 0.5;
    gen->add_option("--out", gen_out, "output dataset directory")->required();
    gen->add_option("--cases", gen_cases, "number of cases");
    gen->add_option("--frames", gen_frames, "frames per case");
    gen->add_option("--size", gen_size, "image height and width");
    gen->add_option("--seed", gen_seed, "master seed");
    gen->add_option("--view-mix", view_mix, "fraction of two-chamber (A2C) cases");

    auto* train = app.add_subcommand("train", "run one training stage");
    std::string train_stage;
    fs::path train_config, train_data, train_out;
    std::string train_init;
    train->add_option("--stage", train_stage, "vae, 1, 2 or cmr (overrides the config)");
    train->add_option("--config", train_config, "training config JSON")->required();
    train->add_option("--data", train_data, "dataset root")->required();
    train->add_option("--init-ckpt", train_init, "initialization checkpoint");
    train->add_option("--out", train_out, "output directory")->required();

    auto* sample = app.add_subcommand("sample", "draw a video from a checkpoint");
    fs::path sample_ckpt, sample_out;
    std::string sample_conditions, sample_drop;
    double guidance_scale = 1.0;
    std::uint64_t sample_seed = 0;
    sample->add_option("--ckpt", sample_ckpt, "model checkpoint")->required();
    sample->add_option("--conditions", sample_conditions, "case directory with conditions");
    sample->add_option("--drop", sample_drop, "comma-separated conditions to drop");
    sample->add_option("--guidance-scale", guidance_scale, "classifier-free guidance scale");
    sample->add_option("--seed", sample_seed, "sampling seed");
    sample->add_option("--out", sample_out, "output directory")->required();

    auto* eval = app.add_subcommand("evaluate", "compute SSIM/FID/FVD between two datasets");
    fs::path eval_real, eval_fake, eval_out;
    std::uint64_t eval_seed = 0;
    eval->add_option("--real", eval_real, "reference dataset")->required();
    eval->add_option("--fake", eval_fake, "generated dataset")->required();
    eval->add_option("--out", eval_out, "output directory")->required();
    eval->add_option("--seed", eval_seed, "embedder seed");

    try {
        app.parse(argc, argv);
        if (gen->parsed())
            return cmd_gen_data(gen_out, gen_cases, gen_frames, gen_size, gen_seed, view_mix);
        if (train->parsed())
            return cmd_train(train_stage, train_config, train_data,
                             train_init.empty() ? std::nullopt
                                                : std::optional<fs::path>(train_init),
                             train_out);
        if (sample->parsed())
            return cmd_sample(sample_ckpt,
                              sample_conditions.empty()
                                  ? std::nullopt
                                  : std::optional<fs::path>(sample_conditions),
                              sample_drop, guidance_scale, sample_seed, sample_out);
        if (eval->parsed()) return cmd_evaluate(eval_real, eval_fake, eval_out, eval_seed);
        return 2;  // unreachable: require_subcommand
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;  // flag errors are validation errors
    } catch (const pulsediff::ValidationError& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "runtime error: " << e.what() << "\n";
        return 3;
    }
}
