#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pulsediff/conditions.hpp"

namespace pulsediff {

// One dataset case: video plus its exactly paired conditions.
//   frames      (F, 1, H, W)   in [-1, 1]
//   mask        (F, 1, H, W)   labels 0=bg, 1=chamber, 2=myocardium, 3=valve
//   sketch      (1, H, W)      binary edge map of frame 0
//   mv_skeleton (F, 2, H, W)   ch0 valve line, ch1 motion-direction stroke
//   flow        (F-1, 2, H, W) (u, v) pixel displacements k -> k+1
//   prior_frame (1, H, W)      reference frame (frame 0)
// present[] mirrors ConditionBundle: tensors of absent conditions are
// undefined. frames/prior are always populated.
struct SampleRecord {
    torch::Tensor frames;
    torch::Tensor mask;
    torch::Tensor sketch;
    torch::Tensor mv_skeleton;
    torch::Tensor flow;
    std::string view;
    std::string prompt;
    torch::Tensor prior_frame;
    std::array<bool, kNumConditions> present{};

    std::int64_t num_frames() const { return frames.size(0); }
    void validate() const;
};

struct PhantomParams {
    int chambers = 1;                // 1 ~ A2C analog, 2 ~ A4C analog
    std::int64_t period = 8;         // frames per contraction cycle
    double radius_amplitude = 0.10;  // relative radial pulsation
    double valve_length = 0.22;      // relative to min(H, W)
    double valve_sweep = 0.9;        // radians swept over one cycle
    std::array<double, 2> valve_direction{0.6, 0.8};  // base orientation, unit norm
    std::int64_t speckle_cells = 12;  // speckle value-noise grid resolution
    double speckle_contrast = 0.5;    // Rayleigh sigma
    double sector_angle = 1.15;       // beam half-angle, radians

    void validate() const;
};

// Deterministic phantom: sector-masked rendering of pulsating chambers
// (global radial motion model, scale 1 + a*sin(2*pi*t/period)), a ring of
// bright myocardium, a rotating valve line, and multiplicative Rayleigh
// speckle carried in material coordinates so it moves with the tissue.
// Flow is the analytic displacement field of that motion model. Frame
// values are quantized to the on-disk 16-bit grid at generation time, so
// write/load round-trips are bitwise.
SampleRecord generate_phantom(const PhantomParams& params, std::int64_t F, std::int64_t H,
                              std::int64_t W, std::uint64_t seed);

// Restricts a record to frames [start, start + frames): per-frame fields
// are windowed, flow keeps the pairs inside the window, sketch, prior
// frame and text pass through unchanged.
SampleRecord window_record(const SampleRecord& rec, std::int64_t start, std::int64_t frames);

// Sobel gradient magnitude (computed on the interior, borders zero),
// thresholded at the 90th percentile. frame (1, H, W) or (H, W) in [-1,1].
torch::Tensor extract_sketch(const torch::Tensor& frame);

// B=1 bundles for training/sampling. Absent record conditions stay absent.
ConditionBundle bundle_for_clip(const SampleRecord& rec);
ConditionBundle bundle_for_frame(const SampleRecord& rec, std::int64_t frame_index);

// ---- raster / flow file formats ----

// PGM P5. 16-bit (maxval 65535, big-endian) carries [-1,1] data quantized
// to 65536 levels; 8-bit (maxval 255) carries labels or binary maps.
void write_pgm16(const std::filesystem::path& path, const torch::Tensor& image);
torch::Tensor read_pgm16(const std::filesystem::path& path);  // (H, W) float32 in [-1,1]
void write_pgm8(const std::filesystem::path& path, const torch::Tensor& values);
torch::Tensor read_pgm8(const std::filesystem::path& path);  // (H, W) float32, raw byte values

// Raw flow container: magic "FLO1", uint32 H, W, F-1 (little-endian), then
// for each frame pair the u plane followed by the v plane, float32 LE.
void write_flow(const std::filesystem::path& path, const torch::Tensor& flow);
torch::Tensor read_flow(const std::filesystem::path& path);  // (F-1, 2, H, W)

// ---- dataset layout ----
// root/{split}/{case_id}/frames/%04d.pgm, masks/%04d.pgm, sketch.pgm,
//   mv/%04d_skel.pgm, mv/%04d_stroke.pgm, flow.bin, meta.json {view, prompt}

enum class DatasetKind { kPhantom, kCamusLike, kCmrLike };
DatasetKind dataset_kind_from_name(const std::string& name);

void write_case(const std::filesystem::path& case_dir, const SampleRecord& rec);
// kind controls required files: phantom requires every condition,
// cmr-like requires masks, camus-like treats all conditions as optional.
SampleRecord load_case(const std::filesystem::path& case_dir, DatasetKind kind);

struct DatasetCase {
    std::string id;
    std::filesystem::path dir;
};

struct Dataset {
    DatasetKind kind = DatasetKind::kPhantom;
    std::vector<DatasetCase> cases;

    bool empty() const { return cases.empty(); }
    std::size_t size() const { return cases.size(); }
    SampleRecord load(std::size_t index) const;
    // Parallel per-case loading; worker count capped by the
    // PULSEDIFF_NUM_WORKERS environment variable. Order is by case id
    // regardless of worker count.
    std::vector<SampleRecord> load_all() const;
};

// Accepts either a dataset root (split directories containing cases) or a
// single split directory (case directories with frames/). Cases are
// ordered by id. A missing root raises; an empty one yields an empty set.
Dataset load_dataset(const std::filesystem::path& root, DatasetKind kind);

}  // namespace pulsediff
