#include "pulsediff/data.hpp"

#include "pulsediff/common.hpp"
#include "pulsediff/global_conditions.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <mutex>
#include <random>
#include <thread>

namespace pulsediff {

namespace fs = std::filesystem;

namespace {

constexpr double kPi = 3.14159265358979323846;

// Intensities of the tissue classes in [0,1]: background tissue inside the
// beam, blood pool, myocardium, valve leaflet.
constexpr double kBgLevel = 0.35;
constexpr double kChamberLevel = 0.08;
constexpr double kMyoLevel = 0.85;
constexpr double kValveLevel = 0.90;
constexpr double kMyoRingScale = 1.45;  // myocardium = ellipse scaled by this, minus chamber

// On-disk quantization grid shared by the writer and the generator so that
// generate -> write -> load round-trips bitwise.
torch::Tensor dequant16(const torch::Tensor& q) {
    return ((q.to(torch::kFloat64) / 65535.0) * 2.0 - 1.0).to(torch::kFloat32);
}

torch::Tensor quant16(const torch::Tensor& v) {
    return ((v.to(torch::kFloat64) + 1.0) * 0.5 * 65535.0)
        .round()
        .clamp(0.0, 65535.0)
        .to(torch::kInt32);
}

// Distance from every grid point to the segment a-b (pixel coordinates).
torch::Tensor segment_distance(const torch::Tensor& xs, const torch::Tensor& ys, double ax,
                               double ay, double bx, double by) {
    const double dx = bx - ax, dy = by - ay;
    const double len2 = std::max(dx * dx + dy * dy, 1e-12);
    auto t = ((xs - ax) * dx + (ys - ay) * dy) / len2;
    t = t.clamp(0.0, 1.0);
    auto px = ax + t * dx, py = ay + t * dy;
    return torch::sqrt(torch::square(xs - px) + torch::square(ys - py));
}

}  // namespace

void PhantomParams::validate() const {
    check_arg(chambers == 1 || chambers == 2, "PhantomParams: chambers must be 1 or 2");
    check_arg(period >= 2, "PhantomParams: period must be >= 2");
    check_arg(radius_amplitude >= 0.0 && radius_amplitude < 0.5,
              "PhantomParams: radius_amplitude out of range");
    check_arg(valve_length > 0.0 && valve_length < 1.0,
              "PhantomParams: valve_length out of range");
    const double n = std::hypot(valve_direction[0], valve_direction[1]);
    check_arg(std::abs(n - 1.0) < 1e-6, "PhantomParams: valve_direction must be unit length");
    check_arg(speckle_cells >= 2, "PhantomParams: speckle_cells must be >= 2");
    check_arg(speckle_contrast >= 0.0 && speckle_contrast <= 1.0,
              "PhantomParams: speckle_contrast in [0,1]");
    check_arg(sector_angle > 0.1 && sector_angle < kPi / 2,
              "PhantomParams: sector_angle out of range");
}

void SampleRecord::validate() const {
    check_arg(frames.defined() && frames.dim() == 4 && frames.size(1) == 1,
              "SampleRecord: frames must be (F, 1, H, W)");
    const auto F = frames.size(0), H = frames.size(2), W = frames.size(3);
    check_arg(F >= 1, "SampleRecord: at least one frame");
    if (present[static_cast<int>(Condition::kMask)])
        check_arg(mask.sizes() == torch::IntArrayRef({F, 1, H, W}),
                  "SampleRecord: mask shape mismatch");
    if (present[static_cast<int>(Condition::kSketch)])
        check_arg(sketch.sizes() == torch::IntArrayRef({1, H, W}),
                  "SampleRecord: sketch shape mismatch");
    if (present[static_cast<int>(Condition::kMvSkeleton)])
        check_arg(mv_skeleton.sizes() == torch::IntArrayRef({F, 2, H, W}),
                  "SampleRecord: mv_skeleton shape mismatch");
    if (present[static_cast<int>(Condition::kFlow)])
        check_arg(flow.sizes() == torch::IntArrayRef({F - 1, 2, H, W}),
                  "SampleRecord: flow shape mismatch");
    if (present[static_cast<int>(Condition::kText)])
        check_arg(prompt == prompt_for_view(view), "SampleRecord: view/prompt mismatch");
    check_arg(prior_frame.defined() && prior_frame.sizes() == torch::IntArrayRef({1, H, W}),
              "SampleRecord: prior_frame shape mismatch");
}

SampleRecord generate_phantom(const PhantomParams& params, std::int64_t F, std::int64_t H,
                              std::int64_t W, std::uint64_t seed) {
    params.validate();
    check_arg(H >= 16 && W >= 16, "generate_phantom: H and W must be >= 16");
    check_arg(F >= 1, "generate_phantom: F must be >= 1");

    const auto f64 = torch::TensorOptions().dtype(torch::kFloat64);
    auto ys = (torch::arange(H, f64) + 0.5).unsqueeze(1).expand({H, W});
    auto xs = (torch::arange(W, f64) + 0.5).unsqueeze(0).expand({H, W});

    // Static beam sector from an apex above the image center.
    const double apex_x = W / 2.0, apex_y = 1.5;
    auto sdx = xs - apex_x, sdy = ys - apex_y;
    auto depth = torch::sqrt(sdx * sdx + sdy * sdy);
    auto beam_angle = torch::atan2(sdx, sdy);  // 0 points straight down
    auto sector = (beam_angle.abs() <= params.sector_angle) & (sdy > 0.0) &
                  (depth <= 0.95 * static_cast<double>(H));

    // Speckle value-noise grid in material coordinates, Rayleigh amplitudes
    // normalized to unit mean.
    const auto G = params.speckle_cells;
    std::mt19937_64 rng(mix_seed(seed, "phantom.speckle"));
    auto nodes = torch::empty({G + 1, G + 1}, f64);
    {
        auto acc = nodes.accessor<double, 2>();
        const double mean = std::sqrt(kPi / 2.0);
        for (std::int64_t i = 0; i <= G; ++i)
            for (std::int64_t j = 0; j <= G; ++j) {
                const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
                acc[i][j] = std::sqrt(-2.0 * std::log1p(-u)) / mean;
            }
    }
    auto sample_speckle = [&](const torch::Tensor& mx, const torch::Tensor& my) {
        auto u = (mx / static_cast<double>(W) * G).clamp(0.0, G - 1e-9);
        auto v = (my / static_cast<double>(H) * G).clamp(0.0, G - 1e-9);
        auto iu = u.floor(), iv = v.floor();
        auto fu = u - iu, fv = v - iv;
        auto flat = nodes.reshape({-1});
        auto gather = [&](const torch::Tensor& row, const torch::Tensor& col) {
            auto idx = (row * (G + 1) + col).to(torch::kInt64).reshape({-1});
            return flat.index_select(0, idx).reshape({H, W});
        };
        auto n00 = gather(iv, iu), n01 = gather(iv, iu + 1);
        auto n10 = gather(iv + 1, iu), n11 = gather(iv + 1, iu + 1);
        auto noise = n00 * (1 - fu) * (1 - fv) + n01 * fu * (1 - fv) + n10 * (1 - fu) * fv +
                     n11 * fu * fv;
        return 1.0 - params.speckle_contrast + params.speckle_contrast * noise;
    };

    // Heart geometry in material coordinates.
    const double cx = W / 2.0, cy = 0.55 * H;
    struct Ellipse {
        double ex, ey, ax, ay;
    };
    std::vector<Ellipse> chambers;
    if (params.chambers == 1) {
        chambers.push_back({cx, cy + 0.04 * H, 0.17 * W, 0.23 * H});
    } else {
        chambers.push_back({cx - 0.14 * W, cy + 0.02 * H, 0.11 * W, 0.21 * H});
        chambers.push_back({cx + 0.14 * W, cy + 0.02 * H, 0.11 * W, 0.21 * H});
    }
    const double pivot_mx = chambers[0].ex;
    const double pivot_my = chambers[0].ey - chambers[0].ay;
    const double theta_base = std::atan2(params.valve_direction[1], params.valve_direction[0]);
    const double valve_len = params.valve_length * static_cast<double>(std::min(H, W));

    auto scale_at = [&](std::int64_t t) {
        return 1.0 + params.radius_amplitude *
                         std::sin(2.0 * kPi * static_cast<double>(t) / params.period);
    };
    auto theta_at = [&](std::int64_t t) {
        return theta_base +
               params.valve_sweep * std::sin(2.0 * kPi * static_cast<double>(t) / params.period);
    };
    struct Segment {
        double ax, ay, bx, by;
    };
    auto valve_at = [&](std::int64_t t) {
        const double s = scale_at(t);
        const double px = cx + s * (pivot_mx - cx), py = cy + s * (pivot_my - cy);
        const double th = theta_at(t);
        return Segment{px, py, px + valve_len * std::cos(th), py + valve_len * std::sin(th)};
    };

    std::vector<torch::Tensor> frame_list, mask_list, mv_list, flow_list;
    for (std::int64_t t = 0; t < F; ++t) {
        const double st = scale_at(t);
        auto mx = cx + (xs - cx) / st;
        auto my = cy + (ys - cy) / st;

        auto labels = torch::zeros({H, W}, torch::kInt64);
        auto in_any_myo = torch::zeros({H, W}, torch::kBool);
        auto in_any_chamber = torch::zeros({H, W}, torch::kBool);
        for (const auto& e : chambers) {
            auto nx = (mx - e.ex), ny = (my - e.ey);
            auto chamber = (torch::square(nx / e.ax) + torch::square(ny / e.ay)) <= 1.0;
            auto ring = (torch::square(nx / (kMyoRingScale * e.ax)) +
                         torch::square(ny / (kMyoRingScale * e.ay))) <= 1.0;
            in_any_chamber |= chamber;
            in_any_myo |= ring;
        }
        labels.masked_fill_(in_any_myo, 2);
        labels.masked_fill_(in_any_chamber, 1);
        const auto seg = valve_at(t);
        auto valve_dist = segment_distance(xs, ys, seg.ax, seg.ay, seg.bx, seg.by);
        labels.masked_fill_(valve_dist <= 0.8, 3);
        labels.masked_fill_(~sector, 0);

        auto speckle = sample_speckle(mx, my);
        auto base = torch::full({H, W}, kBgLevel, f64);
        base.masked_fill_(labels == 1, kChamberLevel);
        base.masked_fill_(labels == 2, kMyoLevel);
        auto intensity = base * speckle;
        intensity.masked_fill_(labels == 3, kValveLevel);
        intensity.masked_fill_(~sector, 0.0);
        intensity = intensity.clamp(0.0, 1.0);
        frame_list.push_back(dequant16(quant16(intensity * 2.0 - 1.0)).unsqueeze(0));

        mask_list.push_back(labels.to(torch::kFloat32).unsqueeze(0));

        // MV annotation: the valve line plus a short stroke at the tip
        // pointing along the tip's motion.
        auto skel = (valve_dist <= 0.8).to(torch::kFloat32);
        const auto seg_next = t + 1 < F ? valve_at(t + 1) : seg;
        const auto seg_prev = t > 0 ? valve_at(t - 1) : seg;
        double vx = (t + 1 < F) ? seg_next.bx - seg.bx : seg.bx - seg_prev.bx;
        double vy = (t + 1 < F) ? seg_next.by - seg.by : seg.by - seg_prev.by;
        const double vn = std::hypot(vx, vy);
        if (vn < 1e-9) {
            vx = std::cos(theta_at(t));
            vy = std::sin(theta_at(t));
        } else {
            vx /= vn;
            vy /= vn;
        }
        auto stroke_dist =
            segment_distance(xs, ys, seg.bx, seg.by, seg.bx + 4.0 * vx, seg.by + 4.0 * vy);
        auto stroke = (stroke_dist <= 0.7).to(torch::kFloat32);
        mv_list.push_back(torch::stack({skel, stroke}, 0));

        if (t + 1 < F) {
            // Radial displacement everywhere; rigid valve motion near the
            // leaflet (pivot translation plus rotation).
            const double ratio = scale_at(t + 1) / st - 1.0;
            auto u = ratio * (xs - cx);
            auto v = ratio * (ys - cy);
            const double dth = theta_at(t + 1) - theta_at(t);
            auto relx = xs - seg.ax, rely = ys - seg.ay;
            auto rotx = seg_next.ax + std::cos(dth) * relx - std::sin(dth) * rely - xs;
            auto roty = seg_next.ay + std::sin(dth) * relx + std::cos(dth) * rely - ys;
            auto near_valve = valve_dist <= 2.5;
            u = torch::where(near_valve, rotx, u);
            v = torch::where(near_valve, roty, v);
            flow_list.push_back(torch::stack({u, v}, 0).to(torch::kFloat32));
        }
    }

    SampleRecord rec;
    rec.frames = torch::stack(frame_list, 0);  // (F, 1, H, W)
    rec.mask = torch::stack(mask_list, 0);
    rec.mv_skeleton = torch::stack(mv_list, 0);
    rec.flow = F > 1 ? torch::stack(flow_list, 0)
                     : torch::zeros({0, 2, H, W}, torch::kFloat32);
    rec.sketch = extract_sketch(rec.frames[0]);
    rec.prior_frame = rec.frames[0].clone();
    rec.view = params.chambers == 1 ? kViewA2C : kViewA4C;
    rec.prompt = prompt_for_view(rec.view);
    rec.present[static_cast<int>(Condition::kSketch)] = true;
    rec.present[static_cast<int>(Condition::kMask)] = true;
    rec.present[static_cast<int>(Condition::kMvSkeleton)] = true;
    rec.present[static_cast<int>(Condition::kFlow)] = F > 1;
    rec.present[static_cast<int>(Condition::kText)] = true;
    rec.present[static_cast<int>(Condition::kImagePrior)] = true;
    rec.validate();
    return rec;
}

SampleRecord window_record(const SampleRecord& rec, std::int64_t start, std::int64_t frames) {
    check_arg(frames >= 1 && start >= 0 && start + frames <= rec.num_frames(),
              "window_record: window out of range");
    SampleRecord out = rec;
    out.frames = rec.frames.slice(0, start, start + frames);
    if (rec.present[static_cast<int>(Condition::kMask)])
        out.mask = rec.mask.slice(0, start, start + frames);
    if (rec.present[static_cast<int>(Condition::kMvSkeleton)])
        out.mv_skeleton = rec.mv_skeleton.slice(0, start, start + frames);
    if (rec.present[static_cast<int>(Condition::kFlow)]) {
        out.flow = rec.flow.slice(0, start, start + frames - 1);
        out.present[static_cast<int>(Condition::kFlow)] = frames > 1;
    }
    out.validate();
    return out;
}

torch::Tensor extract_sketch(const torch::Tensor& frame) {
    auto img = frame.dim() == 2 ? frame.unsqueeze(0) : frame;
    check_arg(img.dim() == 3 && img.size(0) == 1, "extract_sketch: expected (1, H, W)");
    const auto H = img.size(1), W = img.size(2);
    check_arg(H >= 3 && W >= 3, "extract_sketch: image too small");

    auto x = img.to(torch::kFloat64).unsqueeze(0);  // (1, 1, H, W)
    auto kx = torch::tensor({{-1.0, 0.0, 1.0}, {-2.0, 0.0, 2.0}, {-1.0, 0.0, 1.0}},
                            torch::kFloat64);
    auto weight = torch::stack({kx, kx.t()}, 0).unsqueeze(1);  // (2, 1, 3, 3)
    // Valid convolution only: image borders get no response, so zero
    // padding cannot fabricate edges.
    auto g = torch::conv2d(x, weight);
    auto mag = torch::sqrt(torch::square(g[0][0]) + torch::square(g[0][1]));
    auto full = torch::constant_pad_nd(mag, {1, 1, 1, 1});
    auto thr = torch::quantile(full.reshape({-1}), 0.9);
    return (full > thr).to(torch::kFloat32).unsqueeze(0);
}

ConditionBundle bundle_for_clip(const SampleRecord& rec) {
    rec.validate();
    ConditionBundle b;
    b.present = rec.present;
    if (rec.present[static_cast<int>(Condition::kSketch)]) b.sketch = rec.sketch.unsqueeze(0);
    if (rec.present[static_cast<int>(Condition::kMask)]) b.mask = rec.mask.unsqueeze(0);
    if (rec.present[static_cast<int>(Condition::kMvSkeleton)])
        b.mv_skeleton = rec.mv_skeleton.unsqueeze(0);
    if (rec.present[static_cast<int>(Condition::kFlow)]) b.flow = rec.flow.unsqueeze(0);
    if (rec.present[static_cast<int>(Condition::kText)]) b.text = rec.prompt;
    if (rec.present[static_cast<int>(Condition::kImagePrior)])
        b.image_prior = rec.prior_frame.unsqueeze(0);
    b.validate(rec.num_frames());
    return b;
}

ConditionBundle bundle_for_frame(const SampleRecord& rec, std::int64_t frame_index) {
    rec.validate();
    check_arg(frame_index >= 0 && frame_index < rec.num_frames(),
              "bundle_for_frame: frame index out of range");
    ConditionBundle b;
    b.present = rec.present;
    b.present[static_cast<int>(Condition::kFlow)] = false;
    if (rec.present[static_cast<int>(Condition::kSketch)]) b.sketch = rec.sketch.unsqueeze(0);
    if (rec.present[static_cast<int>(Condition::kMask)])
        b.mask = rec.mask[frame_index].unsqueeze(0).unsqueeze(0);
    if (rec.present[static_cast<int>(Condition::kMvSkeleton)])
        b.mv_skeleton = rec.mv_skeleton[frame_index].unsqueeze(0).unsqueeze(0);
    if (rec.present[static_cast<int>(Condition::kText)]) b.text = rec.prompt;
    if (rec.present[static_cast<int>(Condition::kImagePrior)])
        b.image_prior = rec.prior_frame.unsqueeze(0);
    b.validate(1);
    return b;
}

// ---- PGM / flow IO ----

namespace {

void write_file(const fs::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw RuntimeError("cannot open for writing: " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw RuntimeError("write failed: " + path.string());
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open: " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

struct PgmHeader {
    std::int64_t width, height, maxval;
    std::size_t data_offset;
};

PgmHeader parse_pgm_header(const std::string& bytes, const fs::path& path) {
    std::size_t pos = 0;
    auto next_token = [&]() {
        while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
        const auto start = pos;
        while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
        if (start == pos) throw ValidationError("malformed PGM header: " + path.string());
        return bytes.substr(start, pos - start);
    };
    if (next_token() != "P5") throw ValidationError("not a P5 PGM: " + path.string());
    PgmHeader h{};
    h.width = std::stoll(next_token());
    h.height = std::stoll(next_token());
    h.maxval = std::stoll(next_token());
    ++pos;  // single whitespace after maxval
    h.data_offset = pos;
    check_arg(h.width >= 1 && h.height >= 1, "bad PGM dimensions: " + path.string());
    return h;
}

}  // namespace

void write_pgm16(const fs::path& path, const torch::Tensor& image) {
    check_arg(image.dim() == 2, "write_pgm16: expected (H, W)");
    const auto H = image.size(0), W = image.size(1);
    auto q = quant16(image).contiguous();
    std::string bytes = "P5\n" + std::to_string(W) + " " + std::to_string(H) + "\n65535\n";
    bytes.reserve(bytes.size() + static_cast<std::size_t>(H * W * 2));
    auto acc = q.accessor<std::int32_t, 2>();
    for (std::int64_t r = 0; r < H; ++r)
        for (std::int64_t c = 0; c < W; ++c) {
            const auto v = static_cast<std::uint16_t>(acc[r][c]);
            bytes.push_back(static_cast<char>(v >> 8));  // big-endian per PGM
            bytes.push_back(static_cast<char>(v & 0xff));
        }
    write_file(path, bytes);
}

torch::Tensor read_pgm16(const fs::path& path) {
    const auto bytes = read_file(path);
    const auto h = parse_pgm_header(bytes, path);
    check_arg(h.maxval == 65535, "expected 16-bit PGM: " + path.string());
    const auto n = static_cast<std::size_t>(h.width * h.height);
    check_arg(bytes.size() >= h.data_offset + 2 * n, "truncated PGM: " + path.string());
    auto q = torch::empty({h.height, h.width}, torch::kInt32);
    auto acc = q.accessor<std::int32_t, 2>();
    std::size_t pos = h.data_offset;
    for (std::int64_t r = 0; r < h.height; ++r)
        for (std::int64_t c = 0; c < h.width; ++c) {
            const auto hi = static_cast<unsigned char>(bytes[pos++]);
            const auto lo = static_cast<unsigned char>(bytes[pos++]);
            acc[r][c] = (hi << 8) | lo;
        }
    return dequant16(q);
}

void write_pgm8(const fs::path& path, const torch::Tensor& values) {
    check_arg(values.dim() == 2, "write_pgm8: expected (H, W)");
    const auto H = values.size(0), W = values.size(1);
    auto v = values.round().clamp(0, 255).to(torch::kInt32).contiguous();
    std::string bytes = "P5\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
    auto acc = v.accessor<std::int32_t, 2>();
    for (std::int64_t r = 0; r < H; ++r)
        for (std::int64_t c = 0; c < W; ++c) bytes.push_back(static_cast<char>(acc[r][c]));
    write_file(path, bytes);
}

torch::Tensor read_pgm8(const fs::path& path) {
    const auto bytes = read_file(path);
    const auto h = parse_pgm_header(bytes, path);
    check_arg(h.maxval == 255, "expected 8-bit PGM: " + path.string());
    const auto n = static_cast<std::size_t>(h.width * h.height);
    check_arg(bytes.size() >= h.data_offset + n, "truncated PGM: " + path.string());
    auto out = torch::empty({h.height, h.width}, torch::kFloat32);
    auto acc = out.accessor<float, 2>();
    std::size_t pos = h.data_offset;
    for (std::int64_t r = 0; r < h.height; ++r)
        for (std::int64_t c = 0; c < h.width; ++c)
            acc[r][c] = static_cast<float>(static_cast<unsigned char>(bytes[pos++]));
    return out;
}

void write_flow(const fs::path& path, const torch::Tensor& flow) {
    check_arg(flow.dim() == 4 && flow.size(1) == 2, "write_flow: expected (F-1, 2, H, W)");
    const auto K = flow.size(0), H = flow.size(2), W = flow.size(3);
    auto f = flow.to(torch::kFloat32).contiguous();
    std::string bytes = "FLO1";
    auto put_u32 = [&](std::uint32_t v) {
        bytes.append(reinterpret_cast<const char*>(&v), 4);  // little-endian host
    };
    put_u32(static_cast<std::uint32_t>(H));
    put_u32(static_cast<std::uint32_t>(W));
    put_u32(static_cast<std::uint32_t>(K));
    bytes.append(reinterpret_cast<const char*>(f.data_ptr<float>()),
                 static_cast<std::size_t>(f.numel()) * sizeof(float));
    write_file(path, bytes);
}

torch::Tensor read_flow(const fs::path& path) {
    const auto bytes = read_file(path);
    check_arg(bytes.size() >= 16 && bytes.compare(0, 4, "FLO1") == 0,
              "bad flow file: " + path.string());
    auto get_u32 = [&](std::size_t off) {
        std::uint32_t v;
        std::memcpy(&v, bytes.data() + off, 4);
        return v;
    };
    const std::int64_t H = get_u32(4), W = get_u32(8), K = get_u32(12);
    const auto n = static_cast<std::size_t>(K * 2 * H * W);
    check_arg(bytes.size() == 16 + n * sizeof(float), "truncated flow file: " + path.string());
    auto out = torch::empty({K, 2, H, W}, torch::kFloat32);
    std::memcpy(out.data_ptr<float>(), bytes.data() + 16, n * sizeof(float));
    return out;
}

// ---- case / dataset layout ----

DatasetKind dataset_kind_from_name(const std::string& name) {
    if (name == "phantom") return DatasetKind::kPhantom;
    if (name == "camus-like") return DatasetKind::kCamusLike;
    if (name == "cmr-like") return DatasetKind::kCmrLike;
    throw ValidationError("unknown dataset kind: " + name +
                          " (expected phantom, camus-like or cmr-like)");
}

namespace {

std::string frame_name(std::int64_t i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%04d", static_cast<int>(i));
    return buf;
}

}  // namespace

void write_case(const fs::path& case_dir, const SampleRecord& rec) {
    rec.validate();
    const auto F = rec.num_frames();
    fs::create_directories(case_dir / "frames");
    for (std::int64_t k = 0; k < F; ++k)
        write_pgm16(case_dir / "frames" / (frame_name(k) + ".pgm"), rec.frames[k][0]);

    if (rec.present[static_cast<int>(Condition::kMask)]) {
        fs::create_directories(case_dir / "masks");
        for (std::int64_t k = 0; k < F; ++k)
            write_pgm8(case_dir / "masks" / (frame_name(k) + ".pgm"), rec.mask[k][0]);
    }
    if (rec.present[static_cast<int>(Condition::kSketch)])
        write_pgm8(case_dir / "sketch.pgm", rec.sketch[0] * 255.0f);
    if (rec.present[static_cast<int>(Condition::kMvSkeleton)]) {
        fs::create_directories(case_dir / "mv");
        for (std::int64_t k = 0; k < F; ++k) {
            write_pgm8(case_dir / "mv" / (frame_name(k) + "_skel.pgm"),
                       rec.mv_skeleton[k][0] * 255.0f);
            write_pgm8(case_dir / "mv" / (frame_name(k) + "_stroke.pgm"),
                       rec.mv_skeleton[k][1] * 255.0f);
        }
    }
    if (rec.present[static_cast<int>(Condition::kFlow)])
        write_flow(case_dir / "flow.bin", rec.flow);

    nlohmann::json meta{{"view", rec.view}};
    if (rec.present[static_cast<int>(Condition::kText)]) meta["prompt"] = rec.prompt;
    write_file(case_dir / "meta.json", meta.dump(2) + "\n");
}

SampleRecord load_case(const fs::path& case_dir, DatasetKind kind) {
    const auto frames_dir = case_dir / "frames";
    if (!fs::is_directory(frames_dir))
        throw ValidationError("case has no frames directory: " + frames_dir.string());

    std::vector<fs::path> frame_files;
    for (const auto& e : fs::directory_iterator(frames_dir))
        if (e.path().extension() == ".pgm") frame_files.push_back(e.path());
    std::sort(frame_files.begin(), frame_files.end());
    if (frame_files.empty())
        throw ValidationError("case has no frames: " + frames_dir.string());

    SampleRecord rec;
    std::vector<torch::Tensor> frames;
    for (const auto& p : frame_files) frames.push_back(read_pgm16(p).unsqueeze(0));
    rec.frames = torch::stack(frames, 0);
    const auto F = rec.frames.size(0), H = rec.frames.size(2), W = rec.frames.size(3);

    const bool need_all = kind == DatasetKind::kPhantom;
    auto require = [&](bool found, const fs::path& what, bool needed) {
        if (!found && needed)
            throw ValidationError("missing required condition file: " + what.string());
        return found;
    };

    if (require(fs::is_directory(case_dir / "masks"), case_dir / "masks",
                need_all || kind == DatasetKind::kCmrLike)) {
        std::vector<torch::Tensor> masks;
        for (std::int64_t k = 0; k < F; ++k) {
            const auto p = case_dir / "masks" / (frame_name(k) + ".pgm");
            if (!fs::exists(p)) throw ValidationError("missing mask frame: " + p.string());
            auto m = read_pgm8(p);
            check_arg(m.sizes() == torch::IntArrayRef({H, W}),
                      "mask resolution mismatch: " + p.string());
            if ((m >= kNumMaskLabels).any().item<bool>())
                throw ValidationError("mask labels outside {0..3}: " + p.string());
            masks.push_back(m.unsqueeze(0));
        }
        rec.mask = torch::stack(masks, 0);
        rec.present[static_cast<int>(Condition::kMask)] = true;
    }

    if (require(fs::exists(case_dir / "sketch.pgm"), case_dir / "sketch.pgm", need_all)) {
        rec.sketch = (read_pgm8(case_dir / "sketch.pgm") > 127.0f).to(torch::kFloat32)
                         .unsqueeze(0);
        check_arg(rec.sketch.size(1) == H && rec.sketch.size(2) == W,
                  "sketch resolution mismatch: " + (case_dir / "sketch.pgm").string());
        rec.present[static_cast<int>(Condition::kSketch)] = true;
    }

    if (require(fs::is_directory(case_dir / "mv"), case_dir / "mv", need_all)) {
        std::vector<torch::Tensor> mv;
        for (std::int64_t k = 0; k < F; ++k) {
            const auto ps = case_dir / "mv" / (frame_name(k) + "_skel.pgm");
            const auto pt = case_dir / "mv" / (frame_name(k) + "_stroke.pgm");
            if (!fs::exists(ps) || !fs::exists(pt))
                throw ValidationError("missing MV raster for frame " + frame_name(k) + " in " +
                                      (case_dir / "mv").string());
            auto skel = (read_pgm8(ps) > 127.0f).to(torch::kFloat32);
            auto stroke = (read_pgm8(pt) > 127.0f).to(torch::kFloat32);
            mv.push_back(torch::stack({skel, stroke}, 0));
        }
        rec.mv_skeleton = torch::stack(mv, 0);
        rec.present[static_cast<int>(Condition::kMvSkeleton)] = true;
    }

    if (require(fs::exists(case_dir / "flow.bin"), case_dir / "flow.bin",
                need_all && F > 1)) {
        rec.flow = read_flow(case_dir / "flow.bin");
        check_arg(rec.flow.size(0) == F - 1 && rec.flow.size(2) == H && rec.flow.size(3) == W,
                  "flow shape inconsistent with frames: " + (case_dir / "flow.bin").string());
        rec.present[static_cast<int>(Condition::kFlow)] = rec.flow.size(0) > 0;
    }

    const auto meta_path = case_dir / "meta.json";
    if (fs::exists(meta_path)) {
        nlohmann::json meta;
        try {
            meta = nlohmann::json::parse(read_file(meta_path));
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError("malformed meta.json: " + meta_path.string() + ": " +
                                  e.what());
        }
        rec.view = meta.value("view", "");
        if (meta.contains("prompt")) {
            rec.prompt = meta.at("prompt").get<std::string>();
            check_arg(view_for_prompt(rec.prompt) == rec.view,
                      "meta.json view/prompt mismatch: " + meta_path.string());
            rec.present[static_cast<int>(Condition::kText)] = true;
        }
    } else if (need_all) {
        throw ValidationError("missing meta.json: " + meta_path.string());
    }

    rec.prior_frame = rec.frames[0].clone();
    rec.present[static_cast<int>(Condition::kImagePrior)] = true;
    rec.validate();
    return rec;
}

namespace {

bool is_case_dir(const fs::path& p) { return fs::is_directory(p / "frames"); }

std::vector<fs::path> sorted_subdirs(const fs::path& dir) {
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_directory()) out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
}

std::size_t worker_cap() {
    std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("PULSEDIFF_NUM_WORKERS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end == env || v < 1)
            throw ValidationError("PULSEDIFF_NUM_WORKERS must be a positive integer");
        hw = std::min<std::size_t>(hw, static_cast<std::size_t>(v));
    }
    return hw;
}

}  // namespace

Dataset load_dataset(const fs::path& root, DatasetKind kind) {
    if (!fs::is_directory(root))
        throw ValidationError("dataset root does not exist: " + root.string());
    Dataset ds;
    ds.kind = kind;
    for (const auto& sub : sorted_subdirs(root)) {
        if (is_case_dir(sub)) {
            ds.cases.push_back({sub.filename().string(), sub});
        } else {
            for (const auto& c : sorted_subdirs(sub))
                if (is_case_dir(c))
                    ds.cases.push_back(
                        {sub.filename().string() + "/" + c.filename().string(), c});
        }
    }
    std::sort(ds.cases.begin(), ds.cases.end(),
              [](const DatasetCase& a, const DatasetCase& b) { return a.id < b.id; });
    return ds;
}

SampleRecord Dataset::load(std::size_t index) const {
    check_arg(index < cases.size(), "dataset index out of range");
    return load_case(cases[index].dir, kind);
}

std::vector<SampleRecord> Dataset::load_all() const {
    std::vector<SampleRecord> out(cases.size());
    const auto workers = std::min(worker_cap(), cases.size());
    if (workers <= 1) {
        for (std::size_t i = 0; i < cases.size(); ++i) out[i] = load(i);
        return out;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    std::exception_ptr error;
    std::mutex error_mu;
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (std::size_t i = next.fetch_add(1); i < cases.size(); i = next.fetch_add(1)) {
                try {
                    out[i] = load(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mu);
                    if (!error) error = std::current_exception();
                    return;
                }
            }
        });
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
    return out;
}

}  // namespace pulsediff
