#include "pulsediff/checkpoint.hpp"

#include "pulsediff/common.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <fstream>

namespace pulsediff {

namespace {

constexpr char kMagic[4] = {'P', 'D', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian; big-endian hosts need byte swaps");

template <typename T>
void write_pod(std::ofstream& out, T value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in) {
    T value{};
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!in) throw RuntimeError("checkpoint: truncated file");
    return value;
}

nlohmann::json meta_to_json(const CheckpointMeta& m) {
    return nlohmann::json{{"stage", m.stage},
                          {"step", m.step},
                          {"config_hash", m.config_hash},
                          {"config", m.config_json},
                          {"schedule",
                           {{"T", m.schedule_T},
                            {"beta_start", m.beta_start},
                            {"beta_end", m.beta_end},
                            {"family", m.schedule_family}}},
                          {"embedders",
                           {{"text", m.text_embedder_id}, {"image", m.image_embedder_id}}}};
}

CheckpointMeta meta_from_json(const nlohmann::json& j) {
    CheckpointMeta m;
    m.stage = j.at("stage").get<std::string>();
    m.step = j.at("step").get<std::int64_t>();
    m.config_hash = j.at("config_hash").get<std::string>();
    m.config_json = j.at("config").get<std::string>();
    const auto& s = j.at("schedule");
    m.schedule_T = s.at("T").get<std::int64_t>();
    m.beta_start = s.at("beta_start").get<double>();
    m.beta_end = s.at("beta_end").get<double>();
    m.schedule_family = s.at("family").get<std::string>();
    m.text_embedder_id = j.at("embedders").at("text").get<std::string>();
    m.image_embedder_id = j.at("embedders").at("image").get<std::string>();
    return m;
}

}  // namespace

const torch::Tensor* Checkpoint::find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return &t;
    return nullptr;
}

bool Checkpoint::has_group(const std::string& prefix) const {
    for (const auto& [n, t] : tensors)
        if (n.rfind(prefix, 0) == 0) return true;
    return false;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw RuntimeError("checkpoint: cannot open for writing: " + path.string());

    out.write(kMagic, 4);
    write_pod(out, kVersion);
    const auto meta = meta_to_json(ckpt.meta).dump();
    write_pod(out, static_cast<std::uint64_t>(meta.size()));
    out.write(meta.data(), static_cast<std::streamsize>(meta.size()));

    write_pod(out, static_cast<std::uint64_t>(ckpt.tensors.size()));
    for (const auto& [name, tensor] : ckpt.tensors) {
        check_state(tensor.dtype() == torch::kFloat32,
                    "checkpoint: tensor " + name + " is not float32");
        auto t = tensor.contiguous().cpu();
        write_pod(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_pod(out, static_cast<std::uint32_t>(t.dim()));
        for (std::int64_t d = 0; d < t.dim(); ++d) write_pod(out, t.size(d));
        out.write(reinterpret_cast<const char*>(t.data_ptr<float>()),
                  static_cast<std::streamsize>(t.numel() * sizeof(float)));
    }
    if (!out) throw RuntimeError("checkpoint: write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw RuntimeError("checkpoint: cannot open: " + path.string());

    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0)
        throw RuntimeError("checkpoint: bad magic in " + path.string());
    if (read_pod<std::uint32_t>(in) != kVersion)
        throw RuntimeError("checkpoint: unsupported version in " + path.string());

    const auto meta_len = read_pod<std::uint64_t>(in);
    std::string meta_text(meta_len, '\0');
    in.read(meta_text.data(), static_cast<std::streamsize>(meta_len));
    if (!in) throw RuntimeError("checkpoint: truncated metadata");

    Checkpoint ckpt;
    try {
        ckpt.meta = meta_from_json(nlohmann::json::parse(meta_text));
    } catch (const nlohmann::json::exception& e) {
        throw RuntimeError(std::string("checkpoint: malformed metadata: ") + e.what());
    }

    const auto count = read_pod<std::uint64_t>(in);
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto name_len = read_pod<std::uint32_t>(in);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        const auto ndim = read_pod<std::uint32_t>(in);
        std::vector<std::int64_t> dims(ndim);
        for (auto& d : dims) d = read_pod<std::int64_t>(in);
        auto tensor = torch::empty(dims, torch::kFloat32);
        in.read(reinterpret_cast<char*>(tensor.data_ptr<float>()),
                static_cast<std::streamsize>(tensor.numel() * sizeof(float)));
        if (!in) throw RuntimeError("checkpoint: truncated tensor " + name);
        ckpt.tensors.emplace_back(std::move(name), std::move(tensor));
    }
    return ckpt;
}

std::vector<std::pair<std::string, torch::Tensor>> snapshot_params(
    const std::vector<std::pair<std::string, torch::Tensor>>& live) {
    std::vector<std::pair<std::string, torch::Tensor>> out;
    out.reserve(live.size());
    for (const auto& [name, tensor] : live)
        out.emplace_back(name, tensor.detach().to(torch::kFloat32).contiguous().clone());
    return out;
}

void assign_params(const std::vector<std::pair<std::string, torch::Tensor>>& live,
                   const Checkpoint& ckpt) {
    torch::NoGradGuard no_grad;
    for (const auto& [name, tensor] : live) {
        const auto* stored = ckpt.find(name);
        if (stored == nullptr)
            throw RuntimeError("checkpoint: missing parameter " + name);
        check_state(stored->sizes() == tensor.sizes(),
                    "checkpoint: shape mismatch for " + name + ": stored " +
                        shape_str(*stored) + " vs model " + shape_str(tensor));
        tensor.copy_(*stored);
    }
}

std::vector<std::pair<std::string, torch::Tensor>> vae_contract_named_parameters(
    const VAE& vae) {
    std::vector<std::pair<std::string, torch::Tensor>> out;
    for (const auto& item : vae->named_parameters())
        out.emplace_back("vae." + item.key(), item.value());
    return out;
}

void store_schedule(CheckpointMeta& meta, const NoiseSchedule& schedule) {
    meta.schedule_T = schedule.T;
    meta.beta_start = schedule.beta_start;
    meta.beta_end = schedule.beta_end;
    meta.schedule_family = schedule.family;
}

NoiseSchedule schedule_from_meta(const CheckpointMeta& meta) {
    check_state(meta.schedule_family == "linear",
                "checkpoint: unknown schedule family " + meta.schedule_family);
    return make_linear_schedule(meta.schedule_T, meta.beta_start, meta.beta_end);
}

}  // namespace pulsediff
