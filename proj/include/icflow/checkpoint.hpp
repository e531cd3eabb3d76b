#ifndef ICFLOW_CHECKPOINT_HPP
#define ICFLOW_CHECKPOINT_HPP

#include "icflow/core.hpp"
#include "icflow/latent.hpp"
#include "icflow/model.hpp"

#include <json.hpp>

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

namespace icflow {

// Checkpoint file layout (little-endian throughout):
//   bytes 0..7   magic "ICFLOW01"
//   bytes 8..15  uint64 header length H
//   bytes 16..   H bytes of UTF-8 JSON:
//                { format_version, dtype: "f32"|"f64", config: {...},
//                  stats: {mean: [...], stddev: [...]},
//                  vocab: [...], extra: {...},
//                  tensors: [{name, rows, cols}, ...] }
//   then each tensor's row-major payload, in the listed order.
// Loading validates magic, version, dtype, and every tensor's name and
// shape against the config-derived parameter tree; any mismatch or
// truncation is a hard error.

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"latent_channels", c.latent_channels},
                       {"model_dim", c.model_dim},
                       {"num_heads", c.num_heads},
                       {"depth_double", c.depth_double},
                       {"depth_single", c.depth_single},
                       {"instruction_vocab", c.instruction_vocab},
                       {"mlp_ratio", c.mlp_ratio},
                       {"patch", c.patch},
                       {"time_embed_dim", c.time_embed_dim},
                       {"rope_axis_split", c.rope_axis_split},
                       {"rope_base", c.rope_base}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    j.at("latent_channels").get_to(c.latent_channels);
    j.at("model_dim").get_to(c.model_dim);
    j.at("num_heads").get_to(c.num_heads);
    j.at("depth_double").get_to(c.depth_double);
    j.at("depth_single").get_to(c.depth_single);
    j.at("instruction_vocab").get_to(c.instruction_vocab);
    j.at("mlp_ratio").get_to(c.mlp_ratio);
    j.at("patch").get_to(c.patch);
    j.at("time_embed_dim").get_to(c.time_embed_dim);
    j.at("rope_axis_split").get_to(c.rope_axis_split);
    j.at("rope_base").get_to(c.rope_base);
}

inline void to_json(nlohmann::json& j, const LatentStats& s) {
    j = nlohmann::json{{"mean", s.mean}, {"stddev", s.stddev}};
}

inline void from_json(const nlohmann::json& j, LatentStats& s) {
    j.at("mean").get_to(s.mean);
    j.at("stddev").get_to(s.stddev);
}

struct CheckpointMeta {
    ModelConfig config;
    LatentStats stats;
    std::vector<std::string> vocab;
    nlohmann::json extra;  // free-form: step, seed, final loss, ...
};

namespace detail {

constexpr char kCheckpointMagic[8] = {'I', 'C', 'F', 'L', 'O', 'W', '0', '1'};
constexpr int kCheckpointVersion = 1;

template <typename T>
const char* dtype_name() {
    if constexpr (std::is_same_v<T, float>)
        return "f32";
    else if constexpr (std::is_same_v<T, double>)
        return "f64";
    else
        static_assert(sizeof(T) == 0, "unsupported checkpoint dtype");
}

inline void write_u64(std::ostream& os, uint64_t v) {
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i)
        buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(buf), 8);
}

inline uint64_t read_u64(std::istream& is) {
    unsigned char buf[8];
    is.read(reinterpret_cast<char*>(buf), 8);
    if (!is)
        throw Error("checkpoint: truncated while reading length field");
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
        v |= static_cast<uint64_t>(buf[i]) << (8 * i);
    return v;
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, ModelParams<T>& params,
                     const CheckpointMeta& meta) {
    auto refs = collect_tensors(params);
    nlohmann::json header;
    header["format_version"] = detail::kCheckpointVersion;
    header["dtype"] = detail::dtype_name<T>();
    header["config"] = meta.config;
    header["stats"] = meta.stats;
    header["vocab"] = meta.vocab;
    header["extra"] = meta.extra;
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& r : refs)
        tensors.push_back({{"name", r.name},
                           {"rows", r.rows},
                           {"cols", r.cols}});
    header["tensors"] = tensors;
    std::string hs = header.dump();

    // write to a temp file, then rename into place
    std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os)
            throw Error("checkpoint: cannot open for write: " + tmp);
        os.write(detail::kCheckpointMagic, 8);
        detail::write_u64(os, hs.size());
        os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
        for (const auto& r : refs)
            os.write(reinterpret_cast<const char*>(r.data),
                     static_cast<std::streamsize>(r.size() * sizeof(T)));
        if (!os)
            throw Error("checkpoint: write failed: " + tmp);
    }
    std::remove(path.c_str());
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw Error("checkpoint: rename failed: " + tmp + " -> " + path);
}

template <typename T>
ModelParams<T> load_checkpoint(const std::string& path, CheckpointMeta& meta) {
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw Error("checkpoint: cannot open: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, detail::kCheckpointMagic, 8) != 0)
        throw Error("checkpoint: bad magic in " + path);
    uint64_t hlen = detail::read_u64(is);
    std::string hs(hlen, '\0');
    is.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (!is)
        throw Error("checkpoint: truncated header in " + path);

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hs);
    } catch (const nlohmann::json::exception& e) {
        throw Error("checkpoint: header parse error in " + path + ": " +
                    e.what());
    }
    if (header.at("format_version").get<int>() != detail::kCheckpointVersion)
        throw Error("checkpoint: unsupported format_version in " + path);
    std::string dtype = header.at("dtype").get<std::string>();
    if (dtype != detail::dtype_name<T>())
        throw Error("checkpoint: dtype is " + dtype + ", expected " +
                    detail::dtype_name<T>() + " in " + path);
    meta.config = header.at("config").get<ModelConfig>();
    meta.config.validate();
    meta.stats = header.at("stats").get<LatentStats>();
    meta.vocab = header.at("vocab").get<std::vector<std::string>>();
    meta.extra = header.value("extra", nlohmann::json::object());

    Rng rng(0);
    ModelParams<T> params = init_params<T>(meta.config, rng);
    auto refs = collect_tensors(params);
    const auto& tensors = header.at("tensors");
    if (tensors.size() != refs.size())
        throw Error("checkpoint: " + std::to_string(tensors.size()) +
                    " tensors in file, model has " +
                    std::to_string(refs.size()));
    for (size_t i = 0; i < refs.size(); ++i) {
        const auto& tj = tensors[i];
        if (tj.at("name").get<std::string>() != refs[i].name)
            throw Error("checkpoint: tensor " + std::to_string(i) + " is '" +
                        tj.at("name").get<std::string>() + "', expected '" +
                        refs[i].name + "'");
        if (tj.at("rows").get<Eigen::Index>() != refs[i].rows ||
            tj.at("cols").get<Eigen::Index>() != refs[i].cols)
            throw Error("checkpoint: shape mismatch for " + refs[i].name);
        is.read(reinterpret_cast<char*>(refs[i].data),
                static_cast<std::streamsize>(refs[i].size() * sizeof(T)));
        if (!is)
            throw Error("checkpoint: truncated tensor data for " +
                        refs[i].name + " in " + path);
    }
    return params;
}

}  // namespace icflow

#endif  // ICFLOW_CHECKPOINT_HPP
