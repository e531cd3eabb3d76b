#ifndef ICFLOW_DATASET_HPP
#define ICFLOW_DATASET_HPP

#include "icflow/core.hpp"
#include "icflow/flow.hpp"
#include "icflow/image_io.hpp"
#include "icflow/latent.hpp"
#include "icflow/toybench.hpp"

#include <json.hpp>

#include <cstring>
#include <fstream>
#include <string>
#include <vector>

namespace icflow {

// Dataset file layout (little-endian):
//   bytes 0..7   magic "ICFDS001"
//   bytes 8..15  uint64 header length H
//   bytes 16..   H bytes of JSON:
//                { format_version, patch, image_format: "raw"|"png",
//                  canvas: {channels, height, width},
//                  stats: {mean, stddev}, vocab: [...], count, extra }
//   then `count` records:
//     u8  category
//     u32 instruction length, then that many i32 token ids
//     context image, target image; "raw" stores float32 payloads of
//     channels*height*width, "png" stores u64 byte count + PNG stream.
// Specs and the parsed edit are reconstructed from the stored images on
// load (rendering is procedural, so the round trip is exact).

struct DatasetHeader {
    int patch = 4;
    std::string image_format = "raw";  // "raw" | "png"
    int channels = 3;
    int height = toybench::kCanvas;
    int width = toybench::kCanvas;
    LatentStats stats;
    std::vector<std::string> vocab;
    nlohmann::json extra;

    void validate() const {
        if (patch < 1)
            throw Error("DatasetHeader: patch must be >= 1");
        if (image_format != "raw" && image_format != "png")
            throw Error("DatasetHeader: image_format must be raw or png, got " +
                        image_format);
        if (channels < 1 || height < 1 || width < 1)
            throw Error("DatasetHeader: bad canvas dims");
    }
};

namespace detail {

constexpr char kDatasetMagic[8] = {'I', 'C', 'F', 'D', 'S', '0', '0', '1'};
constexpr int kDatasetVersion = 1;

inline void ds_write_u64(std::ostream& os, uint64_t v) {
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i)
        buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(buf), 8);
}

inline uint64_t ds_read_u64(std::istream& is) {
    unsigned char buf[8];
    is.read(reinterpret_cast<char*>(buf), 8);
    if (!is)
        throw Error("dataset: truncated length field");
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
        v |= static_cast<uint64_t>(buf[i]) << (8 * i);
    return v;
}

inline void ds_write_u32(std::ostream& os, uint32_t v) {
    unsigned char buf[4];
    for (int i = 0; i < 4; ++i)
        buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(buf), 4);
}

inline uint32_t ds_read_u32(std::istream& is) {
    unsigned char buf[4];
    is.read(reinterpret_cast<char*>(buf), 4);
    if (!is)
        throw Error("dataset: truncated length field");
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
        v |= static_cast<uint32_t>(buf[i]) << (8 * i);
    return v;
}

inline void write_image(std::ostream& os, const ImageTensor<float>& img,
                        const DatasetHeader& h) {
    if (img.channels != h.channels || img.height != h.height ||
        img.width != h.width)
        throw Error("dataset: image does not match header canvas dims");
    if (h.image_format == "raw") {
        os.write(reinterpret_cast<const char*>(img.data.data()),
                 static_cast<std::streamsize>(img.data.size() * sizeof(float)));
    } else {
        std::vector<unsigned char> bytes = encode_png(img);
        ds_write_u64(os, bytes.size());
        os.write(reinterpret_cast<const char*>(bytes.data()),
                 static_cast<std::streamsize>(bytes.size()));
    }
}

inline ImageTensor<float> read_image(std::istream& is,
                                     const DatasetHeader& h) {
    if (h.image_format == "raw") {
        ImageTensor<float> img(h.channels, h.height, h.width);
        is.read(reinterpret_cast<char*>(img.data.data()),
                static_cast<std::streamsize>(img.data.size() * sizeof(float)));
        if (!is)
            throw Error("dataset: truncated raw image");
        return img;
    }
    uint64_t len = ds_read_u64(is);
    std::vector<unsigned char> bytes(len);
    is.read(reinterpret_cast<char*>(bytes.data()),
            static_cast<std::streamsize>(len));
    if (!is)
        throw Error("dataset: truncated png image");
    ImageTensor<float> img = decode_png<float>(bytes.data(), bytes.size());
    if (img.channels != h.channels || img.height != h.height ||
        img.width != h.width)
        throw Error("dataset: png dims do not match header canvas dims");
    return img;
}

}  // namespace detail

inline void save_dataset(const std::string& path, const DatasetHeader& header,
                         const std::vector<toybench::EditExample>& examples) {
    header.validate();
    nlohmann::json j;
    j["format_version"] = detail::kDatasetVersion;
    j["patch"] = header.patch;
    j["image_format"] = header.image_format;
    j["canvas"] = {{"channels", header.channels},
                   {"height", header.height},
                   {"width", header.width}};
    j["stats"] = nlohmann::json{{"mean", header.stats.mean},
                                {"stddev", header.stats.stddev}};
    j["vocab"] = header.vocab;
    j["count"] = examples.size();
    j["extra"] = header.extra;
    std::string hs = j.dump();

    std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os)
            throw Error("dataset: cannot open for write: " + tmp);
        os.write(detail::kDatasetMagic, 8);
        detail::ds_write_u64(os, hs.size());
        os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
        for (const auto& ex : examples) {
            unsigned char cat = static_cast<unsigned char>(ex.category);
            os.write(reinterpret_cast<const char*>(&cat), 1);
            detail::ds_write_u32(os,
                                 static_cast<uint32_t>(ex.instruction.size()));
            for (int t : ex.instruction) {
                uint32_t u = static_cast<uint32_t>(t);
                detail::ds_write_u32(os, u);
            }
            detail::write_image(os, ex.context, header);
            detail::write_image(os, ex.target, header);
        }
        if (!os)
            throw Error("dataset: write failed: " + tmp);
    }
    std::remove(path.c_str());
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw Error("dataset: rename failed: " + tmp + " -> " + path);
}

inline std::pair<DatasetHeader, std::vector<toybench::EditExample>>
load_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw Error("dataset: cannot open: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, detail::kDatasetMagic, 8) != 0)
        throw Error("dataset: bad magic in " + path);
    uint64_t hlen = detail::ds_read_u64(is);
    std::string hs(hlen, '\0');
    is.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (!is)
        throw Error("dataset: truncated header in " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(hs);
    } catch (const nlohmann::json::exception& e) {
        throw Error("dataset: header parse error in " + path + ": " + e.what());
    }
    if (j.at("format_version").get<int>() != detail::kDatasetVersion)
        throw Error("dataset: unsupported format_version in " + path);

    DatasetHeader header;
    header.patch = j.at("patch").get<int>();
    header.image_format = j.at("image_format").get<std::string>();
    header.channels = j.at("canvas").at("channels").get<int>();
    header.height = j.at("canvas").at("height").get<int>();
    header.width = j.at("canvas").at("width").get<int>();
    j.at("stats").at("mean").get_to(header.stats.mean);
    j.at("stats").at("stddev").get_to(header.stats.stddev);
    j.at("vocab").get_to(header.vocab);
    header.extra = j.value("extra", nlohmann::json::object());
    header.validate();
    const uint64_t count = j.at("count").get<uint64_t>();

    std::vector<toybench::EditExample> examples;
    examples.reserve(count);
    for (uint64_t i = 0; i < count; ++i) {
        toybench::EditExample ex;
        unsigned char cat;
        is.read(reinterpret_cast<char*>(&cat), 1);
        if (!is)
            throw Error("dataset: truncated record " + std::to_string(i));
        if (cat >= toybench::kCategoryCount)
            throw Error("dataset: bad category in record " + std::to_string(i));
        ex.category = static_cast<toybench::Category>(cat);
        uint32_t ilen = detail::ds_read_u32(is);
        ex.instruction.resize(ilen);
        for (uint32_t k = 0; k < ilen; ++k)
            ex.instruction[k] = static_cast<int>(detail::ds_read_u32(is));
        ex.context = detail::read_image(is, header);
        ex.target = detail::read_image(is, header);
        // procedural rendering makes the spec round trip exact
        ex.before = toybench::parse(ex.context);
        ex.after = toybench::parse(ex.target);
        ex.edit = toybench::parse_instruction(ex.instruction);
        examples.push_back(std::move(ex));
    }
    return {header, std::move(examples)};
}

// Per-channel statistics over the encoded context and target tokens of the
// whole dataset.
inline LatentStats dataset_latent_stats(
    const std::vector<toybench::EditExample>& examples, int patch) {
    std::vector<TokenGrid<float>> grids;
    grids.reserve(examples.size() * 2);
    for (const auto& ex : examples) {
        grids.push_back(encode(ex.context, patch));
        grids.push_back(encode(ex.target, patch));
    }
    return compute_latent_stats(grids);
}

// Converts dataset records into normalized training examples: target is the
// post-edit image, context the pre-edit image, both encoded and standardized.
template <typename T>
std::vector<TrainExample<T>> to_train_examples(
    const std::vector<toybench::EditExample>& examples, int patch,
    const LatentStats& stats) {
    std::vector<TrainExample<T>> out;
    out.reserve(examples.size());
    for (const auto& ex : examples) {
        TokenGrid<float> tgt =
            normalize_tokens(encode(ex.target, patch), stats);
        TokenGrid<float> ctx =
            normalize_tokens(encode(ex.context, patch), stats);
        TrainExample<T> te;
        te.target =
            TokenGrid<T>{tgt.grid_h, tgt.grid_w, tgt.tokens.template cast<T>()};
        te.contexts.push_back(
            TokenGrid<T>{ctx.grid_h, ctx.grid_w, ctx.tokens.template cast<T>()});
        te.instruction = ex.instruction;
        out.push_back(std::move(te));
    }
    return out;
}

}  // namespace icflow

#endif  // ICFLOW_DATASET_HPP
