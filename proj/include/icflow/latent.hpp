#ifndef ICFLOW_LATENT_HPP
#define ICFLOW_LATENT_HPP

#include "icflow/core.hpp"
#include "icflow/rope.hpp"

#include <cmath>
#include <limits>
#include <vector>

namespace icflow {

// Planar CHW image with values in [0,1].
template <typename T = float>
struct ImageTensor {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<T> data;  // channels * height * width, channel-major

    ImageTensor() = default;
    ImageTensor(int c, int h, int w, T fill = T(0))
        : channels(c), height(h), width(w),
          data(static_cast<size_t>(c) * h * w, fill) {}

    T& at(int c, int y, int x) {
        return data[(static_cast<size_t>(c) * height + y) * width + x];
    }
    T at(int c, int y, int x) const {
        return data[(static_cast<size_t>(c) * height + y) * width + x];
    }
    size_t size() const { return data.size(); }

    bool same_shape(const ImageTensor& o) const {
        return channels == o.channels && height == o.height && width == o.width;
    }
};

// Latent token grid; tokens row-major, one row per token.
template <typename T = float>
struct TokenGrid {
    int grid_h = 0;
    int grid_w = 0;
    Mat<T> tokens;  // (grid_h * grid_w) x latent_channels

    int latent_channels() const { return static_cast<int>(tokens.cols()); }
    Eigen::Index count() const { return tokens.rows(); }
};

// Non-overlapping patch flattening; exactly invertible. Token channel
// layout is (c, py, px) with py/px inside the patch.
template <typename T>
TokenGrid<T> encode(const ImageTensor<T>& image, int patch) {
    if (patch < 1)
        throw Error("encode: patch must be >= 1");
    if (image.height % patch != 0 || image.width % patch != 0)
        throw Error("encode: image " + std::to_string(image.height) + "x" +
                    std::to_string(image.width) + " not divisible by patch " +
                    std::to_string(patch));
    TokenGrid<T> grid;
    grid.grid_h = image.height / patch;
    grid.grid_w = image.width / patch;
    const int lc = image.channels * patch * patch;
    grid.tokens.resize(static_cast<Eigen::Index>(grid.grid_h) * grid.grid_w, lc);
    for (int gy = 0; gy < grid.grid_h; ++gy) {
        for (int gx = 0; gx < grid.grid_w; ++gx) {
            Eigen::Index row = static_cast<Eigen::Index>(gy) * grid.grid_w + gx;
            Eigen::Index col = 0;
            for (int c = 0; c < image.channels; ++c)
                for (int py = 0; py < patch; ++py)
                    for (int px = 0; px < patch; ++px)
                        grid.tokens(row, col++) =
                            image.at(c, gy * patch + py, gx * patch + px);
        }
    }
    return grid;
}

template <typename T>
ImageTensor<T> decode(const TokenGrid<T>& grid, int patch) {
    if (patch < 1)
        throw Error("decode: patch must be >= 1");
    const int lc = grid.latent_channels();
    if (lc % (patch * patch) != 0)
        throw Error("decode: latent_channels " + std::to_string(lc) +
                    " not divisible by patch^2 = " +
                    std::to_string(patch * patch));
    const int channels = lc / (patch * patch);
    ImageTensor<T> image(channels, grid.grid_h * patch, grid.grid_w * patch);
    for (int gy = 0; gy < grid.grid_h; ++gy) {
        for (int gx = 0; gx < grid.grid_w; ++gx) {
            Eigen::Index row = static_cast<Eigen::Index>(gy) * grid.grid_w + gx;
            Eigen::Index col = 0;
            for (int c = 0; c < channels; ++c)
                for (int py = 0; py < patch; ++py)
                    for (int px = 0; px < patch; ++px)
                        image.at(c, gy * patch + py, gx * patch + px) =
                            grid.tokens(row, col++);
        }
    }
    return image;
}

// Concatenated [target | context_1 | ... | context_N] tokens plus positions.
template <typename T = float>
struct TokenSequence {
    Mat<T> tokens;
    std::vector<PositionTriplet> positions;
    Eigen::Index target_len = 0;
};

// Token values are copied verbatim; positions come from assign_positions.
// Context grids may differ from the target and from each other in size.
template <typename T>
TokenSequence<T> build_sequence(const TokenGrid<T>& target,
                                const std::vector<TokenGrid<T>>& contexts) {
    Eigen::Index total = target.count();
    std::vector<std::pair<int, int>> ctx_dims;
    ctx_dims.reserve(contexts.size());
    for (const auto& c : contexts) {
        if (c.latent_channels() != target.latent_channels())
            throw Error("build_sequence: context latent_channels " +
                        std::to_string(c.latent_channels()) + " != target " +
                        std::to_string(target.latent_channels()));
        total += c.count();
        ctx_dims.emplace_back(c.grid_h, c.grid_w);
    }
    TokenSequence<T> seq;
    seq.target_len = target.count();
    seq.tokens.resize(total, target.latent_channels());
    seq.tokens.topRows(target.count()) = target.tokens;
    Eigen::Index off = target.count();
    for (const auto& c : contexts) {
        seq.tokens.middleRows(off, c.count()) = c.tokens;
        off += c.count();
    }
    seq.positions = assign_positions({target.grid_h, target.grid_w}, ctx_dims);
    return seq;
}

// PSNR in dB against unit data range; identical images report +inf.
template <typename T>
double psnr(const ImageTensor<T>& a, const ImageTensor<T>& b) {
    if (!a.same_shape(b))
        throw Error("psnr: shape mismatch");
    double mse = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
        mse += d * d;
    }
    mse /= static_cast<double>(a.data.size());
    if (mse == 0.0)
        return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

// Mean SSIM over valid window positions and channels. Gaussian window,
// sigma 1.5, K1 = 0.01, K2 = 0.03, unit data range. The window shrinks to
// the image when a side is smaller than 11.
template <typename T>
double ssim(const ImageTensor<T>& a, const ImageTensor<T>& b) {
    if (!a.same_shape(b))
        throw Error("ssim: shape mismatch");
    int win = std::min({11, a.height, a.width});
    if (win % 2 == 0)
        --win;
    const int half = win / 2;
    const double sigma = 1.5;

    std::vector<double> g(static_cast<size_t>(win) * win);
    double gsum = 0.0;
    for (int y = 0; y < win; ++y)
        for (int x = 0; x < win; ++x) {
            double dy = y - half, dx = x - half;
            double v = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
            g[static_cast<size_t>(y) * win + x] = v;
            gsum += v;
        }
    for (auto& v : g)
        v /= gsum;

    const double c1 = 0.01 * 0.01;
    const double c2 = 0.03 * 0.03;
    double total = 0.0;
    int64_t count = 0;
    for (int c = 0; c < a.channels; ++c) {
        for (int cy = half; cy < a.height - half; ++cy) {
            for (int cx = half; cx < a.width - half; ++cx) {
                double ma = 0, mb = 0, va = 0, vb = 0, cov = 0;
                for (int y = 0; y < win; ++y)
                    for (int x = 0; x < win; ++x) {
                        double w = g[static_cast<size_t>(y) * win + x];
                        double pa = a.at(c, cy + y - half, cx + x - half);
                        double pb = b.at(c, cy + y - half, cx + x - half);
                        ma += w * pa;
                        mb += w * pb;
                        va += w * pa * pa;
                        vb += w * pb * pb;
                        cov += w * pa * pb;
                    }
                va -= ma * ma;
                vb -= mb * mb;
                cov -= ma * mb;
                total += ((2 * ma * mb + c1) * (2 * cov + c2)) /
                         ((ma * ma + mb * mb + c1) * (va + vb + c2));
                ++count;
            }
        }
    }
    return count == 0 ? 1.0 : total / static_cast<double>(count);
}

struct ReconstructionMetrics {
    double psnr_db = 0.0;
    double ssim = 0.0;
};

template <typename T>
ReconstructionMetrics reconstruction_metrics(const ImageTensor<T>& a,
                                             const ImageTensor<T>& b) {
    return {psnr(a, b), ssim(a, b)};
}

// Per-latent-channel standardization statistics, computed once at data
// generation time and stored alongside dataset and checkpoints.
struct LatentStats {
    std::vector<double> mean;
    std::vector<double> stddev;

    bool empty() const { return mean.empty(); }

    void validate(int latent_channels) const {
        if (mean.size() != static_cast<size_t>(latent_channels) ||
            stddev.size() != static_cast<size_t>(latent_channels))
            throw Error("LatentStats: expected " +
                        std::to_string(latent_channels) + " channels, have " +
                        std::to_string(mean.size()) + "/" +
                        std::to_string(stddev.size()));
        for (double s : stddev)
            if (!(s > 0.0))
                throw Error("LatentStats: stddev must be > 0");
    }
};

template <typename T>
LatentStats compute_latent_stats(const std::vector<TokenGrid<T>>& grids) {
    if (grids.empty())
        throw Error("compute_latent_stats: no grids");
    const int c = grids.front().latent_channels();
    std::vector<double> sum(static_cast<size_t>(c), 0.0);
    std::vector<double> sumsq(static_cast<size_t>(c), 0.0);
    int64_t n = 0;
    for (const auto& g : grids) {
        if (g.latent_channels() != c)
            throw Error("compute_latent_stats: mixed channel counts");
        for (Eigen::Index i = 0; i < g.tokens.rows(); ++i)
            for (int j = 0; j < c; ++j) {
                double v = static_cast<double>(g.tokens(i, j));
                sum[static_cast<size_t>(j)] += v;
                sumsq[static_cast<size_t>(j)] += v * v;
            }
        n += g.tokens.rows();
    }
    LatentStats st;
    st.mean.resize(static_cast<size_t>(c));
    st.stddev.resize(static_cast<size_t>(c));
    for (int j = 0; j < c; ++j) {
        double m = sum[static_cast<size_t>(j)] / static_cast<double>(n);
        double var =
            sumsq[static_cast<size_t>(j)] / static_cast<double>(n) - m * m;
        st.mean[static_cast<size_t>(j)] = m;
        // constant channels get unit scale instead of a degenerate divisor
        st.stddev[static_cast<size_t>(j)] = var > 1e-12 ? std::sqrt(var) : 1.0;
    }
    return st;
}

template <typename T>
TokenGrid<T> normalize_tokens(const TokenGrid<T>& g, const LatentStats& st) {
    st.validate(g.latent_channels());
    TokenGrid<T> out = g;
    for (int j = 0; j < g.latent_channels(); ++j) {
        const size_t sj = static_cast<size_t>(j);
        out.tokens.col(j) =
            (out.tokens.col(j).array() - static_cast<T>(st.mean[sj])) /
            static_cast<T>(st.stddev[sj]);
    }
    return out;
}

template <typename T>
TokenGrid<T> denormalize_tokens(const TokenGrid<T>& g, const LatentStats& st) {
    st.validate(g.latent_channels());
    TokenGrid<T> out = g;
    for (int j = 0; j < g.latent_channels(); ++j) {
        const size_t sj = static_cast<size_t>(j);
        out.tokens.col(j) =
            out.tokens.col(j).array() * static_cast<T>(st.stddev[sj]) +
            static_cast<T>(st.mean[sj]);
    }
    return out;
}

}  // namespace icflow

#endif  // ICFLOW_LATENT_HPP
