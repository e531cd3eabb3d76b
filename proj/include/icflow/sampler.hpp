#ifndef ICFLOW_SAMPLER_HPP
#define ICFLOW_SAMPLER_HPP

#include "icflow/core.hpp"
#include "icflow/latent.hpp"
#include "icflow/model.hpp"
#include "icflow/schedule.hpp"

#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace icflow {

struct SamplerConfig {
    int num_steps = 64;
    double guidance_scale = 2.0;
    TimestepDistribution dist;  // grid shifting; identity by default
    uint64_t seed = 0;

    void validate() const {
        if (num_steps < 1)
            throw Error("SamplerConfig: num_steps must be >= 1");
        if (!(guidance_scale >= 0.0))
            throw Error("SamplerConfig: guidance_scale must be >= 0");
        dist.validate();
    }
};

// Uniform noise->data grid on [1,0], mapped through shift_timestep.
// Strictly decreasing with exact endpoints 1 and 0.
inline std::vector<double> timestep_grid(const SamplerConfig& cfg) {
    cfg.validate();
    std::vector<double> grid(static_cast<size_t>(cfg.num_steps) + 1);
    for (int k = 0; k <= cfg.num_steps; ++k) {
        double raw = 1.0 - static_cast<double>(k) / cfg.num_steps;
        grid[static_cast<size_t>(k)] = shift_timestep(raw, cfg.dist);
    }
    grid.front() = 1.0;
    grid.back() = 0.0;
    return grid;
}

// Explicit Euler over a decreasing time grid: z += (t_{k+1} - t_k) v(z, t_k).
// The velocity callback sees the step index for diagnostics only.
template <typename T, typename VelocityFn>
Mat<T> euler_integrate(Mat<T> z, const std::vector<double>& grid,
                       VelocityFn&& velocity) {
    if (grid.size() < 2)
        throw Error("euler_integrate: grid needs at least 2 points");
    for (size_t k = 0; k + 1 < grid.size(); ++k) {
        Mat<T> v = velocity(z, grid[k], static_cast<int>(k));
        check_same_shape(z.rows(), z.cols(), v.rows(), v.cols(),
                         "euler_integrate");
        z += v * static_cast<T>(grid[k + 1] - grid[k]);
        if (!z.allFinite())
            throw Error("euler_integrate: non-finite state after step " +
                        std::to_string(k) + " (t=" + std::to_string(grid[k]) +
                        ")");
    }
    return z;
}

namespace detail {

// One guided velocity evaluation. guidance_scale > 0 applies
// v_u + g (v_c - v_u); 0 and 1 both degenerate to the pure conditional
// pass (at 1 via the formula itself), so only one forward runs there.
template <typename T>
Mat<T> guided_velocity(const ModelParams<T>& params, const ModelConfig& cfg,
                       const TokenGrid<T>& noised,
                       const std::vector<TokenGrid<T>>& contexts,
                       const std::vector<int>& instruction, double t,
                       double guidance_scale) {
    TokenSequence<T> cond_seq = build_sequence(noised, contexts);
    Mat<T> v_cond = forward(params, cfg, cond_seq.tokens, instruction,
                            cond_seq.positions, cond_seq.target_len, t);
    const bool needs_uncond = guidance_scale > 0.0 && guidance_scale != 1.0 &&
                              !contexts.empty();
    if (!needs_uncond)
        return v_cond;
    TokenSequence<T> unc_seq = build_sequence(noised, {});
    Mat<T> v_unc = forward(params, cfg, unc_seq.tokens, instruction,
                           unc_seq.positions, unc_seq.target_len, t);
    return v_unc + (v_cond - v_unc) * static_cast<T>(guidance_scale);
}

}  // namespace detail

// Generates one target grid of the given shape. Contexts and the returned
// grid live in normalized latent space; the caller owns de-normalization.
// The unconditional branch of guidance drops context tokens but keeps the
// instruction.
template <typename T>
TokenGrid<T> sample(const ModelParams<T>& params, const ModelConfig& cfg,
                    const std::vector<TokenGrid<T>>& contexts,
                    const std::vector<int>& instruction, int grid_h,
                    int grid_w, const SamplerConfig& scfg) {
    scfg.validate();
    if (grid_h < 1 || grid_w < 1)
        throw Error("sample: target grid dims must be >= 1");
    Rng rng(scfg.seed);
    Mat<T> z(static_cast<Eigen::Index>(grid_h) * grid_w, cfg.latent_channels);
    rng.fill_normal(z, 1.0);
    std::vector<double> grid = timestep_grid(scfg);
    z = euler_integrate(std::move(z), grid,
                        [&](const Mat<T>& zk, double t, int) {
                            TokenGrid<T> noised{grid_h, grid_w, zk};
                            return detail::guided_velocity(
                                params, cfg, noised, contexts, instruction, t,
                                scfg.guidance_scale);
                        });
    return TokenGrid<T>{grid_h, grid_w, std::move(z)};
}

// Convenience wrapper producing a decoded image: sample in normalized
// latent space, de-normalize, unpatchify.
template <typename T>
ImageTensor<T> sample_image(const ModelParams<T>& params,
                            const ModelConfig& cfg,
                            const std::vector<ImageTensor<T>>& context_images,
                            const std::vector<int>& instruction, int height,
                            int width, const LatentStats& stats,
                            const SamplerConfig& scfg) {
    std::vector<TokenGrid<T>> contexts;
    contexts.reserve(context_images.size());
    for (const auto& img : context_images)
        contexts.push_back(normalize_tokens(encode(img, cfg.patch), stats));
    if (height % cfg.patch != 0 || width % cfg.patch != 0)
        throw Error("sample_image: target dims not divisible by patch");
    TokenGrid<T> out = sample(params, cfg, contexts, instruction,
                              height / cfg.patch, width / cfg.patch, scfg);
    return decode(denormalize_tokens(out, stats), cfg.patch);
}

// Multi-turn editing: each output becomes the (single) context for the next
// instruction. Turn k samples with seed scfg.seed + k. Returns one image per
// instruction, in order.
template <typename T>
std::vector<ImageTensor<T>> edit_loop(const ModelParams<T>& params,
                                      const ModelConfig& cfg,
                                      const ImageTensor<T>& initial_image,
                                      const std::vector<std::vector<int>>& instructions,
                                      const LatentStats& stats,
                                      const SamplerConfig& scfg,
                                      bool drop_context = false) {
    if (instructions.empty())
        throw Error("edit_loop: no instructions");
    std::vector<ImageTensor<T>> outputs;
    outputs.reserve(instructions.size());
    ImageTensor<T> current = initial_image;
    for (size_t k = 0; k < instructions.size(); ++k) {
        SamplerConfig turn_cfg = scfg;
        turn_cfg.seed = scfg.seed + k;
        std::vector<ImageTensor<T>> ctx;
        if (!drop_context)
            ctx.push_back(current);
        ImageTensor<T> out =
            sample_image(params, cfg, ctx, instructions[k], current.height,
                         current.width, stats, turn_cfg);
        outputs.push_back(out);
        current = std::move(out);
    }
    return outputs;
}

}  // namespace icflow

#endif  // ICFLOW_SAMPLER_HPP
