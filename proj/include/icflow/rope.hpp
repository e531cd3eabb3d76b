#ifndef ICFLOW_ROPE_HPP
#define ICFLOW_ROPE_HPP

#include "icflow/core.hpp"

#include <array>
#include <cmath>
#include <utility>
#include <vector>

namespace icflow {

// Token position as (virtual time, row, column). Target tokens sit at t = 0;
// the i-th context image's tokens all sit at t = i.
struct PositionTriplet {
    int t = 0;
    int h = 0;
    int w = 0;

    bool operator==(const PositionTriplet& o) const {
        return t == o.t && h == o.h && w == o.w;
    }
};

// Factorized 3D rotary config: head_dim split across the (t, h, w) axes.
struct RopeConfig {
    int head_dim = 0;
    std::array<int, 3> axis_split{0, 0, 0};  // (d_t, d_h, d_w)
    double base_freq = 10000.0;

    void validate() const {
        int sum = 0;
        for (int d : axis_split) {
            if (d < 2 || d % 2 != 0)
                throw Error("RopeConfig: each axis dim must be even and >= 2");
            sum += d;
        }
        if (sum != head_dim)
            throw Error("RopeConfig: axis_split must sum to head_dim (" +
                        std::to_string(sum) + " vs " +
                        std::to_string(head_dim) + ")");
    }

    // Virtual time takes few distinct values, so t gets the smallest share.
    // head_dim 64 -> (8, 28, 28).
    static RopeConfig default_for(int head_dim) {
        if (head_dim < 6 || head_dim % 2 != 0)
            throw Error("RopeConfig: head_dim must be even and >= 6");
        RopeConfig cfg;
        cfg.head_dim = head_dim;
        int dt = std::max(2, (head_dim / 8) & ~1);
        int rem = head_dim - dt;
        int dh = (rem / 2) & ~1;
        cfg.axis_split = {dt, dh, rem - dh};
        cfg.validate();
        return cfg;
    }

    bool operator==(const RopeConfig& o) const {
        return head_dim == o.head_dim && axis_split == o.axis_split &&
               base_freq == o.base_freq;
    }
};

// Target tokens get (0, h, w) in row-major order, context i gets (i, h, w).
inline std::vector<PositionTriplet> assign_positions(
    std::pair<int, int> target_grid,
    const std::vector<std::pair<int, int>>& context_grids) {
    auto emit = [](std::vector<PositionTriplet>& out, int t, int h, int w) {
        if (h < 1 || w < 1)
            throw Error("assign_positions: grid dims must be >= 1");
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j)
                out.push_back({t, i, j});
    };
    std::vector<PositionTriplet> out;
    emit(out, 0, target_grid.first, target_grid.second);
    for (size_t i = 0; i < context_grids.size(); ++i)
        emit(out, static_cast<int>(i) + 1, context_grids[i].first,
             context_grids[i].second);
    return out;
}

// Per-position rotation angles, one per rotated pair (L x head_dim/2).
// Within each axis segment, pair j rotates by pos * base^(-2j/d_axis).
inline Matd rope_angles(const std::vector<PositionTriplet>& positions,
                        const RopeConfig& cfg) {
    cfg.validate();
    const auto L = static_cast<Eigen::Index>(positions.size());
    Matd angles(L, cfg.head_dim / 2);
    for (Eigen::Index i = 0; i < L; ++i) {
        const double coord[3] = {static_cast<double>(positions[i].t),
                                 static_cast<double>(positions[i].h),
                                 static_cast<double>(positions[i].w)};
        Eigen::Index col = 0;
        for (int axis = 0; axis < 3; ++axis) {
            int half = cfg.axis_split[axis] / 2;
            for (int j = 0; j < half; ++j) {
                double freq =
                    std::pow(cfg.base_freq, -2.0 * j / cfg.axis_split[axis]);
                angles(i, col++) = coord[axis] * freq;
            }
        }
    }
    return angles;
}

// Rotates consecutive pairs (x_{2j}, x_{2j+1}) of each row by the row's
// angle schedule. Orthogonal, so norms are preserved; position (0,0,0) is
// the identity. `sign` = -1 applies the inverse rotation (used in backward).
template <typename T>
Mat<T> rope_apply(const Mat<T>& x, const Mat<T>& cos_tab, const Mat<T>& sin_tab,
                  int sign = 1) {
    if (x.cols() != 2 * cos_tab.cols() || x.rows() != cos_tab.rows())
        throw Error("rope_apply: dim mismatch (" + std::to_string(x.rows()) +
                    "x" + std::to_string(x.cols()) + " vs angle table " +
                    std::to_string(cos_tab.rows()) + "x" +
                    std::to_string(cos_tab.cols()) + ")");
    Mat<T> out(x.rows(), x.cols());
    const T s = static_cast<T>(sign);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        for (Eigen::Index j = 0; j < cos_tab.cols(); ++j) {
            T c = cos_tab(i, j);
            T sn = s * sin_tab(i, j);
            T x0 = x(i, 2 * j);
            T x1 = x(i, 2 * j + 1);
            out(i, 2 * j) = x0 * c - x1 * sn;
            out(i, 2 * j + 1) = x0 * sn + x1 * c;
        }
    }
    return out;
}

// One-shot rotation of per-head vectors by their position triplets.
template <typename T>
Mat<T> rope_rotate(const Mat<T>& q_or_k,
                   const std::vector<PositionTriplet>& positions,
                   const RopeConfig& cfg) {
    if (q_or_k.cols() != cfg.head_dim)
        throw Error("rope_rotate: vector dim " + std::to_string(q_or_k.cols()) +
                    " != head_dim " + std::to_string(cfg.head_dim));
    if (static_cast<size_t>(q_or_k.rows()) != positions.size())
        throw Error("rope_rotate: rows " + std::to_string(q_or_k.rows()) +
                    " != positions " + std::to_string(positions.size()));
    Matd angles = rope_angles(positions, cfg);
    Mat<T> cos_tab = angles.array().cos().cast<T>();
    Mat<T> sin_tab = angles.array().sin().cast<T>();
    return rope_apply(q_or_k, cos_tab, sin_tab);
}

}  // namespace icflow

#endif  // ICFLOW_ROPE_HPP
