#ifndef ICFLOW_NN_HPP
#define ICFLOW_NN_HPP

#include "icflow/core.hpp"

#include <cmath>
#include <vector>

namespace icflow {

// Layers are plain parameter holders. Gradients reuse the same struct shape
// as the parameters they mirror, so one visitor serves update, serialization
// and finite-difference enumeration alike.

template <typename T>
struct Linear {
    Mat<T> w;  // out x in
    Row<T> b;  // out

    void init(Eigen::Index out, Eigen::Index in, Rng& rng, double stddev) {
        w.resize(out, in);
        rng.fill_normal(w, stddev);
        b = Row<T>::Zero(out);
    }
    void init_zero(Eigen::Index out, Eigen::Index in) {
        w = Mat<T>::Zero(out, in);
        b = Row<T>::Zero(out);
    }

    Mat<T> forward(const Mat<T>& x) const {
        Mat<T> y(x.rows(), w.rows());
        y.noalias() = x * w.transpose();
        y.rowwise() += b;
        return y;
    }

    // Accumulates parameter grads, returns dx.
    Mat<T> backward(const Mat<T>& x, const Mat<T>& dy, Linear<T>& grad) const {
        grad.w.noalias() += dy.transpose() * x;
        grad.b += dy.colwise().sum();
        Mat<T> dx(x.rows(), x.cols());
        dx.noalias() = dy * w;
        return dx;
    }
};

template <typename T>
struct Embedding {
    Mat<T> table;  // vocab x dim

    void init(Eigen::Index vocab, Eigen::Index dim, Rng& rng, double stddev) {
        table.resize(vocab, dim);
        rng.fill_normal(table, stddev);
    }

    Mat<T> forward(const std::vector<int>& ids) const {
        Mat<T> out(static_cast<Eigen::Index>(ids.size()), table.cols());
        for (size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] < 0 || ids[i] >= table.rows())
                throw Error("Embedding: id " + std::to_string(ids[i]) +
                            " out of range [0," + std::to_string(table.rows()) +
                            ")");
            out.row(static_cast<Eigen::Index>(i)) = table.row(ids[i]);
        }
        return out;
    }

    void backward(const std::vector<int>& ids, const Mat<T>& dy,
                  Embedding<T>& grad) const {
        for (size_t i = 0; i < ids.size(); ++i)
            grad.table.row(ids[i]) += dy.row(static_cast<Eigen::Index>(i));
    }
};

template <typename T>
struct RMSNorm {
    Row<T> scale;
    static constexpr T eps = static_cast<T>(1e-6);

    void init(Eigen::Index dim) { scale = Row<T>::Ones(dim); }

    struct Cache {
        Mat<T> x;
        Mat<T> inv;  // per-row 1/rms, column vector
    };

    Mat<T> forward(const Mat<T>& x, Cache* cache = nullptr) const {
        Mat<T> inv =
            (x.array().square().rowwise().mean() + eps).rsqrt().matrix();
        Mat<T> y = (x.array().colwise() * inv.col(0).array()).matrix();
        y.array().rowwise() *= scale.array();
        if (cache) {
            cache->x = x;
            cache->inv = inv;
        }
        return y;
    }

    Mat<T> backward(const Cache& cache, const Mat<T>& dy,
                    RMSNorm<T>& grad) const {
        const Mat<T>& x = cache.x;
        const auto inv = cache.inv.col(0).array();
        const T d = static_cast<T>(x.cols());
        // du: gradient wrt the normalized (pre-scale) values
        Mat<T> du = dy.array().rowwise() * scale.array();
        grad.scale.array() +=
            (dy.array() * (x.array().colwise() * inv)).colwise().sum();
        Mat<T> dot = (du.array() * x.array()).rowwise().sum().matrix();
        Mat<T> dx = (du.array().colwise() * inv).matrix();
        dx.array() -=
            x.array().colwise() * (dot.col(0).array() * inv.cube() / d);
        return dx;
    }
};

// LayerNorm without learned affine; modulation supplies scale/shift.
template <typename T>
struct LayerNormCache {
    Mat<T> y;        // normalized output
    Mat<T> inv_std;  // per-row 1/sqrt(var+eps)
};

template <typename T>
Mat<T> layer_norm(const Mat<T>& x, LayerNormCache<T>* cache = nullptr) {
    constexpr T eps = static_cast<T>(1e-6);
    Mat<T> mean = x.rowwise().mean();
    Mat<T> centered = x.array().colwise() - mean.col(0).array();
    Mat<T> inv_std =
        (centered.array().square().rowwise().mean() + eps).rsqrt().matrix();
    Mat<T> y = (centered.array().colwise() * inv_std.col(0).array()).matrix();
    if (cache) {
        cache->y = y;
        cache->inv_std = inv_std;
    }
    return y;
}

template <typename T>
Mat<T> layer_norm_backward(const LayerNormCache<T>& cache, const Mat<T>& dy) {
    const auto& y = cache.y;
    const T d = static_cast<T>(y.cols());
    Mat<T> mean_dy = dy.rowwise().sum() / d;
    Mat<T> mean_dyy = (dy.array() * y.array()).rowwise().sum().matrix() / d;
    Mat<T> dx = dy.array().colwise() - mean_dy.col(0).array();
    dx.array() -= y.array().colwise() * mean_dyy.col(0).array();
    dx.array().colwise() *= cache.inv_std.col(0).array();
    return dx;
}

// tanh-approximated GELU (DiT/transformer convention).
template <typename T>
Mat<T> gelu(const Mat<T>& x) {
    const T k = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
    const T c = static_cast<T>(0.044715);
    return (x.array() * T(0.5) *
            (T(1) + ((x.array() + c * x.array().cube()) * k).tanh()))
        .matrix();
}

template <typename T>
Mat<T> gelu_backward(const Mat<T>& x, const Mat<T>& dy) {
    const T k = static_cast<T>(0.7978845608028654);
    const T c = static_cast<T>(0.044715);
    auto inner = (x.array() + c * x.array().cube()) * k;
    auto th = inner.tanh();
    auto sech2 = T(1) - th.square();
    auto dinner = k * (T(1) + T(3) * c * x.array().square());
    return (dy.array() *
            (T(0.5) * (T(1) + th) + T(0.5) * x.array() * sech2 * dinner))
        .matrix();
}

template <typename T>
Mat<T> silu(const Mat<T>& x) {
    return (x.array() / (T(1) + (-x.array()).exp())).matrix();
}

template <typename T>
Mat<T> silu_backward(const Mat<T>& x, const Mat<T>& dy) {
    auto sig = T(1) / (T(1) + (-x.array()).exp());
    return (dy.array() * sig * (T(1) + x.array() * (T(1) - sig))).matrix();
}

// Row-wise softmax with the usual max-shift.
template <typename T>
Mat<T> softmax_rows(const Mat<T>& x) {
    Mat<T> y(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        T m = x.row(i).maxCoeff();
        y.row(i) = (x.row(i).array() - m).exp();
        y.row(i) /= y.row(i).sum();
    }
    return y;
}

template <typename T>
Mat<T> softmax_rows_backward(const Mat<T>& y, const Mat<T>& dy) {
    Mat<T> dx(y.rows(), y.cols());
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
        T dot = y.row(i).dot(dy.row(i));
        dx.row(i) = (dy.row(i).array() - dot) * y.row(i).array();
    }
    return dx;
}

// Scaled dot-product attention over full (unmasked) sequences, q/k/v laid
// out as L x (heads * head_dim) with heads in contiguous column blocks.
template <typename T>
struct AttentionCache {
    std::vector<Mat<T>> probs;  // per head, L x L
};

template <typename T>
Mat<T> attention_forward(const Mat<T>& q, const Mat<T>& k, const Mat<T>& v,
                         int heads, AttentionCache<T>* cache = nullptr) {
    const Eigen::Index hd = q.cols() / heads;
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
    Mat<T> out(q.rows(), q.cols());
    if (cache)
        cache->probs.resize(heads);
    for (int h = 0; h < heads; ++h) {
        auto qh = q.middleCols(h * hd, hd);
        auto kh = k.middleCols(h * hd, hd);
        auto vh = v.middleCols(h * hd, hd);
        Mat<T> scores(q.rows(), q.rows());
        scores.noalias() = qh * kh.transpose();
        scores *= scale;
        Mat<T> probs = softmax_rows(scores);
        out.middleCols(h * hd, hd).noalias() = probs * vh;
        if (cache)
            cache->probs[h] = std::move(probs);
    }
    return out;
}

template <typename T>
void attention_backward(const Mat<T>& q, const Mat<T>& k, const Mat<T>& v,
                        const AttentionCache<T>& cache, const Mat<T>& dout,
                        int heads, Mat<T>& dq, Mat<T>& dk, Mat<T>& dv) {
    const Eigen::Index hd = q.cols() / heads;
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
    dq.resize(q.rows(), q.cols());
    dk.resize(k.rows(), k.cols());
    dv.resize(v.rows(), v.cols());
    for (int h = 0; h < heads; ++h) {
        auto qh = q.middleCols(h * hd, hd);
        auto kh = k.middleCols(h * hd, hd);
        auto vh = v.middleCols(h * hd, hd);
        auto doh = dout.middleCols(h * hd, hd);
        const Mat<T>& probs = cache.probs[static_cast<size_t>(h)];
        Mat<T> dprobs(probs.rows(), probs.cols());
        dprobs.noalias() = doh * vh.transpose();
        dv.middleCols(h * hd, hd).noalias() = probs.transpose() * doh;
        Mat<T> dscores = softmax_rows_backward(probs, dprobs);
        dq.middleCols(h * hd, hd).noalias() = dscores * kh;
        dq.middleCols(h * hd, hd) *= scale;
        dk.middleCols(h * hd, hd).noalias() = dscores.transpose() * qh;
        dk.middleCols(h * hd, hd) *= scale;
    }
}

}  // namespace icflow

#endif  // ICFLOW_NN_HPP
