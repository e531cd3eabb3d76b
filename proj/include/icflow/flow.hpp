#ifndef ICFLOW_FLOW_HPP
#define ICFLOW_FLOW_HPP

#include "icflow/core.hpp"
#include "icflow/latent.hpp"
#include "icflow/model.hpp"
#include "icflow/schedule.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace icflow {

// Velocity regression target of the linear-interpolation path: eps - x.
template <typename T>
Mat<T> rf_target(const Mat<T>& x, const Mat<T>& eps) {
    check_same_shape(x.rows(), x.cols(), eps.rows(), eps.cols(), "rf_target");
    return eps - x;
}

// General conditional flow-matching target (a'_t/a_t) z_t - (b_t/2) lambda'_t eps.
// Algebraically identical to rf_target(x, eps) when z_t = interpolate(x, eps, t).
template <typename T>
Mat<T> cfm_target_general(const Mat<T>& z_t, const Mat<T>& eps, double t) {
    check_same_shape(z_t.rows(), z_t.cols(), eps.rows(), eps.cols(),
                     "cfm_target_general");
    if (!(t > 0.0 && t < 1.0))
        throw Error("cfm_target_general: t must be in (0,1), got " +
                    std::to_string(t));
    const double ratio = RFSchedule::a_prime(t) / RFSchedule::a(t);
    const double eps_coef = -0.5 * RFSchedule::b(t) * log_snr_prime(t);
    return (z_t * static_cast<T>(ratio) + eps * static_cast<T>(eps_coef));
}

struct TrainConfig {
    int steps = 2000;
    int batch_size = 32;
    double learning_rate = 1e-3;
    int warmup_steps = 100;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.0;
    double grad_clip = 1.0;  // global-norm clip; 0 disables
    double context_dropout_prob = 0.1;
    // cosine decay floor after warmup, as a fraction of learning_rate;
    // 1 keeps the rate constant
    double final_lr_fraction = 1.0;
    TimestepDistribution dist;
    uint64_t seed = 0;
    int threads = 0;  // 0 = resolve from environment/hardware

    void validate() const {
        if (steps < 1 || batch_size < 1)
            throw Error("TrainConfig: steps and batch_size must be >= 1");
        if (!(learning_rate > 0.0))
            throw Error("TrainConfig: learning_rate must be > 0");
        if (!(context_dropout_prob >= 0.0 && context_dropout_prob <= 1.0))
            throw Error("TrainConfig: context_dropout_prob must be in [0,1]");
        if (warmup_steps < 0)
            throw Error("TrainConfig: warmup_steps must be >= 0");
        if (!(final_lr_fraction >= 0.0 && final_lr_fraction <= 1.0))
            throw Error("TrainConfig: final_lr_fraction must be in [0,1]");
        dist.validate();
    }
};

struct LossReport {
    int step = 0;
    double loss = 0.0;
    double grad_norm = 0.0;
    double seconds = 0.0;  // wall time since training started
};

// One supervised example: clean target tokens, clean context tokens, and the
// instruction. Token grids are expected pre-normalized.
template <typename T>
struct TrainExample {
    TokenGrid<T> target;
    std::vector<TokenGrid<T>> contexts;
    std::vector<int> instruction;
};

namespace detail {

// Per-example draws made sequentially on the main thread so results do not
// depend on the number of worker threads.
template <typename T>
struct ExampleDraw {
    size_t index = 0;
    double t = 0.5;
    Mat<T> eps;
    bool drop_context = false;
};

template <typename T>
double example_loss_and_grads(const ModelParams<T>& params,
                              const ModelConfig& cfg,
                              const TrainExample<T>& ex,
                              const ExampleDraw<T>& draw,
                              ModelParams<T>& grads) {
    const TokenGrid<T>& tgt = ex.target;
    Mat<T> z_t = interpolate(tgt.tokens, draw.eps, draw.t).z;
    TokenGrid<T> noised{tgt.grid_h, tgt.grid_w, z_t};
    std::vector<TokenGrid<T>> ctx =
        draw.drop_context ? std::vector<TokenGrid<T>>{} : ex.contexts;
    TokenSequence<T> seq = build_sequence(noised, ctx);

    ForwardCache<T> cache;
    Mat<T> v = forward(params, cfg, seq.tokens, ex.instruction, seq.positions,
                       seq.target_len, draw.t, &cache);
    Mat<T> target = rf_target(tgt.tokens, draw.eps);
    Mat<T> diff = v - target;
    const double denom = static_cast<double>(diff.size());
    double loss = diff.template cast<double>().array().square().sum() / denom;
    // d(loss)/dv of the per-example mean; batch mean applied by the caller
    Mat<T> d_out = diff * static_cast<T>(2.0 / denom);
    backward(params, cfg, cache, d_out, grads);
    return loss;
}

}  // namespace detail

// Mean loss over the batch plus accumulated gradients (already divided by
// batch size). Throws on non-finite loss.
template <typename T>
double loss_and_grads(const ModelParams<T>& params, const ModelConfig& cfg,
                      const std::vector<TrainExample<T>>& examples,
                      const std::vector<size_t>& batch_indices,
                      const TrainConfig& tcfg, Rng& rng,
                      ModelParams<T>& grads, int threads) {
    if (batch_indices.empty())
        throw Error("loss_and_grads: empty batch");
    const size_t n = batch_indices.size();

    std::vector<detail::ExampleDraw<T>> draws(n);
    for (size_t i = 0; i < n; ++i) {
        const TrainExample<T>& ex = examples.at(batch_indices[i]);
        draws[i].index = batch_indices[i];
        draws[i].t = sample_t(tcfg.dist, rng, 1)[0];
        draws[i].eps.resize(ex.target.tokens.rows(), ex.target.tokens.cols());
        rng.fill_normal(draws[i].eps, 1.0);
        draws[i].drop_context = rng.bernoulli(tcfg.context_dropout_prob);
    }

    zero_params(grads);
    int nthreads = resolve_threads(threads);
    if (static_cast<size_t>(nthreads) > n)
        nthreads = static_cast<int>(n);

    // one gradient accumulator per chunk; chunk boundaries are a pure
    // function of (n, nthreads), so the reduction order is reproducible
    std::vector<ModelParams<T>> chunk_grads;
    std::vector<double> chunk_loss;
    const int chunks = nthreads;
    chunk_grads.reserve(static_cast<size_t>(chunks));
    for (int i = 0; i < chunks; ++i)
        chunk_grads.push_back(make_grads<T>(cfg));
    chunk_loss.assign(static_cast<size_t>(chunks), 0.0);

    parallel_for_chunks(
        static_cast<int64_t>(n), nthreads,
        [&](int64_t begin, int64_t end, int chunk) {
            for (int64_t i = begin; i < end; ++i)
                chunk_loss[static_cast<size_t>(chunk)] +=
                    detail::example_loss_and_grads(
                        params, cfg, examples[draws[static_cast<size_t>(i)].index],
                        draws[static_cast<size_t>(i)],
                        chunk_grads[static_cast<size_t>(chunk)]);
        });

    // fixed-order reduction keeps results identical for a given thread count
    double loss = 0.0;
    for (int c = 0; c < chunks; ++c)
        loss += chunk_loss[static_cast<size_t>(c)];
    loss /= static_cast<double>(n);
    auto out_refs = collect_tensors(grads);
    const T inv_n = static_cast<T>(1.0 / static_cast<double>(n));
    for (int c = 0; c < chunks; ++c) {
        auto in_refs = collect_tensors(chunk_grads[static_cast<size_t>(c)]);
        for (size_t r = 0; r < out_refs.size(); ++r)
            Eigen::Map<Mat<T>>(out_refs[r].data, out_refs[r].rows,
                               out_refs[r].cols) +=
                Eigen::Map<Mat<T>>(in_refs[r].data, in_refs[r].rows,
                                   in_refs[r].cols) *
                inv_n;
    }

    if (!std::isfinite(loss))
        throw Error("loss_and_grads: non-finite loss");
    return loss;
}

template <typename T>
struct Adam {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.0;
    int64_t steps_taken = 0;
    ModelParams<T> m, v;

    Adam(const ModelConfig& cfg, const TrainConfig& tcfg)
        : beta1(tcfg.adam_beta1),
          beta2(tcfg.adam_beta2),
          eps(tcfg.adam_eps),
          weight_decay(tcfg.weight_decay),
          m(make_grads<T>(cfg)),
          v(make_grads<T>(cfg)) {}

    void update(ModelParams<T>& params, ModelParams<T>& grads, double lr) {
        ++steps_taken;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(steps_taken));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(steps_taken));
        auto pr = collect_tensors(params);
        auto gr = collect_tensors(grads);
        auto mr = collect_tensors(m);
        auto vr = collect_tensors(v);
        for (size_t i = 0; i < pr.size(); ++i) {
            auto p = Eigen::Map<Mat<T>>(pr[i].data, pr[i].rows, pr[i].cols);
            auto g = Eigen::Map<Mat<T>>(gr[i].data, gr[i].rows, gr[i].cols);
            auto mm = Eigen::Map<Mat<T>>(mr[i].data, mr[i].rows, mr[i].cols);
            auto vv = Eigen::Map<Mat<T>>(vr[i].data, vr[i].rows, vr[i].cols);
            mm = mm * static_cast<T>(beta1) + g * static_cast<T>(1.0 - beta1);
            vv = vv * static_cast<T>(beta2) +
                 g.array().square().matrix() * static_cast<T>(1.0 - beta2);
            Mat<T> mhat = mm / static_cast<T>(bc1);
            Mat<T> vhat = vv / static_cast<T>(bc2);
            if (weight_decay > 0.0)
                p -= p * static_cast<T>(lr * weight_decay);
            p -= (mhat.array() / (vhat.array().sqrt() + static_cast<T>(eps)))
                     .matrix() *
                 static_cast<T>(lr);
        }
    }
};

// Global gradient norm; optionally rescales grads so the norm is <= clip.
template <typename T>
double clip_grad_norm(ModelParams<T>& grads, double clip) {
    double sq = 0.0;
    visit_params(grads, [&](const std::string&, auto& g) {
        sq += g.template cast<double>().array().square().sum();
    });
    double norm = std::sqrt(sq);
    if (clip > 0.0 && norm > clip) {
        const double scale = clip / norm;
        visit_params(grads, [&](const std::string&, auto& g) {
            using S = typename std::decay_t<decltype(g)>::Scalar;
            g *= static_cast<S>(scale);
        });
    }
    return norm;
}

inline double lr_at_step(const TrainConfig& tcfg, int step) {
    if (tcfg.warmup_steps > 0 && step < tcfg.warmup_steps)
        return tcfg.learning_rate * (step + 1) /
               static_cast<double>(tcfg.warmup_steps);
    if (tcfg.final_lr_fraction >= 1.0)
        return tcfg.learning_rate;
    double span =
        static_cast<double>(std::max(1, tcfg.steps - tcfg.warmup_steps));
    double prog = std::min(1.0, (step - tcfg.warmup_steps) / span);
    double floor_lr = tcfg.learning_rate * tcfg.final_lr_fraction;
    return floor_lr + (tcfg.learning_rate - floor_lr) * 0.5 *
                          (1.0 + std::cos(3.14159265358979323846 * prog));
}

// Runs the optimization loop. Batches are drawn with replacement from a
// dedicated RNG stream, so a fixed seed fixes the whole trajectory. The
// callback observes every step; the caller owns logging and checkpointing.
template <typename T>
void train(ModelParams<T>& params, const ModelConfig& cfg,
           const std::vector<TrainExample<T>>& dataset,
           const TrainConfig& tcfg,
           const std::function<void(const LossReport&)>& on_step = {}) {
    tcfg.validate();
    if (dataset.empty())
        throw Error("train: dataset is empty");
    Rng rng(tcfg.seed);
    Adam<T> opt(cfg, tcfg);
    ModelParams<T> grads = make_grads<T>(cfg);
    const int threads = resolve_threads(tcfg.threads);
    const auto t0 = std::chrono::steady_clock::now();

    for (int step = 0; step < tcfg.steps; ++step) {
        std::vector<size_t> batch(static_cast<size_t>(tcfg.batch_size));
        for (auto& b : batch)
            b = static_cast<size_t>(rng.below(dataset.size()));
        double loss;
        try {
            loss = loss_and_grads(params, cfg, dataset, batch, tcfg, rng,
                                  grads, threads);
        } catch (const Error& e) {
            throw Error("train: step " + std::to_string(step) + ": " +
                        e.what());
        }
        double gnorm = clip_grad_norm(grads, tcfg.grad_clip);
        opt.update(params, grads, lr_at_step(tcfg, step));
        if (on_step) {
            LossReport rep;
            rep.step = step;
            rep.loss = loss;
            rep.grad_norm = gnorm;
            rep.seconds = std::chrono::duration<double>(
                              std::chrono::steady_clock::now() - t0)
                              .count();
            on_step(rep);
        }
    }
}

}  // namespace icflow

#endif  // ICFLOW_FLOW_HPP
