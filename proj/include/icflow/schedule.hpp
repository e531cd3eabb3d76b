#ifndef ICFLOW_SCHEDULE_HPP
#define ICFLOW_SCHEDULE_HPP

#include "icflow/core.hpp"

#include <cmath>
#include <limits>
#include <optional>
#include <vector>

namespace icflow {

// Rectified-flow interpolation coefficients: a(t) = 1-t, b(t) = t.
// All schedule math runs in double precision regardless of model precision.
struct RFSchedule {
    static double a(double t) { return 1.0 - t; }
    static double b(double t) { return t; }
    static double a_prime(double /*t*/) { return -1.0; }
    static double b_prime(double /*t*/) { return 1.0; }
};

// Logit-normal timestep distribution: logit(t) ~ N(mu, sigma).
// When built from a resolution shift alpha, mu = log(alpha) and sigma = 1.
struct TimestepDistribution {
    double mu = 0.0;
    double sigma = 1.0;
    std::optional<double> alpha;

    TimestepDistribution() = default;
    TimestepDistribution(double mu_, double sigma_) : mu(mu_), sigma(sigma_) {
        validate();
    }

    static TimestepDistribution from_alpha(double a) {
        if (!(a > 0.0))
            throw Error("TimestepDistribution: alpha must be > 0, got " +
                        std::to_string(a));
        TimestepDistribution d;
        d.mu = std::log(a);
        d.sigma = 1.0;
        d.alpha = a;
        return d;
    }

    static TimestepDistribution identity() { return TimestepDistribution(); }

    void validate() const {
        if (!(sigma > 0.0))
            throw Error("TimestepDistribution: sigma must be > 0, got " +
                        std::to_string(sigma));
        if (alpha) {
            if (!(*alpha > 0.0))
                throw Error("TimestepDistribution: alpha must be > 0");
            if (mu != std::log(*alpha))
                throw Error("TimestepDistribution: mu must equal log(alpha)");
        }
    }
};

inline double mu_from_alpha(double alpha) {
    if (!(alpha > 0.0))
        throw Error("mu_from_alpha: alpha must be > 0, got " +
                    std::to_string(alpha));
    return std::log(alpha);
}

// Default resolution -> mu mapping, keyed by target token count.
// mu = log(sqrt(tokens / 256)); the trainer logs whichever value it used.
inline double default_mu_for_tokens(int tokens) {
    if (tokens < 1)
        throw Error("default_mu_for_tokens: tokens must be >= 1");
    return std::log(std::sqrt(static_cast<double>(tokens) / 256.0));
}

// z_t = (1-t) x + t eps, with t and the noise draw recorded.
template <typename T>
struct FlowState {
    Mat<T> z;
    double t = 0.0;
    Mat<T> eps;
};

template <typename T>
FlowState<T> interpolate(const Mat<T>& x, const Mat<T>& eps, double t) {
    check_same_shape(x.rows(), x.cols(), eps.rows(), eps.cols(),
                     "interpolate(x, eps)");
    if (!(t >= 0.0 && t <= 1.0))
        throw Error("interpolate: t must be in [0,1], got " + std::to_string(t));
    FlowState<T> s;
    s.z = (static_cast<T>(1.0 - t) * x + static_cast<T>(t) * eps).eval();
    s.t = t;
    s.eps = eps;
    return s;
}

// lambda_t = log(a_t^2 / b_t^2) = 2 log((1-t)/t).
// Endpoints return signed-infinity sentinels (+inf at t=0, -inf at t=1);
// samplers only evaluate interior points.
inline double log_snr(double t) {
    if (!(t >= 0.0 && t <= 1.0))
        throw Error("log_snr: t must be in [0,1], got " + std::to_string(t));
    if (t == 0.0)
        return std::numeric_limits<double>::infinity();
    if (t == 1.0)
        return -std::numeric_limits<double>::infinity();
    return 2.0 * std::log((1.0 - t) / t);
}

// d/dt of log_snr: -2 / (t (1-t)). Diverges at the endpoints.
inline double log_snr_prime(double t) {
    if (!(t > 0.0 && t < 1.0))
        throw Error("log_snr_prime: t must be in (0,1), got " +
                    std::to_string(t));
    return -2.0 / (t * (1.0 - t));
}

inline double logit(double t) { return std::log(t / (1.0 - t)); }
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Draw t with logit(t) ~ N(mu, sigma); every sample lies in (0,1).
inline std::vector<double> sample_t(const TimestepDistribution& dist, Rng& rng,
                                    int64_t n) {
    dist.validate();
    if (n < 1)
        throw Error("sample_t: n must be >= 1");
    std::vector<double> out(static_cast<size_t>(n));
    for (auto& t : out)
        t = sigmoid(dist.mu + dist.sigma * rng.normal());
    return out;
}

// Closed-form density of the logit-normal distribution.
inline double logit_normal_pdf(double t, const TimestepDistribution& dist) {
    if (t <= 0.0 || t >= 1.0)
        return 0.0;
    double d = (logit(t) - dist.mu) / dist.sigma;
    const double inv_sqrt_2pi = 0.3989422804014326779;
    return std::exp(-0.5 * d * d) * inv_sqrt_2pi / (dist.sigma * t * (1.0 - t));
}

// P(T <= t) = Phi((logit(t) - mu) / sigma).
inline double logit_normal_cdf(double t, const TimestepDistribution& dist) {
    if (t <= 0.0)
        return 0.0;
    if (t >= 1.0)
        return 1.0;
    double d = (logit(t) - dist.mu) / dist.sigma;
    return 0.5 * std::erfc(-d / std::sqrt(2.0));
}

// Timestep redistribution: t' = e^mu / (e^mu + (1/t - 1)^sigma).
// Endpoints map to themselves.
inline double shift_timestep(double t, const TimestepDistribution& dist) {
    dist.validate();
    if (!(t >= 0.0 && t <= 1.0))
        throw Error("shift_timestep: t must be in [0,1], got " +
                    std::to_string(t));
    if (t == 0.0)
        return 0.0;
    if (t == 1.0)
        return 1.0;
    double emu = std::exp(dist.mu);
    return emu / (emu + std::pow(1.0 / t - 1.0, dist.sigma));
}

// Shifted log-SNR: lambda^{mu,sigma}_t = sigma * lambda_t - 2 mu.
inline double shifted_log_snr(double t, const TimestepDistribution& dist) {
    dist.validate();
    return dist.sigma * log_snr(t) - 2.0 * dist.mu;
}

}  // namespace icflow

#endif  // ICFLOW_SCHEDULE_HPP
