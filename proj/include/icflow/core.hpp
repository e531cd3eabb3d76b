#ifndef ICFLOW_CORE_HPP
#define ICFLOW_CORE_HPP

#include <Eigen/Core>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#ifndef ICFLOW_VERSION
#define ICFLOW_VERSION "0.1.0"
#endif

namespace icflow {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using Row = Eigen::Matrix<T, 1, Eigen::Dynamic>;

using Matf = Mat<float>;
using Matd = Mat<double>;

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad user input (flags, config files, malformed paths). The CLI maps this
// to exit code 2, everything else to 1.
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

inline void check_same_shape(Eigen::Index r1, Eigen::Index c1,
                             Eigen::Index r2, Eigen::Index c2,
                             const char* what) {
    if (r1 != r2 || c1 != c2) {
        throw Error(std::string(what) + ": shape mismatch (" +
                    std::to_string(r1) + "x" + std::to_string(c1) + " vs " +
                    std::to_string(r2) + "x" + std::to_string(c2) + ")");
    }
}

// Counter-free wrapper around a fixed PRNG. All randomness in the library
// flows through an explicit Rng so runs are reproducible from one seed.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : gen_(seed) {}

    double normal() { return normal_(gen_); }
    double uniform() { return uniform_(gen_); }
    // uniform integer in [0, n)
    int64_t below(int64_t n) {
        return static_cast<int64_t>(gen_() % static_cast<uint64_t>(n));
    }
    bool bernoulli(double p) { return uniform() < p; }
    uint64_t raw() { return gen_(); }

    template <typename T>
    void fill_normal(Mat<T>& m, double stddev = 1.0) {
        for (Eigen::Index i = 0; i < m.rows(); ++i)
            for (Eigen::Index j = 0; j < m.cols(); ++j)
                m(i, j) = static_cast<T>(normal() * stddev);
    }
    template <typename T>
    void fill_normal(Row<T>& m, double stddev = 1.0) {
        for (Eigen::Index j = 0; j < m.cols(); ++j)
            m(j) = static_cast<T>(normal() * stddev);
    }

private:
    std::mt19937_64 gen_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

// Thread count resolution: explicit value > ICFLOW_THREADS env > hardware.
inline int resolve_threads(int requested) {
    if (requested > 0)
        return requested;
    if (const char* env = std::getenv("ICFLOW_THREADS")) {
        int n = std::atoi(env);
        if (n > 0)
            return n;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

// Runs fn(begin, end, chunk_index) over n items split into exactly
// `threads` contiguous chunks. Chunk boundaries depend only on (n, threads),
// so per-chunk results reduced in chunk order are bit-reproducible.
template <typename Fn>
void parallel_for_chunks(int64_t n, int threads, Fn&& fn) {
    threads = static_cast<int>(std::max<int64_t>(1, std::min<int64_t>(threads, n)));
    if (threads == 1) {
        if (n > 0)
            fn(int64_t{0}, n, 0);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (int c = 0; c < threads; ++c) {
        int64_t begin = n * c / threads;
        int64_t end = n * (c + 1) / threads;
        pool.emplace_back([&fn, begin, end, c] {
            if (end > begin)
                fn(begin, end, c);
        });
    }
    for (auto& t : pool)
        t.join();
}

inline std::string version_string() {
#ifdef ICFLOW_GIT_REV
    return std::string(ICFLOW_VERSION) + "+" + ICFLOW_GIT_REV;
#else
    return ICFLOW_VERSION;
#endif
}

}  // namespace icflow

#endif  // ICFLOW_CORE_HPP
