#pragma once

#include <cstdint>
#include <initializer_list>
#include <limits>
#include <random>

#include <Eigen/Core>

namespace cpr {

/// Named sub-streams derived from one master seed.
enum class StreamTag : std::uint64_t {
    sampling = 1,
    initial_noise = 2,
    selector = 3,
    audit_noise = 4,
    rejection = 5,
    bootstrap = 6,
    data = 7,
};

inline std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Counter-addressed generator: the stream for (seed, ids...) is fixed no
/// matter how many other streams were drawn before it, so parallel
/// trajectories reproduce independently of scheduling.
class StreamRng {
public:
    using result_type = std::uint64_t;

    StreamRng(std::uint64_t seed, std::initializer_list<std::uint64_t> ids) noexcept {
        std::uint64_t key = splitmix64(seed);
        for (auto id : ids) key = splitmix64(key ^ splitmix64(id + 0x632be59bd9b4e019ULL));
        state_ = key;
    }

    static constexpr result_type min() noexcept { return 0; }
    static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

    result_type operator()() noexcept {
        state_ += 0x9e3779b97f4a7c15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

private:
    std::uint64_t state_;
};

inline StreamRng make_stream(std::uint64_t seed, StreamTag tag, std::uint64_t a = 0,
                             std::uint64_t b = 0) {
    return StreamRng(seed, {static_cast<std::uint64_t>(tag), a, b});
}

template <typename Scalar, typename Rng>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> standard_normal(Eigen::Index dim, Rng& rng) {
    std::normal_distribution<Scalar> normal;
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> z(dim);
    for (Eigen::Index i = 0; i < dim; ++i) z[i] = normal(rng);
    return z;
}

}  // namespace cpr
