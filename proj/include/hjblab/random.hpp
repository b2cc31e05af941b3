#pragma once

#include <boost/random/normal_distribution.hpp>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <vector>

namespace hjblab {

/// splitmix64 finaliser; used for every seed derivation.
constexpr std::uint64_t splitmix64(std::uint64_t z) noexcept {
    z += 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view s) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

/// Seed for stream `id` of component `tag` under `master`.
///
/// The derivation only depends on (master, tag, id), so the number of worker
/// threads never changes which random numbers a job consumes.
constexpr std::uint64_t derive_seed(std::uint64_t master, std::string_view tag,
                                    std::uint64_t id) noexcept {
    return splitmix64(splitmix64(master ^ fnv1a64(tag)) + splitmix64(id + 0x632BE59BD9B4E019ull));
}

using Rng = std::mt19937_64;

/// Paths are processed in fixed-size blocks; each block owns its own stream.
inline constexpr std::size_t kPathBlock = 1024;

inline std::size_t block_count(std::size_t paths) {
    return (paths + kPathBlock - 1) / kPathBlock;
}

/// Gaussian increment generator for one block of paths (ziggurat normals).
///
/// With `antithetic` set, paths come in pairs (2i, 2i+1) with opposite
/// normals, so every odd empirical moment vanishes. With `moment_match` the
/// block's empirical second moment per coordinate is rescaled to exactly one.
class BlockNoise {
public:
    BlockNoise(std::uint64_t seed, std::size_t block, std::size_t count, std::size_t dim,
               bool antithetic, bool moment_match)
        : rng_(derive_seed(seed, "brownian-block", block)),
          count_(count),
          dim_(dim),
          antithetic_(antithetic),
          moment_match_(moment_match),
          buffer_(count * dim) {}

    /// Increments for a step of length dt, laid out [path][coordinate].
    std::span<const double> next(double dt) {
        boost::random::normal_distribution<double> normal(0.0, 1.0);
        if (antithetic_) {
            const std::size_t pairs = count_ / 2;
            for (std::size_t p = 0; p < pairs; ++p) {
                for (std::size_t d = 0; d < dim_; ++d) {
                    const double z = normal(rng_);
                    buffer_[(2 * p) * dim_ + d] = z;
                    buffer_[(2 * p + 1) * dim_ + d] = -z;
                }
            }
            if (count_ % 2 == 1) {
                for (std::size_t d = 0; d < dim_; ++d) buffer_[(count_ - 1) * dim_ + d] = normal(rng_);
            }
        } else {
            for (double& z : buffer_) z = normal(rng_);
        }
        if (moment_match_ && count_ > 1) {
            for (std::size_t d = 0; d < dim_; ++d) {
                double mean = 0.0;
                if (!antithetic_ || count_ % 2 == 1) {
                    for (std::size_t p = 0; p < count_; ++p) mean += buffer_[p * dim_ + d];
                    mean /= static_cast<double>(count_);
                }
                double second = 0.0;
                for (std::size_t p = 0; p < count_; ++p) {
                    double& z = buffer_[p * dim_ + d];
                    z -= mean;
                    second += z * z;
                }
                const double scale = std::sqrt(static_cast<double>(count_) / second);
                for (std::size_t p = 0; p < count_; ++p) buffer_[p * dim_ + d] *= scale;
            }
        }
        const double sq = std::sqrt(dt);
        scaled_.resize(buffer_.size());
        for (std::size_t i = 0; i < buffer_.size(); ++i) scaled_[i] = sq * buffer_[i];
        return scaled_;
    }

    Rng& engine() noexcept { return rng_; }

private:
    Rng rng_;
    std::size_t count_;
    std::size_t dim_;
    bool antithetic_;
    bool moment_match_;
    std::vector<double> buffer_;
    std::vector<double> scaled_;
};

}  // namespace hjblab
