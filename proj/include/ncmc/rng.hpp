#pragma once

// Counter-based random streams (Philox4x32-10).
//
// Every draw is a pure function of (seed, domain, path, replication, date,
// block), so a trajectory can be regenerated from its key alone and the
// result never depends on which thread produced it.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>

namespace ncmc {

using Philox4x32Counter = std::array<std::uint32_t, 4>;
using Philox4x32Key = std::array<std::uint32_t, 2>;

namespace detail {

inline constexpr std::uint32_t kPhiloxM0 = 0xD2511F53u;
inline constexpr std::uint32_t kPhiloxM1 = 0xCD9E8D57u;
inline constexpr std::uint32_t kPhiloxW0 = 0x9E3779B9u;
inline constexpr std::uint32_t kPhiloxW1 = 0xBB67AE85u;

constexpr void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi, std::uint32_t& lo) {
    const std::uint64_t p = static_cast<std::uint64_t>(a) * b;
    hi = static_cast<std::uint32_t>(p >> 32);
    lo = static_cast<std::uint32_t>(p);
}

constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

} // namespace detail

constexpr Philox4x32Counter philox4x32_10(Philox4x32Counter ctr, Philox4x32Key key) {
    for (int round = 0; round < 10; ++round) {
        std::uint32_t hi0 = 0, lo0 = 0, hi1 = 0, lo1 = 0;
        detail::mulhilo(detail::kPhiloxM0, ctr[0], hi0, lo0);
        detail::mulhilo(detail::kPhiloxM1, ctr[2], hi1, lo1);
        ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
        key[0] += detail::kPhiloxW0;
        key[1] += detail::kPhiloxW1;
    }
    return ctr;
}

/// Disjoint namespaces for streams. Training draws can never collide with
/// testing draws because the domain is folded into the Philox key.
enum class StreamDomain : std::uint32_t {
    testing = 1,
    training = 2,
    rule_internal = 3,
};

/// Derive an independent 64-bit seed for a named sub-run of an experiment.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
    return detail::splitmix64(detail::splitmix64(seed) ^ detail::splitmix64(tag + 0x632BE59BD9B4E019ull));
}

/// Identifies one stream: a (path, replication) pair within a seeded domain.
/// Replication 0 is reserved for trunk / full paths, 1..R for subsamples.
struct StreamKey {
    std::uint64_t seed = 0;
    StreamDomain domain = StreamDomain::testing;
    std::uint32_t path = 0;
    std::uint32_t replication = 0;

    friend constexpr bool operator==(const StreamKey&, const StreamKey&) = default;

    constexpr StreamKey with_replication(std::uint32_t r) const {
        StreamKey k = *this;
        k.replication = r;
        return k;
    }

    constexpr Philox4x32Key philox_key() const {
        const std::uint64_t h =
            detail::splitmix64(seed ^ (static_cast<std::uint64_t>(domain) * 0xD6E8FEB86659FD93ull));
        return {static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32)};
    }

    /// 128 random bits for draw block `block` at date `date`.
    constexpr Philox4x32Counter bits(std::uint32_t date, std::uint32_t block) const {
        const Philox4x32Counter ctr{(date << 16) | (block & 0xFFFFu), replication, path, 0u};
        return philox4x32_10(ctr, philox_key());
    }
};

/// Maps 64 random bits to a double in (0, 1].
constexpr double to_unit_open_closed(std::uint32_t hi, std::uint32_t lo) {
    const std::uint64_t x = ((static_cast<std::uint64_t>(hi) << 32) | lo) >> 11;
    return (static_cast<double>(x) + 1.0) * 0x1.0p-53;
}

/// Fills `out` with independent standard normals for (key, date) by
/// Box-Muller; one Philox block yields two normals.
inline void fill_normals(const StreamKey& key, std::uint32_t date, std::span<double> out) {
    const std::size_t n = out.size();
    for (std::size_t b = 0; 2 * b < n; ++b) {
        const auto w = key.bits(date, static_cast<std::uint32_t>(b));
        const double u1 = to_unit_open_closed(w[0], w[1]);
        const double u2 = to_unit_open_closed(w[2], w[3]);
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * std::numbers::pi * u2;
        out[2 * b] = radius * std::cos(angle);
        if (2 * b + 1 < n) out[2 * b + 1] = radius * std::sin(angle);
    }
}

/// A single uniform on (0, 1] for (key, date).
inline double uniform(const StreamKey& key, std::uint32_t date) {
    const auto w = key.bits(date, 0);
    return to_unit_open_closed(w[0], w[1]);
}

} // namespace ncmc
