#pragma once

#include <cstdint>

#include "microhom/grid.hpp"

namespace microhom {

/**
 * Counter-based deterministic generator: value(i) is a pure function of
 * (seed, i), so parallel fills and replays are order independent.
 * Mixing function is splitmix64.
 */
struct CounterRng {
    std::uint64_t seed = 0;

    static std::uint64_t mix(std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::uint64_t bits(std::uint64_t counter) const { return mix(mix(seed) ^ counter); }

    /** uniform in [0,1) */
    double uniform(std::uint64_t counter) const {
        return double(bits(counter) >> 11) * 0x1.0p-53;
    }

    /** uniform in [a,b) */
    double uniform(std::uint64_t counter, double a, double b) const {
        return a + (b - a) * uniform(counter);
    }

    /** uniform point in the open ball of given radius */
    Vec3 ball_point(std::uint64_t counter, double radius) const {
        for (std::uint64_t t = 0;; ++t) {
            Vec3 p{uniform(counter * 8191 + 3 * t, -1.0, 1.0),
                   uniform(counter * 8191 + 3 * t + 1, -1.0, 1.0),
                   uniform(counter * 8191 + 3 * t + 2, -1.0, 1.0)};
            if (dot(p, p) < 1.0) return radius * p;
        }
    }

    /** uniform point on the unit sphere */
    Vec3 sphere_point(std::uint64_t counter) const {
        const Vec3 p = ball_point(counter, 1.0);
        const double r = norm(p);
        return r > 1e-12 ? (1.0 / r) * p : Vec3{0.0, 0.0, 1.0};
    }
};

} // namespace microhom
