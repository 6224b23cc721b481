#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "adpmpc/system.hpp"

namespace adpmpc {

/// i.i.d. uniform samples over a box, drawn from the supplied generator.
inline std::vector<Vector> sample_box(const BoxSet& box, std::size_t count, std::mt19937_64& rng)
{
    std::vector<Vector> out;
    out.reserve(count);
    for (std::size_t s = 0; s < count; ++s) {
        Vector x(box.dim());
        for (Eigen::Index j = 0; j < box.dim(); ++j) {
            std::uniform_real_distribution<double> dist(box.lower()[j], box.upper()[j]);
            x[j] = dist(rng);
        }
        out.push_back(std::move(x));
    }
    return out;
}

inline std::vector<Vector> sample_box(const BoxSet& box, std::size_t count, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    return sample_box(box, count, rng);
}

}  // namespace adpmpc
