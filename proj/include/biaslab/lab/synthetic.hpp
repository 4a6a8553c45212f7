#pragma once

#include "biaslab/common.hpp"
#include "biaslab/rng.hpp"
#include "biaslab/template_io.hpp"

#include <cmath>
#include <cstdint>
#include <vector>

namespace biaslab::lab {

/// Smooth grayscale test pictures: a few Gaussian blobs of random sign, position and width on a
/// faint random gradient. Stand-ins for photographs when no image corpus is at hand.
inline std::vector<PgmImage> synthetic_images(Index count, Index width, Index height, std::uint64_t seed,
                                              int blobs = 6) {
    if (count < 1 || width < 2 || height < 2) throw DimensionError("synthetic images need count >= 1 and 2x2 pixels");
    std::vector<PgmImage> out;
    for (Index c = 0; c < count; ++c) {
        NormalStream rng(seed, static_cast<std::uint64_t>(c), StreamFamily::templates);
        Vector v = Vector::Zero(width * height);
        const double gx = 0.3 * rng();
        const double gy = 0.3 * rng();
        for (Index y = 0; y < height; ++y)
            for (Index x = 0; x < width; ++x)
                v[y * width + x] = gx * x / double(width) + gy * y / double(height);
        for (int b = 0; b < blobs; ++b) {
            const double cx = rng.uniform() * width;
            const double cy = rng.uniform() * height;
            const double r = (0.06 + 0.18 * rng.uniform()) * double(std::min(width, height));
            const double amp = (rng.uniform() < 0.5 ? -1.0 : 1.0) * (0.5 + rng.uniform());
            for (Index y = 0; y < height; ++y)
                for (Index x = 0; x < width; ++x) {
                    const double dx = (x - cx) / r;
                    const double dy = (y - cy) / r;
                    v[y * width + x] += amp * std::exp(-0.5 * (dx * dx + dy * dy));
                }
        }
        out.push_back(to_pgm(v, width, height));
    }
    return out;
}

}  // namespace biaslab::lab
