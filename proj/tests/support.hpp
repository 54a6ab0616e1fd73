#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "vct/backbone.hpp"
#include "vct/tiny_denoiser.hpp"

namespace vct::testing {

inline Tensor randn(const Shape& shape, std::mt19937_64& rng, double scale = 1.0) {
    Tensor t(shape);
    std::normal_distribution<double> n(0.0, 1.0);
    for (auto& x : t.values()) x = scale * n(rng);
    return t;
}

inline Tensor uniform(const Shape& shape, std::mt19937_64& rng, double lo, double hi) {
    Tensor t(shape);
    std::uniform_real_distribution<double> u(lo, hi);
    for (auto& x : t.values()) x = u(rng);
    return t;
}

// A few hundred parameters; fast enough for exhaustive checks.
inline TinyDenoiserConfig small_config(std::uint64_t seed = 1) {
    TinyDenoiserConfig c;
    c.in_channels = 3;
    c.resolution = 8;
    c.base_width = 4;
    c.heads = 2;
    c.embed_dim = 8;
    c.time_dim = 8;
    c.context_tokens = 3;
    c.seed = seed;
    return c;
}

// Gaussian oracle whose conditioning matrix is square and well conditioned,
// so every latent is reachable by exactly one embedding.
inline GaussianOracleBackbone linear_oracle(int tokens, int dim, std::mt19937_64& rng, const Shape& latent) {
    const auto n = shape_numel(latent);
    Tensor mean = randn(latent, rng, 0.3);
    Tensor var = uniform(latent, rng, 0.2, 0.6);
    Tensor W({n, static_cast<std::int64_t>(tokens) * dim});
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::int64_t i = 0; i < W.dim(0); ++i) {
        for (std::int64_t j = 0; j < W.dim(1); ++j) {
            W[static_cast<std::size_t>(i * W.dim(1) + j)] = (i == j ? 1.0 : 0.0) + 0.2 * normal(rng);
        }
    }
    return GaussianOracleBackbone(mean, var, W, dim);
}

struct GradCheck {
    double worst = 0.0;  // largest relative error seen
    int checked = 0;
};

// Central differences on `count` random coordinates of `x`.
inline GradCheck check_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x, const Tensor& grad,
                                int count, std::mt19937_64& rng, double h = 1e-5, double floor = 1e-7) {
    GradCheck out;
    std::uniform_int_distribution<std::size_t> pick(0, x.size() - 1);
    for (int k = 0; k < count; ++k) {
        const std::size_t i = pick(rng);
        Tensor xp = x, xm = x;
        xp[i] += h;
        xm[i] -= h;
        const double fd = (f(xp) - f(xm)) / (2.0 * h);
        const double an = grad[i];
        const double scale = std::max({std::abs(fd), std::abs(an), floor});
        out.worst = std::max(out.worst, std::abs(fd - an) / scale);
        ++out.checked;
    }
    return out;
}

}  // namespace vct::testing
