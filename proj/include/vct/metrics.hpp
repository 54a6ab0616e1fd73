#pragma once

#include <cstdint>
#include <limits>
#include <vector>

#include "vct/tensor.hpp"

namespace vct {

inline constexpr double kInfinitePsnr = std::numeric_limits<double>::infinity();

// Images live in [-1, 1], so the peak-to-peak range is 2.
double image_mse(const Tensor& a, const Tensor& b);
// 10 log10(4 / mse); kInfinitePsnr when the images are identical.
double image_psnr(const Tensor& a, const Tensor& b);

struct EdgeOptions {
    int smoothing = 5;        // box filter width applied before differencing
    double threshold = 0.2;   // on the colour gradient magnitude
    int tolerance = 1;        // pixels of slack when matching edges
};

// Binary edge map (H * W) of a (C, H, W) image.
std::vector<std::uint8_t> edge_map(const Tensor& image, const EdgeOptions& opts = {});

// Symmetric edge agreement in [0, 1]: matched edge pixels of both maps, each
// counted if an edge of the other map lies within `tolerance`, over the total
// edge count. Two edge-free images score 1.
double structure_overlap(const Tensor& a, const Tensor& b, const EdgeOptions& opts = {});

// Euclidean distance between per-channel (mean, variance) statistics.
double texture_distance(const Tensor& a, const Tensor& reference);

struct MetricBlock {
    double mse = 0.0;
    double psnr = 0.0;
    double structure = 0.0;
    double texture = std::numeric_limits<double>::quiet_NaN();  // NaN without a reference
};

MetricBlock evaluate_metrics(const Tensor& x_out, const Tensor& x_src, const Tensor* x_ref = nullptr);

}  // namespace vct
