#include "vct/metrics.hpp"

#include <algorithm>
#include <cmath>

namespace vct {

namespace {

void check_image(const Tensor& t, const char* what) {
    if (t.rank() != 3) throw ValidationError(std::string(what) + ": expected a (C, H, W) image");
}

Tensor box_blur(const Tensor& img, int width) {
    const auto C = img.dim(0), H = img.dim(1), W = img.dim(2);
    const int r = width / 2;
    auto at = [&](std::int64_t c, std::int64_t y, std::int64_t x) {
        y = std::clamp<std::int64_t>(y, 0, H - 1);
        x = std::clamp<std::int64_t>(x, 0, W - 1);
        return img[static_cast<std::size_t>((c * H + y) * W + x)];
    };
    Tensor out(img.shape());
    const double norm = 1.0 / static_cast<double>(width * width);
    for (std::int64_t c = 0; c < C; ++c) {
        for (std::int64_t y = 0; y < H; ++y) {
            for (std::int64_t x = 0; x < W; ++x) {
                double s = 0.0;
                for (int dy = -r; dy <= r; ++dy) {
                    for (int dx = -r; dx <= r; ++dx) s += at(c, y + dy, x + dx);
                }
                out[static_cast<std::size_t>((c * H + y) * W + x)] = s * norm;
            }
        }
    }
    return out;
}

}  // namespace

double image_mse(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "image_mse");
    if (a.empty()) throw ValidationError("image_mse: empty image");
    return squared_norm(a - b) / static_cast<double>(a.size());
}

double image_psnr(const Tensor& a, const Tensor& b) {
    const double mse = image_mse(a, b);
    return mse == 0.0 ? kInfinitePsnr : 10.0 * std::log10(4.0 / mse);
}

std::vector<std::uint8_t> edge_map(const Tensor& image, const EdgeOptions& opts) {
    check_image(image, "edge_map");
    if (opts.smoothing < 1 || opts.smoothing % 2 == 0) throw ValidationError("edge smoothing must be odd and >= 1");
    const Tensor s = opts.smoothing > 1 ? box_blur(image, opts.smoothing) : image;
    const auto C = s.dim(0), H = s.dim(1), W = s.dim(2);
    auto at = [&](std::int64_t c, std::int64_t y, std::int64_t x) {
        y = std::clamp<std::int64_t>(y, 0, H - 1);
        x = std::clamp<std::int64_t>(x, 0, W - 1);
        return s[static_cast<std::size_t>((c * H + y) * W + x)];
    };
    std::vector<std::uint8_t> edges(static_cast<std::size_t>(H * W), 0);
    for (std::int64_t y = 0; y < H; ++y) {
        for (std::int64_t x = 0; x < W; ++x) {
            double g2 = 0.0;
            for (std::int64_t c = 0; c < C; ++c) {
                const double gx = 0.5 * (at(c, y, x + 1) - at(c, y, x - 1));
                const double gy = 0.5 * (at(c, y + 1, x) - at(c, y - 1, x));
                g2 += gx * gx + gy * gy;
            }
            edges[static_cast<std::size_t>(y * W + x)] = std::sqrt(g2) > opts.threshold ? 1 : 0;
        }
    }
    return edges;
}

double structure_overlap(const Tensor& a, const Tensor& b, const EdgeOptions& opts) {
    check_image(a, "structure_overlap");
    require_same_shape(a, b, "structure_overlap");
    const auto H = a.dim(1), W = a.dim(2);
    const auto ea = edge_map(a, opts);
    const auto eb = edge_map(b, opts);
    auto near = [&](const std::vector<std::uint8_t>& e, std::int64_t y, std::int64_t x) {
        for (std::int64_t dy = -opts.tolerance; dy <= opts.tolerance; ++dy) {
            for (std::int64_t dx = -opts.tolerance; dx <= opts.tolerance; ++dx) {
                const auto yy = y + dy, xx = x + dx;
                if (yy >= 0 && yy < H && xx >= 0 && xx < W && e[static_cast<std::size_t>(yy * W + xx)]) return true;
            }
        }
        return false;
    };
    std::int64_t total = 0, matched = 0;
    for (std::int64_t y = 0; y < H; ++y) {
        for (std::int64_t x = 0; x < W; ++x) {
            const auto i = static_cast<std::size_t>(y * W + x);
            if (ea[i]) {
                ++total;
                matched += near(eb, y, x);
            }
            if (eb[i]) {
                ++total;
                matched += near(ea, y, x);
            }
        }
    }
    return total == 0 ? 1.0 : static_cast<double>(matched) / static_cast<double>(total);
}

double texture_distance(const Tensor& a, const Tensor& reference) {
    check_image(a, "texture_distance");
    check_image(reference, "texture_distance");
    if (a.dim(0) != reference.dim(0)) throw ValidationError("texture_distance: channel count mismatch");
    auto stats = [](const Tensor& t, std::int64_t c) {
        const auto n = t.dim(1) * t.dim(2);
        const double* p = t.data() + c * n;
        double m = 0.0;
        for (std::int64_t i = 0; i < n; ++i) m += p[i];
        m /= static_cast<double>(n);
        double v = 0.0;
        for (std::int64_t i = 0; i < n; ++i) v += (p[i] - m) * (p[i] - m);
        return std::pair{m, v / static_cast<double>(n)};
    };
    double d2 = 0.0;
    for (std::int64_t c = 0; c < a.dim(0); ++c) {
        const auto [ma, va] = stats(a, c);
        const auto [mr, vr] = stats(reference, c);
        d2 += (ma - mr) * (ma - mr) + (va - vr) * (va - vr);
    }
    return std::sqrt(d2);
}

MetricBlock evaluate_metrics(const Tensor& x_out, const Tensor& x_src, const Tensor* x_ref) {
    check_image(x_out, "evaluate_metrics");
    require_same_shape(x_out, x_src, "evaluate_metrics");
    MetricBlock m;
    m.mse = image_mse(x_out, x_src);
    m.psnr = image_psnr(x_out, x_src);
    m.structure = structure_overlap(x_out, x_src);
    if (x_ref) {
        require_same_shape(x_out, *x_ref, "evaluate_metrics");
        m.texture = texture_distance(x_out, *x_ref);
    }
    return m;
}

}  // namespace vct
