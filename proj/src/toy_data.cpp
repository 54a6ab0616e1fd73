#include "vct/toy_data.hpp"

#include <array>
#include <cmath>
#include <map>

#include "vct/errors.hpp"

namespace vct {

namespace {

using Rgb = std::array<double, 3>;

const std::map<std::string, Rgb>& palette() {
    static const std::map<std::string, Rgb> colors = {
        {"red", {0.9, 0.1, 0.1}},    {"green", {0.1, 0.8, 0.2}},  {"blue", {0.1, 0.2, 0.9}},
        {"yellow", {0.95, 0.9, 0.1}}, {"cyan", {0.1, 0.85, 0.9}},  {"magenta", {0.9, 0.1, 0.85}},
        {"orange", {0.95, 0.55, 0.1}}, {"purple", {0.5, 0.15, 0.75}}, {"white", {0.97, 0.97, 0.97}},
    };
    return colors;
}

constexpr Rgb kBackground{0.5, 0.5, 0.5};
constexpr Rgb kSecondary{0.97, 0.97, 0.97};
constexpr Rgb kSecondaryOnWhite{0.1, 0.1, 0.1};

bool inside(const ToyShapeSpec& s, double x, double y) {
    const double dx = x - s.center_x;
    const double dy = y - s.center_y;
    const double r = s.size / 2.0;
    if (s.shape == "square") return std::abs(dx) <= r && std::abs(dy) <= r;
    if (s.shape == "circle") return dx * dx + dy * dy <= r * r;
    if (s.shape == "diamond") return std::abs(dx) + std::abs(dy) <= r;
    if (s.shape == "triangle") {
        // apex up, base at center_y + r
        if (dy < -r || dy > r) return false;
        const double half_width = (dy + r) / 2.0;
        return std::abs(dx) <= half_width;
    }
    throw ValidationError("unknown toy shape '" + s.shape + "'");
}

bool secondary_phase(const ToyShapeSpec& s, int x, int y) {
    if (s.texture == "solid") return false;
    if (s.texture == "striped") return (y / 2) % 2 == 1;
    if (s.texture == "checkered") return ((x / 3) + (y / 3)) % 2 == 1;
    if (s.texture == "dotted") return (x % 4 == 1 || x % 4 == 2) && (y % 4 == 1 || y % 4 == 2);
    throw ValidationError("unknown toy texture '" + s.texture + "'");
}

}  // namespace

const std::vector<std::string>& toy_colors() {
    static const std::vector<std::string> v = {"red", "green", "blue", "yellow", "cyan",
                                               "magenta", "orange", "purple", "white"};
    return v;
}

const std::vector<std::string>& toy_shapes() {
    static const std::vector<std::string> v = {"square", "circle", "triangle", "diamond"};
    return v;
}

const std::vector<std::string>& toy_textures() {
    static const std::vector<std::string> v = {"solid", "striped", "checkered", "dotted"};
    return v;
}

std::vector<std::uint8_t> toy_mask(const ToyShapeSpec& spec, int resolution) {
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(resolution) * resolution);
    for (int y = 0; y < resolution; ++y) {
        for (int x = 0; x < resolution; ++x) {
            mask[static_cast<std::size_t>(y) * resolution + x] = inside(spec, x + 0.5, y + 0.5) ? 1 : 0;
        }
    }
    return mask;
}

Tensor render_toy(const ToyShapeSpec& spec, int resolution) {
    auto it = palette().find(spec.color);
    if (it == palette().end()) throw ValidationError("unknown toy color '" + spec.color + "'");
    const Rgb primary = it->second;
    const Rgb secondary = spec.color == "white" ? kSecondaryOnWhite : kSecondary;
    const auto mask = toy_mask(spec, resolution);
    Tensor img(Shape{3, resolution, resolution});
    const std::size_t plane = static_cast<std::size_t>(resolution) * resolution;
    for (int y = 0; y < resolution; ++y) {
        for (int x = 0; x < resolution; ++x) {
            const std::size_t p = static_cast<std::size_t>(y) * resolution + x;
            const Rgb& c = !mask[p] ? kBackground : (secondary_phase(spec, x, y) ? secondary : primary);
            for (int ch = 0; ch < 3; ++ch) img[ch * plane + p] = 2.0 * c[static_cast<std::size_t>(ch)] - 1.0;
        }
    }
    return img;
}

ToyShapeSpec random_toy_spec(std::mt19937_64& rng, int resolution) {
    auto pick = [&](const std::vector<std::string>& v) {
        return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
    };
    ToyShapeSpec s;
    s.color = pick(toy_colors());
    s.shape = pick(toy_shapes());
    s.texture = pick(toy_textures());
    const double scale = resolution / 32.0;
    s.size = std::uniform_real_distribution<double>(10.0, 20.0)(rng) * scale;
    const double margin = s.size / 2.0 + 1.0;
    std::uniform_real_distribution<double> pos(margin, resolution - margin);
    s.center_x = pos(rng);
    s.center_y = pos(rng);
    return s;
}

ToyShapeSpec toy_source_spec() { return {"red", "square", "solid", 16.0, 16.0, 16.0}; }

ToyShapeSpec toy_reference_spec() { return {"blue", "circle", "striped", 16.0, 16.0, 20.0}; }

}  // namespace vct
