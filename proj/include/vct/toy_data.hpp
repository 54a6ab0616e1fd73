#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "vct/tensor.hpp"

namespace vct {

// A colored shape with a texture on a mid-gray background.
struct ToyShapeSpec {
    std::string color = "red";
    std::string shape = "square";
    std::string texture = "solid";
    double center_x = 16.0;
    double center_y = 16.0;
    double size = 14.0;  // side length / diameter in pixels

    std::vector<std::string> caption() const { return {color, shape, texture}; }
};

const std::vector<std::string>& toy_colors();
const std::vector<std::string>& toy_shapes();
const std::vector<std::string>& toy_textures();

// (3, res, res) image in [-1, 1].
Tensor render_toy(const ToyShapeSpec& spec, int resolution = 32);

// Foreground mask (1 inside the shape) for the same geometry.
std::vector<std::uint8_t> toy_mask(const ToyShapeSpec& spec, int resolution = 32);

ToyShapeSpec random_toy_spec(std::mt19937_64& rng, int resolution = 32);

// The fixed translation pair: a solid red square (content) and a blue striped
// circle (concept).
ToyShapeSpec toy_source_spec();
ToyShapeSpec toy_reference_spec();

}  // namespace vct
