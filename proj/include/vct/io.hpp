#pragma once

#include <filesystem>
#include <vector>

#include <json.hpp>

#include "vct/tiny_denoiser.hpp"

namespace vct {

// Binary PPM (P6) <-> (3, H, W) tensors with values mapped linearly 0..255 -> -1..1.
Tensor read_image(const std::filesystem::path& path);
void write_image(const std::filesystem::path& path, const Tensor& image);
// Quantizes to the 8-bit grid exactly as write_image + read_image would.
Tensor quantize_image(const Tensor& image);

// Array container: "VCTARR01" magic, u32 metadata length, JSON metadata,
// u32 block count, then per block u16 name length, name, u8 rank,
// i64 dims[rank], little-endian float32 data. Blocks hold the float
// rounding of each tensor; values already on the float grid survive bit-exactly.
struct ArrayContainer {
    nlohmann::json metadata;
    ParameterSet blocks;
};

void write_container(const std::filesystem::path& path, const ArrayContainer& container);
ArrayContainer read_container(const std::filesystem::path& path);

}  // namespace vct
