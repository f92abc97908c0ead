#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "maskdiff/image.hpp"
#include "maskdiff/tensor.hpp"

namespace maskdiff {

// 8-bit RGB PNG <-> (1,3,H,W) tensor in [-1,1] (x / 127.5 - 1).
std::vector<std::uint8_t> encode_png_rgb(const Tensor<float>& image);
Tensor<float> decode_png_rgb(std::span<const std::uint8_t> bytes);

// 8-bit palette-indexed PNG whose indices are class labels. Decoding also
// accepts 8-bit grayscale, whose values are taken as indices.
std::vector<std::uint8_t> encode_png_mask(const LabelMap& mask);
LabelMap decode_png_mask(std::span<const std::uint8_t> bytes);

bool has_png_signature(std::span<const std::uint8_t> bytes);

std::uint8_t to_byte(float v);
float from_byte(std::uint8_t b);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

Tensor<float> read_image(const std::filesystem::path& path);
void write_image(const std::filesystem::path& path, const Tensor<float>& image);
LabelMap read_mask(const std::filesystem::path& path);
void write_mask(const std::filesystem::path& path, const LabelMap& mask);

}  // namespace maskdiff
