#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "dri/tensor.hpp"

namespace dri {

/// 8-bit netpbm raster: P5 (gray, 1 channel) or P6 (RGB, 3 channels), maxval 255.
struct PnmImage {
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t channels = 1;
    std::vector<std::uint8_t> pixels;  // interleaved, row-major
};

/// Parses a binary P5/P6 buffer. Header comments (# to end of line) are
/// accepted anywhere whitespace is. Throws ParseError naming the bad field.
PnmImage parse_pnm(std::string_view bytes, const std::string& source = "<memory>");
PnmImage read_pnm(const std::string& path);

std::string encode_pnm(const PnmImage& img);
void write_pnm(const std::string& path, const PnmImage& img);

/// Loads a PNM file as [C, H, W] in [0, 1]. Gray images are replicated when
/// `channels` is 3; 0 keeps the file's channel count.
Tensor<float> load_image(const std::string& path, std::size_t channels = 0);
Tensor<float> to_tensor(const PnmImage& img, std::size_t channels = 0);

}  // namespace dri
