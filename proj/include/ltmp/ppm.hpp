#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "ltmp/io.hpp"

namespace ltmp {

/// 8-bit RGB raster.
struct RgbImage {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> pixels;   // row-major RGB

    RgbImage() = default;
    RgbImage(std::size_t w, std::size_t h, std::uint8_t fill = 0) : width(w), height(h), pixels(w * h * 3, fill) {}

    std::uint8_t* at(std::size_t x, std::size_t y) { return pixels.data() + (y * width + x) * 3; }
    const std::uint8_t* at(std::size_t x, std::size_t y) const { return pixels.data() + (y * width + x) * 3; }

    bool operator==(const RgbImage&) const = default;
};

/// Binary PPM (P6) bytes.
inline std::vector<char> encode_ppm(const RgbImage& img) {
    if (img.pixels.size() != img.width * img.height * 3) throw std::invalid_argument("ppm: pixel buffer size");
    const std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    std::vector<char> out(header.begin(), header.end());
    out.insert(out.end(), img.pixels.begin(), img.pixels.end());
    return out;
}

inline void write_ppm(const RgbImage& img, const std::filesystem::path& path) {
    const auto bytes = encode_ppm(img);
    detail::write_file_atomic(path, bytes.data(), bytes.size());
}

}  // namespace ltmp
