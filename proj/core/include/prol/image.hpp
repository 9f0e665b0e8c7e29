#pragma once

#include <filesystem>
#include <vector>

namespace prol {

// H x W x C image, row-major (y, x, channel), values in [0, 1].
struct Image {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<double> pix;

    Image() = default;
    Image(int h, int w, int c) : height(h), width(w), channels(c), pix(std::size_t(h) * w * c, 0.0) {}

    double& at(int y, int x, int c) { return pix[(std::size_t(y) * width + x) * channels + c]; }
    double at(int y, int x, int c) const { return pix[(std::size_t(y) * width + x) * channels + c]; }
    std::size_t numel() const { return pix.size(); }
};

// 8-bit PNG; values clamped to [0,1] and quantized on write.
void write_png(const std::filesystem::path& path, const Image& img);

// Decodes to [0,1] doubles. Grayscale and palette images expand to 3 channels,
// alpha is dropped.
Image read_png(const std::filesystem::path& path);

}  // namespace prol
