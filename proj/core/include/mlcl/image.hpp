#ifndef MLCL_IMAGE_HPP
#define MLCL_IMAGE_HPP

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "mlcl/tensor.hpp"

namespace mlcl {

/// 8-bit interleaved image (HWC). Channels is 1 or 3.
struct ImageU8 {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 3;
    std::vector<std::uint8_t> data;

    std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) {
        return data[(y * width + x) * channels + c];
    }
    std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const {
        return data[(y * width + x) * channels + c];
    }
};

/// [3, H, W] tensor in [0, 1]; grayscale inputs are replicated to 3 channels.
Tensor image_to_tensor(const ImageU8& img);

/// Clamp to [0, 1] and quantize.
ImageU8 tensor_to_image_u8(const Tensor& t);

/// Reads .ppm/.pgm (P5/P6) and .png files; converts to 8-bit RGB or gray.
ImageU8 read_image(const std::filesystem::path& path);

void write_ppm(const std::filesystem::path& path, const ImageU8& img);
void write_png(const std::filesystem::path& path, const ImageU8& img);

/// Bilinear resize of a [C, H, W] tensor, half-pixel centers.
Tensor resize_bilinear(const Tensor& img, std::size_t out_h, std::size_t out_w);

/// Separable Gaussian blur with replicated borders; ksize must be odd.
Tensor gaussian_blur(const Tensor& img, double sigma, std::size_t ksize);

/// Per-channel (x - mean) / std on a [3, H, W] or [N, 3, H, W] tensor.
Tensor normalize_channels(const Tensor& img, const std::array<double, 3>& mean,
                          const std::array<double, 3>& stddev);

} // namespace mlcl

#endif
