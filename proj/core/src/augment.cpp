#include "mlcl/augment.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mlcl/errors.hpp"
#include "mlcl/image.hpp"

namespace mlcl {

namespace {

void check_range(const std::pair<double, double>& r, const std::string& field) {
    if (!(r.first <= r.second)) {
        throw ConfigError(field + " must be ordered low <= high");
    }
}

void check_prob(double p, const std::string& field) {
    if (!(p >= 0.0 && p <= 1.0)) {
        throw ConfigError(field + " must be in [0, 1]");
    }
}

constexpr double kLumaR = 0.299, kLumaG = 0.587, kLumaB = 0.114;

double luma_at(const Tensor& img, std::size_t y, std::size_t x) {
    return kLumaR * img.at3(0, y, x) + kLumaG * img.at3(1, y, x) + kLumaB * img.at3(2, y, x);
}

void clamp01(Tensor& img) {
    for (auto& v : img.raw()) v = std::clamp(v, 0.0, 1.0);
}

/// Odd kernel size derived from the image side.
std::size_t blur_kernel_size(std::size_t h, std::size_t w) {
    std::size_t side = std::min(h, w);
    std::size_t k = (side + 9) / 10; // ceil(0.1 * side)
    if (k % 2 == 0) ++k;
    return std::max<std::size_t>(k, 1);
}

} // namespace

void AugmentConfig::validate() const {
    check_range(crop_scale_range, "crop_scale_range");
    if (!(crop_scale_range.first > 0.0 && crop_scale_range.second <= 1.0)) {
        throw ConfigError("crop_scale_range must lie in (0, 1]");
    }
    if (color_distortion_strength < 0.0) {
        throw ConfigError("color_distortion_strength must be >= 0");
    }
    check_prob(grayscale_probability, "grayscale_probability");
    check_prob(blur_probability, "blur_probability");
    check_range(blur_sigma_range, "blur_sigma_range");
    if (blur_sigma_range.first <= 0.0) {
        throw ConfigError("blur_sigma_range must be positive");
    }
}

ViewParams sample_view_params(const AugmentConfig& config, std::size_t height,
                              std::size_t width, Rng& rng) {
    ViewParams p;
    if (config.enabled_ops.crop) {
        if (height < kMinCropInput || width < kMinCropInput) {
            throw ShapeError("image " + std::to_string(height) + "x" + std::to_string(width) +
                             " too small to crop (minimum side " +
                             std::to_string(kMinCropInput) + ")");
        }
        const double area = static_cast<double>(height * width);
        // Sample a scaled area and a log-uniform aspect ratio; retry a few
        // times, then fall back to the full frame.
        bool found = false;
        for (int attempt = 0; attempt < 10 && !found; ++attempt) {
            double target = area * rng.uniform(config.crop_scale_range.first,
                                               config.crop_scale_range.second);
            double aspect = std::exp(rng.uniform(std::log(3.0 / 4.0), std::log(4.0 / 3.0)));
            auto w = static_cast<std::size_t>(std::lround(std::sqrt(target * aspect)));
            auto h = static_cast<std::size_t>(std::lround(std::sqrt(target / aspect)));
            if (w >= 1 && h >= 1 && w <= width && h <= height) {
                p.crop_h = h;
                p.crop_w = w;
                p.crop_y = static_cast<std::size_t>(rng.uniform_index(height - h + 1));
                p.crop_x = static_cast<std::size_t>(rng.uniform_index(width - w + 1));
                found = true;
            }
        }
        if (!found) {
            p.crop_y = p.crop_x = 0;
            p.crop_h = height;
            p.crop_w = width;
        }
        p.cropped = true;
    }
    if (config.enabled_ops.color) {
        const double d = 0.8 * config.color_distortion_strength;
        const double lo = std::max(0.0, 1.0 - d);
        const double hi = 1.0 + d;
        p.brightness = rng.uniform(lo, hi);
        p.contrast = rng.uniform(lo, hi);
        p.saturation = rng.uniform(lo, hi);
        p.grayscale = rng.bernoulli(config.grayscale_probability);
        p.color_jittered = true;
    }
    if (config.enabled_ops.blur) {
        p.blurred = rng.bernoulli(config.blur_probability);
        if (p.blurred) {
            p.blur_sigma = rng.uniform(config.blur_sigma_range.first,
                                       config.blur_sigma_range.second);
        }
    }
    return p;
}

Tensor apply_view(const Tensor& image, const ViewParams& params) {
    if (image.ndim() != 3 || image.dim(0) != 3) {
        throw ShapeError("expected [3, H, W] image, got " + image.shape_str());
    }
    const std::size_t h = image.dim(1);
    const std::size_t w = image.dim(2);
    Tensor out = image;

    if (params.cropped) {
        if (params.crop_y + params.crop_h > h || params.crop_x + params.crop_w > w ||
            params.crop_h == 0 || params.crop_w == 0) {
            throw ShapeError("crop box out of bounds");
        }
        Tensor crop({3, params.crop_h, params.crop_w});
        for (std::size_t c = 0; c < 3; ++c) {
            for (std::size_t y = 0; y < params.crop_h; ++y) {
                for (std::size_t x = 0; x < params.crop_w; ++x) {
                    crop.at3(c, y, x) = out.at3(c, params.crop_y + y, params.crop_x + x);
                }
            }
        }
        out = resize_bilinear(crop, h, w);
    }

    if (params.color_jittered) {
        // Fixed op order: brightness, contrast, saturation, then grayscale.
        out.scale_(params.brightness);
        clamp01(out);

        double mean_luma = 0.0;
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) mean_luma += luma_at(out, y, x);
        }
        mean_luma /= static_cast<double>(h * w);
        for (auto& v : out.raw()) v = params.contrast * v + (1.0 - params.contrast) * mean_luma;
        clamp01(out);

        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                double l = luma_at(out, y, x);
                for (std::size_t c = 0; c < 3; ++c) {
                    out.at3(c, y, x) = params.saturation * out.at3(c, y, x) +
                                       (1.0 - params.saturation) * l;
                }
            }
        }
        clamp01(out);

        if (params.grayscale) {
            for (std::size_t y = 0; y < h; ++y) {
                for (std::size_t x = 0; x < w; ++x) {
                    double l = luma_at(out, y, x);
                    out.at3(0, y, x) = l;
                    out.at3(1, y, x) = l;
                    out.at3(2, y, x) = l;
                }
            }
        }
    }

    if (params.blurred) {
        out = gaussian_blur(out, params.blur_sigma, blur_kernel_size(h, w));
    }
    return out;
}

AugmentedPair augment_two_views(const Tensor& image, const AugmentConfig& config, Rng& rng) {
    config.validate();
    if (image.ndim() != 3 || image.dim(0) != 3) {
        throw ShapeError("expected [3, H, W] image, got " + image.shape_str());
    }
    AugmentedPair pair;
    ViewParams pa = sample_view_params(config, image.dim(1), image.dim(2), rng);
    ViewParams pb = sample_view_params(config, image.dim(1), image.dim(2), rng);
    pair.view_a = apply_view(image, pa);
    pair.view_b = apply_view(image, pb);
    return pair;
}

ContrastiveBatch make_contrastive_batch(const Tensor& images, const AugmentConfig& config,
                                        Rng& rng) {
    config.validate();
    if (images.ndim() != 4 || images.dim(1) != 3) {
        throw ShapeError("expected [B, 3, H, W] batch, got " + images.shape_str());
    }
    const std::size_t b = images.dim(0);
    if (b == 0) throw ShapeError("contrastive batch needs at least one image");

    ContrastiveBatch out;
    out.views = Tensor({2 * b, images.dim(1), images.dim(2), images.dim(3)});
    out.pairing.resize(2 * b);
    out.source.resize(2 * b);

    // One derived seed per image keeps images independent and the parent
    // stream advancing, so repeated calls differ.
    const std::uint64_t base = rng.next_u64();
    for (std::size_t i = 0; i < b; ++i) {
        Rng img_rng(derive_seed(base, i));
        Tensor img = batch_slice(images, i);
        AugmentedPair pair = augment_two_views(img, config, img_rng);
        pair.source_index = i;
        batch_assign(out.views, 2 * i, pair.view_a);
        batch_assign(out.views, 2 * i + 1, pair.view_b);
        out.pairing[2 * i] = 2 * i + 1;
        out.pairing[2 * i + 1] = 2 * i;
        out.source[2 * i] = i;
        out.source[2 * i + 1] = i;
    }
    return out;
}

} // namespace mlcl
