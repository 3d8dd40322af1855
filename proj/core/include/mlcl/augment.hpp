#ifndef MLCL_AUGMENT_HPP
#define MLCL_AUGMENT_HPP

#include <cstddef>
#include <utility>
#include <vector>

#include "mlcl/rng.hpp"
#include "mlcl/tensor.hpp"

namespace mlcl {

/// Which augmentation ops run. All on by default.
struct AugmentOps {
    bool crop = true;
    bool color = true;
    bool blur = true;

    bool any() const { return crop || color || blur; }
};

struct AugmentConfig {
    std::pair<double, double> crop_scale_range{0.2, 1.0};
    double color_distortion_strength = 0.5;
    double grayscale_probability = 0.2;
    double blur_probability = 0.5;
    std::pair<double, double> blur_sigma_range{0.1, 2.0};
    AugmentOps enabled_ops;

    /// Throws ConfigError on out-of-order ranges or probabilities outside [0, 1].
    void validate() const;
};

/// Every random decision for one view, sampled up front so the deterministic
/// application step can be tested against independent per-op oracles.
struct ViewParams {
    bool cropped = false;
    std::size_t crop_y = 0, crop_x = 0, crop_h = 0, crop_w = 0;

    bool color_jittered = false;
    double brightness = 1.0;
    double contrast = 1.0;
    double saturation = 1.0;
    bool grayscale = false;

    bool blurred = false;
    double blur_sigma = 1.0;
};

/// Minimum image side for the crop op.
inline constexpr std::size_t kMinCropInput = 4;

ViewParams sample_view_params(const AugmentConfig& config, std::size_t height,
                              std::size_t width, Rng& rng);

/// Applies sampled parameters to a [3, H, W] tensor in [0, 1]. Pure.
Tensor apply_view(const Tensor& image, const ViewParams& params);

struct AugmentedPair {
    Tensor view_a; // [3, H, W]
    Tensor view_b;
    std::size_t source_index = 0;
};

/// Two independently sampled augmentations of one image. Shape-preserving.
AugmentedPair augment_two_views(const Tensor& image, const AugmentConfig& config, Rng& rng);

/// 2B views in interleaved order [a_1, a_1', a_2, a_2', ...] plus the
/// positive-pairing involution pairing[i] = i ^ 1.
struct ContrastiveBatch {
    Tensor views;                       // [2B, 3, H, W]
    std::vector<std::size_t> pairing;   // view index -> its positive
    std::vector<std::size_t> source;    // view index -> source image index
};

ContrastiveBatch make_contrastive_batch(const Tensor& images, const AugmentConfig& config,
                                        Rng& rng);

} // namespace mlcl

#endif
