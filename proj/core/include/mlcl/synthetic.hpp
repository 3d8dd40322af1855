#ifndef MLCL_SYNTHETIC_HPP
#define MLCL_SYNTHETIC_HPP

#include <cstdint>
#include <filesystem>

#include <nlohmann/json.hpp>

#include "mlcl/episodes.hpp"

namespace mlcl {

/// Parametric shape/texture corpus. Classes are (shape, texture) combos
/// assigned disjointly to splits; per-image pose, hue, and texture phase are
/// randomized. `hue_class_correlation` makes the train split's hue predictive
/// of the class (0 = random hue, 1 = hue fixed per class); val/test hues are
/// always random, so color is never a transferable cue.
struct SyntheticConfig {
    std::size_t image_size = 32;
    std::size_t train_classes = 12;
    std::size_t val_classes = 4;
    std::size_t test_classes = 8;
    std::size_t images_per_class_train = 64;
    std::size_t images_per_class_eval = 40;
    double hue_class_correlation = 0.0;
    std::uint64_t seed = 1;

    void validate() const;
};

void to_json(nlohmann::json& j, const SyntheticConfig& c);
void from_json(const nlohmann::json& j, SyntheticConfig& c);

/// Number of distinct (shape, texture) combos available.
std::size_t synthetic_class_limit();

SplitDataset make_synthetic_dataset(const SyntheticConfig& config);

/// Renders the same corpus to `root/split/class/*.png` plus a manifest file
/// (`manifest.txt`, lines `relative-path split class`).
void write_synthetic_dataset(const std::filesystem::path& root, const SyntheticConfig& config);

} // namespace mlcl

#endif
