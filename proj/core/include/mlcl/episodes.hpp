#ifndef MLCL_EPISODES_HPP
#define MLCL_EPISODES_HPP

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mlcl/image.hpp"
#include "mlcl/rng.hpp"
#include "mlcl/tensor.hpp"

namespace mlcl {

/// Channel statistics applied after scaling pixels to [0, 1].
struct Normalization {
    std::array<double, 3> mean{0.5, 0.5, 0.5};
    std::array<double, 3> stddev{0.5, 0.5, 0.5};

    Tensor apply(const Tensor& t) const { return normalize_channels(t, mean, stddev); }
};

enum class Split { train, val, test };
const char* split_name(Split s);
Split split_from_name(const std::string& name);

/// Images grouped by class within three disjoint splits, stored as decoded
/// 8-bit images already resized to image_size.
struct SplitDataset {
    struct ClassImages {
        std::string name;
        std::vector<ImageU8> images;
    };

    std::size_t image_size = 0;
    std::vector<ClassImages> train, val, test;

    const std::vector<ClassImages>& split(Split s) const;
    std::vector<ClassImages>& split(Split s);

    /// Throws ConfigError naming the class if any class in `s` has fewer
    /// than `min_images` images.
    void require_min_images(Split s, std::size_t min_images) const;
};

/// Loads a `split/class/image` tree, or a manifest of lines
/// `relative-path split class`. Decodes, resizes to image_size.
SplitDataset load_dataset(const std::filesystem::path& root, std::size_t image_size);
SplitDataset load_dataset_manifest(const std::filesystem::path& root,
                                   const std::filesystem::path& manifest,
                                   std::size_t image_size);

/// One C-way N-shot task with Q queries per class. Labels are episode-local.
struct Episode {
    std::size_t way = 0, shot = 0, queries = 0;
    Tensor support;                  // [C*N, 3, S, S], normalized, class-major
    std::vector<int> support_labels; // 0..C-1
    Tensor query;                    // [C*Q, 3, S, S]
    std::vector<int> query_labels;
    /// (class index in split, image index in class) per support/query item,
    /// so feature caches can address precomputed representations.
    std::vector<std::pair<std::size_t, std::size_t>> support_refs, query_refs;
};

Episode sample_episode(const SplitDataset& dataset, Split split, std::size_t way,
                       std::size_t shot, std::size_t queries, Rng& rng,
                       const Normalization& norm = {});

struct EvalConfig {
    std::size_t way = 5;
    std::size_t shot = 1;
    std::size_t queries = 15;
    std::size_t episodes = 1000;
};

struct EvalReport {
    std::size_t episodes = 0;
    std::vector<double> per_episode; // accuracy fractions in [0, 1]
    double mean_pct = 0.0;           // mean accuracy in percent
    double ci_pct = 0.0;             // 95% CI half-width in percent
    std::string config_fingerprint;

    nlohmann::json to_json() const;
    static EvalReport from_json(const nlohmann::json& j);
};

/// Anything that labels an episode's queries.
class EpisodicClassifier {
public:
    virtual ~EpisodicClassifier() = default;
    virtual std::vector<int> classify(const Episode& episode) = 0;
};

/// Samples `config.episodes` episodes from the given split with per-episode
/// derived seeds and aggregates mean accuracy and the 95% CI half-width
/// (1.96 * sample stddev / sqrt(n)), both in percent.
EvalReport evaluate(EpisodicClassifier& classifier, const SplitDataset& dataset, Split split,
                    const EvalConfig& config, std::uint64_t seed,
                    const Normalization& norm = {});

} // namespace mlcl

#endif
