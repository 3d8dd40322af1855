#include "mlcl/episodes.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "mlcl/errors.hpp"

namespace mlcl {

const char* split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "?";
}

Split split_from_name(const std::string& name) {
    if (name == "train") return Split::train;
    if (name == "val") return Split::val;
    if (name == "test") return Split::test;
    throw ConfigError("unknown split '" + name + "'; expected train, val, or test");
}

const std::vector<SplitDataset::ClassImages>& SplitDataset::split(Split s) const {
    switch (s) {
        case Split::train: return train;
        case Split::val: return val;
        case Split::test: return test;
    }
    return train;
}

std::vector<SplitDataset::ClassImages>& SplitDataset::split(Split s) {
    switch (s) {
        case Split::train: return train;
        case Split::val: return val;
        case Split::test: return test;
    }
    return train;
}

void SplitDataset::require_min_images(Split s, std::size_t min_images) const {
    for (const auto& cls : split(s)) {
        if (cls.images.size() < min_images) {
            throw ConfigError("class '" + cls.name + "' in split " + split_name(s) + " has " +
                              std::to_string(cls.images.size()) + " images; needs at least " +
                              std::to_string(min_images));
        }
    }
}

namespace {

ImageU8 load_resized(const std::filesystem::path& file, std::size_t image_size) {
    ImageU8 img = read_image(file);
    if (img.height == image_size && img.width == image_size && img.channels == 3) return img;
    Tensor t = image_to_tensor(img);
    t = resize_bilinear(t, image_size, image_size);
    return tensor_to_image_u8(t);
}

void check_disjoint(const SplitDataset& ds) {
    std::map<std::string, const char*> seen;
    for (Split s : {Split::train, Split::val, Split::test}) {
        for (const auto& cls : ds.split(s)) {
            auto [it, inserted] = seen.emplace(cls.name, split_name(s));
            if (!inserted) {
                throw ConfigError("class '" + cls.name + "' appears in both " + it->second +
                                  " and " + split_name(s) + "; splits must be disjoint");
            }
        }
    }
}

void sort_classes(SplitDataset& ds) {
    for (Split s : {Split::train, Split::val, Split::test}) {
        auto& classes = ds.split(s);
        std::sort(classes.begin(), classes.end(),
                  [](const auto& a, const auto& b) { return a.name < b.name; });
    }
}

} // namespace

SplitDataset load_dataset(const std::filesystem::path& root, std::size_t image_size) {
    if (image_size == 0) throw ConfigError("image_size must be positive");
    if (!std::filesystem::is_directory(root)) {
        throw IoError("dataset root is not a directory: " + root.string());
    }
    SplitDataset ds;
    ds.image_size = image_size;
    for (Split s : {Split::train, Split::val, Split::test}) {
        auto split_dir = root / split_name(s);
        if (!std::filesystem::is_directory(split_dir)) continue;
        for (const auto& class_entry : std::filesystem::directory_iterator(split_dir)) {
            if (!class_entry.is_directory()) continue;
            SplitDataset::ClassImages cls;
            cls.name = class_entry.path().filename().string();
            std::vector<std::filesystem::path> files;
            for (const auto& f : std::filesystem::directory_iterator(class_entry.path())) {
                if (f.is_regular_file()) files.push_back(f.path());
            }
            std::sort(files.begin(), files.end());
            for (const auto& f : files) cls.images.push_back(load_resized(f, image_size));
            if (cls.images.empty()) {
                throw ConfigError("class '" + cls.name + "' in split " + split_name(s) +
                                  " has no images");
            }
            ds.split(s).push_back(std::move(cls));
        }
    }
    sort_classes(ds);
    check_disjoint(ds);
    return ds;
}

SplitDataset load_dataset_manifest(const std::filesystem::path& root,
                                   const std::filesystem::path& manifest,
                                   std::size_t image_size) {
    if (image_size == 0) throw ConfigError("image_size must be positive");
    std::ifstream in(manifest);
    if (!in) throw IoError("cannot open manifest " + manifest.string());

    SplitDataset ds;
    ds.image_size = image_size;
    std::map<std::pair<std::string, std::string>, std::size_t> class_index;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ss(line);
        std::string rel, split_str, cls_name;
        if (!(ss >> rel >> split_str >> cls_name)) {
            throw IoError("manifest line " + std::to_string(lineno) +
                          ": expected 'path split class'");
        }
        Split s = split_from_name(split_str);
        auto key = std::make_pair(split_str, cls_name);
        auto it = class_index.find(key);
        if (it == class_index.end()) {
            ds.split(s).push_back({cls_name, {}});
            it = class_index.emplace(key, ds.split(s).size() - 1).first;
        }
        ds.split(s)[it->second].images.push_back(load_resized(root / rel, image_size));
    }
    sort_classes(ds);
    check_disjoint(ds);
    return ds;
}

// ---------------------------------------------------------------------------
// Episode sampling
// ---------------------------------------------------------------------------

Episode sample_episode(const SplitDataset& dataset, Split split, std::size_t way,
                       std::size_t shot, std::size_t queries, Rng& rng,
                       const Normalization& norm) {
    const auto& classes = dataset.split(split);
    if (way == 0 || shot == 0 || queries == 0) {
        throw ConfigError("episode way/shot/queries must all be positive");
    }
    if (classes.size() < way) {
        throw ConfigError("split " + std::string(split_name(split)) + " has " +
                          std::to_string(classes.size()) + " classes; episode needs " +
                          std::to_string(way));
    }
    dataset.require_min_images(split, shot + queries);

    std::vector<std::size_t> class_order(classes.size());
    for (std::size_t i = 0; i < class_order.size(); ++i) class_order[i] = i;
    rng.shuffle(class_order);
    class_order.resize(way);

    const std::size_t s = dataset.image_size;
    Episode ep;
    ep.way = way;
    ep.shot = shot;
    ep.queries = queries;
    ep.support = Tensor({way * shot, 3, s, s});
    ep.query = Tensor({way * queries, 3, s, s});

    for (std::size_t c = 0; c < way; ++c) {
        const auto& cls = classes[class_order[c]];
        std::vector<std::size_t> img_order(cls.images.size());
        for (std::size_t i = 0; i < img_order.size(); ++i) img_order[i] = i;
        rng.shuffle(img_order);

        for (std::size_t n = 0; n < shot; ++n) {
            std::size_t img_idx = img_order[n];
            Tensor t = norm.apply(image_to_tensor(cls.images[img_idx]));
            batch_assign(ep.support, c * shot + n, t);
            ep.support_labels.push_back(static_cast<int>(c));
            ep.support_refs.emplace_back(class_order[c], img_idx);
        }
        for (std::size_t q = 0; q < queries; ++q) {
            std::size_t img_idx = img_order[shot + q];
            Tensor t = norm.apply(image_to_tensor(cls.images[img_idx]));
            batch_assign(ep.query, c * queries + q, t);
            ep.query_labels.push_back(static_cast<int>(c));
            ep.query_refs.emplace_back(class_order[c], img_idx);
        }
    }
    return ep;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

nlohmann::json EvalReport::to_json() const {
    return {{"episodes", episodes},
            {"per_episode", per_episode},
            {"mean_pct", mean_pct},
            {"ci_pct", ci_pct},
            {"config_fingerprint", config_fingerprint}};
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
    EvalReport r;
    j.at("episodes").get_to(r.episodes);
    j.at("per_episode").get_to(r.per_episode);
    j.at("mean_pct").get_to(r.mean_pct);
    j.at("ci_pct").get_to(r.ci_pct);
    r.config_fingerprint = j.value("config_fingerprint", "");
    return r;
}

EvalReport evaluate(EpisodicClassifier& classifier, const SplitDataset& dataset, Split split,
                    const EvalConfig& config, std::uint64_t seed, const Normalization& norm) {
    if (config.episodes < 2) {
        throw ConfigError("evaluation needs at least 2 episodes for a confidence interval");
    }
    EvalReport report;
    report.episodes = config.episodes;
    report.per_episode.reserve(config.episodes);

    std::size_t total_correct = 0;
    for (std::size_t e = 0; e < config.episodes; ++e) {
        Rng ep_rng(derive_seed(seed, e));
        Episode ep = sample_episode(dataset, split, config.way, config.shot, config.queries,
                                    ep_rng, norm);
        std::vector<int> preds = classifier.classify(ep);
        if (preds.size() != ep.query_labels.size()) {
            throw ShapeError("classifier returned " + std::to_string(preds.size()) +
                             " labels for " + std::to_string(ep.query_labels.size()) + " queries");
        }
        std::size_t correct = 0;
        for (std::size_t i = 0; i < preds.size(); ++i) {
            if (preds[i] == ep.query_labels[i]) ++correct;
        }
        total_correct += correct;
        report.per_episode.push_back(static_cast<double>(correct) /
                                     static_cast<double>(preds.size()));
    }

    // Mean via the exact integer tally: equal to the arithmetic mean of the
    // per-episode accuracies (equal query counts), but a single rounding, so
    // identical episodes give an exactly zero spread below.
    const double n = static_cast<double>(config.episodes);
    const double mean = static_cast<double>(total_correct) /
                        (n * static_cast<double>(config.way * config.queries));

    double sq = 0.0, sq_comp = 0.0;
    for (double a : report.per_episode) {
        double d = (a - mean) * (a - mean);
        double y = d - sq_comp;
        double t = sq + y;
        sq_comp = (t - sq) - y;
        sq = t;
    }
    const double stddev = std::sqrt(sq / (n - 1.0));
    report.mean_pct = 100.0 * mean;
    report.ci_pct = 100.0 * 1.96 * stddev / std::sqrt(n);
    return report;
}

} // namespace mlcl
