#ifndef MLCL_CONFIG_HPP
#define MLCL_CONFIG_HPP

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mlcl/encoders.hpp"
#include "mlcl/fewshot.hpp"
#include "mlcl/pretrain.hpp"
#include "mlcl/synthetic.hpp"

namespace mlcl {

inline constexpr std::size_t kConfigSchemaVersion = 1;
inline constexpr const char* kToolVersion = "0.1.0";

/// Where the images come from: a generated corpus or an on-disk tree.
struct DatasetSpec {
    std::string kind = "synthetic"; // "synthetic" | "directory"
    std::size_t image_size = 32;
    SyntheticConfig synthetic;           // kind == "synthetic"
    std::filesystem::path root;          // kind == "directory"
    std::filesystem::path manifest;      // optional manifest file under root

    void validate() const;
};

void to_json(nlohmann::json& j, const DatasetSpec& d);
void from_json(const nlohmann::json& j, DatasetSpec& d);

SplitDataset load_dataset_spec(const DatasetSpec& spec);

/// Expands a tap-set expression against an encoder's tap count. Items are
/// comma-separated; each is one index ("16") or an inclusive range ("16-8",
/// walking toward the second endpoint). Order of appearance is preserved;
/// duplicates and out-of-range indices are configuration errors.
std::vector<std::size_t> parse_tap_spec(const std::string& spec, std::size_t tap_count);

/// One encoder under study: its architecture, the contrastive tap set used
/// during pretraining (empty = no contrastive term), and the tap expression
/// naming which relation nets to train.
struct EncoderEntry {
    std::string id;
    EncoderConfig encoder;
    std::vector<std::size_t> levels;
    std::string taps = "";

    std::vector<std::size_t> relation_taps() const { return parse_tap_spec(taps, encoder.tap_count()); }
    void validate() const;
};

void to_json(nlohmann::json& j, const EncoderEntry& e);
void from_json(const nlohmann::json& j, EncoderEntry& e);

struct EvalTask {
    std::size_t way = 5;
    std::size_t shot = 1;
};

struct EvalSpec {
    std::vector<EvalTask> tasks{{5, 1}};
    std::size_t queries = 15;
    std::size_t episodes = 1000;
    std::string split = "test";

    void validate() const;
};

void to_json(nlohmann::json& j, const EvalSpec& e);
void from_json(const nlohmann::json& j, EvalSpec& e);

struct RelationNetKnobs {
    std::size_t conv_channels = 64;
    std::size_t hidden_dim = 8;
};

void to_json(nlohmann::json& j, const RelationNetKnobs& k);
void from_json(const nlohmann::json& j, RelationNetKnobs& k);

struct ExperimentConfig {
    std::size_t schema_version = kConfigSchemaVersion;
    std::uint64_t seed = 1;
    std::filesystem::path output_dir = "runs/default";
    DatasetSpec dataset;
    std::vector<EncoderEntry> encoders;
    PretrainConfig pretrain;
    RelationTrainConfig relation;
    RelationNetKnobs relation_net;
    EvalSpec eval;

    void validate() const;
    /// FNV-1a over the canonical serialized form, as 16 hex digits.
    std::string fingerprint() const;
    const EncoderEntry& find_encoder(const std::string& id) const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

ExperimentConfig parse_experiment_config(const std::string& text);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
void save_experiment_config(const ExperimentConfig& config, const std::filesystem::path& path);

/// Divides every count (pretrain epochs, relation episodes, eval episodes)
/// by `factor` for fast pipeline runs; results are floored at the smallest
/// legal value.
ExperimentConfig apply_smoke(ExperimentConfig config, std::size_t factor = 10);

/// Per-artifact seed derivations, shared by commands and tests.
std::uint64_t pretrain_seed(const ExperimentConfig& config, const std::string& encoder_id);
std::uint64_t relation_seed(const ExperimentConfig& config, const std::string& encoder_id,
                            std::size_t tap);
std::uint64_t eval_seed(const ExperimentConfig& config, const std::string& target_id);

/// Append-style record of everything a run produced.
struct ArtifactRecord {
    std::string kind; // "encoder" | "trainstate" | "relation_net" | "report" | "plot" | "data"
    std::string id;
    std::filesystem::path path;
    std::string fingerprint;
    std::string created;
};

void to_json(nlohmann::json& j, const ArtifactRecord& a);
void from_json(const nlohmann::json& j, ArtifactRecord& a);

struct RunManifest {
    std::string config_fingerprint;
    std::string tool_version = kToolVersion;
    std::vector<ArtifactRecord> artifacts;

    void add_or_replace(ArtifactRecord record);
    const ArtifactRecord* find(const std::string& kind, const std::string& id) const;

    void save(const std::filesystem::path& path) const;
    static RunManifest load(const std::filesystem::path& path);
};

void to_json(nlohmann::json& j, const RunManifest& m);
void from_json(const nlohmann::json& j, RunManifest& m);

/// UTC timestamp, e.g. 2026-02-14T09:30:00Z.
std::string timestamp_utc();

} // namespace mlcl

#endif
