#include "mlcl/config.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <ctime>
#include <fstream>
#include <set>
#include <sstream>

#include "mlcl/hash.hpp"
#include "mlcl/serialize.hpp"

namespace mlcl {

namespace {

std::size_t parse_index(const std::string& item, const std::string& whole) {
    if (item.empty()) {
        throw ConfigError("tap spec '" + whole + "' contains an empty item");
    }
    for (char ch : item) {
        if (!std::isdigit(static_cast<unsigned char>(ch))) {
            throw ConfigError("tap spec '" + whole + "' has a non-numeric index '" + item + "'");
        }
    }
    return static_cast<std::size_t>(std::stoull(item));
}

std::string trimmed(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

} // namespace

// ---------------------------------------------------------------------------
// DatasetSpec
// ---------------------------------------------------------------------------

void DatasetSpec::validate() const {
    if (kind != "synthetic" && kind != "directory") {
        throw ConfigError("dataset.kind must be 'synthetic' or 'directory', got '" + kind + "'");
    }
    if (image_size == 0) throw ConfigError("dataset.image_size must be positive");
    if (kind == "synthetic") {
        if (synthetic.image_size != image_size) {
            throw ConfigError("dataset.image_size (" + std::to_string(image_size) +
                              ") disagrees with dataset.synthetic.image_size (" +
                              std::to_string(synthetic.image_size) + ")");
        }
        synthetic.validate();
    } else if (root.empty()) {
        throw ConfigError("dataset.root is required for kind 'directory'");
    }
}

void to_json(nlohmann::json& j, const DatasetSpec& d) {
    j = nlohmann::json{{"kind", d.kind}, {"image_size", d.image_size}};
    if (d.kind == "synthetic") {
        j["synthetic"] = d.synthetic;
    } else {
        j["root"] = d.root.string();
        if (!d.manifest.empty()) j["manifest"] = d.manifest.string();
    }
}

void from_json(const nlohmann::json& j, DatasetSpec& d) {
    DatasetSpec defaults;
    d.kind = j.value("kind", defaults.kind);
    d.image_size = j.value("image_size", defaults.image_size);
    if (j.contains("synthetic")) {
        j.at("synthetic").get_to(d.synthetic);
        if (!j.at("synthetic").contains("image_size")) d.synthetic.image_size = d.image_size;
    } else {
        d.synthetic.image_size = d.image_size;
    }
    d.root = j.value("root", std::string{});
    d.manifest = j.value("manifest", std::string{});
}

SplitDataset load_dataset_spec(const DatasetSpec& spec) {
    spec.validate();
    if (spec.kind == "synthetic") return make_synthetic_dataset(spec.synthetic);
    if (!spec.manifest.empty()) {
        return load_dataset_manifest(spec.root, spec.root / spec.manifest, spec.image_size);
    }
    return load_dataset(spec.root, spec.image_size);
}

// ---------------------------------------------------------------------------
// Tap spec grammar
// ---------------------------------------------------------------------------

std::vector<std::size_t> parse_tap_spec(const std::string& spec, std::size_t tap_count) {
    std::vector<std::size_t> out;
    std::set<std::size_t> seen;
    const std::string body = trimmed(spec);
    if (body.empty()) return out;

    auto push = [&](std::size_t tap) {
        if (tap < 1 || tap > tap_count) {
            throw ConfigError("tap spec '" + spec + "' references tap " + std::to_string(tap) +
                              " outside 1.." + std::to_string(tap_count));
        }
        if (!seen.insert(tap).second) {
            throw ConfigError("tap spec '" + spec + "' repeats tap " + std::to_string(tap));
        }
        out.push_back(tap);
    };

    std::stringstream ss(body);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trimmed(item);
        const std::size_t dash = item.find('-');
        if (dash == std::string::npos) {
            push(parse_index(item, spec));
            continue;
        }
        const std::size_t a = parse_index(trimmed(item.substr(0, dash)), spec);
        const std::size_t b = parse_index(trimmed(item.substr(dash + 1)), spec);
        if (a >= b) {
            for (std::size_t t = a; t >= b; --t) push(t);
        } else {
            for (std::size_t t = a; t <= b; ++t) push(t);
        }
    }
    if (out.empty()) {
        throw ConfigError("tap spec '" + spec + "' expands to no taps");
    }
    return out;
}

// ---------------------------------------------------------------------------
// EncoderEntry
// ---------------------------------------------------------------------------

void EncoderEntry::validate() const {
    if (id.empty()) throw ConfigError("encoder entry is missing an id");
    for (char ch : id) {
        if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '-' && ch != '_') {
            throw ConfigError("encoder id '" + id +
                              "' may only use letters, digits, '-' and '_'");
        }
    }
    encoder.validate();
    if (!levels.empty()) {
        TapSpec spec{levels};
        spec.validate(encoder.tap_count());
    }
    if (!taps.empty()) parse_tap_spec(taps, encoder.tap_count());
}

void to_json(nlohmann::json& j, const EncoderEntry& e) {
    j = nlohmann::json{{"id", e.id},
                       {"encoder", e.encoder},
                       {"levels", e.levels},
                       {"taps", e.taps}};
}

void from_json(const nlohmann::json& j, EncoderEntry& e) {
    e.id = j.value("id", std::string{});
    if (j.contains("preset")) {
        e.encoder = encoder_preset(j.at("preset").get<std::string>());
        if (j.contains("encoder")) {
            throw ConfigError("encoder entry '" + e.id + "' sets both 'preset' and 'encoder'");
        }
    } else if (j.contains("encoder")) {
        j.at("encoder").get_to(e.encoder);
    } else {
        throw ConfigError("encoder entry '" + e.id + "' needs 'preset' or 'encoder'");
    }
    e.levels = j.value("levels", std::vector<std::size_t>{});
    e.taps = j.value("taps", std::string{});
}

// ---------------------------------------------------------------------------
// EvalSpec
// ---------------------------------------------------------------------------

void EvalSpec::validate() const {
    if (tasks.empty()) throw ConfigError("eval.tasks must list at least one (way, shot) pair");
    for (const auto& t : tasks) {
        if (t.way < 2) throw ConfigError("eval.tasks way must be at least 2");
        if (t.shot == 0) throw ConfigError("eval.tasks shot must be positive");
    }
    if (queries == 0) throw ConfigError("eval.queries must be positive");
    if (episodes < 2) throw ConfigError("eval.episodes must be at least 2");
    split_from_name(split);
}

void to_json(nlohmann::json& j, const EvalSpec& e) {
    nlohmann::json tasks = nlohmann::json::array();
    for (const auto& t : e.tasks) tasks.push_back({{"way", t.way}, {"shot", t.shot}});
    j = nlohmann::json{
        {"tasks", tasks}, {"queries", e.queries}, {"episodes", e.episodes}, {"split", e.split}};
}

void from_json(const nlohmann::json& j, EvalSpec& e) {
    EvalSpec defaults;
    if (j.contains("tasks")) {
        e.tasks.clear();
        for (const auto& t : j.at("tasks")) {
            EvalTask task;
            task.way = t.value("way", std::size_t{5});
            task.shot = t.value("shot", std::size_t{1});
            e.tasks.push_back(task);
        }
    }
    e.queries = j.value("queries", defaults.queries);
    e.episodes = j.value("episodes", defaults.episodes);
    e.split = j.value("split", defaults.split);
}

void to_json(nlohmann::json& j, const RelationNetKnobs& k) {
    j = nlohmann::json{{"conv_channels", k.conv_channels}, {"hidden_dim", k.hidden_dim}};
}

void from_json(const nlohmann::json& j, RelationNetKnobs& k) {
    RelationNetKnobs defaults;
    k.conv_channels = j.value("conv_channels", defaults.conv_channels);
    k.hidden_dim = j.value("hidden_dim", defaults.hidden_dim);
}

// ---------------------------------------------------------------------------
// ExperimentConfig
// ---------------------------------------------------------------------------

void ExperimentConfig::validate() const {
    if (schema_version != kConfigSchemaVersion) {
        throw ConfigError("schema_version " + std::to_string(schema_version) +
                          " is not supported (expected " +
                          std::to_string(kConfigSchemaVersion) + ")");
    }
    if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
    dataset.validate();
    if (encoders.empty()) throw ConfigError("config lists no encoders");
    std::set<std::string> ids;
    for (const auto& e : encoders) {
        e.validate();
        if (!ids.insert(e.id).second) {
            throw ConfigError("duplicate encoder id '" + e.id + "'");
        }
        if (e.encoder.input_size != dataset.image_size) {
            throw ConfigError("encoder '" + e.id + "' expects input size " +
                              std::to_string(e.encoder.input_size) + " but the dataset is " +
                              std::to_string(dataset.image_size));
        }
        PretrainConfig pt = pretrain;
        pt.contrastive.levels.taps = e.levels;
        pt.validate(e.encoder.tap_count());
    }
    if (relation.way == 0 || relation.shot == 0 || relation.queries == 0 ||
        relation.episodes == 0) {
        throw ConfigError("relation training counts must be positive");
    }
    if (relation_net.conv_channels == 0 || relation_net.hidden_dim == 0) {
        throw ConfigError("relation_net widths must be positive");
    }
    eval.validate();
}

std::string ExperimentConfig::fingerprint() const {
    nlohmann::json j = *this;
    return to_hex64(fnv1a64(j.dump()));
}

const EncoderEntry& ExperimentConfig::find_encoder(const std::string& id) const {
    for (const auto& e : encoders) {
        if (e.id == id) return e;
    }
    throw ConfigError("config has no encoder with id '" + id + "'");
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
    j = nlohmann::json{{"schema_version", c.schema_version},
                       {"seed", c.seed},
                       {"output_dir", c.output_dir.string()},
                       {"dataset", c.dataset},
                       {"encoders", c.encoders},
                       {"pretrain", c.pretrain},
                       {"relation", c.relation},
                       {"relation_net", c.relation_net},
                       {"eval", c.eval}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
    ExperimentConfig defaults;
    c.schema_version = j.value("schema_version", kConfigSchemaVersion);
    c.seed = j.value("seed", defaults.seed);
    c.output_dir = j.value("output_dir", defaults.output_dir.string());
    if (j.contains("dataset")) j.at("dataset").get_to(c.dataset);
    c.encoders.clear();
    if (j.contains("encoders")) {
        for (const auto& e : j.at("encoders")) {
            c.encoders.push_back(e.get<EncoderEntry>());
        }
    }
    if (j.contains("pretrain")) j.at("pretrain").get_to(c.pretrain);
    if (j.contains("relation")) j.at("relation").get_to(c.relation);
    if (j.contains("relation_net")) j.at("relation_net").get_to(c.relation_net);
    if (j.contains("eval")) j.at("eval").get_to(c.eval);
}

ExperimentConfig parse_experiment_config(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    ExperimentConfig config;
    try {
        j.get_to(config);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config field error: ") + e.what());
    }
    config.validate();
    return config;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_experiment_config(ss.str());
}

void save_experiment_config(const ExperimentConfig& config, const std::filesystem::path& path) {
    nlohmann::json j = config;
    atomic_write_text(path, j.dump(2) + "\n");
}

ExperimentConfig apply_smoke(ExperimentConfig config, std::size_t factor) {
    if (factor == 0) throw ConfigError("smoke factor must be positive");
    auto shrink = [factor](std::size_t v, std::size_t floor_at) {
        return std::max(floor_at, v / factor);
    };
    config.pretrain.epochs = shrink(config.pretrain.epochs, config.pretrain.epochs > 0 ? 1 : 0);
    config.pretrain.total_steps = shrink(config.pretrain.total_steps, 0);
    config.relation.episodes = shrink(config.relation.episodes, 1);
    config.eval.episodes = shrink(config.eval.episodes, 2);
    return config;
}

std::uint64_t pretrain_seed(const ExperimentConfig& config, const std::string& encoder_id) {
    return derive_seed(config.seed, fnv1a64("pretrain/" + encoder_id));
}

std::uint64_t relation_seed(const ExperimentConfig& config, const std::string& encoder_id,
                            std::size_t tap) {
    return derive_seed(derive_seed(config.seed, fnv1a64("relation/" + encoder_id)), tap);
}

std::uint64_t eval_seed(const ExperimentConfig& config, const std::string& target_id) {
    return derive_seed(config.seed, fnv1a64("eval/" + target_id));
}

// ---------------------------------------------------------------------------
// RunManifest
// ---------------------------------------------------------------------------

void to_json(nlohmann::json& j, const ArtifactRecord& a) {
    j = nlohmann::json{{"kind", a.kind},
                       {"id", a.id},
                       {"path", a.path.string()},
                       {"fingerprint", a.fingerprint},
                       {"created", a.created}};
}

void from_json(const nlohmann::json& j, ArtifactRecord& a) {
    a.kind = j.value("kind", std::string{});
    a.id = j.value("id", std::string{});
    a.path = j.value("path", std::string{});
    a.fingerprint = j.value("fingerprint", std::string{});
    a.created = j.value("created", std::string{});
}

void RunManifest::add_or_replace(ArtifactRecord record) {
    for (auto& existing : artifacts) {
        if (existing.kind == record.kind && existing.id == record.id) {
            existing = std::move(record);
            return;
        }
    }
    artifacts.push_back(std::move(record));
}

const ArtifactRecord* RunManifest::find(const std::string& kind, const std::string& id) const {
    for (const auto& a : artifacts) {
        if (a.kind == kind && a.id == id) return &a;
    }
    return nullptr;
}

void RunManifest::save(const std::filesystem::path& path) const {
    nlohmann::json j = *this;
    atomic_write_text(path, j.dump(2) + "\n");
}

RunManifest RunManifest::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw IoError("manifest " + path.string() + " is not valid JSON: " + e.what());
    }
    return j.get<RunManifest>();
}

void to_json(nlohmann::json& j, const RunManifest& m) {
    j = nlohmann::json{{"config_fingerprint", m.config_fingerprint},
                       {"tool_version", m.tool_version},
                       {"artifacts", m.artifacts}};
}

void from_json(const nlohmann::json& j, RunManifest& m) {
    m.config_fingerprint = j.value("config_fingerprint", std::string{});
    m.tool_version = j.value("tool_version", std::string{kToolVersion});
    m.artifacts.clear();
    if (j.contains("artifacts")) {
        for (const auto& a : j.at("artifacts")) m.artifacts.push_back(a.get<ArtifactRecord>());
    }
}

std::string timestamp_utc() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

} // namespace mlcl
