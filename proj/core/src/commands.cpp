#include "mlcl/commands.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "mlcl/hash.hpp"
#include "mlcl/plot.hpp"
#include "mlcl/serialize.hpp"

namespace mlcl {

namespace {

std::string tap_tag(std::size_t tap) { return "tap" + std::to_string(tap); }

std::string task_suffix(std::size_t way, std::size_t shot) {
    return "w" + std::to_string(way) + "s" + std::to_string(shot);
}

std::vector<std::size_t> sorted_unique(std::vector<std::size_t> taps) {
    std::sort(taps.begin(), taps.end());
    taps.erase(std::unique(taps.begin(), taps.end()), taps.end());
    return taps;
}

nlohmann::json step_record(const StepLoss& loss) {
    nlohmann::json levels = nlohmann::json::object();
    for (const auto& [tap, value] : loss.levels) levels[std::to_string(tap)] = value;
    return nlohmann::json{{"step", loss.step}, {"lr", loss.lr},       {"ce", loss.ce},
                          {"mlcl", loss.mlcl}, {"total", loss.total}, {"levels", levels}};
}

RunManifest open_or_create_manifest(const RunPaths& paths, const std::string& fingerprint,
                                    std::ostream& log) {
    if (std::filesystem::exists(paths.manifest())) {
        RunManifest manifest = RunManifest::load(paths.manifest());
        if (manifest.config_fingerprint == fingerprint) return manifest;
        log << nlohmann::json{{"event", "manifest_reset"},
                              {"previous", manifest.config_fingerprint},
                              {"current", fingerprint}}
                   .dump()
            << "\n";
    }
    RunManifest manifest;
    manifest.config_fingerprint = fingerprint;
    return manifest;
}

RunManifest require_manifest(const RunPaths& paths, const std::string& fingerprint) {
    if (!std::filesystem::exists(paths.manifest())) {
        throw ConfigError("no manifest at " + paths.manifest().string() +
                          "; run pretrain first");
    }
    RunManifest manifest = RunManifest::load(paths.manifest());
    if (manifest.config_fingerprint != fingerprint) {
        throw ConfigError("manifest fingerprint " + manifest.config_fingerprint +
                          " does not match this config (" + fingerprint +
                          "); artifacts come from a different run");
    }
    return manifest;
}

const ArtifactRecord& require_artifact(const RunManifest& manifest, const std::string& kind,
                                       const std::string& id) {
    const ArtifactRecord* record = manifest.find(kind, id);
    if (record == nullptr) {
        throw ConfigError("manifest lists no " + kind + " artifact '" + id + "'");
    }
    if (!std::filesystem::exists(record->path)) {
        throw IoError("artifact file " + record->path.string() + " (" + kind + " '" + id +
                      "') is missing");
    }
    return *record;
}

RelationNetConfig relation_net_config(const ExperimentConfig& config, const EncoderEntry& entry,
                                      std::size_t tap) {
    const std::vector<TapShape> shapes = list_taps(entry.encoder);
    const TapShape& ts = shapes.at(tap - 1);
    RelationNetConfig net_cfg;
    net_cfg.in_channels = ts.channels;
    net_cfg.input_hw = ts.height;
    net_cfg.conv_channels = config.relation_net.conv_channels;
    net_cfg.hidden_dim = config.relation_net.hidden_dim;
    return net_cfg;
}

struct LoadedEntryArtifacts {
    Encoder encoder;
    std::vector<std::size_t> taps;           // order of the tap expression
    std::map<std::size_t, RelationNet> nets; // by tap
};

LoadedEntryArtifacts load_entry_artifacts(const ExperimentConfig& config,
                                          const EncoderEntry& entry, const RunPaths& paths,
                                          const RunManifest& manifest) {
    LoadedEntryArtifacts loaded;
    const ArtifactRecord& enc_record = require_artifact(manifest, "encoder", entry.id);
    loaded.encoder = Encoder::load(enc_record.path);
    loaded.encoder.set_training(false);
    const std::string enc_fp = to_hex64(loaded.encoder.fingerprint());
    loaded.taps = entry.relation_taps();
    for (std::size_t tap : loaded.taps) {
        const std::string id = entry.id + "/" + tap_tag(tap);
        const ArtifactRecord& record = require_artifact(manifest, "relation_net", id);
        nlohmann::json meta;
        RelationNet net = RelationNet::load(record.path, &meta);
        const std::string trained_against = meta.value("encoder_fingerprint", std::string{});
        if (trained_against != enc_fp) {
            throw ConfigError("incompatible artifact fingerprints: relation net '" + id +
                              "' was trained against encoder " + trained_against +
                              " but encoder '" + entry.id + "' now has " + enc_fp);
        }
        loaded.nets.emplace(tap, std::move(net));
    }
    (void)config;
    (void)paths;
    return loaded;
}

struct ReportSummary {
    std::string encoder_id;
    std::string tag;
    std::size_t way = 0, shot = 0;
    double mean_pct = 0.0;
    double ci_pct = 0.0;
};

ReportSummary read_report_summary(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open report " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw IoError("report " + path.string() + " is not valid JSON: " + e.what());
    }
    ReportSummary s;
    try {
        s.encoder_id = j.at("encoder_id").get<std::string>();
        s.tag = j.at("tag").get<std::string>();
        s.way = j.at("way").get<std::size_t>();
        s.shot = j.at("shot").get<std::size_t>();
        s.mean_pct = j.at("report").at("mean_pct").get<double>();
        s.ci_pct = j.at("report").at("ci_pct").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("report " + path.string() + " has an inconsistent schema: " + e.what());
    }
    return s;
}

} // namespace

// ---------------------------------------------------------------------------
// Config resolution and fingerprints
// ---------------------------------------------------------------------------

ExperimentConfig resolve_config(const CommandOptions& options) {
    ExperimentConfig config = load_experiment_config(options.config_path);
    if (options.seed) config.seed = *options.seed;
    if (options.output_dir) config.output_dir = *options.output_dir;
    if (options.episodes) config.eval.episodes = *options.episodes;
    if (options.smoke) config = apply_smoke(config, options.smoke_factor);
    config.validate();
    return config;
}

std::string config_fingerprint(const ExperimentConfig& config) {
    ExperimentConfig c = config;
    c.output_dir.clear();
    nlohmann::json j = c;
    return to_hex64(fnv1a64(j.dump()));
}

std::string training_fingerprint(const ExperimentConfig& config) {
    ExperimentConfig c = config;
    c.output_dir.clear();
    c.eval = EvalSpec{};
    nlohmann::json j = c;
    return to_hex64(fnv1a64(j.dump()));
}

// ---------------------------------------------------------------------------
// RunPaths
// ---------------------------------------------------------------------------

std::filesystem::path RunPaths::encoder(const std::string& id) const {
    return root / ("encoder-" + id + ".bin");
}
std::filesystem::path RunPaths::trainstate(const std::string& id) const {
    return root / ("trainstate-" + id + ".bin");
}
std::filesystem::path RunPaths::pretrain_metrics(const std::string& id) const {
    return root / ("metrics-" + id + ".jsonl");
}
std::filesystem::path RunPaths::relation_net(const std::string& id, std::size_t tap) const {
    return root / ("relnet-" + id + "-" + tap_tag(tap) + ".bin");
}
std::filesystem::path RunPaths::relation_metrics(const std::string& id, std::size_t tap) const {
    return root / ("relnet-" + id + "-" + tap_tag(tap) + ".jsonl");
}
std::filesystem::path RunPaths::report(const std::string& id, const std::string& tag,
                                       std::size_t way, std::size_t shot) const {
    return root / ("report-" + id + "-" + tag + "-" + task_suffix(way, shot) + ".json");
}
std::filesystem::path RunPaths::chart_png(std::size_t way, std::size_t shot) const {
    return root / ("chart-" + task_suffix(way, shot) + ".png");
}
std::filesystem::path RunPaths::chart_json(std::size_t way, std::size_t shot) const {
    return root / ("chart-" + task_suffix(way, shot) + ".json");
}
std::filesystem::path RunPaths::chart_csv(std::size_t way, std::size_t shot) const {
    return root / ("chart-" + task_suffix(way, shot) + ".csv");
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

void cmd_pretrain(const ExperimentConfig& config, std::ostream& log) {
    config.validate();
    const RunPaths paths{config.output_dir};
    std::filesystem::create_directories(paths.root);
    const std::string train_fp = training_fingerprint(config);
    RunManifest manifest = open_or_create_manifest(paths, train_fp, log);
    save_experiment_config(config, paths.config_copy());

    SplitDataset dataset = load_dataset_spec(config.dataset);

    for (const auto& entry : config.encoders) {
        PretrainConfig pt = config.pretrain;
        pt.contrastive.levels.taps = entry.levels;
        pt.seed = pretrain_seed(config, entry.id);

        log << nlohmann::json{{"event", "pretrain_start"},
                              {"encoder", entry.id},
                              {"levels", entry.levels},
                              {"seed", pt.seed}}
                   .dump()
            << "\n";

        std::size_t logged = 0;
        PretrainHooks hooks;
        hooks.checkpoint_path = paths.trainstate(entry.id);
        hooks.checkpoint_every = 50;
        hooks.on_step = [&](const StepLoss& loss) {
            ++logged;
            if (logged % 20 == 1) {
                log << step_record(loss).dump() << "\n";
            }
        };

        TrainState state = pretrain(pt, entry.encoder, dataset, hooks);
        state.encoder.save(paths.encoder(entry.id));

        std::ostringstream metrics;
        for (const StepLoss& loss : state.history) metrics << step_record(loss).dump() << "\n";
        atomic_write_text(paths.pretrain_metrics(entry.id), metrics.str());

        const std::string enc_fp = to_hex64(state.encoder.fingerprint());
        manifest.add_or_replace({"encoder", entry.id, paths.encoder(entry.id), train_fp,
                                 timestamp_utc()});
        manifest.add_or_replace({"trainstate", entry.id, paths.trainstate(entry.id), train_fp,
                                 timestamp_utc()});
        manifest.add_or_replace({"metrics", entry.id, paths.pretrain_metrics(entry.id), train_fp,
                                 timestamp_utc()});
        manifest.save(paths.manifest());

        log << nlohmann::json{{"event", "pretrain_done"},
                              {"encoder", entry.id},
                              {"steps", state.step},
                              {"encoder_fingerprint", enc_fp},
                              {"checkpoint", paths.encoder(entry.id).string()}}
                   .dump()
            << "\n";
    }
}

// ---------------------------------------------------------------------------
// train-relations
// ---------------------------------------------------------------------------

void cmd_train_relations(const ExperimentConfig& config, std::ostream& log) {
    config.validate();
    const RunPaths paths{config.output_dir};
    const std::string train_fp = training_fingerprint(config);
    RunManifest manifest = require_manifest(paths, train_fp);

    SplitDataset dataset = load_dataset_spec(config.dataset);

    for (const auto& entry : config.encoders) {
        const ArtifactRecord& enc_record = require_artifact(manifest, "encoder", entry.id);
        Encoder encoder = Encoder::load(enc_record.path);
        encoder.set_training(false);
        const std::string enc_fp = to_hex64(encoder.fingerprint());

        for (std::size_t tap : entry.relation_taps()) {
            RelationTrainConfig rt = config.relation;
            rt.seed = relation_seed(config, entry.id, tap);
            RelationNetConfig net_cfg = relation_net_config(config, entry, tap);

            log << nlohmann::json{{"event", "relation_start"},
                                  {"encoder", entry.id},
                                  {"tap", tap},
                                  {"seed", rt.seed}}
                       .dump()
                << "\n";

            std::ostringstream metrics;
            auto on_episode = [&](std::size_t episode, double loss) {
                metrics << nlohmann::json{{"episode", episode}, {"mse", loss}}.dump() << "\n";
                if (episode % 50 == 0) {
                    log << nlohmann::json{{"event", "relation_episode"},
                                          {"encoder", entry.id},
                                          {"tap", tap},
                                          {"episode", episode},
                                          {"mse", loss}}
                               .dump()
                        << "\n";
                }
            };

            RelationNet net = train_relation_net(encoder, tap, dataset, Split::train, rt, net_cfg,
                                                 config.pretrain.normalization, on_episode);

            nlohmann::json meta{{"encoder_id", entry.id},
                                {"tap", tap},
                                {"encoder_fingerprint", enc_fp},
                                {"config_fingerprint", train_fp},
                                {"relation_train", rt}};
            net.save(paths.relation_net(entry.id, tap), meta);
            atomic_write_text(paths.relation_metrics(entry.id, tap), metrics.str());

            const std::string id = entry.id + "/" + tap_tag(tap);
            manifest.add_or_replace({"relation_net", id, paths.relation_net(entry.id, tap),
                                     train_fp, timestamp_utc()});
            manifest.add_or_replace({"relation_metrics", id,
                                     paths.relation_metrics(entry.id, tap), train_fp,
                                     timestamp_utc()});
            manifest.save(paths.manifest());

            log << nlohmann::json{{"event", "relation_done"},
                                  {"encoder", entry.id},
                                  {"tap", tap},
                                  {"path", paths.relation_net(entry.id, tap).string()}}
                       .dump()
                << "\n";
        }
    }
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

void cmd_evaluate(const ExperimentConfig& config, std::ostream& log, bool episodes_overridden) {
    config.validate();
    const RunPaths paths{config.output_dir};
    const std::string train_fp = training_fingerprint(config);
    const std::string full_fp = config_fingerprint(config);
    RunManifest manifest = require_manifest(paths, train_fp);

    SplitDataset dataset = load_dataset_spec(config.dataset);
    const Split split = split_from_name(config.eval.split);

    for (const auto& entry : config.encoders) {
        LoadedEntryArtifacts loaded = load_entry_artifacts(config, entry, paths, manifest);
        TapSpec table_taps{sorted_unique(loaded.taps)};
        FeatureTable table(loaded.encoder, table_taps, dataset, split,
                           config.pretrain.normalization);

        for (const EvalTask& task : config.eval.tasks) {
            EvalConfig eval_cfg;
            eval_cfg.way = task.way;
            eval_cfg.shot = task.shot;
            eval_cfg.queries = config.eval.queries;
            eval_cfg.episodes = config.eval.episodes;

            auto run_one = [&](const std::string& tag, const std::vector<std::size_t>& taps) {
                std::vector<RelationEnsembleClassifier::Member> members;
                members.reserve(taps.size());
                for (std::size_t tap : taps) {
                    members.push_back({tap, &loaded.nets.at(tap)});
                }
                RelationEnsembleClassifier classifier(table, std::move(members));
                const std::string target = entry.id + "/" + tag + "/" +
                                           task_suffix(task.way, task.shot);
                EvalReport report = evaluate(classifier, dataset, split, eval_cfg,
                                             eval_seed(config, target),
                                             config.pretrain.normalization);
                report.config_fingerprint = full_fp;

                nlohmann::json j{{"schema_version", 1},
                                 {"encoder_id", entry.id},
                                 {"tag", tag},
                                 {"taps", taps},
                                 {"way", task.way},
                                 {"shot", task.shot},
                                 {"queries", config.eval.queries},
                                 {"episodes", config.eval.episodes},
                                 {"split", config.eval.split},
                                 {"standard_episodes",
                                  config.eval.episodes == 1000 && !episodes_overridden},
                                 {"report", report.to_json()}};
                const std::filesystem::path path =
                    paths.report(entry.id, tag, task.way, task.shot);
                atomic_write_text(path, j.dump(2) + "\n");
                manifest.add_or_replace(
                    {"report", target, path, train_fp, timestamp_utc()});
                manifest.save(paths.manifest());

                log << nlohmann::json{{"event", "report"},
                                      {"encoder", entry.id},
                                      {"tag", tag},
                                      {"way", task.way},
                                      {"shot", task.shot},
                                      {"mean_pct", report.mean_pct},
                                      {"ci_pct", report.ci_pct},
                                      {"path", path.string()}}
                           .dump()
                        << "\n";
            };

            for (std::size_t tap : loaded.taps) run_one(tap_tag(tap), {tap});
            if (loaded.taps.size() > 1) run_one("ensemble", loaded.taps);
        }
    }
}

// ---------------------------------------------------------------------------
// plot
// ---------------------------------------------------------------------------

void cmd_plot(const ExperimentConfig& config, std::ostream& log) {
    config.validate();
    const RunPaths paths{config.output_dir};
    const std::string train_fp = training_fingerprint(config);
    RunManifest manifest = require_manifest(paths, train_fp);

    std::vector<ReportSummary> summaries;
    for (const auto& record : manifest.artifacts) {
        if (record.kind != "report") continue;
        if (!std::filesystem::exists(record.path)) {
            throw IoError("report file " + record.path.string() + " is missing");
        }
        summaries.push_back(read_report_summary(record.path));
    }
    if (summaries.empty()) {
        throw ConfigError("manifest lists no reports; run evaluate first");
    }

    for (const EvalTask& task : config.eval.tasks) {
        std::vector<ReportSummary> for_task;
        for (const auto& s : summaries) {
            if (s.way == task.way && s.shot == task.shot) for_task.push_back(s);
        }
        if (for_task.empty()) continue;

        std::set<std::size_t> tap_groups;
        bool all_have_ensemble = !config.encoders.empty();
        for (const auto& entry : config.encoders) {
            bool has_ensemble = false;
            for (const auto& s : for_task) {
                if (s.encoder_id != entry.id) continue;
                if (s.tag == "ensemble") has_ensemble = true;
                else tap_groups.insert(std::stoul(s.tag.substr(3)));
            }
            all_have_ensemble = all_have_ensemble && has_ensemble;
        }

        std::vector<std::string> group_labels;
        std::vector<std::string> group_tags;
        for (std::size_t tap : tap_groups) {
            group_labels.push_back("tap " + std::to_string(tap));
            group_tags.push_back(tap_tag(tap));
        }
        if (all_have_ensemble) {
            group_labels.push_back("ensemble");
            group_tags.push_back("ensemble");
        }

        ChartSpec spec;
        spec.title = std::to_string(task.way) + "-way " + std::to_string(task.shot) +
                     "-shot accuracy";
        spec.y_label = "accuracy (%)";
        spec.group_labels = group_labels;
        for (const auto& entry : config.encoders) {
            ChartSeries series;
            series.name = entry.id;
            for (const std::string& tag : group_tags) {
                const ReportSummary* found = nullptr;
                for (const auto& s : for_task) {
                    if (s.encoder_id == entry.id && s.tag == tag) {
                        found = &s;
                        break;
                    }
                }
                if (found == nullptr) {
                    throw ConfigError("inconsistent reports: encoder '" + entry.id +
                                      "' has no report for group '" + tag + "' at " +
                                      task_suffix(task.way, task.shot));
                }
                series.values.push_back(found->mean_pct);
                series.errors.push_back(found->ci_pct);
            }
            spec.series.push_back(std::move(series));
        }

        write_chart(spec, paths.chart_png(task.way, task.shot),
                    paths.chart_json(task.way, task.shot), paths.chart_csv(task.way, task.shot));
        const std::string chart_id = task_suffix(task.way, task.shot);
        manifest.add_or_replace({"plot", chart_id, paths.chart_png(task.way, task.shot), train_fp,
                                 timestamp_utc()});
        manifest.add_or_replace({"data", chart_id, paths.chart_json(task.way, task.shot),
                                 train_fp, timestamp_utc()});
        manifest.save(paths.manifest());

        log << nlohmann::json{{"event", "plot"},
                              {"bars", spec.bar_count()},
                              {"png", paths.chart_png(task.way, task.shot).string()},
                              {"data", paths.chart_json(task.way, task.shot).string()}}
                   .dump()
            << "\n";
    }
}

void cmd_plot_from_data(const std::filesystem::path& chart_json,
                        const std::filesystem::path& out_png, std::ostream& log) {
    ChartSpec spec = load_chart(chart_json);
    ImageU8 img = render_bar_chart(spec);
    write_png(out_png, img);
    log << nlohmann::json{{"event", "plot"},
                          {"bars", spec.bar_count()},
                          {"png", out_png.string()},
                          {"data", chart_json.string()}}
               .dump()
        << "\n";
}

// ---------------------------------------------------------------------------
// list-taps
// ---------------------------------------------------------------------------

namespace {

void print_tap_table(const EncoderConfig& enc, const std::string& label, std::ostream& out) {
    const std::vector<TapShape> shapes = list_taps(enc);
    out << "encoder " << label << "  (" << enc.name << ", input " << enc.input_size
        << ", taps " << shapes.size() << ")\n";
    out << "tap  channels  height  width\n";
    for (const TapShape& s : shapes) {
        out << s.index << "  " << s.channels << "  " << s.height << "  " << s.width << "\n";
    }
}

} // namespace

void cmd_list_taps(const ExperimentConfig& config, std::ostream& out) {
    config.validate();
    for (const auto& entry : config.encoders) {
        print_tap_table(entry.encoder, entry.id, out);
    }
}

void cmd_list_taps_preset(const std::string& preset, std::ostream& out) {
    print_tap_table(encoder_preset(preset), preset, out);
}

} // namespace mlcl
