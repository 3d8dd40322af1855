#ifndef MLCL_COMMANDS_HPP
#define MLCL_COMMANDS_HPP

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>

#include "mlcl/config.hpp"

namespace mlcl {

/// Flag bundle shared by the CLI subcommands.
struct CommandOptions {
    std::filesystem::path config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> episodes;
    std::optional<std::string> output_dir;
    bool smoke = false;
    std::size_t smoke_factor = 10;
};

/// Loads the config and applies the CLI overrides (seed, episodes, output
/// dir, smoke shrink), then re-validates.
ExperimentConfig resolve_config(const CommandOptions& options);

/// Identity of the run ignoring where it is written.
std::string config_fingerprint(const ExperimentConfig& config);
/// Identity of the trained artifacts: also ignores the evaluation protocol,
/// so an episode override can still consume existing checkpoints.
std::string training_fingerprint(const ExperimentConfig& config);

/// Canonical artifact locations under the run's output directory.
struct RunPaths {
    std::filesystem::path root;

    std::filesystem::path manifest() const { return root / "manifest.json"; }
    std::filesystem::path config_copy() const { return root / "config.json"; }
    std::filesystem::path encoder(const std::string& id) const;
    std::filesystem::path trainstate(const std::string& id) const;
    std::filesystem::path pretrain_metrics(const std::string& id) const;
    std::filesystem::path relation_net(const std::string& id, std::size_t tap) const;
    std::filesystem::path relation_metrics(const std::string& id, std::size_t tap) const;
    std::filesystem::path report(const std::string& id, const std::string& tag, std::size_t way,
                                 std::size_t shot) const;
    std::filesystem::path chart_png(std::size_t way, std::size_t shot) const;
    std::filesystem::path chart_json(std::size_t way, std::size_t shot) const;
    std::filesystem::path chart_csv(std::size_t way, std::size_t shot) const;
};

/// Pretrains every configured encoder (resuming from checkpoints when
/// present) and records encoder/trainstate/metrics artifacts.
void cmd_pretrain(const ExperimentConfig& config, std::ostream& log);

/// Trains one relation net per (encoder, tap) named by each entry's tap
/// expression against the frozen pretrained encoders.
void cmd_train_relations(const ExperimentConfig& config, std::ostream& log);

/// Runs the episodic protocol for every (way, shot) task: one report per
/// single tap and one for the full ensemble of each encoder entry.
void cmd_evaluate(const ExperimentConfig& config, std::ostream& log,
                  bool episodes_overridden = false);

/// Builds one grouped bar chart (figure + data + csv) per (way, shot) task
/// from the manifest's reports.
void cmd_plot(const ExperimentConfig& config, std::ostream& log);

/// Re-renders a figure from a previously emitted chart data file.
void cmd_plot_from_data(const std::filesystem::path& chart_json,
                        const std::filesystem::path& out_png, std::ostream& log);

/// Prints the tap table (index, channels, spatial size) per encoder.
void cmd_list_taps(const ExperimentConfig& config, std::ostream& out);
void cmd_list_taps_preset(const std::string& preset, std::ostream& out);

} // namespace mlcl

#endif
