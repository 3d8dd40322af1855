#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "mlcl/commands.hpp"

namespace {

struct CliState {
    mlcl::CommandOptions options;
    std::string config_path;
    std::uint64_t seed = 0;
    std::size_t episodes = 0;
    std::string output_dir;
    std::string preset;
    std::string from_data;
    std::string out_png = "chart.png";
};

void add_common_flags(CLI::App* cmd, CliState& state, bool needs_config) {
    auto* config = cmd->add_option("-c,--config", state.config_path, "experiment config file");
    if (needs_config) config->required();
    cmd->add_option("--seed", state.seed, "override the experiment seed");
    cmd->add_option("--output-dir", state.output_dir, "override the output directory");
    cmd->add_flag("--smoke", state.options.smoke,
                  "shrink epochs/episodes by the smoke factor for a fast pipeline check");
    cmd->add_option("--smoke-factor", state.options.smoke_factor,
                    "divisor applied by --smoke (default 10)");
}

mlcl::ExperimentConfig finish_options(CliState& state, const CLI::App* cmd) {
    state.options.config_path = state.config_path;
    auto given = [cmd](const std::string& name) {
        const CLI::Option* opt = cmd->get_option_no_throw(name);
        return opt != nullptr && opt->count() > 0;
    };
    if (given("--seed")) state.options.seed = state.seed;
    if (given("--episodes")) state.options.episodes = state.episodes;
    if (given("--output-dir")) state.options.output_dir = state.output_dir;
    return mlcl::resolve_config(state.options);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"multi-level contrastive pretraining and few-shot evaluation"};
    app.require_subcommand(1);
    app.set_version_flag("--version", mlcl::kToolVersion);

    CliState state;

    CLI::App* pretrain = app.add_subcommand("pretrain", "pretrain every configured encoder");
    add_common_flags(pretrain, state, true);

    CLI::App* relations = app.add_subcommand(
        "train-relations", "train one relation net per configured (encoder, tap)");
    add_common_flags(relations, state, true);

    CLI::App* evaluate = app.add_subcommand("evaluate", "run the episodic evaluation protocol");
    add_common_flags(evaluate, state, true);
    evaluate->add_option("--episodes", state.episodes,
                         "override the number of evaluation episodes");

    CLI::App* plot = app.add_subcommand("plot", "render grouped bar charts from reports");
    add_common_flags(plot, state, false);
    plot->add_option("--from-data", state.from_data, "re-render a figure from a chart data file");
    plot->add_option("--out", state.out_png, "output figure path for --from-data");

    CLI::App* list_taps = app.add_subcommand("list-taps", "print the tap table per encoder");
    list_taps->add_option("-c,--config", state.config_path, "experiment config file");
    list_taps->add_option("--preset", state.preset, "print taps for a stock encoder preset");

    CLI11_PARSE(app, argc, argv);

    try {
        if (pretrain->parsed()) {
            mlcl::cmd_pretrain(finish_options(state, pretrain), std::cout);
        } else if (relations->parsed()) {
            mlcl::cmd_train_relations(finish_options(state, relations), std::cout);
        } else if (evaluate->parsed()) {
            const bool episodes_overridden = evaluate->count("--episodes") > 0;
            mlcl::cmd_evaluate(finish_options(state, evaluate), std::cout, episodes_overridden);
        } else if (plot->parsed()) {
            if (!state.from_data.empty()) {
                mlcl::cmd_plot_from_data(state.from_data, state.out_png, std::cout);
            } else if (!state.config_path.empty()) {
                mlcl::cmd_plot(finish_options(state, plot), std::cout);
            } else {
                throw mlcl::ConfigError("plot needs --config or --from-data");
            }
        } else if (list_taps->parsed()) {
            if (!state.preset.empty()) {
                mlcl::cmd_list_taps_preset(state.preset, std::cout);
            } else if (!state.config_path.empty()) {
                mlcl::CommandOptions options;
                options.config_path = state.config_path;
                mlcl::cmd_list_taps(mlcl::resolve_config(options), std::cout);
            } else {
                throw mlcl::ConfigError("list-taps needs --config or --preset");
            }
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
