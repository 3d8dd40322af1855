#ifndef MLCL_PLOT_HPP
#define MLCL_PLOT_HPP

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mlcl/image.hpp"

namespace mlcl {

/// One bar per group for this series; `errors` (optional) draws symmetric
/// error bars.
struct ChartSeries {
    std::string name;
    std::vector<double> values;
    std::vector<double> errors;
};

void to_json(nlohmann::json& j, const ChartSeries& s);
void from_json(const nlohmann::json& j, ChartSeries& s);

/// Grouped bar chart: `group_labels` along x, one colored bar per series
/// inside each group. Rendering is fully deterministic, so a chart re-built
/// from its emitted data file is byte-identical.
struct ChartSpec {
    std::string title;
    std::string y_label;
    std::vector<std::string> group_labels;
    std::vector<ChartSeries> series;
    std::size_t width = 900;
    std::size_t height = 540;
    double y_min = 0.0; // y_min == y_max means automatic range
    double y_max = 0.0;

    void validate() const;
    std::size_t bar_count() const { return group_labels.size() * series.size(); }
};

void to_json(nlohmann::json& j, const ChartSpec& c);
void from_json(const nlohmann::json& j, ChartSpec& c);

ImageU8 render_bar_chart(const ChartSpec& spec);

/// `group,series,value,error` rows, group-major, full double precision.
std::string chart_csv(const ChartSpec& spec);

/// Writes the figure (PNG), the chart data (JSON, sufficient to re-render),
/// and the CSV table.
void write_chart(const ChartSpec& spec, const std::filesystem::path& png_path,
                 const std::filesystem::path& json_path, const std::filesystem::path& csv_path);

ChartSpec load_chart(const std::filesystem::path& json_path);

} // namespace mlcl

#endif
