#include "mlcl/plot.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "mlcl/errors.hpp"
#include "mlcl/serialize.hpp"

namespace mlcl {

namespace {

struct Color {
    unsigned char r, g, b;
};

constexpr Color kBackground{255, 255, 255};
constexpr Color kAxis{40, 40, 40};
constexpr Color kGrid{225, 225, 225};
constexpr Color kText{40, 40, 40};
constexpr Color kErrorBar{70, 70, 70};

constexpr std::array<Color, 8> kPalette{{{66, 133, 244},
                                         {219, 68, 55},
                                         {244, 180, 0},
                                         {15, 157, 88},
                                         {171, 71, 188},
                                         {0, 172, 193},
                                         {255, 112, 67},
                                         {93, 109, 126}}};

// 5x7 glyphs, rows top to bottom, '1' = lit. Lowercase maps to uppercase.
const std::map<char, const char*>& font() {
    static const std::map<char, const char*> glyphs = {
        {'A', "01110100011000111111100011000110001"},
        {'B', "11110100011000111110100011000111110"},
        {'C', "01110100011000010000100001000101110"},
        {'D', "11110100011000110001100011000111110"},
        {'E', "11111100001000011110100001000011111"},
        {'F', "11111100001000011110100001000010000"},
        {'G', "01110100011000010111100011000101111"},
        {'H', "10001100011000111111100011000110001"},
        {'I', "01110001000010000100001000010001110"},
        {'J', "00111000100001000010000101001001100"},
        {'K', "10001100101010011000101001001010001"},
        {'L', "10000100001000010000100001000011111"},
        {'M', "10001110111010110101100011000110001"},
        {'N', "10001110011010110011100011000110001"},
        {'O', "01110100011000110001100011000101110"},
        {'P', "11110100011000111110100001000010000"},
        {'Q', "01110100011000110001101011001001101"},
        {'R', "11110100011000111110101001001010001"},
        {'S', "01111100001000001110000010000111110"},
        {'T', "11111001000010000100001000010000100"},
        {'U', "10001100011000110001100011000101110"},
        {'V', "10001100011000110001100010101000100"},
        {'W', "10001100011000110101101011101110001"},
        {'X', "10001100010101000100010101000110001"},
        {'Y', "10001100010101000100001000010000100"},
        {'Z', "11111000010001000100010001000011111"},
        {'0', "01110100011001110101110011000101110"},
        {'1', "00100011000010000100001000010001110"},
        {'2', "01110100010000100010001000100011111"},
        {'3', "11111000100010000010000011000101110"},
        {'4', "00010001100101010010111110001000010"},
        {'5', "11111100001111000001000011000101110"},
        {'6', "00110010001000011110100011000101110"},
        {'7', "11111000010001000100010000100001000"},
        {'8', "01110100011000101110100011000101110"},
        {'9', "01110100011000101111000010001001100"},
        {'.', "00000000000000000000000000110001100"},
        {',', "00000000000000000000001100010001000"},
        {'-', "00000000000000000111110000000000000"},
        {'+', "00000001000010011111001000010000000"},
        {'%', "11001110100001000100010000101110011"},
        {'(', "00010001000100001000010000010000010"},
        {')', "01000001000001000010000100010001000"},
        {':', "00000011000110000000011000110000000"},
        {'/', "00001000100001000100010000100010000"},
        {'=', "00000000001111100000111110000000000"},
        {'_', "00000000000000000000000000000011111"},
        {'\'', "00100001000000000000000000000000000"},
        {' ', "00000000000000000000000000000000000"},
    };
    return glyphs;
}

void set_px(ImageU8& img, long x, long y, Color c) {
    if (x < 0 || y < 0 || static_cast<std::size_t>(x) >= img.width ||
        static_cast<std::size_t>(y) >= img.height) {
        return;
    }
    const std::size_t base = (static_cast<std::size_t>(y) * img.width +
                              static_cast<std::size_t>(x)) *
                             img.channels;
    img.data[base] = c.r;
    img.data[base + 1] = c.g;
    img.data[base + 2] = c.b;
}

void fill_rect(ImageU8& img, long x0, long y0, long x1, long y1, Color c) {
    for (long y = std::min(y0, y1); y <= std::max(y0, y1); ++y) {
        for (long x = std::min(x0, x1); x <= std::max(x0, x1); ++x) {
            set_px(img, x, y, c);
        }
    }
}

void draw_hline(ImageU8& img, long x0, long x1, long y, Color c) {
    fill_rect(img, x0, y, x1, y, c);
}

void draw_vline(ImageU8& img, long x, long y0, long y1, Color c) {
    fill_rect(img, x, y0, x, y1, c);
}

std::size_t text_width(const std::string& text, std::size_t scale) {
    if (text.empty()) return 0;
    return text.size() * 6 * scale - scale;
}

void draw_text(ImageU8& img, long x, long y, const std::string& text, std::size_t scale,
               Color c) {
    const auto& glyphs = font();
    long cx = x;
    for (char raw : text) {
        char ch = static_cast<char>(std::toupper(static_cast<unsigned char>(raw)));
        auto it = glyphs.find(ch);
        if (it == glyphs.end()) it = glyphs.find(' ');
        const char* bits = it->second;
        for (std::size_t row = 0; row < 7; ++row) {
            for (std::size_t col = 0; col < 5; ++col) {
                if (bits[row * 5 + col] != '1') continue;
                const long px = cx + static_cast<long>(col * scale);
                const long py = y + static_cast<long>(row * scale);
                for (std::size_t dy = 0; dy < scale; ++dy) {
                    for (std::size_t dx = 0; dx < scale; ++dx) {
                        set_px(img, px + static_cast<long>(dx), py + static_cast<long>(dy), c);
                    }
                }
            }
        }
        cx += static_cast<long>(6 * scale);
    }
}

void draw_text_centered(ImageU8& img, long cx, long y, const std::string& text,
                        std::size_t scale, Color c) {
    draw_text(img, cx - static_cast<long>(text_width(text, scale) / 2), y, text, scale, c);
}

std::string format_tick(double v) {
    char buf[48];
    const double mag = std::fabs(v);
    if (v != 0.0 && (mag >= 10000.0 || mag < 0.01)) {
        std::snprintf(buf, sizeof(buf), "%.1e", v);
    } else if (std::fabs(v - std::round(v)) < 1e-9) {
        std::snprintf(buf, sizeof(buf), "%.0f", v);
    } else {
        std::snprintf(buf, sizeof(buf), "%.2f", v);
    }
    return buf;
}

double nice_step(double raw) {
    if (raw <= 0.0) return 1.0;
    const double mag = std::pow(10.0, std::floor(std::log10(raw)));
    const double frac = raw / mag;
    double nice;
    if (frac <= 1.0) {
        nice = 1.0;
    } else if (frac <= 2.0) {
        nice = 2.0;
    } else if (frac <= 5.0) {
        nice = 5.0;
    } else {
        nice = 10.0;
    }
    return nice * mag;
}

std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    out += "\"";
    return out;
}

} // namespace

void ChartSpec::validate() const {
    if (group_labels.empty()) throw ConfigError("chart has no groups");
    if (series.empty()) throw ConfigError("chart has no series");
    if (width < 200 || height < 150) throw ConfigError("chart size must be at least 200x150");
    for (const auto& s : series) {
        if (s.values.size() != group_labels.size()) {
            throw ConfigError("series '" + s.name + "' has " + std::to_string(s.values.size()) +
                              " values for " + std::to_string(group_labels.size()) + " groups");
        }
        if (!s.errors.empty() && s.errors.size() != s.values.size()) {
            throw ConfigError("series '" + s.name + "' error count does not match its values");
        }
        for (double v : s.values) {
            if (!std::isfinite(v)) throw ConfigError("series '" + s.name + "' has a non-finite value");
        }
        for (double e : s.errors) {
            if (!std::isfinite(e) || e < 0.0) {
                throw ConfigError("series '" + s.name + "' has a negative or non-finite error");
            }
        }
    }
    if (y_min > y_max) throw ConfigError("chart y_min exceeds y_max");
}

void to_json(nlohmann::json& j, const ChartSeries& s) {
    j = nlohmann::json{{"name", s.name}, {"values", s.values}, {"errors", s.errors}};
}

void from_json(const nlohmann::json& j, ChartSeries& s) {
    s.name = j.value("name", std::string{});
    s.values = j.value("values", std::vector<double>{});
    s.errors = j.value("errors", std::vector<double>{});
}

void to_json(nlohmann::json& j, const ChartSpec& c) {
    j = nlohmann::json{{"title", c.title},
                       {"y_label", c.y_label},
                       {"group_labels", c.group_labels},
                       {"series", c.series},
                       {"width", c.width},
                       {"height", c.height},
                       {"y_min", c.y_min},
                       {"y_max", c.y_max}};
}

void from_json(const nlohmann::json& j, ChartSpec& c) {
    ChartSpec defaults;
    c.title = j.value("title", std::string{});
    c.y_label = j.value("y_label", std::string{});
    c.group_labels = j.value("group_labels", std::vector<std::string>{});
    c.series.clear();
    if (j.contains("series")) {
        for (const auto& s : j.at("series")) c.series.push_back(s.get<ChartSeries>());
    }
    c.width = j.value("width", defaults.width);
    c.height = j.value("height", defaults.height);
    c.y_min = j.value("y_min", defaults.y_min);
    c.y_max = j.value("y_max", defaults.y_max);
}

ImageU8 render_bar_chart(const ChartSpec& spec) {
    spec.validate();

    ImageU8 img;
    img.width = spec.width;
    img.height = spec.height;
    img.channels = 3;
    img.data.assign(img.width * img.height * 3, 0);
    fill_rect(img, 0, 0, static_cast<long>(img.width) - 1, static_cast<long>(img.height) - 1,
              kBackground);

    const long left = 78;
    const long right = static_cast<long>(img.width) - 24;
    const long top = 56;
    const long bottom = static_cast<long>(img.height) - 58;

    double lo = spec.y_min, hi = spec.y_max;
    if (lo == hi) {
        lo = 0.0;
        double peak = 0.0;
        for (const auto& s : spec.series) {
            for (std::size_t g = 0; g < s.values.size(); ++g) {
                const double err = s.errors.empty() ? 0.0 : s.errors[g];
                peak = std::max(peak, s.values[g] + err);
                lo = std::min(lo, s.values[g] - err);
            }
        }
        if (peak <= lo) peak = lo + 1.0;
        const double step = nice_step((peak - lo) / 5.0);
        hi = step * std::ceil(peak / step);
        if (hi <= lo) hi = lo + step;
        lo = step * std::floor(lo / step);
    }
    const double span = hi - lo;

    auto y_of = [&](double v) {
        double clamped = std::clamp(v, lo, hi);
        const double frac = (clamped - lo) / span;
        return static_cast<long>(std::lround(bottom - frac * (bottom - top)));
    };

    if (!spec.title.empty()) {
        draw_text_centered(img, (left + right) / 2, 12, spec.title, 2, kText);
    }

    const int tick_count = 5;
    for (int t = 0; t <= tick_count; ++t) {
        const double v = lo + span * t / tick_count;
        const long y = y_of(v);
        if (t > 0) draw_hline(img, left + 1, right, y, kGrid);
        const std::string label = format_tick(v);
        draw_text(img, left - 8 - static_cast<long>(text_width(label, 1)),
                  y - 3, label, 1, kText);
    }

    const std::size_t groups = spec.group_labels.size();
    const std::size_t nseries = spec.series.size();
    const double group_w = static_cast<double>(right - left) / static_cast<double>(groups);
    const double bar_w = group_w * 0.8 / static_cast<double>(nseries);

    for (std::size_t g = 0; g < groups; ++g) {
        const double gx = left + group_w * static_cast<double>(g) + group_w * 0.1;
        for (std::size_t s = 0; s < nseries; ++s) {
            const Color color = kPalette[s % kPalette.size()];
            const double v = spec.series[s].values[g];
            const long x0 = static_cast<long>(std::lround(gx + bar_w * static_cast<double>(s))) + 1;
            const long x1 = static_cast<long>(std::lround(gx + bar_w * static_cast<double>(s + 1))) - 1;
            const long base_y = y_of(std::max(lo, 0.0));
            const long val_y = y_of(v);
            fill_rect(img, x0, std::min(base_y, val_y), std::max(x0, x1),
                      std::max(base_y, val_y), color);
            if (!spec.series[s].errors.empty()) {
                const double e = spec.series[s].errors[g];
                if (e > 0.0) {
                    const long cx = (x0 + std::max(x0, x1)) / 2;
                    const long ey0 = y_of(v - e);
                    const long ey1 = y_of(v + e);
                    draw_vline(img, cx, ey1, ey0, kErrorBar);
                    draw_hline(img, cx - 3, cx + 3, ey0, kErrorBar);
                    draw_hline(img, cx - 3, cx + 3, ey1, kErrorBar);
                }
            }
        }
        draw_text_centered(img, static_cast<long>(std::lround(left + group_w * (g + 0.5))),
                           bottom + 8, spec.group_labels[g], 1, kText);
    }

    draw_hline(img, left, right, bottom, kAxis);
    draw_vline(img, left, top, bottom, kAxis);

    if (!spec.y_label.empty()) {
        draw_text(img, left - 68, top - 22, spec.y_label, 1, kText);
    }

    long lx = left;
    const long ly = static_cast<long>(img.height) - 30;
    for (std::size_t s = 0; s < nseries; ++s) {
        const Color color = kPalette[s % kPalette.size()];
        fill_rect(img, lx, ly, lx + 10, ly + 6, color);
        draw_text(img, lx + 14, ly, spec.series[s].name, 1, kText);
        lx += 14 + static_cast<long>(text_width(spec.series[s].name, 1)) + 18;
    }

    return img;
}

std::string chart_csv(const ChartSpec& spec) {
    spec.validate();
    std::ostringstream out;
    out << "group,series,value,error\n";
    char buf[64];
    for (std::size_t g = 0; g < spec.group_labels.size(); ++g) {
        for (const auto& s : spec.series) {
            out << csv_escape(spec.group_labels[g]) << ',' << csv_escape(s.name) << ',';
            std::snprintf(buf, sizeof(buf), "%.17g", s.values[g]);
            out << buf << ',';
            std::snprintf(buf, sizeof(buf), "%.17g", s.errors.empty() ? 0.0 : s.errors[g]);
            out << buf << '\n';
        }
    }
    return out.str();
}

void write_chart(const ChartSpec& spec, const std::filesystem::path& png_path,
                 const std::filesystem::path& json_path, const std::filesystem::path& csv_path) {
    ImageU8 img = render_bar_chart(spec);
    write_png(png_path, img);
    nlohmann::json j = spec;
    atomic_write_text(json_path, j.dump(2) + "\n");
    atomic_write_text(csv_path, chart_csv(spec));
}

ChartSpec load_chart(const std::filesystem::path& json_path) {
    std::ifstream in(json_path);
    if (!in) throw IoError("cannot open chart data " + json_path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw IoError("chart data " + json_path.string() + " is not valid JSON: " + e.what());
    }
    ChartSpec spec = j.get<ChartSpec>();
    spec.validate();
    return spec;
}

} // namespace mlcl
