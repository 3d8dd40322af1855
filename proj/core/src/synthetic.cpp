#include "mlcl/synthetic.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "mlcl/errors.hpp"
#include "mlcl/image.hpp"
#include "mlcl/rng.hpp"
#include "mlcl/serialize.hpp"

namespace mlcl {

namespace {

struct Vec2 {
    double x, y;
};

// ---------------------------------------------------------------------------
// Signed distance fields on roughly unit-sized shapes centered at the origin.
// Negative inside.
// ---------------------------------------------------------------------------

double sdf_circle(Vec2 p) { return std::hypot(p.x, p.y) - 0.95; }

double sdf_ring(Vec2 p) { return std::abs(std::hypot(p.x, p.y) - 0.72) - 0.24; }

double sdf_box(Vec2 p) { return std::max(std::abs(p.x), std::abs(p.y)) - 0.82; }

double sdf_frame(Vec2 p) {
    return std::abs(std::max(std::abs(p.x), std::abs(p.y)) - 0.68) - 0.2;
}

double sdf_cross(Vec2 p) {
    double bar_h = std::max(std::abs(p.x) - 0.95, std::abs(p.y) - 0.34);
    double bar_v = std::max(std::abs(p.x) - 0.34, std::abs(p.y) - 0.95);
    return std::min(bar_h, bar_v);
}

double sdf_polygon(Vec2 p, const std::vector<Vec2>& v) {
    double d2 = 1e30;
    bool inside = false;
    for (std::size_t i = 0, j = v.size() - 1; i < v.size(); j = i++) {
        Vec2 e{v[j].x - v[i].x, v[j].y - v[i].y};
        Vec2 w{p.x - v[i].x, p.y - v[i].y};
        double t = std::clamp((w.x * e.x + w.y * e.y) / (e.x * e.x + e.y * e.y), 0.0, 1.0);
        Vec2 b{w.x - e.x * t, w.y - e.y * t};
        d2 = std::min(d2, b.x * b.x + b.y * b.y);
        // Even-odd crossing test for the sign.
        if ((v[i].y > p.y) != (v[j].y > p.y)) {
            double xi = v[i].x + (p.y - v[i].y) / (v[j].y - v[i].y) * (v[j].x - v[i].x);
            if (p.x < xi) inside = !inside;
        }
    }
    return (inside ? -1.0 : 1.0) * std::sqrt(d2);
}

std::vector<Vec2> regular_polygon(std::size_t sides, double radius, double phase) {
    std::vector<Vec2> v(sides);
    for (std::size_t i = 0; i < sides; ++i) {
        double a = phase + 2.0 * M_PI * static_cast<double>(i) / static_cast<double>(sides);
        v[i] = {radius * std::cos(a), radius * std::sin(a)};
    }
    return v;
}

std::vector<Vec2> star_polygon(std::size_t points, double r_outer, double r_inner) {
    std::vector<Vec2> v(2 * points);
    for (std::size_t i = 0; i < 2 * points; ++i) {
        double r = i % 2 == 0 ? r_outer : r_inner;
        double a = -M_PI / 2.0 + M_PI * static_cast<double>(i) / static_cast<double>(points);
        v[i] = {r * std::cos(a), r * std::sin(a)};
    }
    return v;
}

double sdf_crescent(Vec2 p) {
    double d1 = std::hypot(p.x, p.y) - 0.9;
    double d2 = std::hypot(p.x - 0.5, p.y) - 0.72;
    return std::max(d1, -d2);
}

constexpr std::array<const char*, 8> kShapes = {"circle", "ring",    "box",  "frame",
                                                "cross",  "triangle", "star", "crescent"};

double shape_sdf(std::size_t shape, Vec2 p) {
    switch (shape) {
        case 0: return sdf_circle(p);
        case 1: return sdf_ring(p);
        case 2: return sdf_box(p);
        case 3: return sdf_frame(p);
        case 4: return sdf_cross(p);
        case 5: {
            static const std::vector<Vec2> tri = regular_polygon(3, 1.0, -M_PI / 2.0);
            return sdf_polygon(p, tri);
        }
        case 6: {
            static const std::vector<Vec2> star = star_polygon(5, 1.0, 0.45);
            return sdf_polygon(p, star);
        }
        case 7: return sdf_crescent(p);
    }
    return 1.0;
}

// ---------------------------------------------------------------------------
// Texture masks in [0, 1] over shape-local coordinates.
// ---------------------------------------------------------------------------

constexpr std::array<const char*, 5> kTextures = {"solid", "stripes", "checker", "dots",
                                                  "radial"};

struct TextureParams {
    double phase = 0.0;
    double angle = 0.0;
    double freq = 1.0;
};

double texture_mask(std::size_t texture, Vec2 p, const TextureParams& tp) {
    switch (texture) {
        case 0: return 1.0;
        case 1: {
            double axis = p.x * std::cos(tp.angle) + p.y * std::sin(tp.angle);
            return std::sin(tp.freq * axis * M_PI + tp.phase) > 0.0 ? 1.0 : 0.25;
        }
        case 2: {
            auto cell = [&](double v, double ph) {
                return static_cast<long>(std::floor(v * tp.freq * 0.5 + ph));
            };
            return (cell(p.x, tp.phase) + cell(p.y, 0.0)) % 2 == 0 ? 1.0 : 0.3;
        }
        case 3: {
            double g = tp.freq * 0.45;
            double fx = p.x * g + tp.phase - std::floor(p.x * g + tp.phase) - 0.5;
            double fy = p.y * g - std::floor(p.y * g) - 0.5;
            return std::hypot(fx, fy) < 0.28 ? 1.0 : 0.3;
        }
        case 4: {
            double r = std::hypot(p.x, p.y);
            return std::sin(tp.freq * r * M_PI + tp.phase) > 0.0 ? 1.0 : 0.3;
        }
    }
    return 1.0;
}

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
    h = h - std::floor(h);
    double c = v * s;
    double hp = h * 6.0;
    double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    double r = 0, g = 0, b = 0;
    if (hp < 1) { r = c; g = x; }
    else if (hp < 2) { r = x; g = c; }
    else if (hp < 3) { g = c; b = x; }
    else if (hp < 4) { g = x; b = c; }
    else if (hp < 5) { r = x; b = c; }
    else { r = c; b = x; }
    double m = v - c;
    return {r + m, g + m, b + m};
}

struct ComboId {
    std::size_t shape;
    std::size_t texture;
    std::size_t index; // global combo index, stable across splits
};

ImageU8 render_image(const SyntheticConfig& cfg, const ComboId& combo, bool correlated_hue,
                     Rng& rng) {
    const std::size_t s = cfg.image_size;
    // Pose jitter.
    const double theta = rng.uniform(0.0, 2.0 * M_PI);
    const double scale = rng.uniform(0.5, 0.8);
    const double cx = rng.uniform(-0.14, 0.14);
    const double cy = rng.uniform(-0.14, 0.14);

    // Hue either class-determined (golden-ratio spacing) or free.
    const double class_hue = std::fmod(0.61803398875 * static_cast<double>(combo.index), 1.0);
    double hue;
    if (correlated_hue && rng.bernoulli(cfg.hue_class_correlation)) {
        hue = class_hue + rng.uniform(-0.02, 0.02);
    } else {
        hue = rng.uniform(0.0, 1.0);
    }
    const double sat = rng.uniform(0.65, 0.9);
    auto fg_hi = hsv_to_rgb(hue, sat, rng.uniform(0.8, 0.95));
    auto fg_lo = hsv_to_rgb(hue, sat, 0.35);
    auto bg = hsv_to_rgb(rng.uniform(0.0, 1.0), 0.25, rng.uniform(0.1, 0.22));

    TextureParams tp;
    tp.phase = rng.uniform(0.0, 2.0 * M_PI);
    tp.angle = rng.uniform(0.0, M_PI);
    tp.freq = rng.uniform(4.0, 7.0);

    const double cosr = std::cos(-theta), sinr = std::sin(-theta);
    const double aa = 2.0 / (static_cast<double>(s) * scale); // edge softness in shape units

    Tensor img({3, s, s});
    for (std::size_t y = 0; y < s; ++y) {
        for (std::size_t x = 0; x < s; ++x) {
            double cov = 0.0, mask = 0.0;
            // 2x2 supersampling.
            for (int sy = 0; sy < 2; ++sy) {
                for (int sx = 0; sx < 2; ++sx) {
                    double u = (static_cast<double>(x) + 0.25 + 0.5 * sx) /
                                   static_cast<double>(s) * 2.0 - 1.0 - cx;
                    double v = (static_cast<double>(y) + 0.25 + 0.5 * sy) /
                                   static_cast<double>(s) * 2.0 - 1.0 - cy;
                    Vec2 p{(u * cosr - v * sinr) / scale, (u * sinr + v * cosr) / scale};
                    double d = shape_sdf(combo.shape, p);
                    double c = std::clamp(0.5 - d / (2.0 * aa), 0.0, 1.0);
                    cov += c;
                    mask += texture_mask(combo.texture, p, tp) * c;
                }
            }
            cov *= 0.25;
            mask = cov > 1e-9 ? mask * 0.25 / cov : 0.0;
            for (std::size_t ch = 0; ch < 3; ++ch) {
                double fg = fg_lo[ch] + (fg_hi[ch] - fg_lo[ch]) * mask;
                img.at3(ch, y, x) = bg[ch] * (1.0 - cov) + fg * cov;
            }
        }
    }
    return tensor_to_image_u8(img);
}

struct SplitPlan {
    Split split;
    std::size_t class_count;
    std::size_t images_per_class;
    bool correlated_hue;
};

std::vector<ComboId> assign_combos(const SyntheticConfig& cfg) {
    std::vector<ComboId> combos;
    for (std::size_t t = 0; t < kTextures.size(); ++t) {
        for (std::size_t sh = 0; sh < kShapes.size(); ++sh) {
            combos.push_back({sh, t, combos.size()});
        }
    }
    Rng rng(derive_seed(cfg.seed, 0x5eed));
    rng.shuffle(combos);
    return combos;
}

std::string combo_name(const ComboId& c) {
    return std::string(kShapes[c.shape]) + "_" + kTextures[c.texture];
}

template <typename Emit>
void generate(const SyntheticConfig& cfg, Emit&& emit) {
    cfg.validate();
    auto combos = assign_combos(cfg);
    const std::array<SplitPlan, 3> plans = {{
        {Split::train, cfg.train_classes, cfg.images_per_class_train,
         cfg.hue_class_correlation > 0.0},
        {Split::val, cfg.val_classes, cfg.images_per_class_eval, false},
        {Split::test, cfg.test_classes, cfg.images_per_class_eval, false},
    }};
    std::size_t next = 0;
    for (const auto& plan : plans) {
        for (std::size_t c = 0; c < plan.class_count; ++c) {
            const ComboId& combo = combos[next++];
            for (std::size_t i = 0; i < plan.images_per_class; ++i) {
                Rng rng(derive_seed(derive_seed(cfg.seed, combo.index), i));
                emit(plan.split, combo_name(combo),
                     render_image(cfg, combo, plan.correlated_hue, rng), i);
            }
        }
    }
}

} // namespace

void SyntheticConfig::validate() const {
    if (image_size < 8) throw ConfigError("synthetic image_size must be at least 8");
    const std::size_t total = train_classes + val_classes + test_classes;
    if (train_classes == 0 || test_classes == 0) {
        throw ConfigError("synthetic dataset needs train and test classes");
    }
    if (total > synthetic_class_limit()) {
        throw ConfigError("requested " + std::to_string(total) + " classes; only " +
                          std::to_string(synthetic_class_limit()) + " shape/texture combos exist");
    }
    if (images_per_class_train == 0 || images_per_class_eval == 0) {
        throw ConfigError("images per class must be positive");
    }
    if (hue_class_correlation < 0.0 || hue_class_correlation > 1.0) {
        throw ConfigError("hue_class_correlation must be in [0, 1]");
    }
}

void to_json(nlohmann::json& j, const SyntheticConfig& c) {
    j = {{"image_size", c.image_size},
         {"train_classes", c.train_classes},
         {"val_classes", c.val_classes},
         {"test_classes", c.test_classes},
         {"images_per_class_train", c.images_per_class_train},
         {"images_per_class_eval", c.images_per_class_eval},
         {"hue_class_correlation", c.hue_class_correlation},
         {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, SyntheticConfig& c) {
    SyntheticConfig d;
    c.image_size = j.value("image_size", d.image_size);
    c.train_classes = j.value("train_classes", d.train_classes);
    c.val_classes = j.value("val_classes", d.val_classes);
    c.test_classes = j.value("test_classes", d.test_classes);
    c.images_per_class_train = j.value("images_per_class_train", d.images_per_class_train);
    c.images_per_class_eval = j.value("images_per_class_eval", d.images_per_class_eval);
    c.hue_class_correlation = j.value("hue_class_correlation", d.hue_class_correlation);
    c.seed = j.value("seed", d.seed);
}

std::size_t synthetic_class_limit() { return kShapes.size() * kTextures.size(); }

SplitDataset make_synthetic_dataset(const SyntheticConfig& config) {
    SplitDataset ds;
    ds.image_size = config.image_size;
    generate(config, [&](Split split, const std::string& cls, ImageU8 img, std::size_t) {
        auto& classes = ds.split(split);
        if (classes.empty() || classes.back().name != cls) classes.push_back({cls, {}});
        classes.back().images.push_back(std::move(img));
    });
    for (Split s : {Split::train, Split::val, Split::test}) {
        auto& classes = ds.split(s);
        std::sort(classes.begin(), classes.end(),
                  [](const auto& a, const auto& b) { return a.name < b.name; });
    }
    return ds;
}

void write_synthetic_dataset(const std::filesystem::path& root, const SyntheticConfig& config) {
    std::string manifest;
    generate(config, [&](Split split, const std::string& cls, ImageU8 img, std::size_t i) {
        auto dir = root / split_name(split) / cls;
        std::filesystem::create_directories(dir);
        std::string file = cls + "_" + std::to_string(i) + ".png";
        write_png(dir / file, img);
        manifest += std::string(split_name(split)) + "/" + cls + "/" + file + " " +
                    split_name(split) + " " + cls + "\n";
    });
    atomic_write_text(root / "manifest.txt", manifest);
}

} // namespace mlcl
