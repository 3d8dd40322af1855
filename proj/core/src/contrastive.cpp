#include "mlcl/contrastive.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Dense>

#include "mlcl/errors.hpp"

namespace mlcl {

namespace {

using MatrixRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const MatrixRM> cmap2d(const Tensor& t) {
    return {t.data(), static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1))};
}

Eigen::Map<MatrixRM> map2d(Tensor& t) {
    return {t.data(), static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1))};
}

void check_pairing(const std::vector<std::size_t>& pairing, std::size_t n) {
    if (pairing.size() != n) {
        throw ShapeError("pairing size " + std::to_string(pairing.size()) + " != batch size " +
                         std::to_string(n));
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (pairing[i] >= n || pairing[i] == i || pairing[pairing[i]] != i) {
            throw ShapeError("pairing must be a fixed-point-free involution");
        }
    }
}

void check_batch(const Tensor& z, double temperature) {
    if (temperature <= 0.0) throw NumericError("temperature must be positive");
    if (z.ndim() != 2) throw ShapeError("expected [2B, dim] projections, got " + z.shape_str());
    if (z.dim(0) < 2 || z.dim(0) % 2 != 0) {
        throw ShapeError("projection batch must have even size >= 2, got " +
                         std::to_string(z.dim(0)));
    }
}

} // namespace

double cosine_similarity(const Tensor& u, const Tensor& w) {
    if (u.ndim() != 1 || w.ndim() != 1 || u.numel() != w.numel()) {
        throw ShapeError("cosine similarity needs equal-length vectors, got " + u.shape_str() +
                         " and " + w.shape_str());
    }
    double dot = 0.0, nu = 0.0, nw = 0.0;
    for (std::size_t i = 0; i < u.numel(); ++i) {
        dot += u[i] * w[i];
        nu += u[i] * u[i];
        nw += w[i] * w[i];
    }
    if (nu <= 0.0 || nw <= 0.0) throw NumericError("cosine similarity of a zero vector");
    return std::clamp(dot / (std::sqrt(nu) * std::sqrt(nw)), -1.0, 1.0);
}

// ---------------------------------------------------------------------------
// ProjectionHead
// ---------------------------------------------------------------------------

ProjectionHead::ProjectionHead(std::size_t level, std::size_t input_dim, std::size_t output_dim)
    : level_(level),
      input_dim_(input_dim),
      output_dim_(output_dim),
      fc1_(input_dim, input_dim),
      fc2_(input_dim, output_dim) {
    if (input_dim == 0) throw ConfigError("projection input_dim must be positive");
    if (output_dim == 0) throw ConfigError("projection output_dim must be positive");
}

void ProjectionHead::init(Rng& rng) {
    fc1_.init(rng);
    fc2_.init(rng);
}

Tensor ProjectionHead::project(const Tensor& feature, bool retain) {
    if (feature.ndim() != 4 || feature.dim(1) != input_dim_) {
        throw ShapeError("projection head at tap " + std::to_string(level_) + " expects [N, " +
                         std::to_string(input_dim_) + ", H, W], got " + feature.shape_str());
    }
    Tensor x = pool_.forward(feature, retain);
    x = fc1_.forward(x, retain);
    x = relu_.forward(x, retain);
    x = fc2_.forward(x, retain);
    try {
        return norm_.forward(x, retain);
    } catch (const NumericError& e) {
        throw NumericError("projection head at tap " + std::to_string(level_) + ": " + e.what());
    }
}

Tensor ProjectionHead::backward(const Tensor& dz) {
    Tensor d = norm_.backward(dz);
    d = fc2_.backward(d);
    d = relu_.backward(d);
    d = fc1_.backward(d);
    return pool_.backward(d);
}

void ProjectionHead::collect(const std::string& prefix, nn::ParamList& out) {
    fc1_.collect(prefix + ".fc1", out);
    fc2_.collect(prefix + ".fc2", out);
}

// ---------------------------------------------------------------------------
// ContrastiveConfig
// ---------------------------------------------------------------------------

double ContrastiveConfig::weight_for(std::size_t index) const {
    if (level_weights.empty()) return 1.0;
    return level_weights.at(index);
}

void ContrastiveConfig::validate(std::size_t tap_count) const {
    if (temperature <= 0.0) throw ConfigError("temperature must be positive");
    if (!levels.taps.empty()) levels.validate(tap_count);
    if (!level_weights.empty()) {
        if (level_weights.size() != levels.taps.size()) {
            throw ConfigError("level_weights size must match levels");
        }
        for (double w : level_weights) {
            if (w <= 0.0) throw ConfigError("level_weights must be positive");
        }
    }
}

void to_json(nlohmann::json& j, const ContrastiveConfig& c) {
    j = {{"temperature", c.temperature},
         {"levels", c.levels.taps},
         {"level_weights", c.level_weights},
         {"mean_reduction", c.mean_reduction}};
}

void from_json(const nlohmann::json& j, ContrastiveConfig& c) {
    ContrastiveConfig defaults;
    c.temperature = j.value("temperature", defaults.temperature);
    c.levels.taps = j.value("levels", std::vector<std::size_t>{});
    c.level_weights = j.value("level_weights", std::vector<double>{});
    c.mean_reduction = j.value("mean_reduction", false);
}

// ---------------------------------------------------------------------------
// NT-Xent
// ---------------------------------------------------------------------------

namespace detail {

double ntxent_from_similarities(const Tensor& sim, const std::vector<std::size_t>& pairing,
                                double temperature, bool mean_reduction) {
    if (sim.ndim() != 2 || sim.dim(0) != sim.dim(1)) {
        throw ShapeError("similarity matrix must be square, got " + sim.shape_str());
    }
    const std::size_t n = sim.dim(0);
    check_pairing(pairing, n);
    if (temperature <= 0.0) throw NumericError("temperature must be positive");

    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        // Log-sum-exp over k != i with max subtraction.
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < n; ++k) {
            if (k == i) continue;
            m = std::max(m, sim.at2(i, k) / temperature);
        }
        double lse = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
            if (k == i) continue;
            lse += std::exp(sim.at2(i, k) / temperature - m);
        }
        total += m + std::log(lse) - sim.at2(i, pairing[i]) / temperature;
    }
    if (mean_reduction) total /= static_cast<double>(n);
    return total;
}

} // namespace detail

namespace {

Tensor clamped_similarity_matrix(const Tensor& z) {
    const auto n = static_cast<Eigen::Index>(z.dim(0));
    Tensor sim({z.dim(0), z.dim(0)});
    auto zm = cmap2d(z);
    auto sm = map2d(sim);
    sm.noalias() = zm * zm.transpose();
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index k = 0; k < n; ++k) {
            sm(i, k) = std::clamp(sm(i, k), -1.0, 1.0);
        }
    }
    return sim;
}

} // namespace

double level_contrastive_loss(const Tensor& z, const std::vector<std::size_t>& pairing,
                              double temperature, bool mean_reduction) {
    check_batch(z, temperature);
    check_pairing(pairing, z.dim(0));
    Tensor sim = clamped_similarity_matrix(z);
    return detail::ntxent_from_similarities(sim, pairing, temperature, mean_reduction);
}

LevelLossGrad level_contrastive_loss_grad(const Tensor& z,
                                          const std::vector<std::size_t>& pairing,
                                          double temperature, bool mean_reduction) {
    check_batch(z, temperature);
    const std::size_t n = z.dim(0);
    check_pairing(pairing, n);

    Tensor sim = clamped_similarity_matrix(z);
    const double value = detail::ntxent_from_similarities(sim, pairing, temperature, mean_reduction);

    // dL/dS with S = Z Zᵀ: per anchor row i, softmax over k != i minus the
    // positive indicator, all divided by τ. The clamp passes gradients through.
    Tensor g({n, n});
    for (std::size_t i = 0; i < n; ++i) {
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < n; ++k) {
            if (k != i) m = std::max(m, sim.at2(i, k) / temperature);
        }
        double denom = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
            if (k != i) denom += std::exp(sim.at2(i, k) / temperature - m);
        }
        for (std::size_t k = 0; k < n; ++k) {
            if (k == i) continue;
            double p = std::exp(sim.at2(i, k) / temperature - m) / denom;
            g.at2(i, k) = (p - (k == pairing[i] ? 1.0 : 0.0)) / temperature;
        }
    }
    if (mean_reduction) g.scale_(1.0 / static_cast<double>(n));

    // dZ = (G + Gᵀ) Z.
    Tensor dz({n, z.dim(1)});
    auto gm = cmap2d(g);
    auto zm = cmap2d(z);
    map2d(dz).noalias() = (gm + gm.transpose()) * zm;
    return {value, std::move(dz)};
}

// ---------------------------------------------------------------------------
// Multi-level aggregation
// ---------------------------------------------------------------------------

MlclResult mlcl_loss(const std::map<std::size_t, Tensor>& z_by_level,
                     const std::vector<std::size_t>& pairing, const ContrastiveConfig& config,
                     bool with_grad) {
    if (config.levels.taps.empty()) throw ConfigError("contrastive levels must be non-empty");
    MlclResult out;
    for (std::size_t i = 0; i < config.levels.taps.size(); ++i) {
        const std::size_t level = config.levels.taps[i];
        auto it = z_by_level.find(level);
        if (it == z_by_level.end()) {
            throw ConfigError("no projections for level " + std::to_string(level));
        }
        const double w = config.weight_for(i);
        if (with_grad) {
            LevelLossGrad lg = level_contrastive_loss_grad(it->second, pairing,
                                                           config.temperature,
                                                           config.mean_reduction);
            out.per_level[level] = lg.value;
            out.total += w * lg.value;
            lg.dz.scale_(w);
            out.dz_per_level[level] = std::move(lg.dz);
        } else {
            double v = level_contrastive_loss(it->second, pairing, config.temperature,
                                              config.mean_reduction);
            out.per_level[level] = v;
            out.total += w * v;
        }
    }
    return out;
}

MlclResult mlcl_loss_from_taps(const TapMap& taps, std::vector<ProjectionHead>& heads,
                               const std::vector<std::size_t>& pairing,
                               const ContrastiveConfig& config, bool retain) {
    std::map<std::size_t, Tensor> z_by_level;
    for (std::size_t level : config.levels.taps) {
        auto tap_it = taps.find(level);
        if (tap_it == taps.end()) {
            throw ConfigError("no tap output for level " + std::to_string(level));
        }
        ProjectionHead* head = nullptr;
        for (auto& h : heads) {
            if (h.level() == level) head = &h;
        }
        if (!head) throw ConfigError("no projection head for level " + std::to_string(level));
        z_by_level[level] = head->project(tap_it->second, retain);
    }
    return mlcl_loss(z_by_level, pairing, config, retain);
}

} // namespace mlcl
