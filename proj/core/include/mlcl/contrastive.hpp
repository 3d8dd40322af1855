#ifndef MLCL_CONTRASTIVE_HPP
#define MLCL_CONTRASTIVE_HPP

#include <cstddef>
#include <map>
#include <vector>

#include <nlohmann/json.hpp>

#include "mlcl/encoders.hpp"
#include "mlcl/nn.hpp"
#include "mlcl/rng.hpp"
#include "mlcl/tensor.hpp"

namespace mlcl {

/// uᵀw / (‖u‖‖w‖) for 1-D tensors. Throws NumericError on a zero vector.
double cosine_similarity(const Tensor& u, const Tensor& w);

inline constexpr std::size_t kProjectionDim = 128;

/// Pooled feature -> linear -> relu -> linear -> l2-normalize.
/// The hidden width equals the input width; the output width is fixed.
class ProjectionHead {
public:
    ProjectionHead() = default;
    ProjectionHead(std::size_t level, std::size_t input_dim,
                   std::size_t output_dim = kProjectionDim);

    void init(Rng& rng);

    /// Feature map [N, C, H, W] with C = input_dim -> unit rows [N, output_dim].
    Tensor project(const Tensor& feature, bool retain);
    /// Gradient w.r.t. the feature map from dz on the projections.
    Tensor backward(const Tensor& dz);

    void collect(const std::string& prefix, nn::ParamList& out);

    std::size_t level() const { return level_; }
    std::size_t input_dim() const { return input_dim_; }
    std::size_t output_dim() const { return output_dim_; }

private:
    std::size_t level_ = 0, input_dim_ = 0, output_dim_ = kProjectionDim;
    nn::GlobalAvgPool pool_;
    nn::Linear fc1_, fc2_;
    nn::ReLU relu_;
    nn::L2NormalizeRows norm_;
};

struct ContrastiveConfig {
    double temperature = 0.07;
    TapSpec levels;                    // empty = contrastive disabled
    std::vector<double> level_weights; // empty = all 1
    bool mean_reduction = false;       // divide each level loss by 2B

    /// Weight for the i-th configured level.
    double weight_for(std::size_t index) const;
    void validate(std::size_t tap_count) const;
};

void to_json(nlohmann::json& j, const ContrastiveConfig& c);
void from_json(const nlohmann::json& j, ContrastiveConfig& c);

namespace detail {
/// Loss from a precomputed similarity matrix [2B, 2B]; the reference path
/// shared by the fast implementation and tests.
double ntxent_from_similarities(const Tensor& sim, const std::vector<std::size_t>& pairing,
                                double temperature, bool mean_reduction);
} // namespace detail

/// Normalized temperature-scaled cross entropy over one batch of projections
/// z: [2B, dim] (rows assumed unit norm). Sum over all 2B anchors.
double level_contrastive_loss(const Tensor& z, const std::vector<std::size_t>& pairing,
                              double temperature, bool mean_reduction = false);

struct LevelLossGrad {
    double value;
    Tensor dz; // [2B, dim]
};

LevelLossGrad level_contrastive_loss_grad(const Tensor& z,
                                          const std::vector<std::size_t>& pairing,
                                          double temperature, bool mean_reduction = false);

struct MlclResult {
    double total = 0.0;
    std::map<std::size_t, double> per_level;
    /// Gradients w.r.t. the per-level projections; filled when requested.
    std::map<std::size_t, Tensor> dz_per_level;
};

/// Weighted sum of per-level losses over projections keyed by tap index.
MlclResult mlcl_loss(const std::map<std::size_t, Tensor>& z_by_level,
                     const std::vector<std::size_t>& pairing, const ContrastiveConfig& config,
                     bool with_grad);

/// Convenience wrapper: project each configured level's tap through its head,
/// then combine. Heads are matched to levels by head.level().
MlclResult mlcl_loss_from_taps(const TapMap& taps, std::vector<ProjectionHead>& heads,
                               const std::vector<std::size_t>& pairing,
                               const ContrastiveConfig& config, bool retain);

} // namespace mlcl

#endif
