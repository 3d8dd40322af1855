#ifndef MLCL_PRETRAIN_HPP
#define MLCL_PRETRAIN_HPP

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <vector>

#include <nlohmann/json.hpp>

#include "mlcl/augment.hpp"
#include "mlcl/contrastive.hpp"
#include "mlcl/encoders.hpp"
#include "mlcl/episodes.hpp"
#include "mlcl/nn.hpp"

namespace mlcl {

struct PretrainConfig {
    std::size_t epochs = 1;
    std::size_t batch_size = 256; // source images per step; views are 2x this
    double initial_lr = 0.05;
    double momentum = 0.9;
    bool nesterov = false;
    double weight_decay = 0.0;
    double ce_weight = 1.0;
    double mlcl_weight = 1.0;
    ContrastiveConfig contrastive; // empty levels = no contrastive term
    AugmentConfig augment;
    Normalization normalization;
    std::uint64_t seed = 1;
    /// Cosine-decay horizon; 0 means constant lr. pretrain() fills it in
    /// from epochs x steps-per-epoch when left at 0.
    std::size_t total_steps = 0;

    void validate(std::size_t tap_count) const;
};

void to_json(nlohmann::json& j, const PretrainConfig& c);
void from_json(const nlohmann::json& j, PretrainConfig& c);

struct StepLoss {
    std::size_t step = 0;
    double lr = 0.0;
    double ce = 0.0;
    std::map<std::size_t, double> levels;
    double mlcl = 0.0;
    double total = 0.0;
};

/// Everything the pretraining loop mutates, rebuildable from a checkpoint.
struct TrainState {
    Encoder encoder;
    std::vector<ProjectionHead> heads; // one per contrastive level
    nn::GlobalAvgPool cls_pool;
    nn::Linear classifier;
    nn::Sgd opt;
    std::size_t num_classes = 0;
    std::size_t step = 0;
    std::vector<StepLoss> history;

    nn::ParamList parameters();
    void set_training(bool training);
};

TrainState make_train_state(const EncoderConfig& enc_cfg, const PretrainConfig& cfg,
                            std::size_t num_classes);

/// Cosine decay from initial_lr to 0 across total_steps (constant when 0).
double schedule_lr(const PretrainConfig& cfg, std::size_t step);

/// ce_weight * CE(logits, labels) + mlcl_weight * mlcl_value.
double total_loss(const Tensor& logits, const std::vector<int>& labels, double mlcl_value,
                  const PretrainConfig& cfg);

/// One optimization step on a raw [B, 3, S, S] image batch in [0, 1].
StepLoss pretrain_step(TrainState& state, const Tensor& images, const std::vector<int>& labels,
                       const PretrainConfig& cfg, Rng& rng);

void save_train_checkpoint(const std::filesystem::path& path, TrainState& state,
                           const std::string& config_fingerprint);
TrainState load_train_checkpoint(const std::filesystem::path& path,
                                 std::string* config_fingerprint = nullptr);

struct PretrainHooks {
    std::function<void(const StepLoss&)> on_step;
    std::filesystem::path checkpoint_path; // empty = no checkpointing
    std::size_t checkpoint_every = 0;      // steps between periodic saves
};

/// Full loop over the train split. Resumes from hooks.checkpoint_path when a
/// compatible checkpoint already exists there.
TrainState pretrain(const PretrainConfig& cfg, const EncoderConfig& enc_cfg,
                    const SplitDataset& dataset, const PretrainHooks& hooks = {});

} // namespace mlcl

#endif
