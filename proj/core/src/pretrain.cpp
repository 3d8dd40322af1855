#include "mlcl/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "mlcl/errors.hpp"
#include "mlcl/serialize.hpp"

namespace mlcl {

void PretrainConfig::validate(std::size_t tap_count) const {
    // epochs == 0 is legal: the checkpoint then equals the initialization.
    if (batch_size < 2) throw ConfigError("batch_size must be at least 2");
    if (initial_lr <= 0.0) throw ConfigError("initial_lr must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must be in [0, 1)");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
    contrastive.validate(tap_count);
    augment.validate();
}

void to_json(nlohmann::json& j, const PretrainConfig& c) {
    j = {{"epochs", c.epochs},
         {"batch_size", c.batch_size},
         {"initial_lr", c.initial_lr},
         {"momentum", c.momentum},
         {"nesterov", c.nesterov},
         {"weight_decay", c.weight_decay},
         {"ce_weight", c.ce_weight},
         {"mlcl_weight", c.mlcl_weight},
         {"contrastive", c.contrastive},
         {"augment",
          {{"crop_scale_range", c.augment.crop_scale_range},
           {"color_distortion_strength", c.augment.color_distortion_strength},
           {"grayscale_probability", c.augment.grayscale_probability},
           {"blur_probability", c.augment.blur_probability},
           {"blur_sigma_range", c.augment.blur_sigma_range},
           {"crop", c.augment.enabled_ops.crop},
           {"color", c.augment.enabled_ops.color},
           {"blur", c.augment.enabled_ops.blur}}},
         {"normalization", {{"mean", c.normalization.mean}, {"stddev", c.normalization.stddev}}},
         {"seed", c.seed},
         {"total_steps", c.total_steps}};
}

void from_json(const nlohmann::json& j, PretrainConfig& c) {
    PretrainConfig d;
    c.epochs = j.value("epochs", d.epochs);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.initial_lr = j.value("initial_lr", d.initial_lr);
    c.momentum = j.value("momentum", d.momentum);
    c.nesterov = j.value("nesterov", d.nesterov);
    c.weight_decay = j.value("weight_decay", d.weight_decay);
    c.ce_weight = j.value("ce_weight", d.ce_weight);
    c.mlcl_weight = j.value("mlcl_weight", d.mlcl_weight);
    if (j.contains("contrastive")) j.at("contrastive").get_to(c.contrastive);
    if (j.contains("augment")) {
        const auto& a = j.at("augment");
        c.augment.crop_scale_range = a.value("crop_scale_range", d.augment.crop_scale_range);
        c.augment.color_distortion_strength =
            a.value("color_distortion_strength", d.augment.color_distortion_strength);
        c.augment.grayscale_probability =
            a.value("grayscale_probability", d.augment.grayscale_probability);
        c.augment.blur_probability = a.value("blur_probability", d.augment.blur_probability);
        c.augment.blur_sigma_range = a.value("blur_sigma_range", d.augment.blur_sigma_range);
        c.augment.enabled_ops.crop = a.value("crop", true);
        c.augment.enabled_ops.color = a.value("color", true);
        c.augment.enabled_ops.blur = a.value("blur", true);
    }
    if (j.contains("normalization")) {
        const auto& n = j.at("normalization");
        c.normalization.mean = n.value("mean", d.normalization.mean);
        c.normalization.stddev = n.value("stddev", d.normalization.stddev);
    }
    c.seed = j.value("seed", d.seed);
    c.total_steps = j.value("total_steps", d.total_steps);
}

// ---------------------------------------------------------------------------
// TrainState
// ---------------------------------------------------------------------------

nn::ParamList TrainState::parameters() {
    nn::ParamList out;
    for (const auto& p : encoder.parameters()) {
        out.push_back({"encoder." + p.name, p.value, p.grad});
    }
    for (auto& h : heads) h.collect("head" + std::to_string(h.level()), out);
    classifier.collect("classifier", out);
    return out;
}

void TrainState::set_training(bool training) { encoder.set_training(training); }

TrainState make_train_state(const EncoderConfig& enc_cfg, const PretrainConfig& cfg,
                            std::size_t num_classes) {
    if (num_classes < 2) throw ConfigError("pretraining needs at least 2 classes");
    cfg.validate(enc_cfg.tap_count());

    TrainState st;
    st.encoder = Encoder(enc_cfg);
    Rng enc_rng(derive_seed(cfg.seed, 1));
    st.encoder.init(enc_rng);

    auto shapes = list_taps(enc_cfg);
    for (std::size_t i = 0; i < cfg.contrastive.levels.taps.size(); ++i) {
        const std::size_t level = cfg.contrastive.levels.taps[i];
        st.heads.emplace_back(level, shapes[level - 1].channels);
        Rng head_rng(derive_seed(cfg.seed, 100 + level));
        st.heads.back().init(head_rng);
    }

    st.num_classes = num_classes;
    st.classifier = nn::Linear(shapes.back().channels, num_classes);
    Rng cls_rng(derive_seed(cfg.seed, 2));
    st.classifier.init(cls_rng);

    st.opt = nn::Sgd({cfg.momentum, cfg.nesterov, cfg.weight_decay});
    return st;
}

double schedule_lr(const PretrainConfig& cfg, std::size_t step) {
    if (cfg.total_steps == 0) return cfg.initial_lr;
    const double t = std::min(1.0, static_cast<double>(step) /
                                       static_cast<double>(cfg.total_steps));
    return cfg.initial_lr * 0.5 * (1.0 + std::cos(M_PI * t));
}

double total_loss(const Tensor& logits, const std::vector<int>& labels, double mlcl_value,
                  const PretrainConfig& cfg) {
    const double ce = nn::softmax_cross_entropy_value(logits, labels);
    return cfg.ce_weight * ce + cfg.mlcl_weight * mlcl_value;
}

// ---------------------------------------------------------------------------
// One step
// ---------------------------------------------------------------------------

StepLoss pretrain_step(TrainState& state, const Tensor& images, const std::vector<int>& labels,
                       const PretrainConfig& cfg, Rng& rng) {
    if (images.ndim() != 4 || images.dim(0) != cfg.batch_size) {
        throw ShapeError("expected [" + std::to_string(cfg.batch_size) +
                         ", 3, S, S] image batch, got " + images.shape_str());
    }
    if (labels.size() != cfg.batch_size) {
        throw ShapeError("label count " + std::to_string(labels.size()) +
                         " != batch size " + std::to_string(cfg.batch_size));
    }

    ContrastiveBatch batch = make_contrastive_batch(images, cfg.augment, rng);
    Tensor views = normalize_channels(batch.views, cfg.normalization.mean,
                                      cfg.normalization.stddev);
    std::vector<int> view_labels(2 * cfg.batch_size);
    for (std::size_t i = 0; i < cfg.batch_size; ++i) {
        view_labels[2 * i] = labels[i];
        view_labels[2 * i + 1] = labels[i];
    }

    const std::size_t top = state.encoder.tap_count();
    TapSpec taps;
    taps.taps = cfg.contrastive.levels.taps;
    if (!taps.contains(top)) taps.taps.push_back(top);

    TapMap tapmaps = state.encoder.forward_with_taps(views, taps, true);

    Tensor pooled = state.cls_pool.forward(tapmaps.at(top), true);
    Tensor logits = state.classifier.forward(pooled, true);
    nn::LossAndGrad ce = nn::softmax_cross_entropy(logits, view_labels);

    MlclResult mlcl;
    const bool use_mlcl = !cfg.contrastive.levels.taps.empty() && cfg.mlcl_weight != 0.0;
    if (use_mlcl) {
        mlcl = mlcl_loss_from_taps(tapmaps, state.heads, batch.pairing, cfg.contrastive, true);
    }

    StepLoss out;
    out.step = state.step;
    out.lr = schedule_lr(cfg, state.step);
    out.ce = ce.value;
    out.levels = mlcl.per_level;
    out.mlcl = mlcl.total;
    out.total = cfg.ce_weight * ce.value + cfg.mlcl_weight * mlcl.total;
    if (!std::isfinite(out.total)) {
        std::ostringstream msg;
        msg << "non-finite training loss at step " << state.step << ": ce=" << ce.value
            << " mlcl=" << mlcl.total;
        for (const auto& [level, v] : mlcl.per_level) msg << " level" << level << "=" << v;
        throw NumericError(msg.str());
    }

    auto params = state.parameters();
    nn::zero_grads(params);

    ce.grad.scale_(cfg.ce_weight);
    Tensor d_pooled = state.classifier.backward(ce.grad);
    Tensor d_top = state.cls_pool.backward(d_pooled);

    TapGradMap tap_grads;
    tap_grads.emplace(top, std::move(d_top));
    if (use_mlcl) {
        for (auto& h : state.heads) {
            auto it = mlcl.dz_per_level.find(h.level());
            if (it == mlcl.dz_per_level.end()) continue;
            it->second.scale_(cfg.mlcl_weight);
            Tensor d_tap = h.backward(it->second);
            auto pos = tap_grads.find(h.level());
            if (pos == tap_grads.end()) {
                tap_grads.emplace(h.level(), std::move(d_tap));
            } else {
                pos->second.add_(d_tap);
            }
        }
    }
    state.encoder.backward(tap_grads);

    state.opt.step(params, out.lr);
    ++state.step;
    state.history.push_back(out);
    return out;
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

namespace {

nlohmann::json history_to_json(const std::vector<StepLoss>& history) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& h : history) {
        nlohmann::json levels = nlohmann::json::object();
        for (const auto& [k, v] : h.levels) levels[std::to_string(k)] = v;
        out.push_back({{"step", h.step},
                       {"lr", h.lr},
                       {"ce", h.ce},
                       {"levels", levels},
                       {"mlcl", h.mlcl},
                       {"total", h.total}});
    }
    return out;
}

std::vector<StepLoss> history_from_json(const nlohmann::json& j) {
    std::vector<StepLoss> out;
    for (const auto& e : j) {
        StepLoss h;
        h.step = e.at("step").get<std::size_t>();
        h.lr = e.at("lr").get<double>();
        h.ce = e.at("ce").get<double>();
        h.mlcl = e.at("mlcl").get<double>();
        h.total = e.at("total").get<double>();
        for (const auto& [k, v] : e.at("levels").items()) {
            h.levels[std::stoul(k)] = v.get<double>();
        }
        out.push_back(std::move(h));
    }
    return out;
}

} // namespace

void save_train_checkpoint(const std::filesystem::path& path, TrainState& state,
                           const std::string& config_fingerprint) {
    TensorFile tf;
    nlohmann::json head_levels = nlohmann::json::array();
    for (const auto& h : state.heads) {
        head_levels.push_back({{"level", h.level()}, {"input_dim", h.input_dim()}});
    }
    tf.meta() = {{"kind", "train_state"},
                 {"format_version", 1},
                 {"encoder_config", state.encoder.config()},
                 {"heads", head_levels},
                 {"num_classes", state.num_classes},
                 {"step", state.step},
                 {"config_fingerprint", config_fingerprint},
                 {"opt", {{"momentum", state.opt.config().momentum},
                          {"nesterov", state.opt.config().nesterov},
                          {"weight_decay", state.opt.config().weight_decay}}},
                 {"history", history_to_json(state.history)}};
    for (const auto& p : state.parameters()) tf.put("param." + p.name, *p.value);
    for (const auto& [name, t] : state.encoder.state_tensors()) {
        tf.put("state.encoder." + name, *t);
    }
    for (const auto& [name, t] : state.opt.state()) tf.put("opt." + name, t);
    tf.save(path);
}

TrainState load_train_checkpoint(const std::filesystem::path& path,
                                 std::string* config_fingerprint) {
    TensorFile tf = TensorFile::load(path);
    if (tf.meta().value("kind", "") != "train_state") {
        throw IoError("not a training checkpoint: " + path.string());
    }

    TrainState st;
    st.encoder = Encoder(tf.meta().at("encoder_config").get<EncoderConfig>());
    for (const auto& h : tf.meta().at("heads")) {
        st.heads.emplace_back(h.at("level").get<std::size_t>(),
                              h.at("input_dim").get<std::size_t>());
    }
    st.num_classes = tf.meta().at("num_classes").get<std::size_t>();
    auto shapes = list_taps(st.encoder.config());
    st.classifier = nn::Linear(shapes.back().channels, st.num_classes);
    const auto& opt = tf.meta().at("opt");
    st.opt = nn::Sgd({opt.at("momentum").get<double>(), opt.at("nesterov").get<bool>(),
                      opt.at("weight_decay").get<double>()});
    st.step = tf.meta().at("step").get<std::size_t>();
    st.history = history_from_json(tf.meta().at("history"));

    for (const auto& p : st.parameters()) {
        const Tensor& stored = tf.get("param." + p.name);
        if (!stored.same_shape(*p.value)) {
            throw IoError("checkpoint tensor " + p.name + " has shape " + stored.shape_str());
        }
        *p.value = stored;
    }
    for (auto& [name, t] : st.encoder.state_tensors()) {
        *t = tf.get("state.encoder." + name);
    }
    for (const auto& name : tf.names()) {
        if (name.rfind("opt.", 0) == 0) {
            st.opt.state()[name.substr(4)] = tf.get(name);
        }
    }
    if (config_fingerprint) {
        *config_fingerprint = tf.meta().value("config_fingerprint", "");
    }
    return st;
}

// ---------------------------------------------------------------------------
// Full loop
// ---------------------------------------------------------------------------

TrainState pretrain(const PretrainConfig& cfg_in, const EncoderConfig& enc_cfg,
                    const SplitDataset& dataset, const PretrainHooks& hooks) {
    PretrainConfig cfg = cfg_in;
    cfg.validate(enc_cfg.tap_count());
    const auto& classes = dataset.train;
    if (classes.empty()) throw ConfigError("pretraining dataset has no training classes");

    std::vector<std::pair<std::size_t, std::size_t>> items; // (class, image)
    for (std::size_t c = 0; c < classes.size(); ++c) {
        for (std::size_t i = 0; i < classes[c].images.size(); ++i) items.emplace_back(c, i);
    }
    if (items.size() < cfg.batch_size) {
        throw ConfigError("dataset has " + std::to_string(items.size()) +
                          " images; batch size " + std::to_string(cfg.batch_size) +
                          " is infeasible");
    }
    const std::size_t steps_per_epoch = items.size() / cfg.batch_size;
    const std::size_t total_steps = cfg.epochs * steps_per_epoch;
    if (cfg.total_steps == 0) cfg.total_steps = total_steps;

    const std::string config_fp = to_hex64(fnv1a64(nlohmann::json(cfg).dump()));

    TrainState state;
    bool resumed = false;
    if (!hooks.checkpoint_path.empty() && std::filesystem::exists(hooks.checkpoint_path)) {
        std::string stored_fp;
        TrainState loaded = load_train_checkpoint(hooks.checkpoint_path, &stored_fp);
        if (stored_fp == config_fp && loaded.step <= total_steps) {
            state = std::move(loaded);
            resumed = true;
        }
    }
    if (!resumed) state = make_train_state(enc_cfg, cfg, classes.size());
    state.set_training(true);

    const std::size_t s = dataset.image_size;
    std::vector<std::pair<std::size_t, std::size_t>> epoch_items = items;
    std::size_t shuffled_epoch = static_cast<std::size_t>(-1);

    while (state.step < total_steps) {
        const std::size_t epoch = state.step / steps_per_epoch;
        const std::size_t batch_idx = state.step % steps_per_epoch;
        if (epoch != shuffled_epoch) {
            // The order is a pure function of (seed, epoch) so an interrupted
            // run resumes into the identical stream.
            epoch_items = items;
            Rng order_rng(derive_seed(derive_seed(cfg.seed, 0xe90c), epoch));
            order_rng.shuffle(epoch_items);
            shuffled_epoch = epoch;
        }

        Tensor images({cfg.batch_size, 3, s, s});
        std::vector<int> labels(cfg.batch_size);
        for (std::size_t i = 0; i < cfg.batch_size; ++i) {
            auto [c, idx] = epoch_items[batch_idx * cfg.batch_size + i];
            batch_assign(images, i, image_to_tensor(classes[c].images[idx]));
            labels[i] = static_cast<int>(c);
        }

        Rng step_rng(derive_seed(derive_seed(cfg.seed, 0x57e9), state.step));
        StepLoss loss = pretrain_step(state, images, labels, cfg, step_rng);
        if (hooks.on_step) hooks.on_step(loss);

        if (!hooks.checkpoint_path.empty() && hooks.checkpoint_every > 0 &&
            state.step % hooks.checkpoint_every == 0 && state.step < total_steps) {
            save_train_checkpoint(hooks.checkpoint_path, state, config_fp);
        }
    }

    if (!hooks.checkpoint_path.empty()) {
        save_train_checkpoint(hooks.checkpoint_path, state, config_fp);
    }
    return state;
}

} // namespace mlcl
