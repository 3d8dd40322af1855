#include "mlcl/encoders.hpp"

#include <algorithm>

#include "mlcl/errors.hpp"
#include "mlcl/serialize.hpp"

namespace mlcl {

// ---------------------------------------------------------------------------
// EncoderConfig
// ---------------------------------------------------------------------------

std::size_t EncoderConfig::tap_count() const {
    std::size_t blocks = 0;
    for (const auto& s : sections) blocks += s.blocks;
    return 2 * blocks;
}

void EncoderConfig::validate() const {
    if (input_size == 0) throw ConfigError("input_size must be positive");
    if (stem_channels == 0) throw ConfigError("stem_channels must be positive");
    if (stem_kernel != 3 && stem_kernel != 7) {
        throw ConfigError("stem_kernel must be 3 or 7, got " + std::to_string(stem_kernel));
    }
    if (sections.empty()) throw ConfigError("sections must be non-empty");
    for (std::size_t i = 0; i < sections.size(); ++i) {
        const auto& s = sections[i];
        const std::string at = "sections[" + std::to_string(i) + "]";
        if (s.blocks == 0) throw ConfigError(at + ".blocks must be positive");
        if (s.channels == 0) throw ConfigError(at + ".channels must be positive");
        if (s.stride != 1 && s.stride != 2) {
            throw ConfigError(at + ".stride must be 1 or 2, got " + std::to_string(s.stride));
        }
    }
    // The full stride stack must leave at least a 1x1 map.
    auto shapes = list_taps(*this);
    if (shapes.back().height == 0 || shapes.back().width == 0) {
        throw ConfigError("input_size " + std::to_string(input_size) +
                          " too small for the configured stride stack");
    }
}

EncoderConfig encoder_preset(const std::string& name) {
    EncoderConfig c;
    c.name = name;
    if (name == "resnet18") {
        c.input_size = 80;
        c.stem_channels = 64;
        c.stem_kernel = 7;
        c.stem_pool = true;
        c.sections = {{2, 64, 1}, {2, 128, 2}, {2, 256, 2}, {2, 512, 2}};
    } else if (name == "resnet18-v1") {
        // 3 residual sections with 3 basic blocks each (18 tappable layers).
        c.input_size = 80;
        c.stem_channels = 64;
        c.stem_kernel = 7;
        c.stem_pool = true;
        c.sections = {{3, 64, 1}, {3, 128, 2}, {3, 256, 2}};
    } else if (name == "resnet18-v2") {
        // 2 residual sections with 4 basic blocks each (16 tappable layers).
        c.input_size = 80;
        c.stem_channels = 64;
        c.stem_kernel = 7;
        c.stem_pool = true;
        c.sections = {{4, 64, 2}, {4, 128, 2}};
    } else if (name == "small") {
        c.input_size = 32;
        c.stem_channels = 16;
        c.stem_kernel = 3;
        c.stem_pool = false;
        c.sections = {{2, 16, 2}, {2, 32, 2}};
    } else {
        throw ConfigError("unknown encoder preset '" + name + "'; known presets: resnet18, " +
                          "resnet18-v1, resnet18-v2, small");
    }
    return c;
}

std::vector<std::string> encoder_preset_names() {
    return {"resnet18", "resnet18-v1", "resnet18-v2", "small"};
}

void to_json(nlohmann::json& j, const SectionDesc& s) {
    j = {{"blocks", s.blocks}, {"channels", s.channels}, {"stride", s.stride}};
}

void from_json(const nlohmann::json& j, SectionDesc& s) {
    j.at("blocks").get_to(s.blocks);
    j.at("channels").get_to(s.channels);
    j.at("stride").get_to(s.stride);
}

void to_json(nlohmann::json& j, const EncoderConfig& c) {
    j = {{"name", c.name},
         {"input_size", c.input_size},
         {"stem_channels", c.stem_channels},
         {"stem_kernel", c.stem_kernel},
         {"stem_pool", c.stem_pool},
         {"sections", c.sections}};
}

void from_json(const nlohmann::json& j, EncoderConfig& c) {
    j.at("name").get_to(c.name);
    j.at("input_size").get_to(c.input_size);
    j.at("stem_channels").get_to(c.stem_channels);
    j.at("stem_kernel").get_to(c.stem_kernel);
    j.at("stem_pool").get_to(c.stem_pool);
    j.at("sections").get_to(c.sections);
}

// ---------------------------------------------------------------------------
// TapSpec / list_taps
// ---------------------------------------------------------------------------

void TapSpec::validate(std::size_t tap_count) const {
    if (taps.empty()) throw ConfigError("tap list must be non-empty");
    std::size_t prev = 0;
    for (std::size_t t : taps) {
        if (t <= prev) throw ConfigError("tap list must be strictly increasing");
        if (t < 1 || t > tap_count) {
            throw ConfigError("tap index " + std::to_string(t) + " out of range; valid taps are 1.." +
                              std::to_string(tap_count));
        }
        prev = t;
    }
}

bool TapSpec::contains(std::size_t t) const {
    return std::find(taps.begin(), taps.end(), t) != taps.end();
}

std::vector<TapShape> list_taps(const EncoderConfig& config) {
    std::vector<TapShape> out;
    const std::size_t k = config.stem_kernel;
    const std::size_t stride = k == 7 ? 2 : 1;
    const std::size_t pad = k == 7 ? 3 : 1;
    std::size_t size = (config.input_size + 2 * pad - k) / stride + 1;
    if (config.stem_pool) size = size >= 2 ? (size - 2) / 2 + 1 : 0;

    std::size_t tap = 0;
    for (const auto& s : config.sections) {
        for (std::size_t b = 0; b < s.blocks; ++b) {
            const std::size_t bs = b == 0 ? s.stride : 1;
            size = size + 2 >= 3 ? (size + 2 - 3) / bs + 1 : 0;
            // Both taps of a block share the block's output shape: the
            // stride sits on the first conv, the second is stride 1.
            out.push_back({++tap, s.channels, size, size});
            out.push_back({++tap, s.channels, size, size});
        }
    }
    return out;
}

std::vector<std::size_t> last_block_taps(const EncoderConfig& config, std::size_t count) {
    const std::size_t blocks = config.tap_count() / 2;
    if (count == 0 || count > blocks) {
        throw ConfigError("block count " + std::to_string(count) + " out of range; encoder has " +
                          std::to_string(blocks) + " blocks");
    }
    std::vector<std::size_t> out;
    for (std::size_t b = blocks - count; b < blocks; ++b) out.push_back(2 * (b + 1));
    return out;
}

// ---------------------------------------------------------------------------
// BasicBlock
// ---------------------------------------------------------------------------

BasicBlock::BasicBlock(std::size_t in_ch, std::size_t out_ch, std::size_t stride)
    : conv1_(in_ch, out_ch, 3, stride, 1),
      conv2_(out_ch, out_ch, 3, 1, 1),
      bn1_(out_ch),
      bn2_(out_ch),
      has_proj_(stride != 1 || in_ch != out_ch) {
    if (has_proj_) {
        proj_ = nn::Conv2d(in_ch, out_ch, 1, stride, 0);
        proj_bn_ = nn::BatchNorm2d(out_ch);
    }
}

void BasicBlock::init(Rng& rng) {
    conv1_.init(rng);
    conv2_.init(rng);
    if (has_proj_) proj_.init(rng);
}

void BasicBlock::set_training(bool training) {
    bn1_.set_training(training);
    bn2_.set_training(training);
    if (has_proj_) proj_bn_.set_training(training);
}

void BasicBlock::collect(const std::string& prefix, nn::ParamList& out) {
    conv1_.collect(prefix + ".conv1", out);
    bn1_.collect(prefix + ".bn1", out);
    conv2_.collect(prefix + ".conv2", out);
    bn2_.collect(prefix + ".bn2", out);
    if (has_proj_) {
        proj_.collect(prefix + ".proj", out);
        proj_bn_.collect(prefix + ".proj_bn", out);
    }
}

void BasicBlock::collect_state(const std::string& prefix,
                               std::vector<std::pair<std::string, Tensor*>>& out) {
    bn1_.collect_state(prefix + ".bn1", out);
    bn2_.collect_state(prefix + ".bn2", out);
    if (has_proj_) proj_bn_.collect_state(prefix + ".proj_bn", out);
}

Tensor BasicBlock::forward(const Tensor& x, bool retain, Tensor* mid) {
    Tensor y = conv1_.forward(x, retain);
    y = bn1_.forward(y, retain);
    y = relu1_.forward(y, retain);
    if (mid) *mid = y;
    Tensor z = conv2_.forward(y, retain);
    z = bn2_.forward(z, retain);
    if (has_proj_) {
        Tensor skip = proj_.forward(x, retain);
        skip = proj_bn_.forward(skip, retain);
        z.add_(skip);
    } else {
        z.add_(x);
    }
    return relu2_.forward(z, retain);
}

Tensor BasicBlock::backward(const Tensor& dy, const Tensor* d_mid) {
    Tensor d = relu2_.backward(dy);

    Tensor dx_skip;
    if (has_proj_) {
        Tensor t = proj_bn_.backward(d);
        dx_skip = proj_.backward(t);
    } else {
        dx_skip = d;
    }

    Tensor t = bn2_.backward(d);
    Tensor d_relu1 = conv2_.backward(t);
    if (d_mid) d_relu1.add_(*d_mid);
    t = relu1_.backward(d_relu1);
    t = bn1_.backward(t);
    Tensor dx = conv1_.backward(t);
    dx.add_(dx_skip);
    return dx;
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

Encoder::Encoder(EncoderConfig config) : config_(std::move(config)) {
    config_.validate();
    const std::size_t k = config_.stem_kernel;
    stem_conv_ = nn::Conv2d(3, config_.stem_channels, k, k == 7 ? 2 : 1, k == 7 ? 3 : 1);
    stem_bn_ = nn::BatchNorm2d(config_.stem_channels);
    stem_pool_ = nn::MaxPool2d(2, 2);

    std::size_t in_ch = config_.stem_channels;
    for (const auto& s : config_.sections) {
        for (std::size_t b = 0; b < s.blocks; ++b) {
            blocks_.emplace_back(in_ch, s.channels, b == 0 ? s.stride : 1);
            in_ch = s.channels;
        }
    }
    tap_shapes_ = list_taps(config_);
}

void Encoder::init(Rng& rng) {
    stem_conv_.init(rng);
    for (auto& b : blocks_) b.init(rng);
}

void Encoder::set_training(bool training) {
    training_ = training;
    stem_bn_.set_training(training);
    for (auto& b : blocks_) b.set_training(training);
}

TapMap Encoder::forward_with_taps(const Tensor& batch, const TapSpec& taps, bool retain) {
    taps.validate(tap_count());
    if (batch.ndim() != 4 || batch.dim(1) != 3 || batch.dim(2) != config_.input_size ||
        batch.dim(3) != config_.input_size) {
        throw ShapeError("expected [N, 3, " + std::to_string(config_.input_size) + ", " +
                         std::to_string(config_.input_size) + "] batch, got " + batch.shape_str());
    }
    cached_batch_ = batch.dim(0);

    Tensor x = stem_conv_.forward(batch, retain);
    x = stem_bn_.forward(x, retain);
    x = stem_relu_.forward(x, retain);
    if (config_.stem_pool) x = stem_pool_.forward(x, retain);

    TapMap out;
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
        const std::size_t odd_tap = 2 * b + 1;
        const std::size_t even_tap = 2 * b + 2;
        Tensor mid;
        const bool want_mid = taps.contains(odd_tap);
        x = blocks_[b].forward(x, retain, want_mid ? &mid : nullptr);
        if (want_mid) out.emplace(odd_tap, std::move(mid));
        if (taps.contains(even_tap)) out.emplace(even_tap, x);
    }
    return out;
}

Tensor Encoder::forward(const Tensor& batch, bool retain) {
    TapSpec top{{tap_count()}};
    TapMap m = forward_with_taps(batch, top, retain);
    return std::move(m.at(tap_count()));
}

Tensor Encoder::backward(const TapGradMap& tap_grads) {
    if (tap_grads.empty()) throw ShapeError("backward needs at least one tap gradient");
    if (cached_batch_ == 0) throw ShapeError("backward called before a retained forward");
    for (const auto& [tap, g] : tap_grads) {
        if (tap < 1 || tap > tap_count()) {
            throw ConfigError("tap index " + std::to_string(tap) + " out of range; valid taps are 1.." +
                              std::to_string(tap_count()));
        }
        const auto& ts = tap_shapes_[tap - 1];
        std::vector<std::size_t> want{cached_batch_, ts.channels, ts.height, ts.width};
        if (g.shape() != want) {
            throw ShapeError("tap " + std::to_string(tap) + " gradient has shape " + g.shape_str());
        }
    }

    const auto& top_shape = tap_shapes_.back();
    Tensor dy({cached_batch_, top_shape.channels, top_shape.height, top_shape.width});
    for (std::size_t bi = blocks_.size(); bi-- > 0;) {
        const std::size_t even_tap = 2 * bi + 2;
        const std::size_t odd_tap = 2 * bi + 1;
        auto it = tap_grads.find(even_tap);
        if (it != tap_grads.end()) dy.add_(it->second);
        auto mid_it = tap_grads.find(odd_tap);
        dy = blocks_[bi].backward(dy, mid_it != tap_grads.end() ? &mid_it->second : nullptr);
    }

    if (config_.stem_pool) dy = stem_pool_.backward(dy);
    dy = stem_relu_.backward(dy);
    dy = stem_bn_.backward(dy);
    return stem_conv_.backward(dy);
}

nn::ParamList Encoder::parameters() {
    nn::ParamList out;
    stem_conv_.collect("stem.conv", out);
    stem_bn_.collect("stem.bn", out);
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
        blocks_[b].collect("block" + std::to_string(b + 1), out);
    }
    return out;
}

std::vector<std::pair<std::string, Tensor*>> Encoder::state_tensors() {
    std::vector<std::pair<std::string, Tensor*>> out;
    stem_bn_.collect_state("stem.bn", out);
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
        blocks_[b].collect_state("block" + std::to_string(b + 1), out);
    }
    return out;
}

std::uint64_t Encoder::fingerprint() {
    auto params = parameters();
    std::uint64_t h = nn::param_fingerprint(params);
    for (const auto& [name, t] : state_tensors()) {
        h = fnv1a64(name, h);
        h = fnv1a64(t->data(), t->numel() * sizeof(double), h);
    }
    return h;
}

void Encoder::save(const std::filesystem::path& path) {
    TensorFile tf;
    tf.meta() = {{"kind", "encoder"}, {"format_version", 1}, {"config", config_}};
    for (const auto& p : parameters()) tf.put("param." + p.name, *p.value);
    for (const auto& [name, t] : state_tensors()) tf.put("state." + name, *t);
    tf.save(path);
}

Encoder Encoder::load(const std::filesystem::path& path) {
    TensorFile tf = TensorFile::load(path);
    if (tf.meta().value("kind", "") != "encoder") {
        throw IoError("not an encoder checkpoint: " + path.string());
    }
    Encoder enc(tf.meta().at("config").get<EncoderConfig>());
    for (const auto& p : enc.parameters()) {
        const Tensor& stored = tf.get("param." + p.name);
        if (!stored.same_shape(*p.value)) {
            throw IoError("checkpoint tensor " + p.name + " has shape " + stored.shape_str());
        }
        *p.value = stored;
    }
    for (auto& [name, t] : enc.state_tensors()) {
        const Tensor& stored = tf.get("state." + name);
        if (!stored.same_shape(*t)) {
            throw IoError("checkpoint tensor " + name + " has shape " + stored.shape_str());
        }
        *t = stored;
    }
    return enc;
}

} // namespace mlcl
