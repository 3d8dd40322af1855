#ifndef MLCL_ENCODERS_HPP
#define MLCL_ENCODERS_HPP

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mlcl/nn.hpp"
#include "mlcl/rng.hpp"
#include "mlcl/tensor.hpp"

namespace mlcl {

/// One residual section: `blocks` basic blocks at `channels`, the first block
/// entered at `stride`.
struct SectionDesc {
    std::size_t blocks = 0;
    std::size_t channels = 0;
    std::size_t stride = 1;
};

struct EncoderConfig {
    std::string name = "custom";
    std::size_t input_size = 80;
    std::size_t stem_channels = 64;
    std::size_t stem_kernel = 7;   // 7 (stride 2, pad 3) or 3 (stride 1, pad 1)
    bool stem_pool = true;         // 2x2/2 max pool after the stem
    std::vector<SectionDesc> sections;

    /// Tappable conv layers: two per basic block. The stem is layer 0 and
    /// has no tap index.
    std::size_t tap_count() const;
    /// Taps plus the stem.
    std::size_t conv_layer_count() const { return tap_count() + 1; }

    void validate() const;
};

/// Stock configs loadable by name: resnet18, resnet18-v1, resnet18-v2, small.
EncoderConfig encoder_preset(const std::string& name);
std::vector<std::string> encoder_preset_names();

void to_json(nlohmann::json& j, const SectionDesc& s);
void from_json(const nlohmann::json& j, SectionDesc& s);
void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);

/// Ordered list of conv-layer indices, 1-based from the input.
struct TapSpec {
    std::vector<std::size_t> taps;

    /// Strictly increasing, non-empty, every index in [1, tap_count].
    void validate(std::size_t tap_count) const;
    bool contains(std::size_t t) const;
};

/// Tap index -> feature map ([N, C, H, W] for batched forwards).
using TapMap = std::map<std::size_t, Tensor>;

/// Gradient flowing into each tapped feature map; absent taps mean zero.
using TapGradMap = std::map<std::size_t, Tensor>;

struct TapShape {
    std::size_t index;
    std::size_t channels, height, width;
};

/// Pure shape arithmetic; consistent with forward_with_taps outputs.
std::vector<TapShape> list_taps(const EncoderConfig& config);

/// Basic residual block: conv-bn-relu, conv-bn, skip add, relu. A 1x1
/// projection runs on the skip when shape changes.
class BasicBlock {
public:
    BasicBlock() = default;
    BasicBlock(std::size_t in_ch, std::size_t out_ch, std::size_t stride);

    void init(Rng& rng);
    void set_training(bool training);
    void collect(const std::string& prefix, nn::ParamList& out);
    void collect_state(const std::string& prefix,
                       std::vector<std::pair<std::string, Tensor*>>& out);

    /// Writes the post-relu1 map into `mid` (tap 2b-1); returns the block
    /// output (tap 2b).
    Tensor forward(const Tensor& x, bool retain, Tensor* mid);

    /// dy: gradient on the block output; d_mid: gradient injected at the
    /// post-relu1 map (may be null). Returns gradient on the block input.
    Tensor backward(const Tensor& dy, const Tensor* d_mid);

private:
    nn::Conv2d conv1_, conv2_;
    nn::BatchNorm2d bn1_, bn2_;
    nn::ReLU relu1_, relu2_;
    bool has_proj_ = false;
    nn::Conv2d proj_;
    nn::BatchNorm2d proj_bn_;
};

class Encoder {
public:
    Encoder() = default;
    explicit Encoder(EncoderConfig config);

    /// He-normal conv weights, unit BN scale; deterministic given the seed.
    void init(Rng& rng);
    void set_training(bool training);
    bool training() const { return training_; }

    const EncoderConfig& config() const { return config_; }
    std::size_t tap_count() const { return config_.tap_count(); }

    /// One pass computing all requested taps. Input [N, 3, S, S] with
    /// S = config.input_size. retain=true keeps caches for backward().
    TapMap forward_with_taps(const Tensor& batch, const TapSpec& taps, bool retain);

    /// Final conv feature map (tap tap_count), before any pooling.
    Tensor forward(const Tensor& batch, bool retain);

    /// Accumulates parameter gradients from gradients injected at taps;
    /// returns the input gradient.
    Tensor backward(const TapGradMap& tap_grads);

    nn::ParamList parameters();
    std::vector<std::pair<std::string, Tensor*>> state_tensors();
    std::uint64_t fingerprint();

    /// Versioned binary checkpoint with the config embedded.
    void save(const std::filesystem::path& path);
    static Encoder load(const std::filesystem::path& path);

private:
    EncoderConfig config_;
    nn::Conv2d stem_conv_;
    nn::BatchNorm2d stem_bn_;
    nn::ReLU stem_relu_;
    nn::MaxPool2d stem_pool_;
    std::vector<BasicBlock> blocks_;
    bool training_ = true;
    std::vector<TapShape> tap_shapes_; // static per-config shape table
    std::size_t cached_batch_ = 0;     // batch size of the last retained forward
};

/// The tap indices of the final conv layer of each of the last `count`
/// residual blocks (highest first block order preserved: ascending).
std::vector<std::size_t> last_block_taps(const EncoderConfig& config, std::size_t count);

} // namespace mlcl

#endif
