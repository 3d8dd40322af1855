#ifndef MLCL_NN_HPP
#define MLCL_NN_HPP

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mlcl/rng.hpp"
#include "mlcl/tensor.hpp"

namespace mlcl::nn {

/// Named handle onto a parameter tensor and its gradient accumulator.
struct ParamRef {
    std::string name;
    Tensor* value;
    Tensor* grad;
};

using ParamList = std::vector<ParamRef>;

void zero_grads(ParamList& params);
std::size_t param_count(const ParamList& params);

/// Fingerprint over the raw bytes of all parameter values, in list order.
std::uint64_t param_fingerprint(const ParamList& params);

// ---------------------------------------------------------------------------
// Layers. forward(x, retain) caches what backward needs when retain is true.
// backward() accumulates parameter gradients and returns the input gradient.
// ---------------------------------------------------------------------------

class Conv2d {
public:
    Conv2d() = default;
    Conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t ksize, std::size_t stride,
           std::size_t pad);

    void init(Rng& rng); // He-normal weights, zero bias

    static std::size_t out_dim(std::size_t in, std::size_t ksize, std::size_t stride,
                               std::size_t pad) {
        return (in + 2 * pad - ksize) / stride + 1;
    }

    Tensor forward(const Tensor& x, bool retain);
    Tensor backward(const Tensor& dy);

    void collect(const std::string& prefix, ParamList& out);

    std::size_t in_channels() const { return in_ch_; }
    std::size_t out_channels() const { return out_ch_; }

    Tensor w; // [out_ch, in_ch * k * k]
    Tensor b; // [out_ch]
    Tensor gw;
    Tensor gb;

private:
    void im2col(const Tensor& x, std::size_t sample, Tensor& col) const;
    void col2im(const Tensor& col, Tensor& dx, std::size_t sample) const;

    std::size_t in_ch_ = 0, out_ch_ = 0, ksize_ = 0, stride_ = 1, pad_ = 0;
    Tensor cached_x_;
    bool has_cache_ = false;
};

class BatchNorm2d {
public:
    BatchNorm2d() = default;
    explicit BatchNorm2d(std::size_t channels, double eps = 1e-5, double momentum = 0.1);

    Tensor forward(const Tensor& x, bool retain);
    Tensor backward(const Tensor& dy);

    void set_training(bool training) { training_ = training; }
    bool training() const { return training_; }

    void collect(const std::string& prefix, ParamList& out);
    /// Running statistics are state, not parameters; serialized separately.
    void collect_state(const std::string& prefix, std::vector<std::pair<std::string, Tensor*>>& out);

    Tensor gamma, beta, g_gamma, g_beta;
    Tensor running_mean, running_var;

private:
    std::size_t ch_ = 0;
    double eps_ = 1e-5, momentum_ = 0.1;
    bool training_ = true;
    Tensor xhat_, invstd_;
    bool has_cache_ = false;
};

class ReLU {
public:
    Tensor forward(const Tensor& x, bool retain);
    Tensor backward(const Tensor& dy) const;

private:
    Tensor mask_;
    bool has_cache_ = false;
};

class MaxPool2d {
public:
    MaxPool2d() = default;
    MaxPool2d(std::size_t ksize, std::size_t stride) : ksize_(ksize), stride_(stride) {}

    Tensor forward(const Tensor& x, bool retain);
    Tensor backward(const Tensor& dy) const;

private:
    std::size_t ksize_ = 2, stride_ = 2;
    std::vector<std::size_t> argmax_;
    std::vector<std::size_t> in_shape_;
    bool has_cache_ = false;
};

/// [N, C, H, W] -> [N, C] spatial mean.
class GlobalAvgPool {
public:
    Tensor forward(const Tensor& x, bool retain);
    Tensor backward(const Tensor& dy) const;

private:
    std::vector<std::size_t> in_shape_;
    bool has_cache_ = false;
};

class Linear {
public:
    Linear() = default;
    Linear(std::size_t in_dim, std::size_t out_dim);

    void init(Rng& rng); // Glorot-normal weights, zero bias

    Tensor forward(const Tensor& x, bool retain); // x: [N, in] -> [N, out]
    Tensor backward(const Tensor& dy);

    void collect(const std::string& prefix, ParamList& out);

    std::size_t in_dim() const { return in_dim_; }
    std::size_t out_dim() const { return out_dim_; }

    Tensor w; // [out, in]
    Tensor b; // [out]
    Tensor gw;
    Tensor gb;

private:
    std::size_t in_dim_ = 0, out_dim_ = 0;
    Tensor cached_x_;
    bool has_cache_ = false;
};

/// Row-wise l2 normalization of [N, d]; rejects rows with vanishing norm.
class L2NormalizeRows {
public:
    Tensor forward(const Tensor& x, bool retain);
    Tensor backward(const Tensor& dy) const;

    static constexpr double kMinNorm = 1e-12;

private:
    Tensor y_;
    std::vector<double> norms_;
    bool has_cache_ = false;
};

class Sigmoid {
public:
    Tensor forward(const Tensor& x, bool retain);
    Tensor backward(const Tensor& dy) const;

private:
    Tensor y_;
    bool has_cache_ = false;
};

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

struct LossAndGrad {
    double value;
    Tensor grad; // w.r.t. the first argument
};

/// Mean cross-entropy over rows of [N, K] logits. Throws on out-of-range labels.
LossAndGrad softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);

/// Cross-entropy value only (no gradient).
double softmax_cross_entropy_value(const Tensor& logits, const std::vector<int>& labels);

/// Mean squared error between equal-shaped tensors.
LossAndGrad mse_loss(const Tensor& pred, const Tensor& target);

// ---------------------------------------------------------------------------
// Optimizer: SGD with momentum (optionally Nesterov), torch update semantics.
// ---------------------------------------------------------------------------

struct SgdConfig {
    double momentum = 0.0;
    bool nesterov = false;
    double weight_decay = 0.0;
};

class Sgd {
public:
    Sgd() = default;
    explicit Sgd(SgdConfig cfg) : cfg_(cfg) {}

    void step(ParamList& params, double lr);

    const SgdConfig& config() const { return cfg_; }

    /// Velocity buffers by parameter name, for checkpointing.
    std::map<std::string, Tensor>& state() { return velocity_; }
    const std::map<std::string, Tensor>& state() const { return velocity_; }

private:
    SgdConfig cfg_;
    std::map<std::string, Tensor> velocity_;
};

// ---------------------------------------------------------------------------
// Small helpers shared by models
// ---------------------------------------------------------------------------

/// Concatenate two [N, C, H, W] batches along the channel axis.
Tensor concat_channels(const Tensor& a, const Tensor& b);

/// Split a channel-concat gradient back into the two parts.
std::pair<Tensor, Tensor> split_channels(const Tensor& d, std::size_t c_first);

} // namespace mlcl::nn

#endif
