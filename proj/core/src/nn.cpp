#include "mlcl/nn.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

#include "mlcl/errors.hpp"
#include "mlcl/hash.hpp"

namespace mlcl::nn {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

namespace {

MapMat map2d(Tensor& t, std::size_t rows, std::size_t cols) {
    return MapMat(t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

ConstMapMat cmap2d(const Tensor& t, std::size_t rows, std::size_t cols) {
    return ConstMapMat(t.data(), static_cast<Eigen::Index>(rows),
                       static_cast<Eigen::Index>(cols));
}

void require_4d(const Tensor& x, const char* who) {
    if (x.ndim() != 4) throw ShapeError(std::string(who) + ": expected [N, C, H, W], got " + x.shape_str());
}

} // namespace

void zero_grads(ParamList& params) {
    for (auto& p : params) p.grad->zero();
}

std::size_t param_count(const ParamList& params) {
    std::size_t n = 0;
    for (const auto& p : params) n += p.value->numel();
    return n;
}

std::uint64_t param_fingerprint(const ParamList& params) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& p : params) {
        h = fnv1a64(p.name, h);
        h = fnv1a64(p.value->data(), p.value->numel() * sizeof(double), h);
    }
    return h;
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

Conv2d::Conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t ksize, std::size_t stride,
               std::size_t pad)
    : w({out_ch, in_ch * ksize * ksize}),
      b({out_ch}),
      gw({out_ch, in_ch * ksize * ksize}),
      gb({out_ch}),
      in_ch_(in_ch),
      out_ch_(out_ch),
      ksize_(ksize),
      stride_(stride),
      pad_(pad) {}

void Conv2d::init(Rng& rng) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(in_ch_ * ksize_ * ksize_));
    for (std::size_t i = 0; i < w.numel(); ++i) w[i] = rng.normal(0.0, stddev);
    b.zero();
}

void Conv2d::im2col(const Tensor& x, std::size_t sample, Tensor& col) const {
    const std::size_t h = x.dim(2), wd = x.dim(3);
    const std::size_t ho = out_dim(h, ksize_, stride_, pad_);
    const std::size_t wo = out_dim(wd, ksize_, stride_, pad_);
    double* cp = col.data();
    const double* xp = x.data() + sample * in_ch_ * h * wd;
    for (std::size_t c = 0; c < in_ch_; ++c) {
        for (std::size_t ky = 0; ky < ksize_; ++ky) {
            for (std::size_t kx = 0; kx < ksize_; ++kx) {
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    const std::ptrdiff_t iy =
                        static_cast<std::ptrdiff_t>(oy * stride_ + ky) - static_cast<std::ptrdiff_t>(pad_);
                    const bool row_ok = iy >= 0 && iy < static_cast<std::ptrdiff_t>(h);
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                        const std::ptrdiff_t ix =
                            static_cast<std::ptrdiff_t>(ox * stride_ + kx) - static_cast<std::ptrdiff_t>(pad_);
                        double v = 0.0;
                        if (row_ok && ix >= 0 && ix < static_cast<std::ptrdiff_t>(wd)) {
                            v = xp[(c * h + static_cast<std::size_t>(iy)) * wd + static_cast<std::size_t>(ix)];
                        }
                        *cp++ = v;
                    }
                }
            }
        }
    }
}

void Conv2d::col2im(const Tensor& col, Tensor& dx, std::size_t sample) const {
    const std::size_t h = dx.dim(2), wd = dx.dim(3);
    const std::size_t ho = out_dim(h, ksize_, stride_, pad_);
    const std::size_t wo = out_dim(wd, ksize_, stride_, pad_);
    const double* cp = col.data();
    double* xp = dx.data() + sample * in_ch_ * h * wd;
    for (std::size_t c = 0; c < in_ch_; ++c) {
        for (std::size_t ky = 0; ky < ksize_; ++ky) {
            for (std::size_t kx = 0; kx < ksize_; ++kx) {
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    const std::ptrdiff_t iy =
                        static_cast<std::ptrdiff_t>(oy * stride_ + ky) - static_cast<std::ptrdiff_t>(pad_);
                    const bool row_ok = iy >= 0 && iy < static_cast<std::ptrdiff_t>(h);
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                        const std::ptrdiff_t ix =
                            static_cast<std::ptrdiff_t>(ox * stride_ + kx) - static_cast<std::ptrdiff_t>(pad_);
                        if (row_ok && ix >= 0 && ix < static_cast<std::ptrdiff_t>(wd)) {
                            xp[(c * h + static_cast<std::size_t>(iy)) * wd + static_cast<std::size_t>(ix)] += *cp;
                        }
                        ++cp;
                    }
                }
            }
        }
    }
}

Tensor Conv2d::forward(const Tensor& x, bool retain) {
    require_4d(x, "Conv2d");
    if (x.dim(1) != in_ch_) {
        throw ShapeError("Conv2d: input has " + std::to_string(x.dim(1)) + " channels, expected " +
                         std::to_string(in_ch_));
    }
    const std::size_t n = x.dim(0), h = x.dim(2), wd = x.dim(3);
    const std::size_t ho = out_dim(h, ksize_, stride_, pad_);
    const std::size_t wo = out_dim(wd, ksize_, stride_, pad_);
    Tensor y({n, out_ch_, ho, wo});
    Tensor col({in_ch_ * ksize_ * ksize_, ho * wo});
    auto wm = cmap2d(w, out_ch_, in_ch_ * ksize_ * ksize_);
    for (std::size_t s = 0; s < n; ++s) {
        im2col(x, s, col);
        MapMat ym(y.data() + s * out_ch_ * ho * wo, static_cast<Eigen::Index>(out_ch_),
                  static_cast<Eigen::Index>(ho * wo));
        ym.noalias() = wm * cmap2d(col, in_ch_ * ksize_ * ksize_, ho * wo);
        for (std::size_t oc = 0; oc < out_ch_; ++oc) ym.row(static_cast<Eigen::Index>(oc)).array() += b[oc];
    }
    if (retain) {
        cached_x_ = x;
        has_cache_ = true;
    }
    return y;
}

Tensor Conv2d::backward(const Tensor& dy) {
    if (!has_cache_) throw Error("Conv2d::backward without retained forward");
    const Tensor& x = cached_x_;
    const std::size_t n = x.dim(0), h = x.dim(2), wd = x.dim(3);
    const std::size_t ho = out_dim(h, ksize_, stride_, pad_);
    const std::size_t wo = out_dim(wd, ksize_, stride_, pad_);
    Tensor dx({n, in_ch_, h, wd});
    Tensor col({in_ch_ * ksize_ * ksize_, ho * wo});
    Tensor dcol({in_ch_ * ksize_ * ksize_, ho * wo});
    auto wm = cmap2d(w, out_ch_, in_ch_ * ksize_ * ksize_);
    auto gwm = map2d(gw, out_ch_, in_ch_ * ksize_ * ksize_);
    for (std::size_t s = 0; s < n; ++s) {
        ConstMapMat dym(dy.data() + s * out_ch_ * ho * wo, static_cast<Eigen::Index>(out_ch_),
                        static_cast<Eigen::Index>(ho * wo));
        im2col(x, s, col);
        gwm.noalias() += dym * cmap2d(col, in_ch_ * ksize_ * ksize_, ho * wo).transpose();
        for (std::size_t oc = 0; oc < out_ch_; ++oc) gb[oc] += dym.row(static_cast<Eigen::Index>(oc)).sum();
        map2d(dcol, in_ch_ * ksize_ * ksize_, ho * wo).noalias() = wm.transpose() * dym;
        col2im(dcol, dx, s);
    }
    return dx;
}

void Conv2d::collect(const std::string& prefix, ParamList& out) {
    out.push_back({prefix + ".w", &w, &gw});
    out.push_back({prefix + ".b", &b, &gb});
}

// ---------------------------------------------------------------------------
// BatchNorm2d
// ---------------------------------------------------------------------------

BatchNorm2d::BatchNorm2d(std::size_t channels, double eps, double momentum)
    : gamma(Tensor::full({channels}, 1.0)),
      beta({channels}),
      g_gamma({channels}),
      g_beta({channels}),
      running_mean({channels}),
      running_var(Tensor::full({channels}, 1.0)),
      ch_(channels),
      eps_(eps),
      momentum_(momentum) {}

Tensor BatchNorm2d::forward(const Tensor& x, bool retain) {
    require_4d(x, "BatchNorm2d");
    const std::size_t n = x.dim(0), h = x.dim(2), wd = x.dim(3);
    const std::size_t plane = h * wd;
    const std::size_t m = n * plane;
    Tensor y(x.shape());
    if (training_) {
        if (retain) {
            xhat_ = Tensor(x.shape());
            invstd_ = Tensor({ch_});
        }
        for (std::size_t c = 0; c < ch_; ++c) {
            double mean = 0.0;
            for (std::size_t s = 0; s < n; ++s) {
                const double* xp = x.data() + (s * ch_ + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) mean += xp[i];
            }
            mean /= static_cast<double>(m);
            double var = 0.0;
            for (std::size_t s = 0; s < n; ++s) {
                const double* xp = x.data() + (s * ch_ + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) {
                    const double d = xp[i] - mean;
                    var += d * d;
                }
            }
            var /= static_cast<double>(m);
            const double invstd = 1.0 / std::sqrt(var + eps_);
            for (std::size_t s = 0; s < n; ++s) {
                const double* xp = x.data() + (s * ch_ + c) * plane;
                double* yp = y.data() + (s * ch_ + c) * plane;
                double* hp = retain ? xhat_.data() + (s * ch_ + c) * plane : nullptr;
                for (std::size_t i = 0; i < plane; ++i) {
                    const double xh = (xp[i] - mean) * invstd;
                    if (hp) hp[i] = xh;
                    yp[i] = gamma[c] * xh + beta[c];
                }
            }
            running_mean[c] = (1.0 - momentum_) * running_mean[c] + momentum_ * mean;
            running_var[c] = (1.0 - momentum_) * running_var[c] + momentum_ * var;
            if (retain) invstd_[c] = invstd;
        }
        has_cache_ = retain;
    } else {
        for (std::size_t c = 0; c < ch_; ++c) {
            const double invstd = 1.0 / std::sqrt(running_var[c] + eps_);
            const double mean = running_mean[c];
            for (std::size_t s = 0; s < n; ++s) {
                const double* xp = x.data() + (s * ch_ + c) * plane;
                double* yp = y.data() + (s * ch_ + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) {
                    yp[i] = gamma[c] * (xp[i] - mean) * invstd + beta[c];
                }
            }
        }
        has_cache_ = false;
    }
    return y;
}

Tensor BatchNorm2d::backward(const Tensor& dy) {
    if (!training_) {
        // Inference-mode statistics are constants.
        Tensor dx(dy.shape());
        const std::size_t n = dy.dim(0), plane = dy.dim(2) * dy.dim(3);
        for (std::size_t c = 0; c < ch_; ++c) {
            const double k = gamma[c] / std::sqrt(running_var[c] + eps_);
            for (std::size_t s = 0; s < n; ++s) {
                const double* dp = dy.data() + (s * ch_ + c) * plane;
                double* xp = dx.data() + (s * ch_ + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) xp[i] = k * dp[i];
            }
        }
        return dx;
    }
    if (!has_cache_) throw Error("BatchNorm2d::backward without retained forward");
    const std::size_t n = dy.dim(0), plane = dy.dim(2) * dy.dim(3);
    const double m = static_cast<double>(n * plane);
    Tensor dx(dy.shape());
    for (std::size_t c = 0; c < ch_; ++c) {
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (std::size_t s = 0; s < n; ++s) {
            const double* dp = dy.data() + (s * ch_ + c) * plane;
            const double* hp = xhat_.data() + (s * ch_ + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                sum_dy += dp[i];
                sum_dy_xhat += dp[i] * hp[i];
            }
        }
        g_beta[c] += sum_dy;
        g_gamma[c] += sum_dy_xhat;
        const double k = gamma[c] * invstd_[c] / m;
        for (std::size_t s = 0; s < n; ++s) {
            const double* dp = dy.data() + (s * ch_ + c) * plane;
            const double* hp = xhat_.data() + (s * ch_ + c) * plane;
            double* xp = dx.data() + (s * ch_ + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                xp[i] = k * (m * dp[i] - sum_dy - hp[i] * sum_dy_xhat);
            }
        }
    }
    return dx;
}

void BatchNorm2d::collect(const std::string& prefix, ParamList& out) {
    out.push_back({prefix + ".gamma", &gamma, &g_gamma});
    out.push_back({prefix + ".beta", &beta, &g_beta});
}

void BatchNorm2d::collect_state(const std::string& prefix,
                                std::vector<std::pair<std::string, Tensor*>>& out) {
    out.emplace_back(prefix + ".running_mean", &running_mean);
    out.emplace_back(prefix + ".running_var", &running_var);
}

// ---------------------------------------------------------------------------
// ReLU / MaxPool2d / GlobalAvgPool
// ---------------------------------------------------------------------------

Tensor ReLU::forward(const Tensor& x, bool retain) {
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
    if (retain) {
        mask_ = Tensor(x.shape());
        for (std::size_t i = 0; i < x.numel(); ++i) mask_[i] = x[i] > 0.0 ? 1.0 : 0.0;
        has_cache_ = true;
    }
    return y;
}

Tensor ReLU::backward(const Tensor& dy) const {
    if (!has_cache_) throw Error("ReLU::backward without retained forward");
    Tensor dx(dy.shape());
    for (std::size_t i = 0; i < dy.numel(); ++i) dx[i] = dy[i] * mask_[i];
    return dx;
}

Tensor MaxPool2d::forward(const Tensor& x, bool retain) {
    require_4d(x, "MaxPool2d");
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
    if (h < ksize_ || wd < ksize_) {
        throw ShapeError("MaxPool2d: input " + x.shape_str() + " smaller than window");
    }
    const std::size_t ho = (h - ksize_) / stride_ + 1;
    const std::size_t wo = (wd - ksize_) / stride_ + 1;
    Tensor y({n, c, ho, wo});
    if (retain) {
        argmax_.assign(y.numel(), 0);
        in_shape_ = x.shape();
    }
    std::size_t oi = 0;
    for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double* xp = x.data() + (s * c + ch) * h * wd;
            for (std::size_t oy = 0; oy < ho; ++oy) {
                for (std::size_t ox = 0; ox < wo; ++ox, ++oi) {
                    double best = -std::numeric_limits<double>::infinity();
                    std::size_t best_idx = 0;
                    for (std::size_t ky = 0; ky < ksize_; ++ky) {
                        for (std::size_t kx = 0; kx < ksize_; ++kx) {
                            const std::size_t idx = (oy * stride_ + ky) * wd + ox * stride_ + kx;
                            if (xp[idx] > best) {
                                best = xp[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    y[oi] = best;
                    if (retain) argmax_[oi] = (s * c + ch) * h * wd + best_idx;
                }
            }
        }
    }
    has_cache_ = retain;
    return y;
}

Tensor MaxPool2d::backward(const Tensor& dy) const {
    if (!has_cache_) throw Error("MaxPool2d::backward without retained forward");
    Tensor dx(in_shape_);
    for (std::size_t i = 0; i < dy.numel(); ++i) dx[argmax_[i]] += dy[i];
    return dx;
}

Tensor GlobalAvgPool::forward(const Tensor& x, bool retain) {
    require_4d(x, "GlobalAvgPool");
    const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
    Tensor y({n, c});
    for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double* xp = x.data() + (s * c + ch) * plane;
            double acc = 0.0;
            for (std::size_t i = 0; i < plane; ++i) acc += xp[i];
            y.at2(s, ch) = acc / static_cast<double>(plane);
        }
    }
    if (retain) {
        in_shape_ = x.shape();
        has_cache_ = true;
    }
    return y;
}

Tensor GlobalAvgPool::backward(const Tensor& dy) const {
    if (!has_cache_) throw Error("GlobalAvgPool::backward without retained forward");
    const std::size_t n = in_shape_[0], c = in_shape_[1], plane = in_shape_[2] * in_shape_[3];
    Tensor dx(in_shape_);
    const double inv = 1.0 / static_cast<double>(plane);
    for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double g = dy.at2(s, ch) * inv;
            double* xp = dx.data() + (s * c + ch) * plane;
            for (std::size_t i = 0; i < plane; ++i) xp[i] = g;
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

Linear::Linear(std::size_t in_dim, std::size_t out_dim)
    : w({out_dim, in_dim}), b({out_dim}), gw({out_dim, in_dim}), gb({out_dim}),
      in_dim_(in_dim), out_dim_(out_dim) {}

void Linear::init(Rng& rng) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(in_dim_ + out_dim_));
    for (std::size_t i = 0; i < w.numel(); ++i) w[i] = rng.normal(0.0, stddev);
    b.zero();
}

Tensor Linear::forward(const Tensor& x, bool retain) {
    if (x.ndim() != 2 || x.dim(1) != in_dim_) {
        throw ShapeError("Linear: expected [N, " + std::to_string(in_dim_) + "], got " + x.shape_str());
    }
    const std::size_t n = x.dim(0);
    Tensor y({n, out_dim_});
    map2d(y, n, out_dim_).noalias() =
        cmap2d(x, n, in_dim_) * cmap2d(w, out_dim_, in_dim_).transpose();
    for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t o = 0; o < out_dim_; ++o) y.at2(s, o) += b[o];
    }
    if (retain) {
        cached_x_ = x;
        has_cache_ = true;
    }
    return y;
}

Tensor Linear::backward(const Tensor& dy) {
    if (!has_cache_) throw Error("Linear::backward without retained forward");
    const std::size_t n = cached_x_.dim(0);
    map2d(gw, out_dim_, in_dim_).noalias() +=
        cmap2d(dy, n, out_dim_).transpose() * cmap2d(cached_x_, n, in_dim_);
    for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t o = 0; o < out_dim_; ++o) gb[o] += dy.at2(s, o);
    }
    Tensor dx({n, in_dim_});
    map2d(dx, n, in_dim_).noalias() = cmap2d(dy, n, out_dim_) * cmap2d(w, out_dim_, in_dim_);
    return dx;
}

void Linear::collect(const std::string& prefix, ParamList& out) {
    out.push_back({prefix + ".w", &w, &gw});
    out.push_back({prefix + ".b", &b, &gb});
}

// ---------------------------------------------------------------------------
// L2NormalizeRows / Sigmoid
// ---------------------------------------------------------------------------

Tensor L2NormalizeRows::forward(const Tensor& x, bool retain) {
    if (x.ndim() != 2) throw ShapeError("L2NormalizeRows: expected [N, d], got " + x.shape_str());
    const std::size_t n = x.dim(0), d = x.dim(1);
    Tensor y(x.shape());
    std::vector<double> norms(n);
    for (std::size_t s = 0; s < n; ++s) {
        double sq = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double v = x.at2(s, i);
            sq += v * v;
        }
        const double norm = std::sqrt(sq);
        if (!(norm > kMinNorm)) {
            throw NumericError("cannot l2-normalize row " + std::to_string(s) +
                               ": norm is " + std::to_string(norm));
        }
        norms[s] = norm;
        for (std::size_t i = 0; i < d; ++i) y.at2(s, i) = x.at2(s, i) / norm;
    }
    if (retain) {
        y_ = y;
        norms_ = std::move(norms);
        has_cache_ = true;
    }
    return y;
}

Tensor L2NormalizeRows::backward(const Tensor& dy) const {
    if (!has_cache_) throw Error("L2NormalizeRows::backward without retained forward");
    const std::size_t n = dy.dim(0), d = dy.dim(1);
    Tensor dx(dy.shape());
    for (std::size_t s = 0; s < n; ++s) {
        double dot = 0.0;
        for (std::size_t i = 0; i < d; ++i) dot += y_.at2(s, i) * dy.at2(s, i);
        for (std::size_t i = 0; i < d; ++i) {
            dx.at2(s, i) = (dy.at2(s, i) - y_.at2(s, i) * dot) / norms_[s];
        }
    }
    return dx;
}

Tensor Sigmoid::forward(const Tensor& x, bool retain) {
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) y[i] = 1.0 / (1.0 + std::exp(-x[i]));
    if (retain) {
        y_ = y;
        has_cache_ = true;
    }
    return y;
}

Tensor Sigmoid::backward(const Tensor& dy) const {
    if (!has_cache_) throw Error("Sigmoid::backward without retained forward");
    Tensor dx(dy.shape());
    for (std::size_t i = 0; i < dy.numel(); ++i) dx[i] = dy[i] * y_[i] * (1.0 - y_[i]);
    return dx;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

namespace {

void check_labels(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.ndim() != 2) throw ShapeError("cross_entropy: logits must be [N, K]");
    if (logits.dim(0) != labels.size()) {
        throw ShapeError("cross_entropy: " + std::to_string(logits.dim(0)) + " logit rows vs " +
                         std::to_string(labels.size()) + " labels");
    }
    const int k = static_cast<int>(logits.dim(1));
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= k) {
            throw Error("cross_entropy: label " + std::to_string(labels[i]) + " at row " +
                        std::to_string(i) + " outside class range [0, " + std::to_string(k) + ")");
        }
    }
}

} // namespace

LossAndGrad softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    check_labels(logits, labels);
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    Tensor dlogits(logits.shape());
    double loss = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
        double mx = logits.at2(s, 0);
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, logits.at2(s, j));
        double lse = 0.0;
        for (std::size_t j = 0; j < k; ++j) lse += std::exp(logits.at2(s, j) - mx);
        const double log_z = mx + std::log(lse);
        loss += log_z - logits.at2(s, static_cast<std::size_t>(labels[s]));
        for (std::size_t j = 0; j < k; ++j) {
            const double p = std::exp(logits.at2(s, j) - log_z);
            dlogits.at2(s, j) = (p - (static_cast<std::size_t>(labels[s]) == j ? 1.0 : 0.0)) /
                                static_cast<double>(n);
        }
    }
    return {loss / static_cast<double>(n), std::move(dlogits)};
}

double softmax_cross_entropy_value(const Tensor& logits, const std::vector<int>& labels) {
    check_labels(logits, labels);
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    double loss = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
        double mx = logits.at2(s, 0);
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, logits.at2(s, j));
        double lse = 0.0;
        for (std::size_t j = 0; j < k; ++j) lse += std::exp(logits.at2(s, j) - mx);
        loss += mx + std::log(lse) - logits.at2(s, static_cast<std::size_t>(labels[s]));
    }
    return loss / static_cast<double>(n);
}

LossAndGrad mse_loss(const Tensor& pred, const Tensor& target) {
    if (!pred.same_shape(target)) {
        throw ShapeError("mse_loss: " + pred.shape_str() + " vs " + target.shape_str());
    }
    const double inv_n = 1.0 / static_cast<double>(pred.numel());
    Tensor grad(pred.shape());
    double loss = 0.0;
    for (std::size_t i = 0; i < pred.numel(); ++i) {
        const double d = pred[i] - target[i];
        loss += d * d;
        grad[i] = 2.0 * d * inv_n;
    }
    return {loss * inv_n, std::move(grad)};
}

// ---------------------------------------------------------------------------
// Sgd
// ---------------------------------------------------------------------------

void Sgd::step(ParamList& params, double lr) {
    for (auto& p : params) {
        Tensor& wv = *p.value;
        Tensor& gv = *p.grad;
        if (cfg_.momentum != 0.0) {
            auto it = velocity_.find(p.name);
            if (it == velocity_.end()) {
                it = velocity_.emplace(p.name, Tensor(wv.shape())).first;
            }
            Tensor& v = it->second;
            for (std::size_t i = 0; i < wv.numel(); ++i) {
                const double g = gv[i] + cfg_.weight_decay * wv[i];
                v[i] = cfg_.momentum * v[i] + g;
                const double upd = cfg_.nesterov ? g + cfg_.momentum * v[i] : v[i];
                wv[i] -= lr * upd;
            }
        } else {
            for (std::size_t i = 0; i < wv.numel(); ++i) {
                wv[i] -= lr * (gv[i] + cfg_.weight_decay * wv[i]);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Channel helpers
// ---------------------------------------------------------------------------

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    require_4d(a, "concat_channels");
    require_4d(b, "concat_channels");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
        throw ShapeError("concat_channels: " + a.shape_str() + " vs " + b.shape_str());
    }
    const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), plane = a.dim(2) * a.dim(3);
    Tensor out({n, ca + cb, a.dim(2), a.dim(3)});
    for (std::size_t s = 0; s < n; ++s) {
        std::copy(a.data() + s * ca * plane, a.data() + (s + 1) * ca * plane,
                  out.data() + s * (ca + cb) * plane);
        std::copy(b.data() + s * cb * plane, b.data() + (s + 1) * cb * plane,
                  out.data() + (s * (ca + cb) + ca) * plane);
    }
    return out;
}

std::pair<Tensor, Tensor> split_channels(const Tensor& d, std::size_t c_first) {
    require_4d(d, "split_channels");
    const std::size_t n = d.dim(0), c = d.dim(1), plane = d.dim(2) * d.dim(3);
    if (c_first > c) throw ShapeError("split_channels: split point beyond channel count");
    Tensor a({n, c_first, d.dim(2), d.dim(3)});
    Tensor b({n, c - c_first, d.dim(2), d.dim(3)});
    for (std::size_t s = 0; s < n; ++s) {
        std::copy(d.data() + s * c * plane, d.data() + (s * c + c_first) * plane,
                  a.data() + s * c_first * plane);
        std::copy(d.data() + (s * c + c_first) * plane, d.data() + (s + 1) * c * plane,
                  b.data() + s * (c - c_first) * plane);
    }
    return {std::move(a), std::move(b)};
}

} // namespace mlcl::nn
