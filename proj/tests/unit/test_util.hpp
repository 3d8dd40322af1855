#ifndef MLCL_TESTS_TEST_UTIL_HPP
#define MLCL_TESTS_TEST_UTIL_HPP

#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "mlcl/nn.hpp"
#include "mlcl/rng.hpp"
#include "mlcl/tensor.hpp"

namespace testutil {

/// Unique scratch directory under the system temp dir; removed on destruction.
struct TempDir {
    std::filesystem::path path;

    explicit TempDir(const std::string& tag) {
        static std::atomic<unsigned> counter{0};
        path = std::filesystem::temp_directory_path() /
               ("mlcl-test-" + tag + "-" + std::to_string(::getpid()) + "-" +
                std::to_string(counter.fetch_add(1)));
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    std::filesystem::path operator/(const std::string& name) const { return path / name; }
};

inline void fill_uniform(mlcl::Tensor& t, mlcl::Rng& rng, double lo = -1.0, double hi = 1.0) {
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
}

inline mlcl::Tensor random_tensor(std::vector<std::size_t> shape, mlcl::Rng& rng,
                                  double lo = -1.0, double hi = 1.0) {
    mlcl::Tensor t(std::move(shape));
    fill_uniform(t, rng, lo, hi);
    return t;
}

/// |a - b| relative to max(1, |a|, |b|).
inline double mixed_err(double a, double b) {
    return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

/// Central-difference check of analytic gradients stored per slot.
/// `loss` must recompute the scalar from the current slot values.
inline double max_fd_error(const std::vector<double*>& slots,
                           const std::vector<double>& analytic,
                           const std::function<double()>& loss, double eps = 1e-6) {
    double worst = 0.0;
    for (std::size_t i = 0; i < slots.size(); ++i) {
        double* p = slots[i];
        const double saved = *p;
        *p = saved + eps;
        const double lp = loss();
        *p = saved - eps;
        const double lm = loss();
        *p = saved;
        const double fd = (lp - lm) / (2.0 * eps);
        worst = std::max(worst, mixed_err(fd, analytic[i]));
    }
    return worst;
}

/// Samples up to `max_per_param` slots from every parameter, pairing each
/// value slot with the analytic gradient currently stored for it.
inline void gather_param_slots(mlcl::nn::ParamList& params, std::size_t max_per_param,
                               std::vector<double*>& slots, std::vector<double>& analytic) {
    for (auto& p : params) {
        const std::size_t n = p.value->numel();
        const std::size_t stride = std::max<std::size_t>(1, n / max_per_param);
        for (std::size_t i = 0; i < n; i += stride) {
            slots.push_back(&(*p.value)[i]);
            analytic.push_back((*p.grad)[i]);
        }
    }
}

/// Samples up to `max_slots` entries of a tensor, pairing them with the
/// matching entries of an analytic gradient tensor.
inline void gather_tensor_slots(mlcl::Tensor& value, const mlcl::Tensor& grad,
                                std::size_t max_slots, std::vector<double*>& slots,
                                std::vector<double>& analytic) {
    const std::size_t n = value.numel();
    const std::size_t stride = std::max<std::size_t>(1, n / max_slots);
    for (std::size_t i = 0; i < n; i += stride) {
        slots.push_back(&value[i]);
        analytic.push_back(grad[i]);
    }
}

} // namespace testutil

#endif
