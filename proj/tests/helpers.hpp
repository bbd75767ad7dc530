#pragma once

#include <functional>
#include <vector>

#include "physemu/autograd.hpp"
#include "physemu/core.hpp"
#include "physemu/tensor.hpp"

namespace testutil {

using physemu::Rng;
using physemu::Tensor;
using physemu::Var;

template <class T>
Tensor<T> random_tensor(std::vector<int64_t> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<T> t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(lo + (hi - lo) * rng.uniform());
    return t;
}

// Central finite difference of a scalar-valued recompute closure with respect
// to one entry of a leaf. The closure must rebuild the forward pass from the
// current leaf values.
inline double central_diff(Var<double>& leaf, int64_t i, const std::function<double()>& f, double h = 1e-5) {
    double& x = leaf.mutable_val()[i];
    const double orig = x;
    x = orig + h;
    const double fp = f();
    x = orig - h;
    const double fm = f();
    x = orig;
    return (fp - fm) / (2.0 * h);
}

struct GradCheckResult {
    double max_rel_err = 0.0;
    int64_t checked = 0;
};

// Compare analytic gradients (already populated by backward()) against
// central differences on up to n_per_leaf randomly chosen entries per leaf.
inline GradCheckResult compare_grads(std::vector<Var<double>> leaves, const std::function<double()>& f, Rng& rng,
                                     int64_t n_per_leaf = 6, double h = 1e-5) {
    GradCheckResult res;
    for (auto& leaf : leaves) {
        const int64_t n = leaf.val().numel();
        const int64_t m = std::min<int64_t>(n, n_per_leaf);
        for (int64_t k = 0; k < m; ++k) {
            const int64_t i = m == n ? k : rng.uniform_int(n);
            const double analytic = leaf.has_grad() ? leaf.grad_view()[i] : 0.0;
            const double numeric = central_diff(leaf, i, f, h);
            const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-4});
            res.max_rel_err = std::max(res.max_rel_err, std::abs(analytic - numeric) / denom);
            ++res.checked;
        }
    }
    return res;
}

} // namespace testutil
