#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "physemu/dft.hpp"
#include "physemu/tensor.hpp"

namespace physemu {
namespace metrics {

// ----------------------------- VRMSE -----------------------------

// Variance-normalised RMSE of one field frame: RMSE / sigma_x with sigma_x the
// population standard deviation of the target over all pixels. A (near-)
// constant target has no meaningful normalisation and is rejected.
template <class T>
double vrmse(const T* x, const T* xhat, int64_t n, double sigma_floor = 1e-12) {
    if (n <= 0) raise<ShapeError>("vrmse: empty frame");
    double sum = 0.0, sq = 0.0, se = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double xv = double(x[i]);
        sum += xv;
        sq += xv * xv;
        const double d = xv - double(xhat[i]);
        se += d * d;
    }
    const double mean = sum / double(n);
    const double var = sq / double(n) - mean * mean;
    const double sigma = std::sqrt(std::max(var, 0.0));
    if (sigma < sigma_floor)
        raise<NumericsError>("vrmse: degenerate target frame (sigma = ", sigma, " < ", sigma_floor, ")");
    return std::sqrt(se / double(n)) / sigma;
}

template <class T>
double vrmse(const Tensor<T>& x, const Tensor<T>& xhat) {
    check_shape(x.same_shape(xhat), "vrmse: shape mismatch " + x.shape_str() + " vs " + xhat.shape_str());
    return vrmse(x.data(), xhat.data(), x.numel());
}

// Aggregation-level policy: constant target frames (e.g. a uniform velocity
// field) have no defined VRMSE; report absence instead of aborting a whole
// evaluation run. The scalar vrmse() keeps its hard error.
template <class T>
std::optional<double> try_vrmse(const T* x, const T* xhat, int64_t n) {
    try {
        return vrmse(x, xhat, n);
    } catch (const NumericsError&) {
        return std::nullopt;
    }
}

// ----------------------------- spectral binning -----------------------------

// Radial wavenumber binning of a 2D Fourier grid. Mode (i, j) folds to signed
// integer cycles-per-grid (ki, kj); bin index is the nearest integer to
// |k| = sqrt(ki^2 + kj^2). The k = 0 (DC) mode lands in the low band.
// Bands are equal thirds of [0, k_max] by bin index unless explicit
// boundaries are given.
struct BandPartition {
    int64_t H = 0, W = 0;
    std::vector<int> bin_of_mode; // H*W entries
    std::vector<int64_t> bin_count;
    int kmax = 0;
    int low_end = 0; // low: [0, low_end]
    int mid_end = 0; // mid: (low_end, mid_end]; high: (mid_end, kmax]

    static BandPartition make(int64_t H, int64_t W, std::optional<std::pair<int, int>> boundaries = std::nullopt) {
        check_shape(H > 0 && W > 0, "BandPartition: empty grid");
        BandPartition p;
        p.H = H;
        p.W = W;
        p.bin_of_mode.resize(static_cast<size_t>(H * W));
        int kmax = 0;
        for (int64_t i = 0; i < H; ++i) {
            const double ki = double(i <= H / 2 ? i : i - H);
            for (int64_t j = 0; j < W; ++j) {
                const double kj = double(j <= W / 2 ? j : j - W);
                const int bin = static_cast<int>(std::llround(std::sqrt(ki * ki + kj * kj)));
                p.bin_of_mode[static_cast<size_t>(i * W + j)] = bin;
                kmax = std::max(kmax, bin);
            }
        }
        p.kmax = kmax;
        p.bin_count.assign(static_cast<size_t>(kmax + 1), 0);
        for (int b : p.bin_of_mode) ++p.bin_count[static_cast<size_t>(b)];
        if (boundaries) {
            check_shape(boundaries->first >= 0 && boundaries->first < boundaries->second && boundaries->second <= kmax,
                        "BandPartition: invalid band boundaries");
            p.low_end = boundaries->first;
            p.mid_end = boundaries->second;
        } else {
            p.low_end = kmax / 3;
            p.mid_end = 2 * kmax / 3;
        }
        return p;
    }

    enum class Band { low, mid, high };

    Band band_of(int bin) const { return bin <= low_end ? Band::low : (bin <= mid_end ? Band::mid : Band::high); }
};

// Isotropic power spectrum of a single field, P(k) = mean_{k' in B_k} |F(k')|^2
// with the unitary DFT normalisation (|F_raw|^2 / (H*W)), so that
// pixel MSE == (1/(H*W)) * sum_k |B_k| * P(k)  (Plancherel).
// Bins with no modes are reported as NaN (absent), never divided by zero.
template <class T>
std::vector<double> power_spectrum(const T* field, const BandPartition& part) {
    const auto fhat = dft::fft2d_real(field, part.H, part.W);
    const double norm = double(part.H * part.W);
    std::vector<double> acc(static_cast<size_t>(part.kmax + 1), 0.0);
    for (size_t m = 0; m < fhat.size(); ++m) acc[static_cast<size_t>(part.bin_of_mode[m])] += std::norm(fhat[m]) / norm;
    for (int k = 0; k <= part.kmax; ++k) {
        if (part.bin_count[static_cast<size_t>(k)] > 0)
            acc[static_cast<size_t>(k)] /= double(part.bin_count[static_cast<size_t>(k)]);
        else
            acc[static_cast<size_t>(k)] = std::numeric_limits<double>::quiet_NaN();
    }
    return acc;
}

// Power spectrum of the residual x - xhat.
template <class T>
std::vector<double> residual_power_spectrum(const T* x, const T* xhat, const BandPartition& part) {
    std::vector<double> res(static_cast<size_t>(part.H * part.W));
    for (int64_t i = 0; i < part.H * part.W; ++i) res[static_cast<size_t>(i)] = double(x[i]) - double(xhat[i]);
    return power_spectrum(res.data(), part);
}

template <class T>
std::vector<double> residual_power_spectrum(const Tensor<T>& x, const Tensor<T>& xhat, const BandPartition& part) {
    check_shape(x.same_shape(xhat), "residual_power_spectrum: shape mismatch");
    check_shape(x.numel() == part.H * part.W, "residual_power_spectrum: frame does not match partition grid");
    return residual_power_spectrum(x.data(), xhat.data(), part);
}

// ----------------------------- NEPS -----------------------------

struct NepsResult {
    double low = std::numeric_limits<double>::quiet_NaN();
    double mid = std::numeric_limits<double>::quiet_NaN();
    double high = std::numeric_limits<double>::quiet_NaN();

    bool low_defined() const { return !std::isnan(low); }
    bool mid_defined() const { return !std::isnan(mid); }
    bool high_defined() const { return !std::isnan(high); }
};

// Normalised error power spectrum: per-bin ratio of residual power to signal
// power, averaged within each band. Bins whose signal power falls below
// `signal_floor` are excluded; a band with no valid bin is undefined (NaN).
template <class T>
NepsResult neps(const T* x, const T* xhat, const BandPartition& part, double signal_floor = 1e-20) {
    const std::vector<double> p_err = residual_power_spectrum(x, xhat, part);
    std::vector<double> sig(static_cast<size_t>(part.H * part.W));
    for (int64_t i = 0; i < part.H * part.W; ++i) sig[static_cast<size_t>(i)] = double(x[i]);
    const std::vector<double> p_sig = power_spectrum(sig.data(), part);

    double acc[3] = {0, 0, 0};
    int64_t cnt[3] = {0, 0, 0};
    for (int k = 0; k <= part.kmax; ++k) {
        if (part.bin_count[static_cast<size_t>(k)] == 0) continue;
        const double ps = p_sig[static_cast<size_t>(k)];
        if (!(ps >= signal_floor)) continue;
        const int band = static_cast<int>(part.band_of(k));
        acc[band] += p_err[static_cast<size_t>(k)] / ps;
        ++cnt[band];
    }
    NepsResult r;
    if (cnt[0]) r.low = acc[0] / double(cnt[0]);
    if (cnt[1]) r.mid = acc[1] / double(cnt[1]);
    if (cnt[2]) r.high = acc[2] / double(cnt[2]);
    return r;
}

template <class T>
NepsResult neps(const Tensor<T>& x, const Tensor<T>& xhat, const BandPartition& part) {
    check_shape(x.same_shape(xhat), "neps: shape mismatch");
    check_shape(x.numel() == part.H * part.W, "neps: frame does not match partition grid");
    return neps(x.data(), xhat.data(), part);
}

// ----------------------------- aggregation -----------------------------

struct MetricRow {
    int64_t frame = 0;
    int64_t field = 0;
    std::optional<double> vrmse;
    NepsResult neps;
};

// Per-frame, per-field metrics plus their plain averages.
struct MetricReport {
    std::vector<MetricRow> rows;
    double vrmse_mean = std::numeric_limits<double>::quiet_NaN();
    NepsResult neps_mean;
    int64_t degenerate_frames = 0; // constant-target frames excluded from the VRMSE mean

    void finalise() {
        double v = 0.0, lo = 0.0, mi = 0.0, hi = 0.0;
        int64_t nv = 0, nl = 0, nm = 0, nh = 0;
        degenerate_frames = 0;
        for (const auto& r : rows) {
            if (r.vrmse) {
                v += *r.vrmse;
                ++nv;
            } else {
                ++degenerate_frames;
            }
            if (r.neps.low_defined()) { lo += r.neps.low; ++nl; }
            if (r.neps.mid_defined()) { mi += r.neps.mid; ++nm; }
            if (r.neps.high_defined()) { hi += r.neps.high; ++nh; }
        }
        if (nv) vrmse_mean = v / double(nv);
        if (nl) neps_mean.low = lo / double(nl);
        if (nm) neps_mean.mid = mi / double(nm);
        if (nh) neps_mean.high = hi / double(nh);
    }
};

// Frame-by-frame comparison of two (frames, fields, H, W) stacks: VRMSE and
// NEPS per timeframe and per field, then averaged across both.
template <class T>
MetricReport evaluate_frames(const Tensor<T>& target, const Tensor<T>& pred, const BandPartition& part) {
    check_shape(target.same_shape(pred), "evaluate_frames: shape mismatch");
    check_shape(target.rank() == 4, "evaluate_frames: expected (frames, fields, H, W)");
    const int64_t F = target.size(0), C = target.size(1), H = target.size(2), W = target.size(3);
    check_shape(H == part.H && W == part.W, "evaluate_frames: partition grid mismatch");
    MetricReport rep;
    for (int64_t f = 0; f < F; ++f)
        for (int64_t c = 0; c < C; ++c) {
            const T* xt = target.data() + (f * C + c) * H * W;
            const T* xp = pred.data() + (f * C + c) * H * W;
            MetricRow row;
            row.frame = f;
            row.field = c;
            row.vrmse = try_vrmse(xt, xp, H * W);
            row.neps = neps(xt, xp, part);
            rep.rows.push_back(row);
        }
    rep.finalise();
    return rep;
}

// ----------------------------- rollout evaluation -----------------------------

struct RolloutBuckets {
    // VRMSE means over rollout horizons: early {1,2}, medium {3..6}, long {7..18}.
    double early = std::numeric_limits<double>::quiet_NaN();
    double medium = std::numeric_limits<double>::quiet_NaN();
    double long_ = std::numeric_limits<double>::quiet_NaN();
    std::vector<double> per_step; // VRMSE per autoregressive step, averaged over fields and trajectories
    int64_t trajectories_evaluated = 0;
    int64_t trajectories_skipped = 0; // too short
    int64_t degenerate_frames = 0;    // constant-target (frame, field) pairs excluded
};

// Autoregressive rollout over `steps` predictions starting from
// `context_frames` ground-truth frames. `model` maps a (context, fields, H, W)
// window to the next frame (fields, H, W); predictions are fed back as
// context. Trajectories shorter than context_frames + steps are skipped and
// counted.
template <class T>
RolloutBuckets rollout_evaluate(const std::function<Tensor<T>(const Tensor<T>&)>& model,
                                const std::vector<Tensor<T>>& trajectories, int64_t context_frames = 9,
                                int64_t steps = 18) {
    check_shape(context_frames >= 1 && steps >= 1, "rollout_evaluate: bad protocol parameters");
    RolloutBuckets out;
    std::vector<double> step_sum(static_cast<size_t>(steps), 0.0);
    std::vector<int64_t> step_cnt(static_cast<size_t>(steps), 0);

    for (const auto& traj : trajectories) {
        check_shape(traj.rank() == 4, "rollout_evaluate: trajectory must be (frames, fields, H, W)");
        const int64_t L = traj.size(0), C = traj.size(1), H = traj.size(2), W = traj.size(3);
        if (L < context_frames + steps) {
            ++out.trajectories_skipped;
            continue;
        }
        // sliding context window, predictions fed back
        Tensor<T> window({context_frames, C, H, W});
        std::memcpy(window.data(), traj.data(), sizeof(T) * static_cast<size_t>(window.numel()));
        for (int64_t s = 0; s < steps; ++s) {
            Tensor<T> next = model(window);
            check_shape(next.numel() == C * H * W, "rollout_evaluate: model returned wrong frame size");
            const int64_t tgt = context_frames + s;
            for (int64_t c = 0; c < C; ++c) {
                const T* xt = traj.data() + (tgt * C + c) * H * W;
                const T* xp = next.data() + c * H * W;
                if (auto v = try_vrmse(xt, xp, H * W)) {
                    step_sum[static_cast<size_t>(s)] += *v;
                    ++step_cnt[static_cast<size_t>(s)];
                } else {
                    ++out.degenerate_frames;
                }
            }
            // shift window left by one frame, append prediction
            std::memmove(window.data(), window.data() + C * H * W,
                         sizeof(T) * static_cast<size_t>((context_frames - 1) * C * H * W));
            std::memcpy(window.data() + (context_frames - 1) * C * H * W, next.data(),
                        sizeof(T) * static_cast<size_t>(C * H * W));
        }
        ++out.trajectories_evaluated;
    }

    out.per_step.resize(static_cast<size_t>(steps), std::numeric_limits<double>::quiet_NaN());
    for (int64_t s = 0; s < steps; ++s)
        if (step_cnt[static_cast<size_t>(s)]) out.per_step[static_cast<size_t>(s)] = step_sum[static_cast<size_t>(s)] / double(step_cnt[static_cast<size_t>(s)]);

    auto bucket_mean = [&](int64_t lo, int64_t hi) { // steps are 1-indexed, inclusive
        double acc = 0.0;
        int64_t n = 0;
        for (int64_t s = lo; s <= hi && s <= steps; ++s) {
            if (!std::isnan(out.per_step[static_cast<size_t>(s - 1)])) {
                acc += out.per_step[static_cast<size_t>(s - 1)];
                ++n;
            }
        }
        return n ? acc / double(n) : std::numeric_limits<double>::quiet_NaN();
    };
    out.early = bucket_mean(1, 2);
    out.medium = bucket_mean(3, 6);
    out.long_ = bucket_mean(7, 18);
    return out;
}

} // namespace metrics
} // namespace physemu
