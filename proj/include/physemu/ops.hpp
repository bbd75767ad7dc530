#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "physemu/nn.hpp"

namespace physemu {
namespace ops {

// Temporal/spatial stride pair; both powers of two.
struct ScalePair {
    int64_t st = 1;
    int64_t ss = 1;

    bool operator==(const ScalePair& o) const { return st == o.st && ss == o.ss; }
};

inline bool is_pow2(int64_t v) { return v > 0 && (v & (v - 1)) == 0; }

inline void validate_scale(const ScalePair& s) {
    check_shape(is_pow2(s.st) && is_pow2(s.ss), strcat_msg("ScalePair (", s.st, ",", s.ss, "): strides must be powers of two"));
}

// Kernel sizes tied to the stride: non-overlapping in space, one-frame
// overlap in time once the stride exceeds one.
inline int64_t kernel_t_for(int64_t st) { return st > 1 ? st + 1 : st; }
inline int64_t kernel_s_for(int64_t ss) { return ss; }

// ----------------------------- core causal convolution -----------------------------

namespace detail {

// Zero padding: k_t-1 leading frames, `sp` pixels per spatial side.
template <class T>
Tensor<T> pad_input(const Tensor<T>& x, int64_t pad_t, int64_t sp) {
    const auto& s = x.shape();
    const int64_t B = s[0], C = s[1], Tt = s[2], H = s[3], W = s[4];
    Tensor<T> out({B, C, Tt + pad_t, H + 2 * sp, W + 2 * sp});
    const int64_t Hp = H + 2 * sp, Wp = W + 2 * sp;
    const T* xp = x.data();
    T* op = out.data();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t t = 0; t < Tt; ++t)
                for (int64_t h = 0; h < H; ++h)
                    std::memcpy(op + ((((b * C + c) * (Tt + pad_t) + t + pad_t) * Hp + h + sp) * Wp + sp),
                                xp + (((b * C + c) * Tt + t) * H + h) * W, sizeof(T) * static_cast<size_t>(W));
    return out;
}

} // namespace detail

// 3D convolution, causal in time (k_t - 1 leading zero frames, none trailing),
// zero spatial padding of `spatial_pad` per side, strides (stride_t, stride_s).
// x: (B, C_in, T, H, W); w: (C_out, C_in, k_t, k_s, k_s); b: (C_out) or undefined.
template <class T>
Var<T> conv3d_causal(const Var<T>& x, const Var<T>& w, const Var<T>& bias, int64_t stride_t, int64_t stride_s,
                     int64_t spatial_pad) {
    const auto& xs = x.val().shape();
    const auto& ws = w.val().shape();
    check_shape(xs.size() == 5, "conv3d_causal: input must be (B, C, T, H, W), got " + x.val().shape_str());
    check_shape(ws.size() == 5, "conv3d_causal: kernel must be (C_out, C_in, k_t, k_s, k_s), got " + w.val().shape_str());
    const int64_t B = xs[0], Ci = xs[1], Tt = xs[2], H = xs[3], W = xs[4];
    const int64_t Co = ws[0], kt = ws[2], kh = ws[3], kw = ws[4];
    check_shape(ws[1] == Ci, strcat_msg("conv3d_causal: channel mismatch, input has ", Ci, " channels, kernel expects ", ws[1]));
    check_shape(kh == kw, "conv3d_causal: spatial kernel must be square");
    if (bias.defined()) check_shape(bias.val().numel() == Co, "conv3d_causal: bias size mismatch");

    const int64_t pad_t = kt - 1;
    const int64_t Tp = Tt + pad_t, Hp = H + 2 * spatial_pad, Wp = W + 2 * spatial_pad;
    check_shape((Tp - kt) % stride_t == 0,
                strcat_msg("conv3d_causal: temporal extent ", Tt, " with k_t=", kt, " is not divisible by temporal stride ", stride_t));
    check_shape((Hp - kh) % stride_s == 0 && (Wp - kw) % stride_s == 0,
                strcat_msg("conv3d_causal: spatial extent (", H, ",", W, ") with k_s=", kh, ", pad=", spatial_pad,
                           " is not divisible by spatial stride ", stride_s));
    const int64_t To = (Tp - kt) / stride_t + 1;
    const int64_t Ho = (Hp - kh) / stride_s + 1;
    const int64_t Wo = (Wp - kw) / stride_s + 1;

    Tensor<T> xpad = detail::pad_input(x.val(), pad_t, spatial_pad);
    Tensor<T> y({B, Co, To, Ho, Wo});
    {
        const T* wp = w.val().data();
        const T* bp = bias.defined() ? bias.val().data() : nullptr;
        const T* xpp = xpad.data();
        T* yp = y.data();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
        for (int64_t b = 0; b < B; ++b)
            for (int64_t co = 0; co < Co; ++co) {
                std::vector<T> acc(static_cast<size_t>(Wo));
                T* __restrict__ ap = acc.data();
                for (int64_t to = 0; to < To; ++to)
                    for (int64_t ho = 0; ho < Ho; ++ho) {
                        std::fill(acc.begin(), acc.end(), bp ? bp[co] : T(0));
                        for (int64_t ci = 0; ci < Ci; ++ci)
                            for (int64_t dt = 0; dt < kt; ++dt)
                                for (int64_t dh = 0; dh < kh; ++dh) {
                                    const T* xrow = xpp + (((b * Ci + ci) * Tp + to * stride_t + dt) * Hp + ho * stride_s + dh) * Wp;
                                    const T* wrow = wp + (((co * Ci + ci) * kt + dt) * kh + dh) * kw;
                                    if (stride_s == 1) {
                                        for (int64_t dw = 0; dw < kw; ++dw) {
                                            const T wv = wrow[dw];
                                            const T* __restrict__ xr = xrow + dw;
                                            for (int64_t wo = 0; wo < Wo; ++wo) ap[wo] += wv * xr[wo];
                                        }
                                    } else {
                                        for (int64_t dw = 0; dw < kw; ++dw) {
                                            const T wv = wrow[dw];
                                            const T* __restrict__ xr = xrow + dw;
                                            for (int64_t wo = 0; wo < Wo; ++wo) ap[wo] += wv * xr[wo * stride_s];
                                        }
                                    }
                                }
                        std::memcpy(yp + (((b * Co + co) * To + to) * Ho + ho) * Wo, acc.data(), sizeof(T) * static_cast<size_t>(Wo));
                    }
            }
    }

    using Node = typename Var<T>::NodeT;
    const bool has_bias = bias.defined();
    std::vector<Var<T>> parents = has_bias ? std::vector<Var<T>>{x, w, bias} : std::vector<Var<T>>{x, w};
    return Var<T>::make(
        std::move(y), std::move(parents),
        [B, Ci, Co, Tt, H, W, Tp, Hp, Wp, To, Ho, Wo, kt, kh, kw, stride_t, stride_s, pad_t, spatial_pad, has_bias,
         xpad](Node& self) {
            auto& xn = self.parents[0];
            auto& wn = self.parents[1];
            const T* gp = self.grad.data();
            const T* wp = wn->value.data();
            const T* xpp = xpad.data();

            if (Var<T>::wants_grad(xn)) {
                Var<T>::ensure_grad(*xn);
                T* xg = xn->grad.data();
                // Scatter into a per-(b, ci) padded plane that stays cache
                // resident; the output gradient streams through exactly once
                // per (b, ci, co) and the plane interior lands in dx once.
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
                for (int64_t b = 0; b < B; ++b)
                    for (int64_t ci = 0; ci < Ci; ++ci) {
                        std::vector<T> plane(static_cast<size_t>(Tp * Hp * Wp), T(0));
                        T* pl = plane.data();
                        for (int64_t co = 0; co < Co; ++co)
                            for (int64_t to = 0; to < To; ++to)
                                for (int64_t ho = 0; ho < Ho; ++ho) {
                                    const T* __restrict__ grow = gp + (((b * Co + co) * To + to) * Ho + ho) * Wo;
                                    for (int64_t dt = 0; dt < kt; ++dt)
                                        for (int64_t dh = 0; dh < kh; ++dh) {
                                            T* prow = pl + ((to * stride_t + dt) * Hp + ho * stride_s + dh) * Wp;
                                            const T* wrow = wp + (((co * Ci + ci) * kt + dt) * kh + dh) * kw;
                                            if (stride_s == 1) {
                                                for (int64_t dw = 0; dw < kw; ++dw) {
                                                    const T wv = wrow[dw];
                                                    T* __restrict__ r = prow + dw;
                                                    for (int64_t wo = 0; wo < Wo; ++wo) r[wo] += wv * grow[wo];
                                                }
                                            } else {
                                                for (int64_t dw = 0; dw < kw; ++dw) {
                                                    const T wv = wrow[dw];
                                                    T* __restrict__ r = prow + dw;
                                                    for (int64_t wo = 0; wo < Wo; ++wo) r[wo * stride_s] += wv * grow[wo];
                                                }
                                            }
                                        }
                                }
                        for (int64_t t = 0; t < Tt; ++t)
                            for (int64_t h = 0; h < H; ++h) {
                                T* dst = xg + (((b * Ci + ci) * Tt + t) * H + h) * W;
                                const T* src = pl + ((t + pad_t) * Hp + h + spatial_pad) * Wp + spatial_pad;
                                for (int64_t w2 = 0; w2 < W; ++w2) dst[w2] += src[w2];
                            }
                    }
            }

            if (Var<T>::wants_grad(wn)) {
                Var<T>::ensure_grad(*wn);
                T* wg = wn->grad.data();
                // Volume-outer, tap-inner: one streaming pass over the output
                // gradient and padded input per (co, ci), accumulating all
                // kt*kh*kw taps at once. Row partials in T (vectorised), tap
                // totals in double.
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
                for (int64_t co = 0; co < Co; ++co)
                    for (int64_t ci = 0; ci < Ci; ++ci) {
                        std::vector<double> tap(static_cast<size_t>(kt * kh * kw), 0.0);
                        for (int64_t b = 0; b < B; ++b)
                            for (int64_t to = 0; to < To; ++to)
                                for (int64_t ho = 0; ho < Ho; ++ho) {
                                    const T* __restrict__ grow = gp + (((b * Co + co) * To + to) * Ho + ho) * Wo;
                                    for (int64_t dt = 0; dt < kt; ++dt)
                                        for (int64_t dh = 0; dh < kh; ++dh) {
                                            const T* xbase =
                                                xpp + (((b * Ci + ci) * Tp + to * stride_t + dt) * Hp + ho * stride_s + dh) * Wp;
                                            double* trow = tap.data() + (dt * kh + dh) * kw;
                                            if (stride_s == 1) {
                                                for (int64_t dw = 0; dw < kw; ++dw) {
                                                    const T* __restrict__ xr = xbase + dw;
                                                    T row = T(0);
                                                    for (int64_t wo = 0; wo < Wo; ++wo) row += grow[wo] * xr[wo];
                                                    trow[dw] += double(row);
                                                }
                                            } else {
                                                for (int64_t dw = 0; dw < kw; ++dw) {
                                                    const T* __restrict__ xr = xbase + dw;
                                                    T row = T(0);
                                                    for (int64_t wo = 0; wo < Wo; ++wo) row += grow[wo] * xr[wo * stride_s];
                                                    trow[dw] += double(row);
                                                }
                                            }
                                        }
                                }
                        for (int64_t k = 0; k < kt * kh * kw; ++k)
                            wg[(co * Ci + ci) * kt * kh * kw + k] += static_cast<T>(tap[static_cast<size_t>(k)]);
                    }
            }

            if (has_bias && Var<T>::wants_grad(self.parents[2])) {
                auto& bn = self.parents[2];
                Var<T>::ensure_grad(*bn);
                for (int64_t b = 0; b < B; ++b)
                    for (int64_t co = 0; co < Co; ++co) {
                        double acc = 0.0;
                        const T* grow = gp + (b * Co + co) * To * Ho * Wo;
                        for (int64_t i = 0; i < To * Ho * Wo; ++i) acc += grow[i];
                        bn->grad[co] += static_cast<T>(acc);
                    }
            }
        });
}

// Stride-1 causal convolution preserving (T, H, W). Spatial kernel must be odd
// so the symmetric zero padding keeps the spatial size.
template <class T>
Var<T> causal_conv3d(const Var<T>& x, const Var<T>& w, const Var<T>& bias = {}) {
    const int64_t ks = w.val().size(3);
    check_shape(ks % 2 == 1, strcat_msg("causal_conv3d: even spatial kernel ", ks,
                                        " cannot preserve the spatial size with symmetric padding at stride 1"));
    return conv3d_causal(x, w, bias, 1, 1, (ks - 1) / 2);
}

// ----------------------------- channel selection -----------------------------

// Select rows along dim 0 (kernel output channels / bias entries).
template <class T>
Var<T> select_dim0(const Var<T>& w, const std::vector<int64_t>& idx) {
    const auto& s = w.val().shape();
    check_shape(!s.empty(), "select_dim0: scalar input");
    const int64_t inner = w.val().numel() / s[0];
    for (int64_t i : idx) check_shape(i >= 0 && i < s[0], strcat_msg("select_dim0: index ", i, " out of range ", s[0]));
    std::vector<int64_t> os = s;
    os[0] = static_cast<int64_t>(idx.size());
    Tensor<T> y(os);
    for (size_t r = 0; r < idx.size(); ++r)
        std::memcpy(y.data() + static_cast<int64_t>(r) * inner, w.val().data() + idx[r] * inner,
                    sizeof(T) * static_cast<size_t>(inner));
    using Node = typename Var<T>::NodeT;
    std::vector<int64_t> sel = idx;
    return Var<T>::make(std::move(y), {w}, [sel, inner](Node& self) {
        if (!Var<T>::wants_grad(self.parents[0])) return;
        Var<T>::ensure_grad(*self.parents[0]);
        T* wg = self.parents[0]->grad.data();
        const T* gp = self.grad.data();
        for (size_t r = 0; r < sel.size(); ++r) {
            T* dst = wg + sel[r] * inner;
            const T* src = gp + static_cast<int64_t>(r) * inner;
            for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    });
}

// Select rows along dim 1 (kernel input channels).
template <class T>
Var<T> select_dim1(const Var<T>& w, const std::vector<int64_t>& idx) {
    const auto& s = w.val().shape();
    check_shape(s.size() >= 2, "select_dim1: need rank >= 2");
    const int64_t d0 = s[0], d1 = s[1];
    const int64_t inner = w.val().numel() / (d0 * d1);
    for (int64_t i : idx) check_shape(i >= 0 && i < d1, strcat_msg("select_dim1: index ", i, " out of range ", d1));
    std::vector<int64_t> os = s;
    os[1] = static_cast<int64_t>(idx.size());
    Tensor<T> y(os);
    const int64_t n1 = static_cast<int64_t>(idx.size());
    for (int64_t a = 0; a < d0; ++a)
        for (int64_t r = 0; r < n1; ++r)
            std::memcpy(y.data() + (a * n1 + r) * inner, w.val().data() + (a * d1 + idx[static_cast<size_t>(r)]) * inner,
                        sizeof(T) * static_cast<size_t>(inner));
    using Node = typename Var<T>::NodeT;
    std::vector<int64_t> sel = idx;
    return Var<T>::make(std::move(y), {w}, [sel, d0, d1, inner](Node& self) {
        if (!Var<T>::wants_grad(self.parents[0])) return;
        Var<T>::ensure_grad(*self.parents[0]);
        T* wg = self.parents[0]->grad.data();
        const T* gp = self.grad.data();
        const int64_t n1 = static_cast<int64_t>(sel.size());
        for (int64_t a = 0; a < d0; ++a)
            for (int64_t r = 0; r < n1; ++r) {
                T* dst = wg + (a * d1 + sel[static_cast<size_t>(r)]) * inner;
                const T* src = gp + (a * n1 + r) * inner;
                for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
            }
    });
}

// ----------------------------- adaptive field convolution -----------------------------

enum class FieldSide { input, output };

// Stride-1 causal convolution over a runtime subset of physical fields.
// A single kernel is learned for c_total fields; at runtime the rows (encoder
// head) or columns (decoder head) of the active fields are selected and the
// output is rescaled by sqrt(c_total / c_active).
template <class T>
Var<T> adaptive_field_conv(const Var<T>& x, const Var<T>& w, const Var<T>& bias, const std::vector<int64_t>& active,
                           FieldSide side) {
    check_shape(!active.empty(), "adaptive_field_conv: empty active field set");
    const int64_t c_total = side == FieldSide::input ? w.val().size(1) : w.val().size(0);
    for (size_t i = 1; i < active.size(); ++i)
        check_shape(active[i] > active[i - 1], "adaptive_field_conv: active set must be strictly increasing");
    check_shape(active.back() < c_total, strcat_msg("adaptive_field_conv: field index ", active.back(), " out of range ", c_total));
    const int64_t c_active = static_cast<int64_t>(active.size());

    Var<T> wsel, bsel = bias;
    if (side == FieldSide::input) {
        wsel = c_active == c_total ? w : select_dim1(w, active);
    } else {
        wsel = c_active == c_total ? w : select_dim0(w, active);
        if (bias.defined() && c_active != c_total) bsel = select_dim0(bias, active);
    }
    Var<T> y = causal_conv3d(x, wsel, bsel);
    if (c_active == c_total) return y; // scale is exactly 1: bit-identical to the plain conv
    const T s = static_cast<T>(std::sqrt(double(c_total) / double(c_active)));
    return VarOps<T>::scale(y, s);
}

// ----------------------------- kernel interpolation -----------------------------

// Mass-preserving linear resampling matrix (n_tgt x n_src): entry (j, i) is
// the fraction of source cell i overlapping target cell j when both index
// an equipartition of the same interval. Columns sum to one, so the sum of
// kernel taps along the axis is preserved; n_tgt == n_src gives the identity.
inline std::vector<double> resample_matrix(int64_t n_src, int64_t n_tgt) {
    std::vector<double> m(static_cast<size_t>(n_src * n_tgt), 0.0);
    // Common grid of n_src * n_tgt units: source cell i covers [i*n_tgt, (i+1)*n_tgt),
    // target cell j covers [j*n_src, (j+1)*n_src).
    for (int64_t j = 0; j < n_tgt; ++j)
        for (int64_t i = 0; i < n_src; ++i) {
            const int64_t lo = std::max(j * n_src, i * n_tgt);
            const int64_t hi = std::min((j + 1) * n_src, (i + 1) * n_tgt);
            if (hi > lo) m[static_cast<size_t>(j * n_src + i)] = double(hi - lo) / double(n_tgt);
        }
    return m;
}

namespace detail {

// Apply a resampling matrix along one trailing axis of a rank-5 kernel.
// axis: 2 (k_t), 3 (k_h), 4 (k_w).
template <class T>
Var<T> resample_kernel_axis(const Var<T>& w, int axis, int64_t n_tgt) {
    const auto& s = w.val().shape();
    check_shape(s.size() == 5 && axis >= 2 && axis <= 4, "resample_kernel_axis: expected rank-5 kernel");
    const int64_t n_src = s[static_cast<size_t>(axis)];
    if (n_tgt == n_src) return w;
    const std::vector<double> m = resample_matrix(n_src, n_tgt);

    int64_t outer = 1, inner = 1;
    for (int a = 0; a < axis; ++a) outer *= s[static_cast<size_t>(a)];
    for (int a = axis + 1; a < 5; ++a) inner *= s[static_cast<size_t>(a)];
    std::vector<int64_t> os = s;
    os[static_cast<size_t>(axis)] = n_tgt;
    Tensor<T> y(os);
    const T* wp = w.val().data();
    T* yp = y.data();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t j = 0; j < n_tgt; ++j)
            for (int64_t in = 0; in < inner; ++in) {
                double acc = 0.0;
                for (int64_t i = 0; i < n_src; ++i)
                    acc += m[static_cast<size_t>(j * n_src + i)] * double(wp[(o * n_src + i) * inner + in]);
                yp[(o * n_tgt + j) * inner + in] = static_cast<T>(acc);
            }
    using Node = typename Var<T>::NodeT;
    return Var<T>::make(std::move(y), {w}, [m, outer, inner, n_src, n_tgt](Node& self) {
        if (!Var<T>::wants_grad(self.parents[0])) return;
        Var<T>::ensure_grad(*self.parents[0]);
        T* wg = self.parents[0]->grad.data();
        const T* gp = self.grad.data();
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t i = 0; i < n_src; ++i)
                for (int64_t in = 0; in < inner; ++in) {
                    double acc = 0.0;
                    for (int64_t j = 0; j < n_tgt; ++j)
                        acc += m[static_cast<size_t>(j * n_src + i)] * double(gp[(o * n_tgt + j) * inner + in]);
                    wg[(o * n_src + i) * inner + in] += static_cast<T>(acc);
                }
    });
}

} // namespace detail

// Base kernel of a flexible downsampling layer, sized for the largest scale pair.
template <class T>
struct BaseKernel {
    Var<T> weights; // (c_out, c_in, k_t_max, k_s_max, k_s_max)
    Var<T> bias;    // (c_out)
    ScalePair max_scale;

    BaseKernel() = default;
    BaseKernel(int64_t c_in, int64_t c_out, ScalePair max, Rng& rng) : max_scale(max) {
        validate_scale(max);
        const int64_t kt = kernel_t_for(max.st);
        const int64_t ks = kernel_s_for(max.ss);
        const int64_t fan_in = c_in * kt * ks * ks;
        weights = Var<T>::leaf(init::fan_in_uniform<T>({c_out, c_in, kt, ks, ks}, fan_in, rng), true);
        bias = Var<T>::leaf(init::fan_in_uniform<T>({c_out}, fan_in, rng), true);
    }

    void collect(NamedParams<T>& out, const std::string& prefix) const {
        out.add(prefix + ".weights", weights);
        out.add(prefix + ".bias", bias);
    }
};

// Resample a base kernel to the sizes implied by a target scale pair.
// target == max_scale returns the base weights unchanged.
template <class T>
Var<T> interpolate_kernel(const BaseKernel<T>& base, ScalePair target) {
    validate_scale(target);
    const int64_t kt_tgt = kernel_t_for(target.st);
    const int64_t ks_tgt = kernel_s_for(target.ss);
    const int64_t kt_max = base.weights.val().size(2);
    const int64_t ks_max = base.weights.val().size(3);
    check_shape(kt_tgt <= kt_max && ks_tgt <= ks_max,
                strcat_msg("interpolate_kernel: target sizes (", kt_tgt, ",", ks_tgt, ") exceed base (", kt_max, ",", ks_max, ")"));
    Var<T> w = detail::resample_kernel_axis(base.weights, 2, kt_tgt);
    w = detail::resample_kernel_axis(w, 3, ks_tgt);
    w = detail::resample_kernel_axis(w, 4, ks_tgt);
    return w;
}

// ----------------------------- flexible downsampling -----------------------------

// Strided causal convolution with runtime-selected (s_t, s_s); kernel weights
// interpolated from the base, spatial padding "valid", temporal padding k_t-1
// leading zero frames. Output (c_out, 1 + (T-1)/s_t, H/s_s, W/s_s).
template <class T>
Var<T> flexible_downsample(const Var<T>& x, const BaseKernel<T>& base, ScalePair scale) {
    validate_scale(scale);
    check_shape(scale.st <= base.max_scale.st && scale.ss <= base.max_scale.ss,
                strcat_msg("flexible_downsample: scale (", scale.st, ",", scale.ss, ") exceeds base max (", base.max_scale.st, ",",
                           base.max_scale.ss, ")"));
    const auto& xs = x.val().shape();
    check_shape(xs.size() == 5, "flexible_downsample: input must be (B, C, T, H, W)");
    const int64_t Tt = xs[2], H = xs[3], W = xs[4];
    check_shape((Tt - 1) % scale.st == 0,
                strcat_msg("flexible_downsample: T-1=", Tt - 1, " not divisible by temporal stride ", scale.st));
    check_shape(H % scale.ss == 0 && W % scale.ss == 0,
                strcat_msg("flexible_downsample: spatial size (", H, ",", W, ") not divisible by spatial stride ", scale.ss));
    Var<T> w = interpolate_kernel(base, scale);
    return conv3d_causal(x, w, base.bias, scale.st, scale.ss, /*spatial_pad=*/0);
}

// ----------------------------- depth-to-space upsampling -----------------------------

// Rearrange channel blocks (c, dt, dh, dw) into spatiotemporal pixels:
// (B, c*st*ss^2, T, H, W) -> (B, c, T*st, H*ss, W*ss).
template <class T>
Var<T> depth_to_space(const Var<T>& x, int64_t st, int64_t ss) {
    const auto& s = x.val().shape();
    check_shape(s.size() == 5, "depth_to_space: input must be rank 5");
    const int64_t B = s[0], C = s[1], Tt = s[2], H = s[3], W = s[4];
    const int64_t blk = st * ss * ss;
    check_shape(C % blk == 0, strcat_msg("depth_to_space: ", C, " channels not divisible by s_t*s_s^2 = ", blk));
    const int64_t Co = C / blk;
    Tensor<T> y({B, Co, Tt * st, H * ss, W * ss});
    const T* xp = x.val().data();
    T* yp = y.data();
    const int64_t Ho = H * ss, Wo = W * ss, To = Tt * st;
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < Co; ++c)
            for (int64_t dt = 0; dt < st; ++dt)
                for (int64_t dh = 0; dh < ss; ++dh)
                    for (int64_t dw = 0; dw < ss; ++dw) {
                        const int64_t cin = ((c * st + dt) * ss + dh) * ss + dw;
                        for (int64_t t = 0; t < Tt; ++t)
                            for (int64_t h = 0; h < H; ++h) {
                                const T* src = xp + (((b * C + cin) * Tt + t) * H + h) * W;
                                T* dst = yp + (((b * Co + c) * To + t * st + dt) * Ho + h * ss + dh) * Wo + dw;
                                for (int64_t w = 0; w < W; ++w) dst[w * ss] = src[w];
                            }
                    }
    using Node = typename Var<T>::NodeT;
    return Var<T>::make(std::move(y), {x}, [B, C, Co, Tt, H, W, st, ss, To, Ho, Wo](Node& self) {
        if (!Var<T>::wants_grad(self.parents[0])) return;
        Var<T>::ensure_grad(*self.parents[0]);
        T* xg = self.parents[0]->grad.data();
        const T* gp = self.grad.data();
        for (int64_t b = 0; b < B; ++b)
            for (int64_t c = 0; c < Co; ++c)
                for (int64_t dt = 0; dt < st; ++dt)
                    for (int64_t dh = 0; dh < ss; ++dh)
                        for (int64_t dw = 0; dw < ss; ++dw) {
                            const int64_t cin = ((c * st + dt) * ss + dh) * ss + dw;
                            for (int64_t t = 0; t < Tt; ++t)
                                for (int64_t h = 0; h < H; ++h) {
                                    T* dst = xg + (((b * C + cin) * Tt + t) * H + h) * W;
                                    const T* src = gp + (((b * Co + c) * To + t * st + dt) * Ho + h * ss + dh) * Wo + dw;
                                    for (int64_t w = 0; w < W; ++w) dst[w] += src[w * ss];
                                }
                        }
    });
}

// Discard the first n frames along the temporal axis.
template <class T>
Var<T> drop_leading_frames(const Var<T>& x, int64_t n) {
    if (n == 0) return x;
    const auto& s = x.val().shape();
    check_shape(s.size() == 5 && s[2] > n, strcat_msg("drop_leading_frames: cannot drop ", n, " of ", s[2], " frames"));
    const int64_t B = s[0], C = s[1], Tt = s[2], HW = s[3] * s[4];
    const int64_t To = Tt - n;
    Tensor<T> y({B, C, To, s[3], s[4]});
    const T* xp = x.val().data();
    T* yp = y.data();
    for (int64_t bc = 0; bc < B * C; ++bc)
        std::memcpy(yp + bc * To * HW, xp + (bc * Tt + n) * HW, sizeof(T) * static_cast<size_t>(To * HW));
    using Node = typename Var<T>::NodeT;
    return Var<T>::make(std::move(y), {x}, [B, C, Tt, To, HW, n](Node& self) {
        if (!Var<T>::wants_grad(self.parents[0])) return;
        Var<T>::ensure_grad(*self.parents[0]);
        T* xg = self.parents[0]->grad.data();
        const T* gp = self.grad.data();
        for (int64_t bc = 0; bc < B * C; ++bc) {
            T* dst = xg + (bc * Tt + n) * HW;
            const T* src = gp + bc * To * HW;
            for (int64_t i = 0; i < To * HW; ++i) dst[i] += src[i];
        }
    });
}

// Base kernel of a flexible depth-to-space layer: a causal 3x3x3 convolution
// expanding to c_out * s_t_max * s_s_max^2 channels.
template <class T>
struct D2SBaseKernel {
    Var<T> weights; // (c_out * st_max * ss_max^2, c_in, 3, 3, 3)
    Var<T> bias;
    ScalePair max_scale;
    int64_t out_channels = 0;

    D2SBaseKernel() = default;
    D2SBaseKernel(int64_t c_in, int64_t c_out, ScalePair max, Rng& rng) : max_scale(max), out_channels(c_out) {
        validate_scale(max);
        const int64_t expanded = c_out * max.st * max.ss * max.ss;
        const int64_t fan_in = c_in * 27;
        weights = Var<T>::leaf(init::fan_in_uniform<T>({expanded, c_in, 3, 3, 3}, fan_in, rng), true);
        bias = Var<T>::leaf(init::fan_in_uniform<T>({expanded}, fan_in, rng), true);
    }

    void collect(NamedParams<T>& out, const std::string& prefix) const {
        out.add(prefix + ".weights", weights);
        out.add(prefix + ".bias", bias);
    }
};

// Output-channel indices realising eta-subsampling: convolving with the
// selected rows and rearranging equals convolving with the full base kernel,
// rearranging, then keeping every eta-th pixel (phase 0) along each axis.
inline std::vector<int64_t> d2s_subsample_indices(int64_t c_out, ScalePair base, ScalePair target) {
    check_shape(base.st % target.st == 0 && base.ss % target.ss == 0,
                strcat_msg("subsample_d2s_kernel: eta = (", base.st, "/", target.st, ", ", base.ss, "/", target.ss,
                           ") must have integer components"));
    const int64_t eta_t = base.st / target.st;
    const int64_t eta_s = base.ss / target.ss;
    std::vector<int64_t> idx;
    idx.reserve(static_cast<size_t>(c_out * target.st * target.ss * target.ss));
    for (int64_t c = 0; c < c_out; ++c)
        for (int64_t dt = 0; dt < target.st; ++dt)
            for (int64_t dh = 0; dh < target.ss; ++dh)
                for (int64_t dw = 0; dw < target.ss; ++dw)
                    idx.push_back(((c * base.st + dt * eta_t) * base.ss + dh * eta_s) * base.ss + dw * eta_s);
    return idx;
}

template <class T>
std::pair<Var<T>, Var<T>> subsample_d2s_kernel(const D2SBaseKernel<T>& base, ScalePair target) {
    validate_scale(target);
    if (target == base.max_scale) return {base.weights, base.bias};
    const std::vector<int64_t> idx = d2s_subsample_indices(base.out_channels, base.max_scale, target);
    return {select_dim0(base.weights, idx), select_dim0(base.bias, idx)};
}

// Flexible upsampling: causal 3x3x3 convolution expanding channels by
// s_t * s_s^2 (base kernel subsampled when the scale is below the maximum),
// depth-to-space rearrangement, then discard of the first s_t - 1 frames.
template <class T>
Var<T> flexible_depth_to_space(const Var<T>& z, const D2SBaseKernel<T>& base, ScalePair scale) {
    validate_scale(scale);
    check_shape(scale.st <= base.max_scale.st && scale.ss <= base.max_scale.ss,
                strcat_msg("flexible_depth_to_space: scale (", scale.st, ",", scale.ss, ") exceeds base max (", base.max_scale.st,
                           ",", base.max_scale.ss, ")"));
    auto [w, b] = subsample_d2s_kernel(base, scale);
    Var<T> y = causal_conv3d(z, w, b);
    Var<T> r = depth_to_space(y, scale.st, scale.ss);
    return drop_leading_frames(r, scale.st - 1);
}

} // namespace ops
} // namespace physemu
