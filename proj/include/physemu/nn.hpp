#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "physemu/autograd.hpp"

namespace physemu {

// Ordered, named parameter registry. Order is construction order and defines
// checkpoint layout and optimiser iteration order.
template <class T>
struct NamedParams {
    std::vector<std::pair<std::string, Var<T>>> items;

    void add(const std::string& name, const Var<T>& v) { items.emplace_back(name, v); }

    void extend(const std::string& prefix, const NamedParams& other) {
        for (const auto& [n, v] : other.items) items.emplace_back(prefix + "." + n, v);
    }

    int64_t total_count() const {
        int64_t n = 0;
        for (const auto& [k, v] : items) n += v.val().numel();
        return n;
    }
};

namespace init {

// PyTorch-style fan-in uniform: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <class T>
Tensor<T> fan_in_uniform(std::vector<int64_t> shape, int64_t fan_in, Rng& rng) {
    Tensor<T> t(std::move(shape));
    const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<int64_t>(fan_in, 1)));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>((2.0 * rng.uniform() - 1.0) * bound);
    return t;
}

template <class T>
Tensor<T> ones(std::vector<int64_t> shape) {
    return Tensor<T>::full(std::move(shape), T(1));
}

} // namespace init

// ----------------------------- nn ops -----------------------------

template <class T>
class NN {
public:
    using V = Var<T>;
    using Node = typename Var<T>::NodeT;

    // x (..., in) -> (..., out); w (out, in); b (out) optional.
    static V linear(const V& x, const V& w, const V& b) {
        const int64_t in = x.val().size(-1);
        check_shape(w.val().rank() == 2 && w.val().size(1) == in,
                    "linear: weight " + w.val().shape_str() + " incompatible with input " + x.val().shape_str());
        const int64_t out = w.val().size(0);
        const int64_t rows = x.val().numel() / in;
        const bool has_bias = b.defined();
        if (has_bias) check_shape(b.val().numel() == out, "linear: bias size mismatch");

        std::vector<int64_t> oshape = x.val().shape();
        oshape.back() = out;
        Tensor<T> y(oshape);
        {
            const T* xp = x.val().data();
            const T* wp = w.val().data();
            const T* bp = has_bias ? b.val().data() : nullptr;
            T* yp = y.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
            for (int64_t r = 0; r < rows; ++r) {
                const T* xr = xp + r * in;
                T* yr = yp + r * out;
                for (int64_t o = 0; o < out; ++o) {
                    const T* wo = wp + o * in;
                    T acc = bp ? bp[o] : T(0);
                    for (int64_t i = 0; i < in; ++i) acc += xr[i] * wo[i];
                    yr[o] = acc;
                }
            }
        }
        std::vector<V> parents = has_bias ? std::vector<V>{x, w, b} : std::vector<V>{x, w};
        return V::make(std::move(y), std::move(parents), [rows, in, out, has_bias](Node& self) {
            auto& xn = self.parents[0];
            auto& wn = self.parents[1];
            const T* gp = self.grad.data();
            const T* xp = xn->value.data();
            const T* wp = wn->value.data();
            if (V::wants_grad(xn)) {
                V::ensure_grad(*xn);
                T* xg = xn->grad.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
                for (int64_t r = 0; r < rows; ++r) {
                    const T* gr = gp + r * out;
                    T* xr = xg + r * in;
                    for (int64_t o = 0; o < out; ++o) {
                        const T g = gr[o];
                        const T* wo = wp + o * in;
                        for (int64_t i = 0; i < in; ++i) xr[i] += g * wo[i];
                    }
                }
            }
            if (V::wants_grad(wn)) {
                V::ensure_grad(*wn);
                T* wg = wn->grad.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
                for (int64_t o = 0; o < out; ++o) {
                    T* wo = wg + o * in;
                    for (int64_t r = 0; r < rows; ++r) {
                        const T g = gp[r * out + o];
                        const T* xr = xp + r * in;
                        for (int64_t i = 0; i < in; ++i) wo[i] += g * xr[i];
                    }
                }
            }
            if (has_bias && V::wants_grad(self.parents[2])) {
                auto& bn = self.parents[2];
                V::ensure_grad(*bn);
                T* bg = bn->grad.data();
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t o = 0; o < out; ++o) bg[o] += gp[r * out + o];
            }
        });
    }

    static V reshape(const V& x, std::vector<int64_t> shape) {
        Tensor<T> y = x.val().reshaped(std::move(shape));
        return V::make(std::move(y), {x}, [](Node& self) {
            if (!V::wants_grad(self.parents[0])) return;
            V::ensure_grad(*self.parents[0]);
            auto& g = self.parents[0]->grad;
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
        });
    }

    // (B, C, T, H, W) -> (B, T, H, W, C); channel-last token layout.
    static V channels_last(const V& x) {
        const auto& s = x.val().shape();
        check_shape(s.size() == 5, "channels_last: expected rank-5 input");
        const int64_t B = s[0], C = s[1], Tt = s[2], H = s[3], W = s[4];
        Tensor<T> y({B, Tt, H, W, C});
        const T* xp = x.val().data();
        T* yp = y.data();
        for (int64_t b = 0; b < B; ++b)
            for (int64_t c = 0; c < C; ++c)
                for (int64_t t = 0; t < Tt; ++t)
                    for (int64_t hw = 0; hw < H * W; ++hw)
                        yp[(((b * Tt + t) * H * W) + hw) * C + c] = xp[((b * C + c) * Tt + t) * H * W + hw];
        return V::make(std::move(y), {x}, [B, C, Tt, H, W](Node& self) {
            if (!V::wants_grad(self.parents[0])) return;
            V::ensure_grad(*self.parents[0]);
            T* xg = self.parents[0]->grad.data();
            const T* gp = self.grad.data();
            for (int64_t b = 0; b < B; ++b)
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t t = 0; t < Tt; ++t)
                        for (int64_t hw = 0; hw < H * W; ++hw)
                            xg[((b * C + c) * Tt + t) * H * W + hw] += gp[(((b * Tt + t) * H * W) + hw) * C + c];
        });
    }

    // (B, T, H, W, C) -> (B, C, T, H, W).
    static V channels_first(const V& x) {
        const auto& s = x.val().shape();
        check_shape(s.size() == 5, "channels_first: expected rank-5 input");
        const int64_t B = s[0], Tt = s[1], H = s[2], W = s[3], C = s[4];
        Tensor<T> y({B, C, Tt, H, W});
        const T* xp = x.val().data();
        T* yp = y.data();
        for (int64_t b = 0; b < B; ++b)
            for (int64_t t = 0; t < Tt; ++t)
                for (int64_t hw = 0; hw < H * W; ++hw)
                    for (int64_t c = 0; c < C; ++c)
                        yp[((b * C + c) * Tt + t) * H * W + hw] = xp[(((b * Tt + t) * H * W) + hw) * C + c];
        return V::make(std::move(y), {x}, [B, C, Tt, H, W](Node& self) {
            if (!V::wants_grad(self.parents[0])) return;
            V::ensure_grad(*self.parents[0]);
            T* xg = self.parents[0]->grad.data();
            const T* gp = self.grad.data();
            for (int64_t b = 0; b < B; ++b)
                for (int64_t t = 0; t < Tt; ++t)
                    for (int64_t hw = 0; hw < H * W; ++hw)
                        for (int64_t c = 0; c < C; ++c)
                            xg[(((b * Tt + t) * H * W) + hw) * C + c] += gp[((b * C + c) * Tt + t) * H * W + hw];
        });
    }

    // (B, T, H, W, D) -> (B, H, W, T, D); time-major rows for temporal attention.
    static V time_inner(const V& x) {
        const auto& s = x.val().shape();
        check_shape(s.size() == 5, "time_inner: expected rank-5 input");
        const int64_t B = s[0], Tt = s[1], H = s[2], W = s[3], D = s[4];
        Tensor<T> y({B, H, W, Tt, D});
        const T* xp = x.val().data();
        T* yp = y.data();
        for (int64_t b = 0; b < B; ++b)
            for (int64_t t = 0; t < Tt; ++t)
                for (int64_t h = 0; h < H; ++h)
                    for (int64_t w = 0; w < W; ++w)
                        std::memcpy(yp + ((((b * H + h) * W + w) * Tt + t) * D), xp + ((((b * Tt + t) * H + h) * W + w) * D),
                                    sizeof(T) * static_cast<size_t>(D));
        return V::make(std::move(y), {x}, [B, Tt, H, W, D](Node& self) {
            if (!V::wants_grad(self.parents[0])) return;
            V::ensure_grad(*self.parents[0]);
            T* xg = self.parents[0]->grad.data();
            const T* gp = self.grad.data();
            for (int64_t b = 0; b < B; ++b)
                for (int64_t t = 0; t < Tt; ++t)
                    for (int64_t h = 0; h < H; ++h)
                        for (int64_t w = 0; w < W; ++w) {
                            T* dst = xg + ((((b * Tt + t) * H + h) * W + w) * D);
                            const T* src = gp + ((((b * H + h) * W + w) * Tt + t) * D);
                            for (int64_t d = 0; d < D; ++d) dst[d] += src[d];
                        }
        });
    }

    // (B, H, W, T, D) -> (B, T, H, W, D).
    static V time_outer(const V& x) {
        const auto& s = x.val().shape();
        check_shape(s.size() == 5, "time_outer: expected rank-5 input");
        const int64_t B = s[0], H = s[1], W = s[2], Tt = s[3], D = s[4];
        Tensor<T> y({B, Tt, H, W, D});
        const T* xp = x.val().data();
        T* yp = y.data();
        for (int64_t b = 0; b < B; ++b)
            for (int64_t h = 0; h < H; ++h)
                for (int64_t w = 0; w < W; ++w)
                    for (int64_t t = 0; t < Tt; ++t)
                        std::memcpy(yp + ((((b * Tt + t) * H + h) * W + w) * D), xp + ((((b * H + h) * W + w) * Tt + t) * D),
                                    sizeof(T) * static_cast<size_t>(D));
        return V::make(std::move(y), {x}, [B, Tt, H, W, D](Node& self) {
            if (!V::wants_grad(self.parents[0])) return;
            V::ensure_grad(*self.parents[0]);
            T* xg = self.parents[0]->grad.data();
            const T* gp = self.grad.data();
            for (int64_t b = 0; b < B; ++b)
                for (int64_t h = 0; h < H; ++h)
                    for (int64_t w = 0; w < W; ++w)
                        for (int64_t t = 0; t < Tt; ++t) {
                            T* dst = xg + ((((b * H + h) * W + w) * Tt + t) * D);
                            const T* src = gp + ((((b * Tt + t) * H + h) * W + w) * D);
                            for (int64_t d = 0; d < D; ++d) dst[d] += src[d];
                        }
        });
    }

    // Group normalisation with per-frame statistics on (B, C, T, H, W).
    // Statistics over (C/G, H, W) for each (b, t, g); no temporal mixing, so
    // causal stacks stay causal. gamma/beta are per-channel.
    static V group_norm_per_frame(const V& x, const V& gamma, const V& beta, int64_t groups, double eps = 1e-6) {
        const auto& s = x.val().shape();
        check_shape(s.size() == 5, "group_norm_per_frame: expected rank-5 input");
        const int64_t B = s[0], C = s[1], Tt = s[2], H = s[3], W = s[4];
        check_shape(C % groups == 0, strcat_msg("group_norm_per_frame: channels ", C, " not divisible by groups ", groups));
        check_shape(gamma.val().numel() == C && beta.val().numel() == C, "group_norm_per_frame: affine size mismatch");
        const int64_t cg = C / groups;
        const int64_t hw = H * W;
        const int64_t m = cg * hw;

        Tensor<T> y(s);
        Tensor<T> mu({B, Tt, groups});
        Tensor<T> inv_sigma({B, Tt, groups});
        const T* xp = x.val().data();
        const T* gp_ = gamma.val().data();
        const T* bp_ = beta.val().data();
        T* yp = y.data();
        for (int64_t b = 0; b < B; ++b)
            for (int64_t t = 0; t < Tt; ++t)
                for (int64_t g = 0; g < groups; ++g) {
                    double sum = 0.0, sq = 0.0;
                    for (int64_t c = g * cg; c < (g + 1) * cg; ++c) {
                        const T* row = xp + ((b * C + c) * Tt + t) * hw;
                        for (int64_t i = 0; i < hw; ++i) {
                            sum += row[i];
                            sq += double(row[i]) * double(row[i]);
                        }
                    }
                    const double mean = sum / double(m);
                    const double var = sq / double(m) - mean * mean;
                    const double is = 1.0 / std::sqrt(var + eps);
                    mu.at(b, t, g) = static_cast<T>(mean);
                    inv_sigma.at(b, t, g) = static_cast<T>(is);
                    for (int64_t c = g * cg; c < (g + 1) * cg; ++c) {
                        const T* row = xp + ((b * C + c) * Tt + t) * hw;
                        T* out = yp + ((b * C + c) * Tt + t) * hw;
                        for (int64_t i = 0; i < hw; ++i)
                            out[i] = gp_[c] * static_cast<T>((double(row[i]) - mean) * is) + bp_[c];
                    }
                }

        return V::make(std::move(y), {x, gamma, beta}, [B, C, Tt, H, W, groups, cg, hw, m, mu, inv_sigma](Node& self) {
            auto& xn = self.parents[0];
            auto& gn = self.parents[1];
            auto& bn = self.parents[2];
            const T* xp = xn->value.data();
            const T* gamma_p = gn->value.data();
            const T* og = self.grad.data();
            const bool want_x = V::wants_grad(xn);
            const bool want_g = V::wants_grad(gn);
            const bool want_b = V::wants_grad(bn);
            if (want_x) V::ensure_grad(*xn);
            if (want_g) V::ensure_grad(*gn);
            if (want_b) V::ensure_grad(*bn);
            for (int64_t b = 0; b < B; ++b)
                for (int64_t t = 0; t < Tt; ++t)
                    for (int64_t g = 0; g < groups; ++g) {
                        const double mean = mu.at(b, t, g);
                        const double is = inv_sigma.at(b, t, g);
                        // d1 = sum(gamma*dout), d2 = sum(gamma*dout*xhat)
                        double d1 = 0.0, d2 = 0.0;
                        for (int64_t c = g * cg; c < (g + 1) * cg; ++c) {
                            const T* xr = xp + ((b * C + c) * Tt + t) * hw;
                            const T* gr = og + ((b * C + c) * Tt + t) * hw;
                            for (int64_t i = 0; i < hw; ++i) {
                                const double xhat = (double(xr[i]) - mean) * is;
                                const double gd = double(gamma_p[c]) * double(gr[i]);
                                d1 += gd;
                                d2 += gd * xhat;
                            }
                        }
                        for (int64_t c = g * cg; c < (g + 1) * cg; ++c) {
                            const T* xr = xp + ((b * C + c) * Tt + t) * hw;
                            const T* gr = og + ((b * C + c) * Tt + t) * hw;
                            double dgamma = 0.0, dbeta = 0.0;
                            T* xg = want_x ? xn->grad.data() + ((b * C + c) * Tt + t) * hw : nullptr;
                            for (int64_t i = 0; i < hw; ++i) {
                                const double xhat = (double(xr[i]) - mean) * is;
                                dgamma += double(gr[i]) * xhat;
                                dbeta += double(gr[i]);
                                if (want_x) {
                                    const double gd = double(gamma_p[c]) * double(gr[i]);
                                    xg[i] += static_cast<T>(is * (gd - d1 / double(m) - xhat * d2 / double(m)));
                                }
                            }
                            if (want_g) gn->grad[c] += static_cast<T>(dgamma);
                            if (want_b) bn->grad[c] += static_cast<T>(dbeta);
                        }
                    }
        });
    }

    // RMS normalisation within channel groups on the last axis; learned
    // per-channel gain, no bias. Statistics are per position, so temporal
    // causality is untouched.
    static V rms_group_norm(const V& x, const V& gain, int64_t groups, double eps = 1e-6) {
        const int64_t D = x.val().size(-1);
        check_shape(D % groups == 0, strcat_msg("rms_group_norm: dim ", D, " not divisible by groups ", groups));
        check_shape(gain.val().numel() == D, "rms_group_norm: gain size mismatch");
        const int64_t rows = x.val().numel() / D;
        const int64_t dg = D / groups;

        Tensor<T> y(x.val().shape());
        Tensor<T> inv_rms({rows, groups});
        const T* xp = x.val().data();
        const T* gp_ = gain.val().data();
        T* yp = y.data();
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t g = 0; g < groups; ++g) {
                const T* xr = xp + r * D + g * dg;
                double sq = 0.0;
                for (int64_t i = 0; i < dg; ++i) sq += double(xr[i]) * double(xr[i]);
                const double ir = 1.0 / std::sqrt(sq / double(dg) + eps);
                inv_rms.at(r, g) = static_cast<T>(ir);
                T* yr = yp + r * D + g * dg;
                for (int64_t i = 0; i < dg; ++i) yr[i] = static_cast<T>(double(xr[i]) * ir) * gp_[g * dg + i];
            }

        return V::make(std::move(y), {x, gain}, [rows, D, groups, dg, inv_rms](Node& self) {
            auto& xn = self.parents[0];
            auto& gn = self.parents[1];
            const T* xp = xn->value.data();
            const T* gp_ = gn->value.data();
            const T* og = self.grad.data();
            const bool want_x = V::wants_grad(xn);
            const bool want_g = V::wants_grad(gn);
            if (want_x) V::ensure_grad(*xn);
            if (want_g) V::ensure_grad(*gn);
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t g = 0; g < groups; ++g) {
                    const double ir = inv_rms.at(r, g);
                    const T* xr = xp + r * D + g * dg;
                    const T* gr = og + r * D + g * dg;
                    double dot = 0.0; // sum(gain*dout*x)
                    for (int64_t i = 0; i < dg; ++i) dot += double(gp_[g * dg + i]) * double(gr[i]) * double(xr[i]);
                    for (int64_t i = 0; i < dg; ++i) {
                        if (want_x)
                            xn->grad[r * D + g * dg + i] += static_cast<T>(
                                double(gp_[g * dg + i]) * double(gr[i]) * ir - double(xr[i]) * dot * ir * ir * ir / double(dg));
                        if (want_g) gn->grad[g * dg + i] += static_cast<T>(double(gr[i]) * double(xr[i]) * ir);
                    }
                }
        });
    }

    // (R, L, D) -> (R, heads, L, hd)
    static V split_heads(const V& x, int64_t heads) {
        const auto& s = x.val().shape();
        check_shape(s.size() == 3, "split_heads: expected (rows, len, dim)");
        const int64_t R = s[0], L = s[1], D = s[2];
        check_shape(D % heads == 0, "split_heads: dim not divisible by heads");
        const int64_t hd = D / heads;
        Tensor<T> y({R, heads, L, hd});
        const T* xp = x.val().data();
        T* yp = y.data();
        for (int64_t r = 0; r < R; ++r)
            for (int64_t l = 0; l < L; ++l)
                for (int64_t h = 0; h < heads; ++h)
                    std::memcpy(yp + (((r * heads + h) * L + l) * hd), xp + ((r * L + l) * D + h * hd),
                                sizeof(T) * static_cast<size_t>(hd));
        return V::make(std::move(y), {x}, [R, L, D, heads, hd](Node& self) {
            if (!V::wants_grad(self.parents[0])) return;
            V::ensure_grad(*self.parents[0]);
            T* xg = self.parents[0]->grad.data();
            const T* gp = self.grad.data();
            for (int64_t r = 0; r < R; ++r)
                for (int64_t l = 0; l < L; ++l)
                    for (int64_t h = 0; h < heads; ++h) {
                        T* dst = xg + ((r * L + l) * D + h * hd);
                        const T* src = gp + (((r * heads + h) * L + l) * hd);
                        for (int64_t i = 0; i < hd; ++i) dst[i] += src[i];
                    }
        });
    }

    // (R, heads, L, hd) -> (R, L, heads*hd)
    static V merge_heads(const V& x) {
        const auto& s = x.val().shape();
        check_shape(s.size() == 4, "merge_heads: expected (rows, heads, len, hd)");
        const int64_t R = s[0], heads = s[1], L = s[2], hd = s[3];
        const int64_t D = heads * hd;
        Tensor<T> y({R, L, D});
        const T* xp = x.val().data();
        T* yp = y.data();
        for (int64_t r = 0; r < R; ++r)
            for (int64_t h = 0; h < heads; ++h)
                for (int64_t l = 0; l < L; ++l)
                    std::memcpy(yp + ((r * L + l) * D + h * hd), xp + (((r * heads + h) * L + l) * hd),
                                sizeof(T) * static_cast<size_t>(hd));
        return V::make(std::move(y), {x}, [R, L, D, heads, hd](Node& self) {
            if (!V::wants_grad(self.parents[0])) return;
            V::ensure_grad(*self.parents[0]);
            T* xg = self.parents[0]->grad.data();
            const T* gp = self.grad.data();
            for (int64_t r = 0; r < R; ++r)
                for (int64_t h = 0; h < heads; ++h)
                    for (int64_t l = 0; l < L; ++l) {
                        T* dst = xg + (((r * heads + h) * L + l) * hd);
                        const T* src = gp + ((r * L + l) * D + h * hd);
                        for (int64_t i = 0; i < hd; ++i) dst[i] += src[i];
                    }
        });
    }

    // Axial rotary embedding on (R, heads, L, hd) with L = H*W tokens in
    // row-major frame order. Half of each head dim rotates with the row
    // position, half with the column position; within each half frequencies
    // follow the usual 1e4^(-2i/d_axis) ladder. Pure rotation: the backward
    // pass applies the inverse rotation to the gradient.
    static V rope_axial(const V& x, int64_t H, int64_t W) {
        const auto& s = x.val().shape();
        check_shape(s.size() == 4, "rope_axial: expected (rows, heads, len, hd)");
        const int64_t R = s[0], heads = s[1], L = s[2], hd = s[3];
        check_shape(L == H * W, "rope_axial: token count != H*W");
        check_shape(hd % 4 == 0, strcat_msg("rope_axial: head dim ", hd, " must be divisible by 4"));
        const int64_t da = hd / 2;      // per-axis sub-dimension
        const int64_t pairs = da / 2;   // rotation pairs per axis

        // Precompute cos/sin for both axes: (L, pairs) each, axis-major.
        Tensor<T> cs({2, L, pairs}), sn({2, L, pairs});
        for (int64_t l = 0; l < L; ++l) {
            const double ph = static_cast<double>(l / W);
            const double pw = static_cast<double>(l % W);
            for (int64_t p = 0; p < pairs; ++p) {
                const double freq = std::pow(10000.0, -2.0 * double(p) / double(da));
                cs.at(int64_t(0), l, p) = static_cast<T>(std::cos(ph * freq));
                sn.at(int64_t(0), l, p) = static_cast<T>(std::sin(ph * freq));
                cs.at(int64_t(1), l, p) = static_cast<T>(std::cos(pw * freq));
                sn.at(int64_t(1), l, p) = static_cast<T>(std::sin(pw * freq));
            }
        }

        Tensor<T> y(s);
        const T* xp = x.val().data();
        T* yp = y.data();
        auto rotate = [&](const T* in, T* out, int64_t l) {
            for (int64_t axis = 0; axis < 2; ++axis) {
                const int64_t base = axis * da;
                for (int64_t p = 0; p < pairs; ++p) {
                    const T c = cs.at(axis, l, p), si = sn.at(axis, l, p);
                    const T x0 = in[base + 2 * p], x1 = in[base + 2 * p + 1];
                    out[base + 2 * p] = x0 * c - x1 * si;
                    out[base + 2 * p + 1] = x0 * si + x1 * c;
                }
            }
        };
        for (int64_t r = 0; r < R; ++r)
            for (int64_t h = 0; h < heads; ++h)
                for (int64_t l = 0; l < L; ++l) {
                    const int64_t off = ((r * heads + h) * L + l) * hd;
                    rotate(xp + off, yp + off, l);
                }

        return V::make(std::move(y), {x}, [R, heads, L, hd, da, pairs, cs, sn](Node& self) {
            if (!V::wants_grad(self.parents[0])) return;
            V::ensure_grad(*self.parents[0]);
            T* xg = self.parents[0]->grad.data();
            const T* gp = self.grad.data();
            for (int64_t r = 0; r < R; ++r)
                for (int64_t h = 0; h < heads; ++h)
                    for (int64_t l = 0; l < L; ++l) {
                        const int64_t off = ((r * heads + h) * L + l) * hd;
                        for (int64_t axis = 0; axis < 2; ++axis) {
                            const int64_t base = axis * da;
                            for (int64_t p = 0; p < pairs; ++p) {
                                const T c = cs.at(axis, l, p), si = sn.at(axis, l, p);
                                const T g0 = gp[off + base + 2 * p], g1 = gp[off + base + 2 * p + 1];
                                xg[off + base + 2 * p] += g0 * c + g1 * si;
                                xg[off + base + 2 * p + 1] += -g0 * si + g1 * c;
                            }
                        }
                    }
        });
    }

    // Scaled-dot-product attention on (R, heads, L, hd). Optional causal mask
    // and learned relative-distance bias table (heads, max_dist) indexed by
    // clip(i - j, 0, max_dist-1) for j <= i.
    static V attention(const V& q, const V& k, const V& v, bool causal, const V& bias_table) {
        const auto& s = q.val().shape();
        check_shape(s.size() == 4, "attention: expected (rows, heads, len, hd)");
        check_shape(q.val().same_shape(k.val()) && q.val().same_shape(v.val()), "attention: q/k/v shape mismatch");
        const int64_t R = s[0], heads = s[1], L = s[2], hd = s[3];
        const bool has_bias = bias_table.defined();
        int64_t max_dist = 0;
        if (has_bias) {
            check_shape(bias_table.val().rank() == 2 && bias_table.val().size(0) == heads, "attention: bias table must be (heads, max_dist)");
            max_dist = bias_table.val().size(1);
        }
        const T scale = static_cast<T>(1.0 / std::sqrt(double(hd)));

        Tensor<T> probs({R, heads, L, L});
        Tensor<T> y(s);
        {
            const T* qp = q.val().data();
            const T* kp = k.val().data();
            const T* vp = v.val().data();
            const T* bt = has_bias ? bias_table.val().data() : nullptr;
            T* pp = probs.data();
            T* yp = y.data();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
            for (int64_t r = 0; r < R; ++r)
                for (int64_t h = 0; h < heads; ++h) {
                    const int64_t rh = r * heads + h;
                    const T* qb = qp + rh * L * hd;
                    const T* kb = kp + rh * L * hd;
                    const T* vb = vp + rh * L * hd;
                    std::vector<T> scores(static_cast<size_t>(L));
                    for (int64_t i = 0; i < L; ++i) {
                        const int64_t jmax = causal ? i + 1 : L;
                        T mx = -std::numeric_limits<T>::infinity();
                        for (int64_t j = 0; j < jmax; ++j) {
                            const T* qi = qb + i * hd;
                            const T* kj = kb + j * hd;
                            T acc = T(0);
                            for (int64_t d = 0; d < hd; ++d) acc += qi[d] * kj[d];
                            acc *= scale;
                            if (bt) acc += bt[h * max_dist + std::min<int64_t>(i - j, max_dist - 1)];
                            scores[static_cast<size_t>(j)] = acc;
                            mx = std::max(mx, acc);
                        }
                        T denom = T(0);
                        for (int64_t j = 0; j < jmax; ++j) {
                            const T e = std::exp(scores[static_cast<size_t>(j)] - mx);
                            scores[static_cast<size_t>(j)] = e;
                            denom += e;
                        }
                        T* prow = pp + (rh * L + i) * L;
                        for (int64_t j = 0; j < L; ++j) prow[j] = j < jmax ? scores[static_cast<size_t>(j)] / denom : T(0);
                        T* yrow = yp + (rh * L + i) * hd;
                        for (int64_t d = 0; d < hd; ++d) yrow[d] = T(0);
                        for (int64_t j = 0; j < jmax; ++j) {
                            const T p = prow[j];
                            const T* vj = vb + j * hd;
                            for (int64_t d = 0; d < hd; ++d) yrow[d] += p * vj[d];
                        }
                    }
                }
        }

        std::vector<V> parents = has_bias ? std::vector<V>{q, k, v, bias_table} : std::vector<V>{q, k, v};
        return V::make(std::move(y), std::move(parents), [R, heads, L, hd, causal, has_bias, max_dist, scale, probs](Node& self) {
            auto& qn = self.parents[0];
            auto& kn = self.parents[1];
            auto& vn = self.parents[2];
            const bool want_q = V::wants_grad(qn), want_k = V::wants_grad(kn), want_v = V::wants_grad(vn);
            const bool want_b = has_bias && V::wants_grad(self.parents[3]);
            if (want_q) V::ensure_grad(*qn);
            if (want_k) V::ensure_grad(*kn);
            if (want_v) V::ensure_grad(*vn);
            if (want_b) V::ensure_grad(*self.parents[3]);
            const T* qp = qn->value.data();
            const T* kp = kn->value.data();
            const T* vp = vn->value.data();
            const T* pp = probs.data();
            const T* og = self.grad.data();
            // Parallel over heads only: every destination (q/k/v grads per
            // (r,h) slice, bias row per h) is owned by exactly one thread and
            // filled in a fixed order, keeping accumulation bit-reproducible.
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
            for (int64_t h = 0; h < heads; ++h)
                for (int64_t r = 0; r < R; ++r) {
                    const int64_t rh = r * heads + h;
                    const T* qb = qp + rh * L * hd;
                    const T* kb = kp + rh * L * hd;
                    const T* vb = vp + rh * L * hd;
                    std::vector<T> ds(static_cast<size_t>(L));
                    for (int64_t i = 0; i < L; ++i) {
                        const int64_t jmax = causal ? i + 1 : L;
                        const T* prow = pp + (rh * L + i) * L;
                        const T* grow = og + (rh * L + i) * hd;
                        // dP and row dot for softmax backward
                        T rowdot = T(0);
                        for (int64_t j = 0; j < jmax; ++j) {
                            const T* vj = vb + j * hd;
                            T dp = T(0);
                            for (int64_t d = 0; d < hd; ++d) dp += grow[d] * vj[d];
                            ds[static_cast<size_t>(j)] = dp;
                            rowdot += dp * prow[j];
                        }
                        for (int64_t j = 0; j < jmax; ++j) {
                            const T dsij = prow[j] * (ds[static_cast<size_t>(j)] - rowdot);
                            ds[static_cast<size_t>(j)] = dsij;
                            if (want_b)
                                self.parents[3]->grad[h * max_dist + std::min<int64_t>(i - j, max_dist - 1)] += dsij;
                        }
                        if (want_q) {
                            T* qg = qn->grad.data() + (rh * L + i) * hd;
                            for (int64_t j = 0; j < jmax; ++j) {
                                const T d_ij = ds[static_cast<size_t>(j)] * scale;
                                const T* kj = kb + j * hd;
                                for (int64_t d = 0; d < hd; ++d) qg[d] += d_ij * kj[d];
                            }
                        }
                        if (want_k) {
                            T* kg = kn->grad.data() + rh * L * hd;
                            const T* qi = qb + i * hd;
                            for (int64_t j = 0; j < jmax; ++j) {
                                const T d_ij = ds[static_cast<size_t>(j)] * scale;
                                T* kgj = kg + j * hd;
                                for (int64_t d = 0; d < hd; ++d) kgj[d] += d_ij * qi[d];
                            }
                        }
                        if (want_v) {
                            T* vg = vn->grad.data() + rh * L * hd;
                            for (int64_t j = 0; j < jmax; ++j) {
                                const T p = prow[j];
                                T* vgj = vg + j * hd;
                                for (int64_t d = 0; d < hd; ++d) vgj[d] += p * grow[d];
                            }
                        }
                    }
                }
        });
    }
};

// ----------------------------- layers -----------------------------

template <class T>
struct Linear {
    Var<T> weight, bias;

    Linear() = default;
    Linear(int64_t in, int64_t out, Rng& rng, bool with_bias = true) {
        weight = Var<T>::leaf(init::fan_in_uniform<T>({out, in}, in, rng), true);
        if (with_bias) bias = Var<T>::leaf(init::fan_in_uniform<T>({out}, in, rng), true);
    }

    Var<T> operator()(const Var<T>& x) const { return NN<T>::linear(x, weight, bias); }

    void collect(NamedParams<T>& out, const std::string& prefix) const {
        out.add(prefix + ".weight", weight);
        if (bias.defined()) out.add(prefix + ".bias", bias);
    }
};

template <class T>
struct CausalGroupNorm {
    Var<T> gamma, beta;
    int64_t groups = 8;

    CausalGroupNorm() = default;
    CausalGroupNorm(int64_t channels, int64_t groups_) : groups(groups_) {
        gamma = Var<T>::leaf(init::ones<T>({channels}), true);
        beta = Var<T>::leaf(Tensor<T>::zeros({channels}), true);
    }

    Var<T> operator()(const Var<T>& x) const { return NN<T>::group_norm_per_frame(x, gamma, beta, groups); }

    void collect(NamedParams<T>& out, const std::string& prefix) const {
        out.add(prefix + ".gamma", gamma);
        out.add(prefix + ".beta", beta);
    }
};

template <class T>
struct RmsGroupNorm {
    Var<T> gain;
    int64_t groups = 1;

    RmsGroupNorm() = default;
    RmsGroupNorm(int64_t dim, int64_t groups_) : groups(groups_) { gain = Var<T>::leaf(init::ones<T>({dim}), true); }

    Var<T> operator()(const Var<T>& x) const { return NN<T>::rms_group_norm(x, gain, groups); }

    void collect(NamedParams<T>& out, const std::string& prefix) const { out.add(prefix + ".gain", gain); }
};

// ----------------------------- optimiser -----------------------------

// Decoupled-weight-decay Adam. State is allocated only for the parameters
// handed in, so frozen parameters never get moment buffers.
template <class T>
class AdamW {
public:
    struct Config {
        double lr = 1e-3;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double weight_decay = 0.0;
        double eps = 1e-8;
    };

    AdamW() = default;
    AdamW(std::vector<Var<T>> params, Config cfg) : cfg_(cfg), params_(std::move(params)) {
        for (auto& p : params_) {
            m_.push_back(Tensor<T>::zeros(p.val().shape()));
            v_.push_back(Tensor<T>::zeros(p.val().shape()));
        }
    }

    void set_lr(double lr) { cfg_.lr = lr; }
    double lr() const { return cfg_.lr; }
    int64_t step_count() const { return t_; }
    size_t state_size() const { return m_.size(); }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
        for (size_t k = 0; k < params_.size(); ++k) {
            auto& p = params_[k];
            if (!p.has_grad()) continue;
            auto& val = p.mutable_val();
            const auto& g = p.grad_view();
            auto& m = m_[k];
            auto& v = v_[k];
            for (int64_t i = 0; i < val.numel(); ++i) {
                const double gi = g[i];
                m[i] = static_cast<T>(cfg_.beta1 * double(m[i]) + (1.0 - cfg_.beta1) * gi);
                v[i] = static_cast<T>(cfg_.beta2 * double(v[i]) + (1.0 - cfg_.beta2) * gi * gi);
                const double mhat = double(m[i]) / bc1;
                const double vhat = double(v[i]) / bc2;
                double x = double(val[i]);
                x -= cfg_.lr * cfg_.weight_decay * x;
                x -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
                val[i] = static_cast<T>(x);
            }
        }
    }

    // Serialisation hooks for checkpoints.
    std::vector<Tensor<T>>& m_state() { return m_; }
    std::vector<Tensor<T>>& v_state() { return v_; }
    void set_step_count(int64_t t) { t_ = t; }

private:
    Config cfg_{};
    std::vector<Var<T>> params_;
    std::vector<Tensor<T>> m_, v_;
    int64_t t_ = 0;
};

// Global L2-norm gradient clipping. Returns the pre-clip norm.
template <class T>
double clip_grad_norm(std::vector<Var<T>>& params, double max_norm) {
    double sq = 0.0;
    for (auto& p : params) {
        if (!p.has_grad()) continue;
        const auto& g = p.grad_view();
        for (int64_t i = 0; i < g.numel(); ++i) sq += double(g[i]) * double(g[i]);
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const T s = static_cast<T>(max_norm / norm);
        for (auto& p : params) {
            if (!p.has_grad()) continue;
            p.grad().scale_(s);
        }
    }
    return norm;
}

} // namespace physemu
