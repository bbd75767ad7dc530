#pragma once

#include <complex>
#include <vector>

#include "physemu/core.hpp"
#include "physemu/tensor.hpp"

namespace physemu {
namespace dft {

using cplx = std::complex<double>;

inline bool is_pow2_n(size_t n) { return n > 0 && (n & (n - 1)) == 0; }

// Iterative radix-2 Cooley-Tukey, in place. n must be a power of two.
inline void fft_pow2(std::vector<cplx>& a, bool inverse) {
    const size_t n = a.size();
    if (n < 2) return;
    for (size_t i = 1, j = 0; i < n; ++i) {
        size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (size_t len = 2; len <= n; len <<= 1) {
        const double ang = (inverse ? 2.0 : -2.0) * 3.14159265358979323846 / double(len);
        const cplx wl(std::cos(ang), std::sin(ang));
        for (size_t i = 0; i < n; i += len) {
            cplx w(1.0, 0.0);
            for (size_t j = 0; j < len / 2; ++j) {
                const cplx u = a[i + j];
                const cplx v = a[i + j + len / 2] * w;
                a[i + j] = u + v;
                a[i + j + len / 2] = u - v;
                w *= wl;
            }
        }
    }
    if (inverse)
        for (auto& x : a) x /= double(n);
}

// Bluestein chirp-z transform for arbitrary n, built on the power-of-two FFT.
inline void fft_bluestein(std::vector<cplx>& a, bool inverse) {
    const size_t n = a.size();
    if (n < 2) return;
    const double sign = inverse ? 1.0 : -1.0;
    size_t m = 1;
    while (m < 2 * n - 1) m <<= 1;
    std::vector<cplx> chirp(n);
    for (size_t i = 0; i < n; ++i) {
        // i^2 mod 2n avoids precision loss for large i
        const double e = sign * 3.14159265358979323846 * double((i * i) % (2 * n)) / double(n);
        chirp[i] = cplx(std::cos(e), std::sin(e));
    }
    std::vector<cplx> u(m, cplx(0, 0)), v(m, cplx(0, 0));
    for (size_t i = 0; i < n; ++i) u[i] = a[i] * chirp[i];
    for (size_t i = 0; i < n; ++i) {
        v[i] = std::conj(chirp[i]);
        if (i) v[m - i] = std::conj(chirp[i]);
    }
    fft_pow2(u, false);
    fft_pow2(v, false);
    for (size_t i = 0; i < m; ++i) u[i] *= v[i];
    fft_pow2(u, true);
    for (size_t i = 0; i < n; ++i) a[i] = u[i] * chirp[i];
    if (inverse)
        for (auto& x : a) x /= double(n);
}

inline void fft(std::vector<cplx>& a, bool inverse) {
    if (is_pow2_n(a.size()))
        fft_pow2(a, inverse);
    else
        fft_bluestein(a, inverse);
}

// 2D DFT of a row-major H x W grid (unnormalised forward transform).
inline std::vector<cplx> fft2d(const std::vector<cplx>& grid, int64_t H, int64_t W, bool inverse = false) {
    if (static_cast<int64_t>(grid.size()) != H * W) raise<ShapeError>("fft2d: grid size != H*W");
    std::vector<cplx> out = grid;
    std::vector<cplx> row(static_cast<size_t>(W));
    for (int64_t h = 0; h < H; ++h) {
        std::copy(out.begin() + h * W, out.begin() + (h + 1) * W, row.begin());
        fft(row, inverse);
        std::copy(row.begin(), row.end(), out.begin() + h * W);
    }
    std::vector<cplx> col(static_cast<size_t>(H));
    for (int64_t w = 0; w < W; ++w) {
        for (int64_t h = 0; h < H; ++h) col[static_cast<size_t>(h)] = out[h * W + w];
        fft(col, inverse);
        for (int64_t h = 0; h < H; ++h) out[h * W + w] = col[static_cast<size_t>(h)];
    }
    return out;
}

// Forward 2D DFT of a real field.
template <class T>
std::vector<cplx> fft2d_real(const T* field, int64_t H, int64_t W) {
    std::vector<cplx> grid(static_cast<size_t>(H * W));
    for (int64_t i = 0; i < H * W; ++i) grid[static_cast<size_t>(i)] = cplx(double(field[i]), 0.0);
    return fft2d(grid, H, W, false);
}

} // namespace dft
} // namespace physemu
