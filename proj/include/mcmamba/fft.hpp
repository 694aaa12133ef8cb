#pragma once

#include <cmath>
#include <complex>
#include <cstddef>
#include <numbers>
#include <stdexcept>
#include <vector>

namespace mcmamba {

inline bool is_power_of_two(std::size_t n) { return n >= 1 && (n & (n - 1)) == 0; }

/// In-place iterative radix-2 FFT. Forward uses e^{-2πi kn/N}; the inverse is unscaled.
template <class T>
void fft_inplace(std::vector<std::complex<T>>& a, bool inverse = false) {
    const std::size_t n = a.size();
    if (!is_power_of_two(n)) throw std::invalid_argument("fft: size " + std::to_string(n) + " is not a power of two");
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    const T sign = inverse ? T(1) : T(-1);
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const std::size_t half = len / 2;
        std::vector<std::complex<T>> tw(half);
        for (std::size_t k = 0; k < half; ++k) {
            const T ang = sign * T(2) * std::numbers::pi_v<T> * static_cast<T>(k) / static_cast<T>(len);
            tw[k] = {std::cos(ang), std::sin(ang)};
        }
        for (std::size_t i = 0; i < n; i += len)
            for (std::size_t k = 0; k < half; ++k) {
                const auto u = a[i + k];
                const auto v = a[i + k + half] * tw[k];
                a[i + k] = u + v;
                a[i + k + half] = u - v;
            }
    }
}

template <class T>
std::vector<std::complex<T>> fft(std::vector<std::complex<T>> a) {
    fft_inplace(a, false);
    return a;
}

/// One-sided spectrum (bins 0..n/2) of a real signal.
template <class T>
std::vector<std::complex<T>> rfft(const std::vector<T>& x) {
    std::vector<std::complex<T>> a(x.begin(), x.end());
    fft_inplace(a, false);
    a.resize(x.size() / 2 + 1);
    return a;
}

/// Real signal of length n from its one-sided spectrum; the negative half is rebuilt by
/// conjugate symmetry and the result is scaled by 1/n.
template <class T>
std::vector<T> irfft(const std::vector<std::complex<T>>& half, std::size_t n) {
    if (half.size() != n / 2 + 1) throw std::invalid_argument("irfft: expected " + std::to_string(n / 2 + 1) + " bins");
    std::vector<std::complex<T>> a(n);
    for (std::size_t k = 0; k < half.size(); ++k) a[k] = half[k];
    for (std::size_t k = half.size(); k < n; ++k) a[k] = std::conj(half[n - k]);
    fft_inplace(a, true);
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i].real() / static_cast<T>(n);
    return out;
}

}  // namespace mcmamba
