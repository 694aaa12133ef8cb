#pragma once

// Independent reference implementations. Nothing here calls the library's kernels.

#include <cmath>
#include <complex>
#include <cstddef>
#include <functional>
#include <vector>

namespace oracle {

/// C[m,n] = sum_k A[m,k] B[k,n], accumulated in long double.
inline std::vector<double> matmul(const std::vector<double>& a, const std::vector<double>& b, std::size_t m,
                                  std::size_t k, std::size_t n) {
    std::vector<double> c(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            long double acc = 0.0L;
            for (std::size_t p = 0; p < k; ++p) acc += static_cast<long double>(a[i * k + p]) * b[p * n + j];
            c[i * n + j] = static_cast<double>(acc);
        }
    return c;
}

/// Causal depthwise conv on x[L, d] with taps w[d, K] oldest first:
/// y[t, c] = bias[c] + sum_k w[c, k] x[t - (K-1) + k, c], zero before t = 0.
inline std::vector<double> causal_conv(const std::vector<double>& x, const std::vector<double>& w,
                                       const std::vector<double>& bias, std::size_t L, std::size_t d, std::size_t K) {
    std::vector<double> y(L * d);
    for (std::size_t c = 0; c < d; ++c)
        for (std::size_t t = 0; t < L; ++t) {
            long double acc = bias[c];
            for (std::size_t k = 0; k < K; ++k) {
                const long long src = static_cast<long long>(t) - static_cast<long long>(K - 1) + static_cast<long long>(k);
                if (src >= 0) acc += static_cast<long double>(w[c * K + k]) * x[static_cast<std::size_t>(src) * d + c];
            }
            y[t * d + c] = static_cast<double>(acc);
        }
    return y;
}

/// Selective recurrence on one lane given per-step delta[L, d], B[L, N], C[L, N], x[L, d]:
///   h[i,j] <- exp(delta[i] * A[i,j]) h[i,j] + delta[i] B[j] x[i],  y[i] = sum_j C[j] h[i,j].
inline std::vector<long double> ssm_recurrence(const std::vector<double>& x, const std::vector<double>& delta,
                                               const std::vector<double>& A, const std::vector<double>& B,
                                               const std::vector<double>& C, std::size_t L, std::size_t d,
                                               std::size_t N, std::vector<long double>* h_io = nullptr) {
    std::vector<long double> h = h_io ? *h_io : std::vector<long double>(d * N, 0.0L);
    std::vector<long double> y(L * d);
    for (std::size_t t = 0; t < L; ++t)
        for (std::size_t i = 0; i < d; ++i) {
            long double acc = 0.0L;
            for (std::size_t j = 0; j < N; ++j) {
                const long double dt = delta[t * d + i];
                h[i * N + j] = std::exp(dt * static_cast<long double>(A[i * N + j])) * h[i * N + j] +
                               dt * static_cast<long double>(B[t * N + j]) * x[t * d + i];
                acc += static_cast<long double>(C[t * N + j]) * h[i * N + j];
            }
            y[t * d + i] = acc;
        }
    if (h_io) *h_io = h;
    return y;
}

/// X[k] = sum_n x[n] e^{-2 pi i k n / N} in long double.
inline std::vector<std::complex<long double>> dft(const std::vector<std::complex<double>>& x) {
    const std::size_t N = x.size();
    std::vector<std::complex<long double>> out(N);
    const long double pi = 3.141592653589793238462643383279502884L;
    for (std::size_t k = 0; k < N; ++k) {
        std::complex<long double> acc = 0.0L;
        for (std::size_t n = 0; n < N; ++n) {
            const long double ang = -2.0L * pi * static_cast<long double>((k * n) % N) / static_cast<long double>(N);
            acc += std::complex<long double>(x[n].real(), x[n].imag()) * std::complex<long double>(std::cos(ang), std::sin(ang));
        }
        out[k] = acc;
    }
    return out;
}

/// Central difference of f at x along coordinate i.
inline double central_difference(const std::function<double(const std::vector<double>&)>& f, std::vector<double> x,
                                 std::size_t i, double h = 1e-5) {
    const double x0 = x[i];
    x[i] = x0 + h;
    const double up = f(x);
    x[i] = x0 - h;
    const double dn = f(x);
    return (up - dn) / (2.0 * h);
}

/// base^n by repeated squaring in long double.
inline long double pow_ext(long double base, unsigned n) {
    long double r = 1.0L;
    while (n) {
        if (n & 1U) r *= base;
        base *= base;
        n >>= 1U;
    }
    return r;
}

inline double sigmoid_ext(double x) { return static_cast<double>(1.0L / (1.0L + std::exp(-static_cast<long double>(x)))); }

}  // namespace oracle
