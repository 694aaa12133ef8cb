#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "parallel.hpp"
#include "tape.hpp"
#include "tensor.hpp"

// Differentiable primitives. Layout convention: the last axis is the feature axis, the
// second-to-last is the sequence axis, anything before that is a batch of independent lanes.

namespace mcmamba {

namespace detail {

inline void require(bool ok, const std::string& msg) {
    if (!ok) throw ShapeError(msg);
}

template <class T>
T sigmoid(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
}

template <class T>
T softplus_value(T x) {
    if (x > T(30)) return x;
    if (x < T(-30)) return std::exp(x);
    return std::log1p(std::exp(x));
}

template <class T>
Tensor<T> like(const Tensor<T>& a) {
    return Tensor<T>(a.shape(), std::vector<T>(a.size()));
}

/// Elementwise map with derivative dfdx(x, y).
template <class T, class F, class D>
Tensor<T> unary(const Tensor<T>& a, F f, D dfdx) {
    std::vector<T> out(a.size());
    auto x = a.data();
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
    Tensor<T> y(a.shape(), std::move(out));
    detail::track(y, {&a}, [a, yv = y.detached(), dfdx](GradientTape<T>& tape, std::span<const T> g) {
        auto ga = tape.grad_sink(a);
        if (ga.empty()) return;
        auto x = a.data();
        auto yy = yv.data();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfdx(x[i], yy[i]);
    });
    return y;
}

/// out[r, :] = a[r, :] * b for rows [row_begin, row_end). Reduction order over k is fixed.
template <class T>
void matmul_rows(const T* __restrict a, const T* __restrict b, T* __restrict out, std::size_t k, std::size_t n, std::size_t row_begin,
                 std::size_t row_end) {
    for (std::size_t r = row_begin; r < row_end; ++r) {
        T* o = out + r * n;
        for (std::size_t j = 0; j < n; ++j) o[j] = T(0);
        const T* ar = a + r * k;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = ar[p];
            const T* br = b + p * n;
            for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
        }
    }
}

/// Causal depthwise convolution over one lane. `history` holds the K-1 rows preceding
/// the sequence (oldest first); nullptr means zeros. Every tap is accumulated, padding
/// included, so a zero history and implicit zero padding give identical bits.
template <class T>
void causal_conv_lane(const T* x, std::size_t len, std::size_t d, std::size_t K, const T* history, const T* w,
                      const T* bias, T* y) {
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(K) - 1;
    for (std::size_t t = 0; t < len; ++t) {
        for (std::size_t c = 0; c < d; ++c) {
            T acc = bias[c];
            for (std::size_t k = 0; k < K; ++k) {
                const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) + static_cast<std::ptrdiff_t>(k) - pad;
                T v;
                if (src >= 0)
                    v = x[static_cast<std::size_t>(src) * d + c];
                else
                    v = history ? history[static_cast<std::size_t>(pad + src) * d + c] : T(0);
                acc += w[c * K + k] * v;
            }
            y[t * d + c] = acc;
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require(b.rank() == 2 && a.cols() == b.dim(0),
                    "matmul: inner dimensions disagree: " + to_string(a.shape()) + " x " + to_string(b.shape()));
    const std::size_t rows = a.rows(), k = a.cols(), n = b.dim(1);
    Shape shape = a.shape();
    shape.back() = n;
    std::vector<T> out(rows * n);
    const T* ap = a.data().data();
    const T* bp = b.data().data();
    parallel_for(rows, [&](std::size_t r0, std::size_t r1) { detail::matmul_rows(ap, bp, out.data(), k, n, r0, r1); });
    Tensor<T> y(std::move(shape), std::move(out));
    detail::track(y, {&a, &b}, [a, b, rows, k, n](GradientTape<T>& tape, std::span<const T> g) {
        const T* av = a.data().data();
        const T* bv = b.data().data();
        if (auto ga = tape.grad_sink(a); !ga.empty()) {
            parallel_for(rows, [&](std::size_t r0, std::size_t r1) {
                for (std::size_t r = r0; r < r1; ++r)
                    for (std::size_t p = 0; p < k; ++p) {
                        T acc = T(0);
                        for (std::size_t j = 0; j < n; ++j) acc += g[r * n + j] * bv[p * n + j];
                        ga[r * k + p] += acc;
                    }
            });
        }
        if (auto gb = tape.grad_sink(b); !gb.empty()) {
            parallel_for(k, [&](std::size_t p0, std::size_t p1) {
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t p = p0; p < p1; ++p) {
                        const T ar = av[r * k + p];
                        for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += ar * g[r * n + j];
                    }
            });
        }
    });
    return y;
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require(a.shape() == b.shape(), "add: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    Tensor<T> y(a.shape(), std::move(out));
    detail::track(y, {&a, &b}, [a, b](GradientTape<T>& tape, std::span<const T> g) {
        if (auto ga = tape.grad_sink(a); !ga.empty())
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        if (auto gb = tape.grad_sink(b); !gb.empty())
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    });
    return y;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require(a.shape() == b.shape(), "sub: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    Tensor<T> y(a.shape(), std::move(out));
    detail::track(y, {&a, &b}, [a, b](GradientTape<T>& tape, std::span<const T> g) {
        if (auto ga = tape.grad_sink(a); !ga.empty())
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        if (auto gb = tape.grad_sink(b); !gb.empty())
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    });
    return y;
}

/// Elementwise (Hadamard) product.
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require(a.shape() == b.shape(), "mul: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    Tensor<T> y(a.shape(), std::move(out));
    detail::track(y, {&a, &b}, [a, b](GradientTape<T>& tape, std::span<const T> g) {
        if (auto ga = tape.grad_sink(a); !ga.empty())
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
        if (auto gb = tape.grad_sink(b); !gb.empty())
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
    });
    return y;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    return detail::unary(a, [s](T x) { return s * x; }, [s](T, T) { return s; });
}

/// a[..., n] + bias[n]; the only broadcasting the core supports.
template <class T>
Tensor<T> add_bias(const Tensor<T>& a, const Tensor<T>& bias) {
    detail::require(bias.rank() == 1 && bias.dim(0) == a.cols(),
                    "add_bias: bias " + to_string(bias.shape()) + " does not match trailing dim of " + to_string(a.shape()));
    const std::size_t n = a.cols();
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + bias[i % n];
    Tensor<T> y(a.shape(), std::move(out));
    detail::track(y, {&a, &bias}, [a, bias, n](GradientTape<T>& tape, std::span<const T> g) {
        if (auto ga = tape.grad_sink(a); !ga.empty())
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        if (auto gb = tape.grad_sink(bias); !gb.empty())
            for (std::size_t i = 0; i < g.size(); ++i) gb[i % n] += g[i];
    });
    return y;
}

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w) {
    return matmul(x, w);
}

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
    return add_bias(matmul(x, w), bias);
}

// ---------------------------------------------------------------------------
// Activations

template <class T>
Tensor<T> silu(const Tensor<T>& a) {
    return detail::unary(
        a, [](T x) { return x * detail::sigmoid(x); },
        [](T x, T) {
            const T s = detail::sigmoid(x);
            return s * (T(1) + x * (T(1) - s));
        });
}

/// ln(1 + e^x), evaluated without overflow or spurious underflow for |x| > 30.
template <class T>
Tensor<T> softplus(const Tensor<T>& a) {
    return detail::unary(a, [](T x) { return detail::softplus_value(x); }, [](T x, T) { return detail::sigmoid(x); });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
    return detail::unary(a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

/// |x| with subgradient 0 at the origin.
template <class T>
Tensor<T> abs(const Tensor<T>& a) {
    return detail::unary(
        a, [](T x) { return std::abs(x); },
        [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

/// sqrt(re^2 + im^2); the gradient at the origin is taken as zero.
template <class T>
Tensor<T> magnitude(const Tensor<T>& re, const Tensor<T>& im) {
    detail::require(re.shape() == im.shape(), "magnitude: re/im shape mismatch");
    std::vector<T> out(re.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(re[i] * re[i] + im[i] * im[i]);
    Tensor<T> y(re.shape(), std::move(out));
    detail::track(y, {&re, &im}, [re, im, yv = y.detached()](GradientTape<T>& tape, std::span<const T> g) {
        auto gr = tape.grad_sink(re);
        auto gi = tape.grad_sink(im);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T m = yv[i];
            if (m == T(0)) continue;
            if (!gr.empty()) gr[i] += g[i] * re[i] / m;
            if (!gi.empty()) gi[i] += g[i] * im[i] / m;
        }
    });
    return y;
}

inline constexpr double kRmsNormEps = 1e-5;

/// Per-row x / sqrt(mean(x^2) + eps) scaled by gain[n].
template <class T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gain, T eps = static_cast<T>(kRmsNormEps)) {
    detail::require(gain.rank() == 1 && gain.dim(0) == x.cols(),
                    "rms_norm: gain " + to_string(gain.shape()) + " does not match trailing dim of " + to_string(x.shape()));
    const std::size_t n = x.cols(), rows = x.size() / n;
    std::vector<T> out(x.size()), inv(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        T ss = T(0);
        for (std::size_t i = 0; i < n; ++i) ss += x[r * n + i] * x[r * n + i];
        inv[r] = T(1) / std::sqrt(ss / static_cast<T>(n) + eps);
        for (std::size_t i = 0; i < n; ++i) out[r * n + i] = x[r * n + i] * inv[r] * gain[i];
    }
    Tensor<T> y(x.shape(), std::move(out));
    detail::track(y, {&x, &gain}, [x, gain, inv, n, rows](GradientTape<T>& tape, std::span<const T> g) {
        auto gx = tape.grad_sink(x);
        auto gg = tape.grad_sink(gain);
        for (std::size_t r = 0; r < rows; ++r) {
            const T* xr = x.data().data() + r * n;
            const T* gr = g.data() + r * n;
            if (!gg.empty())
                for (std::size_t i = 0; i < n; ++i) gg[i] += gr[i] * xr[i] * inv[r];
            if (gx.empty()) continue;
            T dot = T(0);
            for (std::size_t i = 0; i < n; ++i) dot += gr[i] * gain[i] * xr[i];
            const T k = inv[r] * inv[r] * inv[r] * dot / static_cast<T>(n);
            for (std::size_t i = 0; i < n; ++i) gx[r * n + i] += inv[r] * gain[i] * gr[i] - k * xr[i];
        }
    });
    return y;
}

// ---------------------------------------------------------------------------
// Convolution

/// Per-channel causal convolution along the sequence axis of x[..., L, d] with kernel[d, K]
/// (taps oldest to newest) and bias[d]: y[t] = bias + sum_k w[k] * x[t - (K-1) + k].
template <class T>
Tensor<T> depthwise_causal_conv1d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias) {
    detail::require(x.rank() >= 2, "conv1d: input must be [..., L, d], got " + to_string(x.shape()));
    const std::size_t d = x.cols(), L = x.dim_from_back(2), lanes = x.size() / (d * L);
    detail::require(kernel.rank() == 2 && kernel.dim(0) == d && bias.rank() == 1 && bias.dim(0) == d,
                    "conv1d: channel mismatch: x " + to_string(x.shape()) + ", kernel " + to_string(kernel.shape()) +
                        ", bias " + to_string(bias.shape()));
    const std::size_t K = kernel.dim(1);
    std::vector<T> out(x.size());
    const T* xp = x.data().data();
    parallel_for(lanes, [&](std::size_t b0, std::size_t b1) {
        for (std::size_t b = b0; b < b1; ++b)
            detail::causal_conv_lane(xp + b * L * d, L, d, K, static_cast<const T*>(nullptr), kernel.data().data(),
                                     bias.data().data(), out.data() + b * L * d);
    });
    Tensor<T> y(x.shape(), std::move(out));
    detail::track(y, {&x, &kernel, &bias}, [x, kernel, bias, lanes, L, d, K](GradientTape<T>& tape, std::span<const T> g) {
        auto gx = tape.grad_sink(x);
        auto gw = tape.grad_sink(kernel);
        auto gb = tape.grad_sink(bias);
        const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(K) - 1;
        for (std::size_t b = 0; b < lanes; ++b) {
            const std::size_t off = b * L * d;
            for (std::size_t t = 0; t < L; ++t)
                for (std::size_t c = 0; c < d; ++c) {
                    const T gv = g[off + t * d + c];
                    if (!gb.empty()) gb[c] += gv;
                    for (std::size_t k = 0; k < K; ++k) {
                        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k) - pad;
                        if (src < 0) continue;
                        const std::size_t si = off + static_cast<std::size_t>(src) * d + c;
                        if (!gx.empty()) gx[si] += gv * kernel[c * K + k];
                        if (!gw.empty()) gw[c * K + k] += gv * x[si];
                    }
                }
        }
    });
    return y;
}

/// Streaming form of depthwise_causal_conv1d for inference. `tail` is [lanes, K-1, d] and
/// holds the last K-1 inputs seen so far (zeros at stream start); it is advanced in place.
/// Not recorded on any tape.
template <class T>
Tensor<T> depthwise_causal_conv1d_stream(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias,
                                         Tensor<T>& tail) {
    detail::require(x.rank() >= 2, "conv1d: input must be [..., L, d], got " + to_string(x.shape()));
    const std::size_t d = x.cols(), L = x.dim_from_back(2), lanes = x.size() / (d * L);
    detail::require(kernel.rank() == 2 && kernel.dim(0) == d && bias.rank() == 1 && bias.dim(0) == d,
                    "conv1d: channel mismatch: x " + to_string(x.shape()) + ", kernel " + to_string(kernel.shape()));
    const std::size_t K = kernel.dim(1), H = K - 1;
    std::vector<T> out(x.size());
    if (H == 0) {
        for (std::size_t b = 0; b < lanes; ++b)
            detail::causal_conv_lane(x.data().data() + b * L * d, L, d, K, static_cast<const T*>(nullptr),
                                     kernel.data().data(), bias.data().data(), out.data() + b * L * d);
        return Tensor<T>(x.shape(), std::move(out));
    }
    detail::require(tail.size() == lanes * H * d,
                    "conv1d: stream tail " + to_string(tail.shape()) + " does not fit input " + to_string(x.shape()));
    auto hist = tail.mutable_data();
    std::vector<T> joined((H + L) * d);
    for (std::size_t b = 0; b < lanes; ++b) {
        const T* xs = x.data().data() + b * L * d;
        T* hs = hist.data() + b * H * d;
        detail::causal_conv_lane(xs, L, d, K, hs, kernel.data().data(), bias.data().data(), out.data() + b * L * d);
        std::copy(hs, hs + H * d, joined.begin());
        std::copy(xs, xs + L * d, joined.begin() + static_cast<std::ptrdiff_t>(H * d));
        std::copy(joined.end() - static_cast<std::ptrdiff_t>(H * d), joined.end(), hs);
    }
    return Tensor<T>(x.shape(), std::move(out));
}

// ---------------------------------------------------------------------------
// Structural ops

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    Tensor<T> y = a.detached().reshaped(std::move(shape));
    detail::track(y, {&a}, [a](GradientTape<T>& tape, std::span<const T> g) {
        if (auto ga = tape.grad_sink(a); !ga.empty())
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
    return y;
}

/// Concatenates along the last axis; all leading dimensions must agree.
template <class T>
Tensor<T> concat_last(const std::vector<Tensor<T>>& parts) {
    detail::require(!parts.empty(), "concat: no inputs");
    Shape lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (const auto& p : parts) {
        detail::require(Shape(p.shape().begin(), p.shape().end() - 1) == lead,
                        "concat: leading shape mismatch " + to_string(parts[0].shape()) + " vs " + to_string(p.shape()));
        widths.push_back(p.cols());
        total += p.cols();
    }
    const std::size_t rows = parts[0].rows();
    std::vector<T> out(rows * total);
    std::size_t col = 0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        auto src = parts[i].data();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < widths[i]; ++j) out[r * total + col + j] = src[r * widths[i] + j];
        col += widths[i];
    }
    Shape shape = lead;
    shape.push_back(total);
    Tensor<T> y(std::move(shape), std::move(out));
    detail::track(y, parts, [parts, widths, rows, total](GradientTape<T>& tape, std::span<const T> g) {
        std::size_t col = 0;
        for (std::size_t i = 0; i < parts.size(); ++i) {
            if (auto gp = tape.grad_sink(parts[i]); !gp.empty())
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < widths[i]; ++j) gp[r * widths[i] + j] += g[r * total + col + j];
            col += widths[i];
        }
    });
    return y;
}

/// Columns [begin, end) of the last axis.
template <class T>
Tensor<T> slice_last(const Tensor<T>& a, std::size_t begin, std::size_t end) {
    detail::require(begin < end && end <= a.cols(), "slice: bad range for shape " + to_string(a.shape()));
    const std::size_t rows = a.rows(), n = a.cols(), w = end - begin;
    std::vector<T> out(rows * w);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < w; ++j) out[r * w + j] = a[r * n + begin + j];
    Shape shape = a.shape();
    shape.back() = w;
    Tensor<T> y(std::move(shape), std::move(out));
    detail::track(y, {&a}, [a, rows, n, w, begin](GradientTape<T>& tape, std::span<const T> g) {
        if (auto ga = tape.grad_sink(a); !ga.empty())
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < w; ++j) ga[r * n + begin + j] += g[r * w + j];
    });
    return y;
}

namespace detail {
/// Index permutation shared by the forward and backward passes of reverse_sequence.
inline std::size_t reversed_index(std::size_t i, std::size_t L, std::size_t d) {
    const std::size_t lane = i / (L * d), rem = i % (L * d), t = rem / d, c = rem % d;
    return lane * L * d + (L - 1 - t) * d + c;
}
}  // namespace detail

/// Reverses the sequence axis (second to last) of x[..., L, d].
template <class T>
Tensor<T> reverse_sequence(const Tensor<T>& a) {
    detail::require(a.rank() >= 2, "reverse_sequence: need rank >= 2");
    const std::size_t d = a.cols(), L = a.dim_from_back(2);
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[detail::reversed_index(i, L, d)] = a[i];
    Tensor<T> y(a.shape(), std::move(out));
    detail::track(y, {&a}, [a, L, d](GradientTape<T>& tape, std::span<const T> g) {
        if (auto ga = tape.grad_sink(a); !ga.empty())
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[detail::reversed_index(i, L, d)];
    });
    return y;
}

/// [A, B, D] -> [B, A, D].
template <class T>
Tensor<T> swap_leading(const Tensor<T>& a) {
    detail::require(a.rank() == 3, "swap_leading: need rank 3, got " + to_string(a.shape()));
    const std::size_t A = a.dim(0), B = a.dim(1), D = a.dim(2);
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < A; ++i)
        for (std::size_t j = 0; j < B; ++j)
            for (std::size_t c = 0; c < D; ++c) out[(j * A + i) * D + c] = a[(i * B + j) * D + c];
    Tensor<T> y({B, A, D}, std::move(out));
    detail::track(y, {&a}, [a, A, B, D](GradientTape<T>& tape, std::span<const T> g) {
        if (auto ga = tape.grad_sink(a); !ga.empty())
            for (std::size_t i = 0; i < A; ++i)
                for (std::size_t j = 0; j < B; ++j)
                    for (std::size_t c = 0; c < D; ++c) ga[(i * B + j) * D + c] += g[(j * A + i) * D + c];
    });
    return y;
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
    T acc = T(0);
    for (auto v : a.data()) acc += v;
    Tensor<T> y = Tensor<T>::scalar(acc);
    detail::track(y, {&a}, [a](GradientTape<T>& tape, std::span<const T> g) {
        if (auto ga = tape.grad_sink(a); !ga.empty())
            for (auto& v : ga) v += g[0];
    });
    return y;
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
    return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

}  // namespace mcmamba
