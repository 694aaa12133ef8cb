#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ops.hpp"
#include "parallel.hpp"
#include "random.hpp"
#include "tensor.hpp"

// Selective state-space core. Per lane and feature i, with state index j:
//   delta_n = softplus(x_n W_down W_up + bias)          (input-dependent step)
//   B_n = x_n W_B,  C_n = x_n W_C                       (input-dependent projections)
//   abar_n[i,j] = exp(delta_n[i] * A[i,j]),  A = -exp(A_log)   (zero-order hold)
//   bx_n[i,j]   = (delta_n[i] * B_n[j]) * x_n[i]               (Euler rule for B)
//   h_n = abar_n * h_{n-1} + bx_n,   y_n[i] = sum_j C_n[j] h_n[i,j]

namespace mcmamba {

struct SsmError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

template <class T>
struct SsmParams {
    std::size_t d_inner = 0;
    std::size_t d_state = 0;
    std::size_t dt_rank = 0;
    Tensor<T> a_log;         // [d_inner, d_state]
    Tensor<T> w_delta_down;  // [d_inner, dt_rank]
    Tensor<T> w_delta_up;    // [dt_rank, d_inner]
    Tensor<T> delta_bias;    // [d_inner]
    Tensor<T> w_b;           // [d_inner, d_state]
    Tensor<T> w_c;           // [d_inner, d_state]

    static std::size_t default_dt_rank(std::size_t d_inner) { return std::max<std::size_t>(1, d_inner / 16); }

    /// A_log rows are ln(1..d_state); the delta bias is drawn so that softplus(bias) is
    /// log-uniform in [1e-3, 1e-1].
    static SsmParams init(std::size_t d_inner, std::size_t d_state, Rng& rng) {
        SsmParams p;
        p.d_inner = d_inner;
        p.d_state = d_state;
        p.dt_rank = default_dt_rank(d_inner);
        std::vector<T> alog(d_inner * d_state);
        for (std::size_t i = 0; i < d_inner; ++i)
            for (std::size_t j = 0; j < d_state; ++j) alog[i * d_state + j] = static_cast<T>(std::log(double(j + 1)));
        p.a_log = Tensor<T>({d_inner, d_state}, std::move(alog));
        p.w_delta_down = linear_init<T>(d_inner, p.dt_rank, rng);
        const double up = 1.0 / std::sqrt(static_cast<double>(p.dt_rank));
        p.w_delta_up = random_uniform<T>({p.dt_rank, d_inner}, -up, up, rng);
        std::uniform_real_distribution<double> u(std::log(1e-3), std::log(1e-1));
        std::vector<T> bias(d_inner);
        for (auto& b : bias) {
            const double dt = std::exp(u(rng));
            b = static_cast<T>(dt + std::log(-std::expm1(-dt)));
        }
        p.delta_bias = Tensor<T>({d_inner}, std::move(bias));
        p.w_b = linear_init<T>(d_inner, d_state, rng);
        p.w_c = linear_init<T>(d_inner, d_state, rng);
        return p;
    }

    static SsmParams zeros(std::size_t d_inner, std::size_t d_state) {
        SsmParams p;
        p.d_inner = d_inner;
        p.d_state = d_state;
        p.dt_rank = default_dt_rank(d_inner);
        p.a_log = Tensor<T>::zeros({d_inner, d_state});
        p.w_delta_down = Tensor<T>::zeros({d_inner, p.dt_rank});
        p.w_delta_up = Tensor<T>::zeros({p.dt_rank, d_inner});
        p.delta_bias = Tensor<T>::zeros({d_inner});
        p.w_b = Tensor<T>::zeros({d_inner, d_state});
        p.w_c = Tensor<T>::zeros({d_inner, d_state});
        return p;
    }

    template <class Fn>
    void for_each_parameter(const std::string& prefix, Fn&& fn) {
        fn(prefix + "a_log", a_log);
        fn(prefix + "delta_down", w_delta_down);
        fn(prefix + "delta_up", w_delta_up);
        fn(prefix + "delta_bias", delta_bias);
        fn(prefix + "w_b", w_b);
        fn(prefix + "w_c", w_c);
    }
};

/// Latent state h for one or more independent lanes: shape [d_inner, d_state] or
/// [lanes, d_inner, d_state].
template <class T>
struct SsmState {
    Tensor<T> h;
    std::size_t n_processed = 0;

    static SsmState fresh(std::size_t d_inner, std::size_t d_state, std::size_t lanes = 1) {
        SsmState s;
        s.h = lanes == 1 ? Tensor<T>::zeros({d_inner, d_state}) : Tensor<T>::zeros({lanes, d_inner, d_state});
        return s;
    }
};

/// Input-dependent (delta, B, C) for a sequence x[..., L, d_inner].
template <class T>
struct Selection {
    Tensor<T> delta;  // [..., L, d_inner], strictly positive
    Tensor<T> b;      // [..., L, d_state]
    Tensor<T> c;      // [..., L, d_state]
};

namespace detail {

template <class T>
void require_finite(const Tensor<T>& x, const char* what) {
    for (auto v : x.data())
        if (!std::isfinite(v)) throw SsmError(std::string(what) + ": non-finite input");
}

template <class T>
std::vector<T> continuous_a(const Tensor<T>& a_log) {
    std::vector<T> a(a_log.size());
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = -std::exp(a_log[i]);
    return a;
}

/// The one place the discretization arithmetic is written down; every scan kernel uses it
/// so that their results can be compared bit for bit.
template <class T>
struct Discrete {
    T abar;
    T bx;
};

template <class T>
inline Discrete<T> discretize_entry(T delta, T a, T b, T x) {
    return {std::exp(delta * a), (delta * b) * x};
}

/// Associative combine over (abar, bx) pairs: later ∘ earlier = (a1 a2, a2 b1 + b2).
template <class T>
inline Discrete<T> combine(const Discrete<T>& later, const Discrete<T>& earlier) {
    return {earlier.abar * later.abar, later.abar * earlier.bx + later.bx};
}

}  // namespace detail

template <class T>
Selection<T> select(const SsmParams<T>& p, const Tensor<T>& x) {
    if (x.cols() != p.d_inner)
        throw SsmError("ssm: input width " + std::to_string(x.cols()) + " != d_inner " + std::to_string(p.d_inner));
    Selection<T> s;
    s.delta = softplus(add_bias(matmul(matmul(x, p.w_delta_down), p.w_delta_up), p.delta_bias));
    s.b = matmul(x, p.w_b);
    s.c = matmul(x, p.w_c);
    return s;
}

/// Fused selective scan over x[..., L, d] with its selection tensors. When `state` is
/// given, its h seeds the recurrence and receives h_L. Gradients flow to x, delta, a_log,
/// b and c (not to the initial state).
template <class T>
Tensor<T> selective_scan(const Tensor<T>& x, const Tensor<T>& delta, const Tensor<T>& a_log, const Tensor<T>& b,
                         const Tensor<T>& c, SsmState<T>* state = nullptr) {
    if (x.rank() < 2) throw SsmError("scan: x must be [..., L, d], got " + to_string(x.shape()));
    const std::size_t d = x.cols(), L = x.dim_from_back(2), lanes = x.size() / (L * d);
    if (a_log.rank() != 2 || a_log.dim(0) != d) throw SsmError("scan: a_log shape " + to_string(a_log.shape()));
    const std::size_t N = a_log.dim(1);
    if (delta.shape() != x.shape()) throw SsmError("scan: delta shape " + to_string(delta.shape()));
    Shape bc_shape = x.shape();
    bc_shape.back() = N;
    if (b.shape() != bc_shape || c.shape() != bc_shape)
        throw SsmError("scan: B/C shape mismatch, expected " + to_string(bc_shape));
    if (state && state->h.size() != lanes * d * N)
        throw SsmError("scan: state shape " + to_string(state->h.shape()) + " does not match " +
                       std::to_string(lanes) + " lanes x [" + std::to_string(d) + "," + std::to_string(N) + "]");

    auto* tape = active_tape<T>();
    const bool recording = tape && (tape->tracks(x) || tape->tracks(delta) || tape->tracks(a_log) ||
                                    tape->tracks(b) || tape->tracks(c));
    const std::vector<T> A = detail::continuous_a(a_log);
    std::vector<T> y(x.size());
    std::vector<T> h_all(recording ? lanes * L * d * N : 0);
    std::vector<T> abar_all(recording ? lanes * L * d * N : 0);
    std::vector<T> h0(lanes * d * N, T(0));
    if (state) std::copy(state->h.data().begin(), state->h.data().end(), h0.begin());
    std::vector<T> h_final(lanes * d * N);

    const T* xp = x.data().data();
    const T* dp = delta.data().data();
    const T* bp = b.data().data();
    const T* cp = c.data().data();
    parallel_for(lanes, [&](std::size_t l0, std::size_t l1) {
        std::vector<T> h(d * N);
        for (std::size_t lane = l0; lane < l1; ++lane) {
            std::copy_n(h0.begin() + lane * d * N, d * N, h.begin());
            for (std::size_t n = 0; n < L; ++n) {
                const std::size_t row = lane * L + n;
                for (std::size_t i = 0; i < d; ++i) {
                    const T dl = dp[row * d + i], xv = xp[row * d + i];
                    T acc = T(0);
                    for (std::size_t j = 0; j < N; ++j) {
                        const auto e = detail::discretize_entry(dl, A[i * N + j], bp[row * N + j], xv);
                        T& hij = h[i * N + j];
                        hij = e.abar * hij + e.bx;
                        acc += cp[row * N + j] * hij;
                        if (recording) {
                            h_all[(row * d + i) * N + j] = hij;
                            abar_all[(row * d + i) * N + j] = e.abar;
                        }
                    }
                    y[row * d + i] = acc;
                }
            }
            std::copy(h.begin(), h.end(), h_final.begin() + lane * d * N);
        }
    });
    if (state) {
        state->h = Tensor<T>(state->h.shape(), std::move(h_final));
        state->n_processed += L;
    }

    Tensor<T> out(x.shape(), std::move(y));
    if (!recording) return out;
    detail::track(out, {&x, &delta, &a_log, &b, &c},
                  [x, delta, a_log, b, c, A, h0 = std::move(h0), h_all = std::move(h_all),
                   abar_all = std::move(abar_all), lanes, L, d, N](GradientTape<T>& tape, std::span<const T> gy) {
                      auto gx = tape.grad_sink(x);
                      auto gdelta = tape.grad_sink(delta);
                      auto galog = tape.grad_sink(a_log);
                      auto gb = tape.grad_sink(b);
                      auto gc = tape.grad_sink(c);
                      std::vector<T> ga_lane(lanes * d * N, T(0));
                      parallel_for(lanes, [&](std::size_t l0, std::size_t l1) {
                          std::vector<T> g(d * N);
                          for (std::size_t lane = l0; lane < l1; ++lane) {
                              std::fill(g.begin(), g.end(), T(0));
                              T* ga = ga_lane.data() + lane * d * N;
                              for (std::size_t n = L; n-- > 0;) {
                                  const std::size_t row = lane * L + n;
                                  for (std::size_t i = 0; i < d; ++i) {
                                      const T gyi = gy[row * d + i];
                                      const T dl = delta[row * d + i], xv = x[row * d + i];
                                      T gdl = T(0), gxv = T(0);
                                      for (std::size_t j = 0; j < N; ++j) {
                                          const std::size_t k = (row * d + i) * N + j;
                                          const T hn = h_all[k];
                                          const T hprev = n > 0 ? h_all[k - d * N] : h0[(lane * d + i) * N + j];
                                          const T bj = b[row * N + j];
                                          if (!gc.empty()) gc[row * N + j] += gyi * hn;
                                          const T gh = g[i * N + j] + gyi * c[row * N + j];
                                          gdl += gh * bj * xv;
                                          if (!gb.empty()) gb[row * N + j] += gh * dl * xv;
                                          gxv += gh * dl * bj;
                                          const T a = abar_all[k];
                                          const T gabar = gh * hprev * a;
                                          gdl += gabar * A[i * N + j];
                                          ga[i * N + j] += gabar * dl;
                                          g[i * N + j] = gh * a;
                                      }
                                      if (!gdelta.empty()) gdelta[row * d + i] += gdl;
                                      if (!gx.empty()) gx[row * d + i] += gxv;
                                  }
                              }
                          }
                      });
                      if (!galog.empty())
                          for (std::size_t lane = 0; lane < lanes; ++lane)
                              for (std::size_t k = 0; k < d * N; ++k) galog[k] += ga_lane[lane * d * N + k] * A[k];
                  });
    return out;
}

/// Discretized (abar, bx) for a single step x_n[d_inner].
template <class T>
std::pair<Tensor<T>, Tensor<T>> discretize(const SsmParams<T>& p, const Tensor<T>& x_n) {
    detail::require_finite(x_n, "discretize");
    const auto x = x_n.reshaped({1, x_n.size()});
    const auto sel = select(p, x);
    const auto A = detail::continuous_a(p.a_log);
    const std::size_t d = p.d_inner, N = p.d_state;
    std::vector<T> abar(d * N), bx(d * N);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < N; ++j) {
            const auto e = detail::discretize_entry(sel.delta[i], A[i * N + j], sel.b[j], x[i]);
            abar[i * N + j] = e.abar;
            bx[i * N + j] = e.bx;
        }
    return {Tensor<T>({d, N}, std::move(abar)), Tensor<T>({d, N}, std::move(bx))};
}

template <class T>
struct ScanResult {
    Tensor<T> y;
    SsmState<T> state;
};

/// Step-by-step recurrence over x[L, d_inner] (or [lanes, L, d_inner]) continuing `state`.
template <class T>
ScanResult<T> scan_sequential(const SsmParams<T>& p, const Tensor<T>& x, SsmState<T> state) {
    detail::require_finite(x, "scan_sequential");
    const auto sel = select(p, x);
    auto y = selective_scan(x, sel.delta, p.a_log, sel.b, sel.c, &state);
    return {std::move(y), std::move(state)};
}

/// Streams chunks through the recurrence; concatenated outputs equal one sequential scan.
template <class T>
std::vector<Tensor<T>> scan_chunked(const SsmParams<T>& p, std::span<const Tensor<T>> chunks, SsmState<T>& state) {
    std::vector<Tensor<T>> out;
    out.reserve(chunks.size());
    for (const auto& chunk : chunks) {
        auto r = scan_sequential(p, chunk, std::move(state));
        state = std::move(r.state);
        out.push_back(std::move(r.y));
    }
    return out;
}

/// Block-parallel scan from a zero state: each block is reduced locally with the
/// associative combine, block aggregates are scanned serially, then every block applies
/// its carry-in. O(L) work; blocks are processed on up to `workers` threads.
template <class T>
Tensor<T> scan_parallel(const SsmParams<T>& p, const Tensor<T>& x, std::size_t blocks = 0,
                        std::size_t workers = worker_count()) {
    detail::require_finite(x, "scan_parallel");
    NoGradScope<T> no_grad;
    const auto sel = select(p, x);
    const std::size_t d = p.d_inner, N = p.d_state, L = x.dim_from_back(2), lanes = x.size() / (L * d);
    if (blocks == 0) blocks = std::max<std::size_t>(4, 2 * workers);
    blocks = std::clamp<std::size_t>(blocks, 1, L);
    const std::size_t per = (L + blocks - 1) / blocks;
    blocks = (L + per - 1) / per;
    const auto A = detail::continuous_a(p.a_log);
    const std::size_t DN = d * N;
    std::vector<T> y(x.size());
    std::vector<detail::Discrete<T>> prefix(L * DN);
    std::vector<detail::Discrete<T>> carry(blocks * DN);

    for (std::size_t lane = 0; lane < lanes; ++lane) {
        auto at = [&](std::size_t n, std::size_t i) { return (lane * L + n) * d + i; };
        auto at_n = [&](std::size_t n, std::size_t j) { return (lane * L + n) * N + j; };
        // Local inclusive prefixes within each block.
        parallel_for(
            blocks,
            [&](std::size_t k0, std::size_t k1) {
                for (std::size_t k = k0; k < k1; ++k) {
                    const std::size_t s = k * per, e = std::min(L, s + per);
                    for (std::size_t n = s; n < e; ++n)
                        for (std::size_t i = 0; i < d; ++i)
                            for (std::size_t j = 0; j < N; ++j) {
                                const auto el = detail::discretize_entry(sel.delta[at(n, i)], A[i * N + j],
                                                                         sel.b[at_n(n, j)], x[at(n, i)]);
                                auto& pr = prefix[n * DN + i * N + j];
                                pr = n == s ? el : detail::combine(el, prefix[(n - 1) * DN + i * N + j]);
                            }
                }
            },
            workers);
        // Serial scan over block aggregates: carry[k] is the state entering block k.
        for (std::size_t q = 0; q < DN; ++q) carry[q] = {T(1), T(0)};
        for (std::size_t k = 1; k < blocks; ++k) {
            const std::size_t last = std::min(L, k * per) - 1;
            for (std::size_t q = 0; q < DN; ++q)
                carry[k * DN + q] = detail::combine(prefix[last * DN + q], carry[(k - 1) * DN + q]);
        }
        // Apply carry-in and contract with C.
        parallel_for(
            blocks,
            [&](std::size_t k0, std::size_t k1) {
                for (std::size_t k = k0; k < k1; ++k) {
                    const std::size_t s = k * per, e = std::min(L, s + per);
                    for (std::size_t n = s; n < e; ++n)
                        for (std::size_t i = 0; i < d; ++i) {
                            T acc = T(0);
                            for (std::size_t j = 0; j < N; ++j) {
                                const auto& pr = prefix[n * DN + i * N + j];
                                const T h = k == 0 ? pr.bx : pr.abar * carry[k * DN + i * N + j].bx + pr.bx;
                                acc += sel.c[at_n(n, j)] * h;
                            }
                            y[at(n, i)] = acc;
                        }
                }
            },
            workers);
    }
    return Tensor<T>(x.shape(), std::move(y));
}

}  // namespace mcmamba
