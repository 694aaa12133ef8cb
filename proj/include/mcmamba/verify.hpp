#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <complex>
#include <cstring>
#include <functional>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "mamba.hpp"
#include "model.hpp"
#include "simulate.hpp"
#include "ssm.hpp"
#include "stft.hpp"

namespace mcmamba {

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
    double seconds = 0.0;
};

inline const std::vector<std::string>& verify_check_names() {
    static const std::vector<std::string> names{"causality", "streaming", "scan", "stft", "gradcheck"};
    return names;
}

struct VerifyOptions {
    std::uint64_t seed = 1;
    std::vector<std::string> only;  // empty: every check
    std::string inject_fault;       // "causality" makes the causal probe look ahead one step
    std::size_t trials = 20;
};

using SequenceFn = std::function<Tensor<double>(const Tensor<double>&)>;

/// max |a - b| / max(max |b|, 1e-300).
inline double max_rel_diff(std::span<const double> a, std::span<const double> b) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num = std::max(num, std::abs(a[i] - b[i]));
        den = std::max(den, std::abs(b[i]));
    }
    return num / std::max(den, 1e-300);
}

/// True when rows [.., 0..t0, :] of two [lanes, L, d] tensors are bit-identical.
inline bool prefix_equal(const Tensor<double>& a, const Tensor<double>& b, std::size_t t0) {
    const std::size_t L = a.dim_from_back(2), d = a.cols(), lanes = a.size() / (L * d);
    for (std::size_t l = 0; l < lanes; ++l)
        if (std::memcmp(a.data().data() + l * L * d, b.data().data() + l * L * d, (t0 + 1) * d * sizeof(double)) != 0)
            return false;
    return true;
}

/// Overwrites steps t0+1.. of every lane with fresh noise.
inline Tensor<double> perturb_future(const Tensor<double>& x, std::size_t t0, Rng& rng) {
    const std::size_t L = x.dim_from_back(2), d = x.cols(), lanes = x.size() / (L * d);
    auto v = x.to_vector();
    std::normal_distribution<double> n(0.0, 1.0);
    for (std::size_t l = 0; l < lanes; ++l)
        for (std::size_t t = t0 + 1; t < L; ++t)
            for (std::size_t c = 0; c < d; ++c) v[(l * L + t) * d + c] = n(rng);
    return Tensor<double>(x.shape(), std::move(v));
}

/// Counts trials in which a future perturbation changed the output prefix.
inline std::size_t prefix_violations(const SequenceFn& f, std::size_t lanes, std::size_t L, std::size_t d,
                                     std::size_t trials, Rng& rng) {
    std::size_t bad = 0;
    for (std::size_t k = 0; k < trials; ++k) {
        const auto x = random_normal<double>({lanes, L, d}, 1.0, rng);
        const std::size_t t0 = rng() % (L - 1);
        if (!prefix_equal(f(x), f(perturb_future(x, t0, rng)), t0)) ++bad;
    }
    return bad;
}

/// A causal block that also peeks one step ahead; used to show the causality check bites.
inline SequenceFn leaky(SequenceFn inner) {
    return [inner](const Tensor<double>& x) {
        const auto y = inner(x);
        const std::size_t L = y.dim_from_back(2), d = y.cols(), lanes = y.size() / (L * d);
        auto v = y.to_vector();
        for (std::size_t l = 0; l < lanes; ++l)
            for (std::size_t t = 0; t + 1 < L; ++t)
                for (std::size_t c = 0; c < d; ++c) v[(l * L + t) * d + c] += 1e-3 * x[(l * L + t + 1) * x.cols()];
        return Tensor<double>(y.shape(), std::move(v));
    };
}

inline ComplexSpectrogram<double> random_spectrogram(std::size_t M, std::size_t T, std::size_t F, Rng& rng) {
    ComplexSpectrogram<double> s;
    s.re = random_normal<double>({M, T, F}, 1.0, rng);
    s.im = random_normal<double>({M, T, F}, 1.0, rng);
    return s;
}

inline ComplexSpectrogram<double> perturb_frames_after(const ComplexSpectrogram<double>& s, std::size_t t0, Rng& rng) {
    const std::size_t M = s.channels(), T = s.frames(), F = s.bins();
    auto re = s.re.to_vector(), im = s.im.to_vector();
    std::normal_distribution<double> n(0.0, 3.0);
    for (std::size_t m = 0; m < M; ++m)
        for (std::size_t t = t0 + 1; t < T; ++t)
            for (std::size_t f = 0; f < F; ++f) {
                re[(m * T + t) * F + f] = n(rng);
                im[(m * T + t) * F + f] = n(rng);
            }
    auto out = s;
    out.re = Tensor<double>(s.re.shape(), std::move(re));
    out.im = Tensor<double>(s.im.shape(), std::move(im));
    return out;
}

/// Enhanced frames 0..t0 of two outputs [1, T, F] are bit-identical.
inline bool frames_prefix_equal(const ComplexSpectrogram<double>& a, const ComplexSpectrogram<double>& b, std::size_t t0) {
    const std::size_t n = (t0 + 1) * a.bins() * sizeof(double);
    return std::memcmp(a.re.data().data(), b.re.data().data(), n) == 0 &&
           std::memcmp(a.im.data().data(), b.im.data().data(), n) == 0;
}

/// Per-step recurrence in long double, independent of the scan kernels.
inline std::vector<long double> reference_scan(const SsmParams<double>& p, const Tensor<double>& x) {
    const auto sel = select(p, x);
    const std::size_t d = p.d_inner, N = p.d_state, L = x.dim_from_back(2), lanes = x.size() / (L * d);
    std::vector<long double> y(x.size());
    for (std::size_t l = 0; l < lanes; ++l) {
        std::vector<long double> h(d * N, 0.0L);
        for (std::size_t n = 0; n < L; ++n)
            for (std::size_t i = 0; i < d; ++i) {
                const long double dt = sel.delta[(l * L + n) * d + i], xi = x[(l * L + n) * d + i];
                long double acc = 0.0L;
                for (std::size_t j = 0; j < N; ++j) {
                    const long double A = -std::exp(static_cast<long double>(p.a_log[i * N + j]));
                    h[i * N + j] = std::exp(dt * A) * h[i * N + j] + dt * sel.b[(l * L + n) * N + j] * xi;
                    acc += sel.c[(l * L + n) * N + j] * h[i * N + j];
                }
                y[(l * L + n) * d + i] = acc;
            }
    }
    return y;
}

namespace detail {

inline CheckResult check_causality(const VerifyOptions& o) {
    Rng rng(o.seed);
    DirectionalBlockConfig dc{6, 8, 4, true, 2, 4, 8};
    const auto uni = UniMamba<double>::init(dc, rng);
    SequenceFn uni_fn = [&](const Tensor<double>& x) { return uni.forward(x); };
    if (o.inject_fault == "causality") uni_fn = leaky(uni_fn);
    const std::size_t uni_bad = prefix_violations(uni_fn, 2, 12, 6, o.trials, rng);

    dc.causal = false;
    const auto bi = BiMamba<double>::init(dc, rng);
    const std::size_t bi_bad = prefix_violations([&](const Tensor<double>& x) { return bi.forward(x); }, 2, 12, 6,
                                                 o.trials, rng);

    auto cfg = McMambaConfig::tiny(2, 17, true);
    const auto model = McMambaModel<double>::init(cfg, rng);
    std::size_t model_bad = 0;
    const std::size_t model_trials = std::max<std::size_t>(1, o.trials / 4);
    for (std::size_t k = 0; k < model_trials; ++k) {
        const auto s = random_spectrogram(2, 8, 17, rng);
        const std::size_t t0 = rng() % 7;
        if (!frames_prefix_equal(enhance_offline(model, s), enhance_offline(model, perturb_frames_after(s, t0, rng)), t0))
            ++model_bad;
    }
    std::ostringstream os;
    os << "uni violations " << uni_bad << "/" << o.trials << ", model violations " << model_bad << "/" << model_trials
       << ", bi witnesses " << bi_bad << "/" << o.trials;
    return {"causality", uni_bad == 0 && model_bad == 0 && bi_bad > 0, os.str()};
}

inline CheckResult check_streaming(const VerifyOptions& o) {
    Rng rng(o.seed + 1);
    const auto cfg = McMambaConfig::tiny(3, 17, true);
    const auto model = McMambaModel<double>::init(cfg, rng);
    std::size_t fixtures = std::max<std::size_t>(3, o.trials / 4), bad = 0;
    for (std::size_t k = 0; k < fixtures; ++k) {
        const std::size_t T = 4 + rng() % 8;
        const auto s = random_spectrogram(3, T, 17, rng);
        const auto off = enhance_offline(model, s);
        auto ctx = model.make_stream_context();
        std::vector<ComplexSpectrogram<double>> parts;
        for (std::size_t t = 0; t < T;) {
            const std::size_t n = std::min<std::size_t>(T - t, 1 + rng() % 3);
            parts.push_back(enhance_streaming(model, s.frames_range(t, t + n), ctx));
            t += n;
        }
        const auto st = concat_frames(parts);
        if (!bit_equal(st.re, off.re) || !bit_equal(st.im, off.im)) ++bad;
    }
    return {"streaming", bad == 0, std::to_string(fixtures - bad) + "/" + std::to_string(fixtures) + " fixtures bit-exact"};
}

inline CheckResult check_scan(const VerifyOptions& o) {
    Rng rng(o.seed + 2);
    double worst = 0.0;
    const std::size_t cases = std::max<std::size_t>(10, o.trials);
    for (std::size_t k = 0; k < cases; ++k) {
        const std::size_t L = 1 + rng() % 40, d = 1 + rng() % 8, N = 1 + rng() % 8;
        const auto p = SsmParams<double>::init(d, N, rng);
        const auto x = random_normal<double>({L, d}, 1.0, rng);
        const auto ref = reference_scan(p, x);
        std::vector<double> refd(ref.begin(), ref.end());
        const auto seq = scan_sequential(p, x, SsmState<double>::fresh(d, N)).y;
        const auto par = scan_parallel(p, x, 1 + rng() % 6);
        const std::size_t cut = 1 + rng() % L;
        std::vector<Tensor<double>> chunks;
        for (std::size_t s = 0; s < L; s += cut) {
            const std::size_t e = std::min(L, s + cut);
            std::vector<double> v(x.data().begin() + static_cast<std::ptrdiff_t>(s * d),
                                  x.data().begin() + static_cast<std::ptrdiff_t>(e * d));
            chunks.emplace_back(Shape{e - s, d}, std::move(v));
        }
        auto state = SsmState<double>::fresh(d, N);
        std::vector<double> ch;
        for (const auto& c : scan_chunked<double>(p, chunks, state)) ch.insert(ch.end(), c.data().begin(), c.data().end());
        worst = std::max({worst, max_rel_diff(seq.data(), refd), max_rel_diff(par.data(), refd), max_rel_diff(ch, refd)});
    }
    std::ostringstream os;
    os << cases << " cases, max rel err " << worst;
    return {"scan", worst < 1e-10, os.str()};
}

inline CheckResult check_stft(const VerifyOptions& o) {
    Rng rng(o.seed + 3);
    const StftConfig cfg;
    const std::size_t n = 512 * 8;
    const auto x = random_normal<double>({1, n}, 1.0, rng);
    const auto y = istft(stft(x, cfg), cfg);
    double num = 0.0, den = 0.0;
    for (std::size_t i = cfg.window_len; i + cfg.window_len <= y.size(); ++i) {
        num = std::max(num, std::abs(y[i] - x[i]));
        den = std::max(den, std::abs(x[i]));
    }
    const double rt = num / den;
    double fft_err = 0.0;
    for (std::size_t N = 2; N <= 512; N *= 2) {
        std::vector<std::complex<double>> a(N);
        for (auto& v : a) v = {uniform(rng, -1.0, 1.0), uniform(rng, -1.0, 1.0)};
        const auto fa = fft(a);
        double e = 0.0, s = 0.0;
        for (std::size_t k = 0; k < N; ++k) {
            std::complex<long double> acc = 0.0L;
            for (std::size_t t = 0; t < N; ++t) {
                const long double ang = -2.0L * std::numbers::pi_v<long double> * static_cast<long double>((k * t) % N) / N;
                acc += std::complex<long double>(a[t].real(), a[t].imag()) * std::complex<long double>(std::cos(ang), std::sin(ang));
            }
            e = std::max(e, static_cast<double>(std::abs(std::complex<long double>(fa[k].real(), fa[k].imag()) - acc)));
            s = std::max(s, static_cast<double>(std::abs(acc)));
        }
        fft_err = std::max(fft_err, e / s);
    }
    const auto dc = stft(Tensor<double>::full({1, 2048}, 1.0), cfg);
    const double dc_mag = std::hypot(dc.re[dc.bins()], dc.im[dc.bins()]);
    const bool dc_ok = std::abs(dc_mag - 256.0) < 1e-9;
    std::ostringstream os;
    os << "round-trip rel " << rt << ", fft vs dft " << fft_err << ", dc |X| " << dc_mag;
    return {"stft", rt < 1e-10 && fft_err < 1e-9 && dc_ok, os.str()};
}

inline CheckResult check_gradcheck(const VerifyOptions& o) {
    ModelGradCheckSpec spec;
    spec.frames = 3;
    spec.entries_per_tensor = 3;
    spec.seed = o.seed + 4;
    double worst = 0.0;
    std::size_t tensors = 0, failed = 0;
    for (bool causal : {false, true}) {
        for (const auto& r : gradcheck_model(McMambaConfig::tiny(2, 9, causal), spec)) {
            worst = std::max(worst, r.max_rel_error);
            ++tensors;
            if (!r.pass()) ++failed;
        }
    }
    std::ostringstream os;
    os << tensors << " tensors, " << failed << " failed, worst rel err " << worst;
    return {"gradcheck", failed == 0, os.str()};
}

}  // namespace detail

/// Runs the invariant suite (or the subset named in `only`).
inline std::vector<CheckResult> run_verify(const VerifyOptions& o) {
    for (const auto& n : o.only)
        if (std::find(verify_check_names().begin(), verify_check_names().end(), n) == verify_check_names().end())
            throw std::invalid_argument("verify: unknown check '" + n + "'");
    if (!o.inject_fault.empty() && o.inject_fault != "causality")
        throw std::invalid_argument("verify: unknown fault '" + o.inject_fault + "'");
    const std::vector<std::pair<std::string, CheckResult (*)(const VerifyOptions&)>> checks{
        {"causality", detail::check_causality}, {"streaming", detail::check_streaming}, {"scan", detail::check_scan},
        {"stft", detail::check_stft},           {"gradcheck", detail::check_gradcheck}};
    std::vector<CheckResult> out;
    for (const auto& [name, fn] : checks) {
        if (!o.only.empty() && std::find(o.only.begin(), o.only.end(), name) == o.only.end()) continue;
        const auto t0 = std::chrono::steady_clock::now();
        auto r = fn(o);
        r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace mcmamba
