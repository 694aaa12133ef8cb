#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "model.hpp"
#include "ops.hpp"
#include "random.hpp"
#include "tape.hpp"

namespace mcmamba {

/// Central differences with step h, compared as
///   rel = |analytic - numeric| / max(|analytic|, |numeric|, kGradFloor).
/// In 64-bit with h = 1e-5 the difference quotient resolves about 1e-10 absolute, so
/// entries below the floor are effectively held to an absolute error of 1e-9.
inline constexpr double kGradStep = 1e-5;
inline constexpr double kGradFloor = 1e-5;
inline constexpr double kGradTolerance = 1e-4;

inline double gradient_rel_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), kGradFloor});
}

struct GradCheckReport {
    std::string name;
    std::size_t entries = 0;
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    bool pass(double tol = kGradTolerance) const { return max_rel_error < tol; }
};

/// Chooses up to `budget` distinct indices of [0, n) (all of them when n <= budget).
inline std::vector<std::size_t> sample_indices(std::size_t n, std::size_t budget, Rng& rng) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    if (n <= budget) return idx;
    for (std::size_t i = 0; i < budget; ++i) std::swap(idx[i], idx[i + rng() % (n - i)]);
    idx.resize(budget);
    std::sort(idx.begin(), idx.end());
    return idx;
}

/// Checks d loss / d inputs of a scalar function. `budget` limits entries per input
/// (0 means all).
inline std::vector<GradCheckReport> gradcheck(const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& f,
                                              std::vector<Tensor<double>> inputs, std::size_t budget = 0,
                                              std::uint64_t seed = 0, double h = kGradStep) {
    std::vector<Tensor<double>> analytic;
    {
        GradientTape<double> tape;
        TapeScope<double> scope(tape);
        for (auto& t : inputs) tape.watch(t);
        const auto loss = f(inputs);
        tape.backward(loss);
        for (const auto& t : inputs) analytic.push_back(tape.gradient(t));
    }
    Rng rng(seed);
    std::vector<GradCheckReport> out;
    NoGradScope<double> ng;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        GradCheckReport rep;
        rep.name = "input" + std::to_string(k);
        const auto idx = sample_indices(inputs[k].size(), budget == 0 ? inputs[k].size() : budget, rng);
        for (auto i : idx) {
            auto probe = inputs;
            const double x0 = inputs[k][i];
            probe[k] = inputs[k].detached();
            probe[k].mutable_data()[i] = x0 + h;
            const double up = f(probe).item();
            probe[k].mutable_data()[i] = x0 - h;
            const double dn = f(probe).item();
            const double num = (up - dn) / (2.0 * h);
            const double err = gradient_rel_error(analytic[k][i], num);
            if (err >= rep.max_rel_error) {
                rep.max_rel_error = err;
                rep.worst_index = i;
                rep.worst_analytic = analytic[k][i];
                rep.worst_numeric = num;
            }
            ++rep.entries;
        }
        out.push_back(rep);
    }
    return out;
}

/// Smooth probe loss for model checks: sum(R * y) + 0.5 * mean(y^2) over the stage-4 output,
/// with a fixed random R.
template <class T>
Tensor<T> probe_loss(const Tensor<T>& y, const Tensor<T>& r) {
    return add(sum(mul(y, r)), scale(mean(mul(y, y)), T(0.5)));
}

struct ModelGradCheckSpec {
    std::size_t frames = 5;
    std::size_t entries_per_tensor = 12;
    std::uint64_t seed = 7;
    double h = kGradStep;
};

/// Finite-difference check of every learnable tensor of `cfg` on a random normalized
/// spectrogram. Each tensor is probed at up to entries_per_tensor sampled entries.
inline std::vector<GradCheckReport> gradcheck_model(const McMambaConfig& cfg, const ModelGradCheckSpec& spec = {}) {
    Rng rng(spec.seed);
    auto model = McMambaModel<double>::init(cfg, rng);
    ComplexSpectrogram<double> x;
    x.re = random_normal<double>({cfg.channels, spec.frames, cfg.bins}, 1.0, rng);
    x.im = random_normal<double>({cfg.channels, spec.frames, cfg.bins}, 1.0, rng);
    const auto r = random_normal<double>({spec.frames, cfg.bins, 2}, 1.0, rng);

    std::vector<std::string> names;
    std::vector<Tensor<double>*> params;
    std::vector<Tensor<double>> analytic;
    {
        GradientTape<double> tape;
        TapeScope<double> scope(tape);
        model.for_each_parameter([&](const std::string& name, Tensor<double>& p) {
            tape.watch(p);
            names.push_back(name);
            params.push_back(&p);
        });
        const auto loss = probe_loss(model.forward(x).stage4, r);
        tape.backward(loss);
        for (auto* p : params) analytic.push_back(tape.gradient(*p));
    }
    NoGradScope<double> ng;
    auto eval = [&] { return probe_loss(model.forward(x).stage4, r).item(); };
    std::vector<GradCheckReport> out;
    for (std::size_t k = 0; k < params.size(); ++k) {
        GradCheckReport rep;
        rep.name = names[k];
        const auto original = *params[k];
        for (auto i : sample_indices(original.size(), spec.entries_per_tensor, rng)) {
            auto probe = original.detached();
            const double x0 = original[i];
            probe.mutable_data()[i] = x0 + spec.h;
            *params[k] = probe;
            const double up = eval();
            probe.mutable_data()[i] = x0 - spec.h;
            *params[k] = probe;
            const double dn = eval();
            const double num = (up - dn) / (2.0 * spec.h);
            const double err = gradient_rel_error(analytic[k][i], num);
            if (err >= rep.max_rel_error) {
                rep.max_rel_error = err;
                rep.worst_index = i;
                rep.worst_analytic = analytic[k][i];
                rep.worst_numeric = num;
            }
            ++rep.entries;
        }
        *params[k] = original;
        out.push_back(rep);
    }
    return out;
}

}  // namespace mcmamba
