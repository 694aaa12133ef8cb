#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "model.hpp"
#include "ops.hpp"
#include "random.hpp"
#include "simulate.hpp"
#include "stft.hpp"
#include "tape.hpp"

namespace mcmamba {

struct TrainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct LossWeights {
    double ri = 0.5;
    double mag = 0.5;
};

/// alpha_ri * mean|pred - target| over both planes + alpha_mag * mean||pred| - |target||.
/// pred and target are [..., 2] with (re, im) in the last axis.
template <class T>
Tensor<T> spectral_loss(const Tensor<T>& pred, const Tensor<T>& target, LossWeights w = {}) {
    if (pred.shape() != target.shape())
        throw ShapeError("loss: prediction " + to_string(pred.shape()) + " vs target " + to_string(target.shape()));
    if (pred.cols() != 2) throw ShapeError("loss: last axis must hold (re, im)");
    const auto ri = mean(abs(sub(pred, target)));
    const auto mp = magnitude(slice_last(pred, 0, 1), slice_last(pred, 1, 2));
    const auto mt = magnitude(slice_last(target, 0, 1), slice_last(target, 1, 2));
    const auto mg = mean(abs(sub(mp, mt)));
    return add(scale(ri, static_cast<T>(w.ri)), scale(mg, static_cast<T>(w.mag)));
}

inline double lr_schedule(std::size_t epoch, double lr0 = 1e-3, double decay = 0.992) {
    return lr0 * std::pow(decay, static_cast<double>(epoch));
}

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <class T>
struct AdamState {
    std::vector<std::vector<T>> m, v;
    std::uint64_t step = 0;
    AdamConfig cfg;
};

/// Bias-corrected Adam update of `params` in place.
template <class T>
void adam_step(const std::vector<Tensor<T>*>& params, const std::vector<Tensor<T>>& grads, AdamState<T>& st, double lr) {
    if (params.size() != grads.size()) throw ShapeError("adam: parameter/gradient count mismatch");
    if (st.m.empty()) {
        for (auto* p : params) {
            st.m.emplace_back(p->size(), T(0));
            st.v.emplace_back(p->size(), T(0));
        }
    }
    if (st.m.size() != params.size()) throw ShapeError("adam: state was built for a different parameter list");
    for (std::size_t i = 0; i < params.size(); ++i)
        if (params[i]->shape() != grads[i].shape() || st.m[i].size() != params[i]->size())
            throw ShapeError("adam: shape mismatch for parameter " + std::to_string(i) + ": " +
                             to_string(params[i]->shape()) + " vs gradient " + to_string(grads[i].shape()));
    ++st.step;
    const T b1 = static_cast<T>(st.cfg.beta1), b2 = static_cast<T>(st.cfg.beta2), eps = static_cast<T>(st.cfg.eps);
    const T c1 = T(1) - std::pow(b1, static_cast<T>(st.step));
    const T c2 = T(1) - std::pow(b2, static_cast<T>(st.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto p = params[i]->mutable_data();
        const auto g = grads[i].data();
        auto& m = st.m[i];
        auto& v = st.v[i];
        for (std::size_t k = 0; k < p.size(); ++k) {
            m[k] = b1 * m[k] + (T(1) - b1) * g[k];
            v[k] = b2 * v[k] + (T(1) - b2) * g[k] * g[k];
            const T mh = m[k] / c1, vh = v[k] / c2;
            p[k] -= static_cast<T>(lr) * mh / (std::sqrt(vh) + eps);
        }
    }
}

inline constexpr double kSiSdrCap = 60.0;

/// Scale-invariant SDR in dB, capped at +60 dB.
inline double si_sdr(const std::vector<double>& estimate, const std::vector<double>& reference) {
    if (estimate.size() != reference.size())
        throw ShapeError("si_sdr: lengths differ (" + std::to_string(estimate.size()) + " vs " +
                         std::to_string(reference.size()) + ")");
    double rr = 0.0, er = 0.0;
    for (std::size_t i = 0; i < reference.size(); ++i) {
        rr += reference[i] * reference[i];
        er += estimate[i] * reference[i];
    }
    if (rr <= 0.0) throw std::invalid_argument("si_sdr: reference is all zero");
    const double alpha = er / rr;
    double sig = 0.0, res = 0.0;
    for (std::size_t i = 0; i < reference.size(); ++i) {
        const double s = alpha * reference[i];
        sig += s * s;
        res += (s - estimate[i]) * (s - estimate[i]);
    }
    if (res == 0.0) return kSiSdrCap;
    return std::min(kSiSdrCap, 10.0 * std::log10(sig / res));
}

// ---------------------------------------------------------------------------
// Toy corpus

/// One simulated utterance in STFT form plus the waveforms needed for SI-SDR.
struct ToyExample {
    ComplexSpectrogram<double> noisy;   // [M, T, F]
    ComplexSpectrogram<double> target;  // [1, T, F]
    std::vector<double> noisy_reference;  // reference channel waveform, length matches istft output
    std::vector<double> target_wave;      // delayed clean reference, same length
};

struct ToyCorpusSpec {
    std::size_t utterances = 20;
    std::size_t samples = 4096;
    std::size_t channels = 6;
    std::uint64_t seed = 1;
    SimSpec sim;
    StftConfig stft;
};

inline ToyExample make_example(const std::vector<double>& clean, const Tensor<double>& noise, const SimSpec& sim,
                               const StftConfig& stft_cfg) {
    const auto mix = simulate_multichannel(clean, noise, sim, stft_cfg.sample_rate);
    ToyExample ex;
    ex.noisy = stft(mix.noisy.samples, stft_cfg);
    ex.target = stft(Tensor<double>({1, mix.target.size()}, mix.target), stft_cfg);
    const std::size_t len = (ex.noisy.frames() - 1) * stft_cfg.hop + stft_cfg.window_len;
    const auto ref = mix.noisy.channel(sim.reference_channel);
    ex.noisy_reference.assign(ref.begin(), ref.begin() + static_cast<std::ptrdiff_t>(len));
    ex.target_wave.assign(mix.target.begin(), mix.target.begin() + static_cast<std::ptrdiff_t>(len));
    return ex;
}

/// Harmonic vowels in array noise at SNRs drawn from the SimSpec range.
inline std::vector<ToyExample> make_toy_corpus(const ToyCorpusSpec& spec) {
    Rng rng(spec.seed);
    std::vector<ToyExample> out;
    for (std::size_t u = 0; u < spec.utterances; ++u) {
        const auto clean = harmonic_vowel(spec.samples, rng, spec.stft.sample_rate);
        const auto noise = array_noise(spec.channels, spec.samples, rng);
        SimSpec sim = spec.sim;
        sim.channels = spec.channels;
        sim.seed = rng();
        out.push_back(make_example(clean, noise, sim, spec.stft));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
    double lr0 = 1e-3;
    double decay = 0.992;
    std::size_t max_epochs = 10;
    std::size_t batch_size = 1;
    std::uint64_t seed = 0;
    LossWeights loss;
    StftConfig stft;

    void validate() const {
        if (!(lr0 > 0.0)) throw TrainError("train: lr0 must be > 0");
        if (!(decay > 0.0 && decay <= 1.0)) throw TrainError("train: decay must be in (0, 1]");
        if (batch_size == 0) throw TrainError("train: batch size must be >= 1");
    }
};

struct EpochRecord {
    std::size_t epoch = 0;
    std::size_t step = 0;
    double lr = 0.0;
    double loss = 0.0;      // mean training loss over the epoch
    double val_sisdr = 0.0;  // mean enhanced SI-SDR on the validation split
};

template <class T>
struct TrainResult {
    McMambaModel<T> best;
    std::vector<EpochRecord> curve;
    std::vector<double> step_losses;
    std::size_t best_epoch = 0;
    double best_val_sisdr = -std::numeric_limits<double>::infinity();
};

/// Stage-4 target in the normalized domain: [T, F, 2].
template <class T>
Tensor<T> normalized_target(const ToyExample& ex, const std::vector<T>& scales) {
    const std::size_t Tn = ex.target.frames(), F = ex.target.bins();
    std::vector<T> out(Tn * F * 2);
    for (std::size_t t = 0; t < Tn; ++t)
        for (std::size_t f = 0; f < F; ++f) {
            out[(t * F + f) * 2] = static_cast<T>(ex.target.re[t * F + f]) / scales[t];
            out[(t * F + f) * 2 + 1] = static_cast<T>(ex.target.im[t * F + f]) / scales[t];
        }
    return Tensor<T>({Tn, F, 2}, std::move(out));
}

/// Loss of `model` on one example and, with `grads`, its parameter gradients added in.
template <class T>
double example_loss(McMambaModel<T>& model, const ToyExample& ex, const LossWeights& w,
                    std::vector<Tensor<T>>* grads = nullptr) {
    const auto& cfg = model.config();
    const auto scales = frame_scales(ex.noisy, cfg.reference_channel, cfg.causal);
    const auto input = scale_frames(ex.noisy, scales, true);
    const auto target = normalized_target<T>(ex, scales);
    if (!grads) {
        NoGradScope<T> ng;
        return static_cast<double>(spectral_loss(model.forward(input).stage4, target, w).item());
    }
    GradientTape<T> tape;
    TapeScope<T> scope(tape);
    std::vector<Tensor<T>*> params;
    model.for_each_parameter([&](const std::string&, Tensor<T>& p) {
        tape.watch(p);
        params.push_back(&p);
    });
    const auto loss = spectral_loss(model.forward(input).stage4, target, w);
    tape.backward(loss);
    if (grads->empty())
        for (auto* p : params) grads->push_back(Tensor<T>::zeros(p->shape()));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto g = tape.gradient(*params[i]);
        auto acc = (*grads)[i].mutable_data();
        for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += g[k];
    }
    return static_cast<double>(loss.item());
}

/// Enhanced SI-SDR of one example after iSTFT.
template <class T>
double enhanced_sisdr(const McMambaModel<T>& model, const ToyExample& ex, const StftConfig& stft_cfg) {
    const auto out = enhance_offline(model, ex.noisy);
    const auto wave = istft(out, stft_cfg);
    std::vector<double> est(wave.begin(), wave.end());
    return si_sdr(est, ex.target_wave);
}

template <class T>
double mean_enhanced_sisdr(const McMambaModel<T>& model, const std::vector<ToyExample>& set, const StftConfig& stft_cfg) {
    double acc = 0.0;
    for (const auto& ex : set) acc += enhanced_sisdr(model, ex, stft_cfg);
    return set.empty() ? 0.0 : acc / static_cast<double>(set.size());
}

inline double mean_noisy_sisdr(const std::vector<ToyExample>& set) {
    double acc = 0.0;
    for (const auto& ex : set) acc += si_sdr(ex.noisy_reference, ex.target_wave);
    return set.empty() ? 0.0 : acc / static_cast<double>(set.size());
}

/// Adam training with per-epoch exponential decay. Keeps the weights with the best mean
/// validation SI-SDR. Writes "epoch step lr loss val_sisdr" lines to `log` if given.
template <class T>
TrainResult<T> train_toy(McMambaModel<T> model, const std::vector<ToyExample>& train, const std::vector<ToyExample>& val,
                         const TrainConfig& tc, std::ostream* log = nullptr) {
    tc.validate();
    if (train.empty()) throw TrainError("train: empty training set");
    Rng rng(tc.seed);
    AdamState<T> adam;
    TrainResult<T> result;
    result.best = model;
    std::size_t step = 0;
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t epoch = 0; epoch < tc.max_epochs; ++epoch) {
        const double lr = lr_schedule(epoch, tc.lr0, tc.decay);
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
        double epoch_loss = 0.0;
        for (std::size_t b = 0; b < order.size(); b += tc.batch_size) {
            const std::size_t e = std::min(order.size(), b + tc.batch_size);
            std::vector<Tensor<T>> grads;
            double batch_loss = 0.0;
            for (std::size_t i = b; i < e; ++i) batch_loss += example_loss(model, train[order[i]], tc.loss, &grads);
            batch_loss /= static_cast<double>(e - b);
            if (!std::isfinite(batch_loss))
                throw TrainError("train: loss diverged (" + std::to_string(batch_loss) + ") at epoch " +
                                 std::to_string(epoch) + ", step " + std::to_string(step));
            const T inv = T(1) / static_cast<T>(e - b);
            std::vector<Tensor<T>*> params;
            model.for_each_parameter([&](const std::string&, Tensor<T>& p) { params.push_back(&p); });
            for (auto& g : grads)
                for (auto& v : g.mutable_data()) v *= inv;
            adam_step(params, grads, adam, lr);
            epoch_loss += batch_loss * static_cast<double>(e - b);
            result.step_losses.push_back(batch_loss);
            ++step;
        }
        EpochRecord rec{epoch, step, lr, epoch_loss / static_cast<double>(train.size()), 0.0};
        rec.val_sisdr = val.empty() ? -epoch_loss : mean_enhanced_sisdr(model, val, tc.stft);
        if (!std::isfinite(rec.val_sisdr)) throw TrainError("train: validation SI-SDR is not finite at epoch " + std::to_string(epoch));
        if (rec.val_sisdr > result.best_val_sisdr) {
            result.best_val_sisdr = rec.val_sisdr;
            result.best_epoch = epoch;
            result.best = model;
        }
        result.curve.push_back(rec);
        if (log) {
            log->precision(10);
            *log << rec.epoch << ' ' << rec.step << ' ' << rec.lr << ' ' << rec.loss << ' ' << rec.val_sisdr << '\n';
        }
    }
    return result;
}

}  // namespace mcmamba
