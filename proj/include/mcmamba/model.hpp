#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <deque>
#include <stdexcept>
#include <string>
#include <vector>

#include "config.hpp"
#include "mamba.hpp"
#include "ops.hpp"
#include "random.hpp"
#include "serialize.hpp"
#include "tensor.hpp"

namespace mcmamba {

struct ModeError : std::logic_error {
    using std::logic_error::logic_error;
};

/// Multichannel STFT coefficients, re/im planes of shape [M, T, F].
template <class T>
struct ComplexSpectrogram {
    Tensor<T> re;
    Tensor<T> im;
    double sample_rate = 16000.0;
    std::size_t hop = 256;
    std::size_t window_len = 512;

    std::size_t channels() const { return re.dim(0); }
    std::size_t frames() const { return re.dim(1); }
    std::size_t bins() const { return re.dim(2); }

    void validate() const {
        if (re.rank() != 3 || re.shape() != im.shape())
            throw ShapeError("spectrogram: re/im must both be [M, T, F], got " + to_string(re.shape()) + " and " +
                             to_string(im.shape()));
        for (auto v : re.data())
            if (!std::isfinite(v)) throw ShapeError("spectrogram: non-finite value");
        for (auto v : im.data())
            if (!std::isfinite(v)) throw ShapeError("spectrogram: non-finite value");
    }

    /// Frames [begin, end) as a new spectrogram.
    ComplexSpectrogram frames_range(std::size_t begin, std::size_t end) const {
        const std::size_t M = channels(), T0 = frames(), F = bins(), n = end - begin;
        if (begin >= end || end > T0) throw ShapeError("spectrogram: bad frame range");
        std::vector<T> r(M * n * F), i(M * n * F);
        for (std::size_t m = 0; m < M; ++m)
            for (std::size_t t = 0; t < n; ++t)
                for (std::size_t f = 0; f < F; ++f) {
                    r[(m * n + t) * F + f] = re[(m * T0 + begin + t) * F + f];
                    i[(m * n + t) * F + f] = im[(m * T0 + begin + t) * F + f];
                }
        ComplexSpectrogram out = *this;
        out.re = Tensor<T>({M, n, F}, std::move(r));
        out.im = Tensor<T>({M, n, F}, std::move(i));
        return out;
    }
};

/// Concatenates spectrograms along time.
template <class T>
ComplexSpectrogram<T> concat_frames(const std::vector<ComplexSpectrogram<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_frames: nothing to concatenate");
    const std::size_t M = parts[0].channels(), F = parts[0].bins();
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.channels() != M || p.bins() != F) throw ShapeError("concat_frames: channel/bin mismatch");
        total += p.frames();
    }
    std::vector<T> r(M * total * F), i(M * total * F);
    std::size_t t0 = 0;
    for (const auto& p : parts) {
        const std::size_t n = p.frames();
        for (std::size_t m = 0; m < M; ++m)
            for (std::size_t t = 0; t < n; ++t)
                for (std::size_t f = 0; f < F; ++f) {
                    r[(m * total + t0 + t) * F + f] = p.re[(m * n + t) * F + f];
                    i[(m * total + t0 + t) * F + f] = p.im[(m * n + t) * F + f];
                }
        t0 += n;
    }
    ComplexSpectrogram<T> out = parts[0];
    out.re = Tensor<T>({M, total, F}, std::move(r));
    out.im = Tensor<T>({M, total, F}, std::move(i));
    return out;
}

// ---------------------------------------------------------------------------
// Feature assembly

/// x1(t, f) = [Re X_1, Im X_1, ..., Re X_M, Im X_M], shape [T, F, 2M].
template <class T>
Tensor<T> assemble_fullband_spatial(const ComplexSpectrogram<T>& s) {
    const std::size_t M = s.channels(), Tn = s.frames(), F = s.bins();
    std::vector<T> out(Tn * F * 2 * M);
    for (std::size_t m = 0; m < M; ++m)
        for (std::size_t t = 0; t < Tn; ++t)
            for (std::size_t f = 0; f < F; ++f) {
                const std::size_t base = (t * F + f) * 2 * M + 2 * m;
                out[base] = s.re[(m * Tn + t) * F + f];
                out[base + 1] = s.im[(m * Tn + t) * F + f];
            }
    return Tensor<T>({Tn, F, 2 * M}, std::move(out));
}

/// |X_r(t, f)|, shape [T, F].
template <class T>
Tensor<T> reference_magnitude(const ComplexSpectrogram<T>& s, std::size_t ref) {
    const std::size_t Tn = s.frames(), F = s.bins();
    if (ref >= s.channels()) throw ShapeError("reference channel out of range");
    std::vector<T> out(Tn * F);
    for (std::size_t k = 0; k < Tn * F; ++k) {
        const T a = s.re[ref * Tn * F + k], b = s.im[ref * Tn * F + k];
        out[k] = std::sqrt(a * a + b * b);
    }
    return Tensor<T>({Tn, F}, std::move(out));
}

/// Per-frequency time sequences [F, T, 2M + D1] built from [x1 || stage-1 output].
template <class T>
Tensor<T> assemble_narrowband(const Tensor<T>& x1, const Tensor<T>& stage1_out) {
    return swap_leading(concat_last<T>({x1, stage1_out}));
}

template <class T>
Tensor<T> assemble_narrowband(const ComplexSpectrogram<T>& s, const Tensor<T>& stage1_out) {
    return assemble_narrowband(assemble_fullband_spatial(s), stage1_out);
}

/// [|X_r(t, f-N)|, ..., |X_r(t, f+N)|] with zeros beyond the band edges, shape [T, F, W].
template <class T>
Tensor<T> subband_magnitudes(const Tensor<T>& mag, const McMambaConfig& cfg) {
    const std::size_t Tn = mag.dim(0), F = mag.dim(1), W = cfg.subband_width();
    const auto N = static_cast<std::ptrdiff_t>(cfg.neighbors);
    std::vector<T> out(Tn * F * W, T(0));
    for (std::size_t t = 0; t < Tn; ++t)
        for (std::size_t f = 0; f < F; ++f) {
            std::size_t slot = 0;
            for (std::ptrdiff_t o = -N; o <= N; ++o) {
                if (o == 0 && !cfg.subband_include_center) continue;
                const std::ptrdiff_t g = static_cast<std::ptrdiff_t>(f) + o;
                if (g >= 0 && g < static_cast<std::ptrdiff_t>(F))
                    out[(t * F + f) * W + slot] = mag[t * F + static_cast<std::size_t>(g)];
                ++slot;
            }
        }
    return Tensor<T>({Tn, F, W}, std::move(out));
}

/// Sub-band lanes [F, T, W + D2]: neighbour magnitudes followed by the stage-2 output.
template <class T>
Tensor<T> assemble_subband(const Tensor<T>& mag, const Tensor<T>& stage2_out, const McMambaConfig& cfg) {
    return swap_leading(concat_last<T>({subband_magnitudes(mag, cfg), stage2_out}));
}

template <class T>
Tensor<T> assemble_subband(const ComplexSpectrogram<T>& s, const Tensor<T>& stage2_out, const McMambaConfig& cfg) {
    return assemble_subband(reference_magnitude(s, cfg.reference_channel), stage2_out, cfg);
}

/// [|X_r(t-C, f)|, ..., |X_r(t, f)|] with zeros before the first frame, shape [T, F, W].
/// Only past and current frames are read.
template <class T>
Tensor<T> context_magnitudes(const Tensor<T>& mag, const McMambaConfig& cfg) {
    const std::size_t Tn = mag.dim(0), F = mag.dim(1), W = cfg.context_width();
    const auto C = static_cast<std::ptrdiff_t>(cfg.context);
    std::vector<T> out(Tn * F * W, T(0));
    for (std::size_t t = 0; t < Tn; ++t)
        for (std::size_t f = 0; f < F; ++f)
            for (std::size_t slot = 0; slot < W; ++slot) {
                const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) - C + static_cast<std::ptrdiff_t>(slot);
                if (src >= 0) out[(t * F + f) * W + slot] = mag[static_cast<std::size_t>(src) * F + f];
            }
    return Tensor<T>({Tn, F, W}, std::move(out));
}

/// Full-band spectral sequences [T, F, W + D3]: context magnitudes followed by stage-3 output.
template <class T>
Tensor<T> assemble_fullband_spectral(const Tensor<T>& mag, const Tensor<T>& stage3_out, const McMambaConfig& cfg) {
    return concat_last<T>({context_magnitudes(mag, cfg), stage3_out});
}

// ---------------------------------------------------------------------------
// Normalization

inline constexpr double kScaleFloor = 1e-8;

/// Per-frame scale: the mean reference-channel magnitude over the whole utterance
/// (non-causal) or over frames 0..t (causal), floored at kScaleFloor.
template <class T>
std::vector<T> frame_scales(const ComplexSpectrogram<T>& s, std::size_t ref, bool causal) {
    const auto mag = reference_magnitude(s, ref);
    const std::size_t Tn = s.frames(), F = s.bins();
    std::vector<T> scales(Tn);
    T cum = T(0);
    for (std::size_t t = 0; t < Tn; ++t) {
        T fs = T(0);
        for (std::size_t f = 0; f < F; ++f) fs += mag[t * F + f];
        cum += fs;
        scales[t] = std::max(cum / static_cast<T>((t + 1) * F), static_cast<T>(kScaleFloor));
    }
    if (!causal) std::fill(scales.begin(), scales.end(), scales.back());
    return scales;
}

template <class T>
ComplexSpectrogram<T> scale_frames(const ComplexSpectrogram<T>& s, const std::vector<T>& scales, bool divide) {
    const std::size_t M = s.channels(), Tn = s.frames(), F = s.bins();
    auto re = s.re.to_vector(), im = s.im.to_vector();
    for (std::size_t m = 0; m < M; ++m)
        for (std::size_t t = 0; t < Tn; ++t)
            for (std::size_t f = 0; f < F; ++f) {
                const std::size_t k = (m * Tn + t) * F + f;
                if (divide) {
                    re[k] = re[k] / scales[t];
                    im[k] = im[k] / scales[t];
                } else {
                    re[k] = re[k] * scales[t];
                    im[k] = im[k] * scales[t];
                }
            }
    ComplexSpectrogram<T> out = s;
    out.re = Tensor<T>(s.re.shape(), std::move(re));
    out.im = Tensor<T>(s.im.shape(), std::move(im));
    return out;
}

// ---------------------------------------------------------------------------
// Model

/// Directional block followed, for stages 1-3, by FC + ReLU.
template <class T>
struct Stage {
    DirectionalBlock<T> block;
    Tensor<T> fc_w;  // [d_out, d_out]; empty for the output stage
    Tensor<T> fc_b;  // [d_out]

    Tensor<T> forward(const Tensor<T>& x, BlockStream<T>* stream = nullptr) const {
        auto y = block.forward(x, stream);
        if (fc_w.empty()) return y;
        return relu(linear(y, fc_w, fc_b));
    }

    template <class Fn>
    void for_each_parameter(const std::string& prefix, Fn&& fn) {
        block.for_each_parameter(prefix, fn);
        if (!fc_w.empty()) {
            fn(prefix + "fc_w", fc_w);
            fn(prefix + "fc_b", fc_b);
        }
    }
};

template <class T>
struct StageOutputs {
    Tensor<T> stage1;  // [T, F, D1]
    Tensor<T> stage2;  // [T, F, D2]
    Tensor<T> stage3;  // [T, F, D3]
    Tensor<T> stage4;  // [T, F, 2]
};

/// Everything a causal model carries between frames.
template <class T>
struct StreamContext {
    BlockStream<T> narrowband;  // stage-2 lanes (one per bin)
    BlockStream<T> subband;     // stage-3 lanes (one per bin)
    std::deque<std::vector<T>> history;  // normalized reference magnitudes of past frames, oldest first
    std::size_t history_depth = 0;
    T magnitude_sum = T(0);
    std::size_t frames = 0;

    /// Number of scalars held, independent of how many frames have been processed.
    std::size_t value_count() const {
        std::size_t n = narrowband.value_count() + subband.value_count() + 2;
        for (const auto& h : history) n += h.size();
        return n;
    }
};

template <class T>
class McMambaModel {
public:
    McMambaModel() = default;

    static McMambaModel init(const McMambaConfig& cfg, Rng& rng) {
        return build(cfg, [&](const DirectionalBlockConfig& dc) { return DirectionalBlock<T>::init(dc, rng); },
                     [&](std::size_t d) {
                         Stage<T> s;
                         s.fc_w = linear_init<T>(d, d, rng);
                         const double b = 1.0 / std::sqrt(static_cast<double>(d));
                         s.fc_b = random_uniform<T>({d}, -b, b, rng);
                         return s;
                     });
    }

    static McMambaModel zeros(const McMambaConfig& cfg) {
        return build(cfg, [](const DirectionalBlockConfig& dc) { return DirectionalBlock<T>::zeros(dc); },
                     [](std::size_t d) {
                         Stage<T> s;
                         s.fc_w = Tensor<T>::zeros({d, d});
                         s.fc_b = Tensor<T>::zeros({d});
                         return s;
                     });
    }

    /// Weights under which the cascade reproduces the reference channel: each stage carries
    /// (Re+, Re-, Im+, Im-) of X_r through its residual path, the last stage recombines them.
    /// Needs stage widths >= 4 for stages 1-3.
    static McMambaModel passthrough(const McMambaConfig& cfg) {
        for (std::size_t s = 0; s < 3; ++s)
            if (cfg.stage_dims[s] < 4) throw ConfigError("passthrough: stage widths 1-3 must be >= 4");
        McMambaModel m = zeros(cfg);
        auto set = [](Tensor<T>& t, std::size_t i, std::size_t j, T v) { t.mutable_data()[i * t.cols() + j] = v; };
        // Stage 1 (always Bi): Z0 = Re X_r, Z1 = Im X_r, out = (Z0, -Z0, Z1, -Z1).
        {
            auto& b = m.stages_[0].block.bi();
            const std::size_t r = cfg.reference_channel;
            set(b.w_residual, 2 * r, 0, T(1));
            set(b.w_residual, 2 * r + 1, 1, T(1));
            set(b.w_out, 0, 0, T(1));
            set(b.w_out, 0, 1, T(-1));
            set(b.w_out, 1, 2, T(1));
            set(b.w_out, 1, 3, T(-1));
        }
        // Stages 2 and 3 copy the four half-wave channels from the previous stage output.
        const std::array<std::size_t, 2> offsets{2 * cfg.channels, cfg.subband_width()};
        for (std::size_t s = 1; s <= 2; ++s) {
            auto& blk = m.stages_[s].block;
            const std::size_t off = offsets[s - 1];
            for (std::size_t k = 0; k < 4; ++k) {
                if (blk.causal()) {
                    set(blk.uni().w_residual, off + k, k, T(1));
                } else {
                    set(blk.bi().w_residual, off + k, k, T(1));
                    set(blk.bi().w_out, k, k, T(1));
                }
            }
        }
        for (std::size_t s = 0; s < 3; ++s)
            for (std::size_t k = 0; k < cfg.stage_dims[s]; ++k) set(m.stages_[s].fc_w, k, k, T(1));
        // Stage 4: (Re+ - Re-, Im+ - Im-).
        {
            auto& b = m.stages_[3].block.bi();
            const std::size_t off = cfg.context_width();
            for (std::size_t k = 0; k < 4; ++k) set(b.w_residual, off + k, k, T(1));
            set(b.w_out, 0, 0, T(1));
            set(b.w_out, 1, 0, T(-1));
            set(b.w_out, 2, 1, T(1));
            set(b.w_out, 3, 1, T(-1));
        }
        return m;
    }

    /// Passthrough weights plus `perturbation` times a random init (norm gains stay 1).
    /// Training starts from the noisy reference instead of from an output near zero.
    static McMambaModel init_near_passthrough(const McMambaConfig& cfg, Rng& rng, double perturbation = 0.1) {
        McMambaModel m = init(cfg, rng);
        McMambaModel base = passthrough(cfg);
        std::vector<const Tensor<T>*> anchor;
        base.for_each_parameter([&](const std::string&, Tensor<T>& t) { anchor.push_back(&t); });
        std::size_t i = 0;
        m.for_each_parameter([&](const std::string& name, Tensor<T>& t) {
            const auto a = anchor[i++]->data();
            auto v = t.mutable_data();
            const bool gain = name.size() >= 9 && name.compare(name.size() - 9, 9, "norm_gain") == 0;
            for (std::size_t k = 0; k < v.size(); ++k) v[k] = gain ? T(1) : static_cast<T>(perturbation) * v[k] + a[k];
        });
        return m;
    }

    const McMambaConfig& config() const { return cfg_; }
    const Stage<T>& stage(std::size_t i) const { return stages_.at(i); }
    Stage<T>& stage(std::size_t i) { return stages_.at(i); }

    /// Runs the cascade on precomputed inputs. x1 is [T, F, 2M], mag is the normalized
    /// reference magnitude [T, F], context is [T, F, context_width]. With `ctx`, stages 2
    /// and 3 continue from the carried lane states.
    StageOutputs<T> forward_features(const Tensor<T>& x1, const Tensor<T>& mag, const Tensor<T>& context,
                                     StreamContext<T>* ctx = nullptr) const {
        const std::size_t Tn = x1.dim(0), F = x1.dim(1);
        if (F != cfg_.bins) throw ShapeError("model: got " + std::to_string(F) + " bins, config has " + std::to_string(cfg_.bins));
        if (x1.cols() != 2 * cfg_.channels) throw ShapeError("model: spatial feature width mismatch");
        StageOutputs<T> out;
        out.stage1 = stages_[0].forward(x1);
        expect(out.stage1, {Tn, F, cfg_.stage_dims[0]}, "stage 1");

        const auto nb_in = assemble_narrowband(x1, out.stage1);
        out.stage2 = swap_leading(stages_[1].forward(nb_in, ctx ? &ctx->narrowband : nullptr));
        expect(out.stage2, {Tn, F, cfg_.stage_dims[1]}, "stage 2");

        const auto sb_in = assemble_subband(mag, out.stage2, cfg_);
        out.stage3 = swap_leading(stages_[2].forward(sb_in, ctx ? &ctx->subband : nullptr));
        expect(out.stage3, {Tn, F, cfg_.stage_dims[2]}, "stage 3");

        out.stage4 = stages_[3].forward(concat_last<T>({context, out.stage3}));
        expect(out.stage4, {Tn, F, 2}, "stage 4");
        return out;
    }

    /// Cascade on an already normalized spectrogram; differentiable in the weights.
    StageOutputs<T> forward(const ComplexSpectrogram<T>& normalized) const {
        check_input(normalized);
        const auto mag = reference_magnitude(normalized, cfg_.reference_channel);
        return forward_features(assemble_fullband_spatial(normalized), mag, context_magnitudes(mag, cfg_));
    }

    StreamContext<T> make_stream_context() const {
        if (!cfg_.causal) throw ModeError("streaming requires a causal model");
        StreamContext<T> ctx;
        ctx.narrowband = stages_[1].block.uni().fresh_stream(cfg_.bins);
        ctx.subband = stages_[2].block.uni().fresh_stream(cfg_.bins);
        ctx.history_depth = cfg_.context;
        return ctx;
    }

    template <class Fn>
    void for_each_parameter(Fn&& fn) {
        for (std::size_t s = 0; s < 4; ++s) stages_[s].for_each_parameter("stage" + std::to_string(s + 1) + ".", fn);
    }

    std::size_t parameter_count() {
        std::size_t n = 0;
        for_each_parameter([&](const std::string&, Tensor<T>& t) { n += t.size(); });
        return n;
    }

    WeightMap to_weights() const {
        WeightMap out;
        const_cast<McMambaModel*>(this)->for_each_parameter(
            [&](const std::string& name, Tensor<T>& t) { out[name] = to_record(t); });
        return out;
    }

    /// Loads weights saved by to_weights(). Rejects missing, extra or mis-shaped records and
    /// reports a causal/non-causal mismatch explicitly.
    static McMambaModel from_weights(const McMambaConfig& cfg, const WeightMap& weights) {
        McMambaModel m = zeros(cfg);
        const bool has_uni = std::any_of(weights.begin(), weights.end(),
                                         [](const auto& kv) { return kv.first.rfind("stage2.uni.", 0) == 0; });
        const bool has_bi = std::any_of(weights.begin(), weights.end(),
                                        [](const auto& kv) { return kv.first.rfind("stage2.bi.", 0) == 0; });
        if (cfg.causal && has_bi && !has_uni)
            throw ModeError("mode mismatch: causal mode requested but the weights are for the non-causal model");
        if (!cfg.causal && has_uni && !has_bi)
            throw ModeError("mode mismatch: non-causal mode requested but the weights are for the causal model");
        std::size_t used = 0;
        m.for_each_parameter([&](const std::string& name, Tensor<T>& t) {
            auto it = weights.find(name);
            if (it == weights.end()) throw FormatError("weights: missing record " + name);
            if (it->second.shape != t.shape())
                throw FormatError("weights: " + name + " has shape " + to_string(it->second.shape) + ", config expects " +
                                  to_string(t.shape()));
            t = from_record<T>(it->second);
            ++used;
        });
        if (used != weights.size()) throw FormatError("weights: file has records this config does not use");
        return m;
    }

private:
    template <class BlockFn, class FcFn>
    static McMambaModel build(const McMambaConfig& cfg, BlockFn&& make_block, FcFn&& make_fc) {
        cfg.validate();
        McMambaModel m;
        m.cfg_ = cfg;
        for (std::size_t s = 0; s < 4; ++s) {
            DirectionalBlockConfig dc;
            dc.d_in = cfg.stage_input(s);
            dc.hidden = cfg.hidden_dims[s];
            dc.d_out = cfg.stage_dims[s];
            // Stages 1 and 4 run along frequency within a frame, so they are never causal.
            dc.causal = (s == 1 || s == 2) && cfg.causal;
            dc.expand = cfg.expand;
            dc.d_conv = cfg.d_conv;
            dc.d_state = cfg.d_state;
            dc.norm = cfg.block_norm;
            Stage<T> st = s < 3 ? make_fc(cfg.stage_dims[s]) : Stage<T>{};
            st.block = make_block(dc);
            m.stages_[s] = std::move(st);
        }
        return m;
    }

    static void expect(const Tensor<T>& t, const Shape& shape, const char* what) {
        if (t.shape() != shape)
            throw ShapeError(std::string("model: ") + what + " produced " + to_string(t.shape()) + ", expected " +
                             to_string(shape));
    }

    void check_input(const ComplexSpectrogram<T>& s) const {
        s.validate();
        if (s.channels() != cfg_.channels || s.bins() != cfg_.bins)
            throw ShapeError("model: input has " + std::to_string(s.channels()) + " channels x " +
                             std::to_string(s.bins()) + " bins, config expects " + std::to_string(cfg_.channels) +
                             " x " + std::to_string(cfg_.bins));
    }

    McMambaConfig cfg_;
    std::array<Stage<T>, 4> stages_;
};

// ---------------------------------------------------------------------------
// Inference

/// Enhanced reference-channel spectrogram [1, T, F] from stage-4 (re, im) output.
template <class T>
ComplexSpectrogram<T> output_spectrogram(const ComplexSpectrogram<T>& like, const Tensor<T>& stage4,
                                         const std::vector<T>& scales) {
    const std::size_t Tn = stage4.dim(0), F = stage4.dim(1);
    std::vector<T> re(Tn * F), im(Tn * F);
    for (std::size_t t = 0; t < Tn; ++t)
        for (std::size_t f = 0; f < F; ++f) {
            re[t * F + f] = stage4[(t * F + f) * 2] * scales[t];
            im[t * F + f] = stage4[(t * F + f) * 2 + 1] * scales[t];
        }
    ComplexSpectrogram<T> out = like;
    out.re = Tensor<T>({1, Tn, F}, std::move(re));
    out.im = Tensor<T>({1, Tn, F}, std::move(im));
    return out;
}

template <class T>
ComplexSpectrogram<T> enhance_offline(const McMambaModel<T>& model, const ComplexSpectrogram<T>& spec) {
    NoGradScope<T> no_grad;
    const auto& cfg = model.config();
    spec.validate();
    if (spec.channels() != cfg.channels || spec.bins() != cfg.bins)
        throw ShapeError("enhance: input has " + std::to_string(spec.channels()) + " channels x " +
                         std::to_string(spec.bins()) + " bins, config expects " + std::to_string(cfg.channels) + " x " +
                         std::to_string(cfg.bins));
    const auto scales = frame_scales(spec, cfg.reference_channel, cfg.causal);
    const auto out = model.forward(scale_frames(spec, scales, true));
    return output_spectrogram(spec, out.stage4, scales);
}

/// Processes the next frame(s) of a stream; `frames` is [M, n, F]. Output equals the
/// matching frames of enhance_offline on the whole utterance, bit for bit.
template <class T>
ComplexSpectrogram<T> enhance_streaming(const McMambaModel<T>& model, const ComplexSpectrogram<T>& frames,
                                        StreamContext<T>& ctx) {
    NoGradScope<T> no_grad;
    const auto& cfg = model.config();
    if (!cfg.causal) throw ModeError("streaming requires a causal model");
    frames.validate();
    if (frames.channels() != cfg.channels || frames.bins() != cfg.bins)
        throw ShapeError("stream: frame has wrong channel/bin count");
    const std::size_t F = cfg.bins, W = cfg.context_width();
    std::vector<ComplexSpectrogram<T>> outputs;
    for (std::size_t t = 0; t < frames.frames(); ++t) {
        const auto frame = frames.frames_range(t, t + 1);
        const auto raw_mag = reference_magnitude(frame, cfg.reference_channel);
        T fs = T(0);
        for (std::size_t f = 0; f < F; ++f) fs += raw_mag[f];
        ctx.magnitude_sum += fs;
        ++ctx.frames;
        const T scale = std::max(ctx.magnitude_sum / static_cast<T>(ctx.frames * F), static_cast<T>(kScaleFloor));
        const std::vector<T> scales{scale};
        const auto norm = scale_frames(frame, scales, true);
        const auto mag = reference_magnitude(norm, cfg.reference_channel);

        // Context slots hold frames t-C .. t (or t-C .. t-1); missing past frames are zeros.
        std::vector<T> context(F * W, T(0));
        const std::size_t C = cfg.context, have = ctx.history.size();
        for (std::size_t slot = 0; slot < W; ++slot) {
            const std::size_t back = C - slot;  // frames before t
            const std::vector<T>* src = nullptr;
            std::vector<T> current;
            if (back == 0) {
                current = mag.to_vector();
                src = &current;
            } else if (back <= have) {
                src = &ctx.history[have - back];
            }
            if (src)
                for (std::size_t f = 0; f < F; ++f) context[f * W + slot] = (*src)[f];
        }
        const auto out = model.forward_features(assemble_fullband_spatial(norm), mag,
                                                Tensor<T>({1, F, W}, std::move(context)), &ctx);
        if (ctx.history_depth > 0) {
            ctx.history.push_back(mag.to_vector());
            if (ctx.history.size() > ctx.history_depth) ctx.history.pop_front();
        }
        outputs.push_back(output_spectrogram(frame, out.stage4, scales));
    }
    return concat_frames(outputs);
}

}  // namespace mcmamba
