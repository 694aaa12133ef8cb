#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <cstddef>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "fft.hpp"
#include "model.hpp"
#include "tensor.hpp"

namespace mcmamba {

struct StftError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct StftConfig {
    std::size_t window_len = 512;
    std::size_t hop = 256;
    double sample_rate = 16000.0;

    std::size_t bins() const { return window_len / 2 + 1; }

    void validate() const {
        if (!is_power_of_two(window_len) || window_len < 2)
            throw StftError("stft: window length must be a power of two >= 2");
        if (hop == 0 || window_len % hop != 0) throw StftError("stft: hop must divide the window length");
    }

    std::size_t frames_for(std::size_t samples) const {
        if (samples < window_len)
            throw StftError("stft: " + std::to_string(samples) + " samples is shorter than one window (" +
                            std::to_string(window_len) + ")");
        return (samples - window_len) / hop + 1;
    }
};

/// Periodic (DFT-even) Hann window.
template <class T>
std::vector<T> hann_window(std::size_t n) {
    std::vector<T> w(n);
    for (std::size_t i = 0; i < n; ++i)
        w[i] = T(0.5) - T(0.5) * std::cos(T(2) * std::numbers::pi_v<T> * static_cast<T>(i) / static_cast<T>(n));
    return w;
}

namespace detail {

template <class T>
std::vector<std::complex<T>> analyze_frame(const T* x, const std::vector<T>& window) {
    std::vector<T> buf(window.size());
    for (std::size_t i = 0; i < window.size(); ++i) buf[i] = x[i] * window[i];
    return rfft(buf);
}

/// Windowed synthesis frame from one (re, im) bin row.
template <class T>
std::vector<T> synthesize_frame(const T* re, const T* im, const std::vector<T>& window) {
    const std::size_t n = window.size();
    std::vector<std::complex<T>> half(n / 2 + 1);
    for (std::size_t k = 0; k < half.size(); ++k) half[k] = {re[k], im[k]};
    auto frame = irfft(half, n);
    for (std::size_t i = 0; i < n; ++i) frame[i] *= window[i];
    return frame;
}

inline constexpr double kSynthesisFloor = 1e-10;

/// Smallest summed squared window over a fully overlapped hop, floored at kSynthesisFloor.
/// Samples with less window energy (the first and last partial hops) are divided by this
/// instead, which tapers them rather than amplifying whatever error they carry.
template <class T>
T synthesis_floor(const std::vector<T>& window, std::size_t hop) {
    T lo = std::numeric_limits<T>::infinity();
    for (std::size_t n = 0; n < hop; ++n) {
        T acc = T(0);
        for (std::size_t i = n; i < window.size(); i += hop) acc += window[i] * window[i];
        lo = std::min(lo, acc);
    }
    return std::max(lo, static_cast<T>(kSynthesisFloor));
}

template <class T>
T wola_sample(T num, T den, T floor) {
    return num / std::max(den, floor);
}

}  // namespace detail

/// audio: [M, samples] -> spectrogram [M, T, bins]. Frame 0 starts at sample 0.
template <class T>
ComplexSpectrogram<T> stft(const Tensor<T>& audio, const StftConfig& cfg = {}) {
    cfg.validate();
    if (audio.rank() != 2) throw StftError("stft: audio must be [channels, samples], got " + to_string(audio.shape()));
    const std::size_t M = audio.dim(0), n = audio.dim(1), Tn = cfg.frames_for(n), F = cfg.bins();
    const auto window = hann_window<T>(cfg.window_len);
    std::vector<T> re(M * Tn * F), im(M * Tn * F);
    for (std::size_t m = 0; m < M; ++m)
        for (std::size_t t = 0; t < Tn; ++t) {
            const auto spec = detail::analyze_frame(audio.data().data() + m * n + t * cfg.hop, window);
            for (std::size_t f = 0; f < F; ++f) {
                re[(m * Tn + t) * F + f] = spec[f].real();
                im[(m * Tn + t) * F + f] = spec[f].imag();
            }
        }
    ComplexSpectrogram<T> out;
    out.re = Tensor<T>({M, Tn, F}, std::move(re));
    out.im = Tensor<T>({M, Tn, F}, std::move(im));
    out.sample_rate = cfg.sample_rate;
    out.hop = cfg.hop;
    out.window_len = cfg.window_len;
    return out;
}

/// Weighted overlap-add inverse of a single-channel spectrogram [1, T, bins]; returns
/// (T-1)*hop + window_len samples. Fully overlapped samples are exact; the partial hops at
/// either end are tapered (see detail::synthesis_floor).
template <class T>
std::vector<T> istft(const ComplexSpectrogram<T>& spec, const StftConfig& cfg = {}) {
    cfg.validate();
    if (spec.re.rank() != 3 || spec.channels() != 1)
        throw StftError("istft: expected a single-channel spectrogram [1, T, F], got " + to_string(spec.re.shape()));
    if (spec.bins() != cfg.bins())
        throw StftError("istft: spectrogram has " + std::to_string(spec.bins()) + " bins, window implies " +
                        std::to_string(cfg.bins()));
    const std::size_t Tn = spec.frames(), F = spec.bins(), N = cfg.window_len;
    const auto window = hann_window<T>(N);
    const std::size_t len = (Tn - 1) * cfg.hop + N;
    std::vector<T> num(len, T(0)), den(len, T(0));
    for (std::size_t t = 0; t < Tn; ++t) {
        const auto frame = detail::synthesize_frame(spec.re.data().data() + t * F, spec.im.data().data() + t * F, window);
        for (std::size_t i = 0; i < N; ++i) {
            num[t * cfg.hop + i] += frame[i];
            den[t * cfg.hop + i] += window[i] * window[i];
        }
    }
    const T floor = detail::synthesis_floor(window, cfg.hop);
    for (std::size_t i = 0; i < len; ++i) num[i] = detail::wola_sample(num[i], den[i], floor);
    return num;
}

/// Incremental analysis: push samples, receive each frame as soon as it is complete.
/// Frames equal the matching frames of stft() bit for bit.
template <class T>
class StreamingStft {
public:
    StreamingStft(std::size_t channels, const StftConfig& cfg = {})
        : cfg_(cfg), channels_(channels), window_(hann_window<T>(cfg.window_len)), pending_(channels) {
        cfg_.validate();
    }

    /// block: [M, n] with any n >= 1. Returns the frames completed by this block, each [M, 1, F].
    std::vector<ComplexSpectrogram<T>> push(const Tensor<T>& block) {
        if (block.rank() != 2 || block.dim(0) != channels_)
            throw StftError("streaming stft: expected a [" + std::to_string(channels_) + ", n] block");
        const std::size_t n = block.dim(1);
        for (std::size_t m = 0; m < channels_; ++m)
            pending_[m].insert(pending_[m].end(), block.data().begin() + m * n, block.data().begin() + (m + 1) * n);
        std::vector<ComplexSpectrogram<T>> frames;
        const std::size_t F = cfg_.bins();
        while (pending_[0].size() >= cfg_.window_len) {
            std::vector<T> re(channels_ * F), im(channels_ * F);
            for (std::size_t m = 0; m < channels_; ++m) {
                const auto spec = detail::analyze_frame(pending_[m].data(), window_);
                for (std::size_t f = 0; f < F; ++f) {
                    re[m * F + f] = spec[f].real();
                    im[m * F + f] = spec[f].imag();
                }
                pending_[m].erase(pending_[m].begin(), pending_[m].begin() + static_cast<std::ptrdiff_t>(cfg_.hop));
            }
            ComplexSpectrogram<T> s;
            s.re = Tensor<T>({channels_, 1, F}, std::move(re));
            s.im = Tensor<T>({channels_, 1, F}, std::move(im));
            s.sample_rate = cfg_.sample_rate;
            s.hop = cfg_.hop;
            s.window_len = cfg_.window_len;
            frames.push_back(std::move(s));
        }
        return frames;
    }

    std::size_t buffered() const { return pending_.empty() ? 0 : pending_[0].size(); }

private:
    StftConfig cfg_;
    std::size_t channels_;
    std::vector<T> window_;
    std::vector<std::vector<T>> pending_;
};

/// Incremental overlap-add synthesis. Each pushed frame releases `hop` finished samples;
/// flush() releases the tail. The concatenation equals istft() bit for bit.
template <class T>
class StreamingIstft {
public:
    explicit StreamingIstft(const StftConfig& cfg = {})
        : cfg_(cfg), window_(hann_window<T>(cfg.window_len)),
          num_(cfg.window_len, T(0)), den_(cfg.window_len, T(0)) {
        cfg_.validate();
        floor_ = detail::synthesis_floor(window_, cfg_.hop);
    }

    /// frame: [1, 1, bins].
    std::vector<T> push(const ComplexSpectrogram<T>& frame) {
        if (frame.channels() != 1 || frame.frames() != 1 || frame.bins() != cfg_.bins())
            throw StftError("streaming istft: expected one [1, 1, " + std::to_string(cfg_.bins()) + "] frame");
        const std::size_t N = cfg_.window_len, H = cfg_.hop;
        const auto buf = detail::synthesize_frame(frame.re.data().data(), frame.im.data().data(), window_);
        for (std::size_t i = 0; i < N; ++i) {
            num_[i] += buf[i];
            den_[i] += window_[i] * window_[i];
        }
        std::vector<T> out(H);
        for (std::size_t i = 0; i < H; ++i) out[i] = finish(i);
        num_.erase(num_.begin(), num_.begin() + static_cast<std::ptrdiff_t>(H));
        den_.erase(den_.begin(), den_.begin() + static_cast<std::ptrdiff_t>(H));
        num_.resize(N, T(0));
        den_.resize(N, T(0));
        started_ = true;
        return out;
    }

    /// Remaining window_len - hop samples of the last frame.
    std::vector<T> flush() {
        if (!started_) return {};
        std::vector<T> out(cfg_.window_len - cfg_.hop);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = finish(i);
        std::fill(num_.begin(), num_.end(), T(0));
        std::fill(den_.begin(), den_.end(), T(0));
        started_ = false;
        return out;
    }

    std::size_t state_size() const { return num_.size() + den_.size(); }

private:
    T finish(std::size_t i) const { return detail::wola_sample(num_[i], den_[i], floor_); }

    StftConfig cfg_;
    std::vector<T> window_;
    std::vector<T> num_, den_;
    T floor_ = T(0);
    bool started_ = false;
};

}  // namespace mcmamba
