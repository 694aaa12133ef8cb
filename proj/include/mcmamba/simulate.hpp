#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "random.hpp"
#include "tensor.hpp"
#include "wav.hpp"

namespace mcmamba {

struct SimError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Uniform double in [0, 1) from the top 53 bits, identical on every platform.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

/// Simulation recipe for one mixture. Delays are per channel, in samples. The default
/// geometry is a 6-element array with the reference element (index 4) closest to the talker.
struct SimSpec {
    std::size_t channels = 6;
    std::vector<double> delays{2.0, 0.5, 1.25, 3.0, 0.0, 1.75};
    double snr_low_db = -5.0;
    double snr_high_db = 10.0;
    std::size_t reference_channel = 4;
    std::uint64_t seed = 0;
    bool noiseless = false;  // noise gain 0, the +inf SNR case
    std::size_t sinc_half_width = 32;

    void validate() const {
        if (channels == 0) throw SimError("sim: channels must be >= 1");
        if (delays.size() != channels)
            throw SimError("sim: " + std::to_string(delays.size()) + " delays for " + std::to_string(channels) + " channels");
        for (double d : delays)
            if (!(d >= 0.0) || !std::isfinite(d)) throw SimError("sim: delays must be finite and >= 0");
        if (!(snr_low_db <= snr_high_db)) throw SimError("sim: snr range must satisfy low <= high");
        if (reference_channel >= channels) throw SimError("sim: reference channel out of range");
    }
};

/// Delays x by d samples, keeping the length. Integer delays are exact shifts; fractional
/// delays use a Blackman-windowed sinc of the given half width.
inline std::vector<double> fractional_delay(const std::vector<double>& x, double d, std::size_t half_width = 32) {
    const std::size_t n = x.size();
    std::vector<double> y(n, 0.0);
    const double whole = std::floor(d);
    if (d == whole) {
        const auto s = static_cast<std::size_t>(whole);
        for (std::size_t i = s; i < n; ++i) y[i] = x[i - s];
        return y;
    }
    const auto hw = static_cast<std::ptrdiff_t>(half_width);
    const double pi = std::numbers::pi;
    for (std::size_t i = 0; i < n; ++i) {
        const double center = static_cast<double>(i) - d;
        const auto k0 = static_cast<std::ptrdiff_t>(std::floor(center));
        double acc = 0.0;
        for (std::ptrdiff_t k = k0 - hw + 1; k <= k0 + hw; ++k) {
            if (k < 0 || k >= static_cast<std::ptrdiff_t>(n)) continue;
            const double u = center - static_cast<double>(k);  // in (-hw, hw)
            const double sinc = std::sin(pi * u) / (pi * u);
            const double r = (u + static_cast<double>(hw)) / (2.0 * static_cast<double>(hw));
            const double win = 0.42 - 0.5 * std::cos(2.0 * pi * r) + 0.08 * std::cos(4.0 * pi * r);
            acc += x[static_cast<std::size_t>(k)] * sinc * win;
        }
        y[i] = acc;
    }
    return y;
}

inline double energy(const std::vector<double>& x) {
    double e = 0.0;
    for (double v : x) e += v * v;
    return e;
}

inline double snr_db(const std::vector<double>& signal, const std::vector<double>& noise) {
    return 10.0 * std::log10(energy(signal) / energy(noise));
}

struct SimResult {
    AudioBuffer noisy;           // [M, n]
    std::vector<double> target;  // delayed clean at the reference channel
    double snr_db = 0.0;         // drawn target SNR (+inf when noiseless)
    double noise_gain = 0.0;
};

inline SimResult simulate_multichannel(const std::vector<double>& clean, const Tensor<double>& noise, const SimSpec& spec,
                                       double sample_rate = 16000.0) {
    spec.validate();
    const std::size_t M = spec.channels, n = clean.size();
    if (noise.rank() != 2 || noise.dim(0) != M)
        throw SimError("sim: noise must be [" + std::to_string(M) + ", n], got " + to_string(noise.shape()));
    if (noise.dim(1) != n)
        throw SimError("sim: length mismatch, clean has " + std::to_string(n) + " samples, noise " +
                       std::to_string(noise.dim(1)));
    Rng rng(spec.seed);
    const double drawn = uniform(rng, spec.snr_low_db, spec.snr_high_db);
    std::vector<std::vector<double>> speech(M);
    for (std::size_t m = 0; m < M; ++m) speech[m] = fractional_delay(clean, spec.delays[m], spec.sinc_half_width);
    const std::size_t r = spec.reference_channel;
    SimResult out;
    out.target = speech[r];
    double gain = 0.0;
    if (!spec.noiseless) {
        std::vector<double> noise_ref(noise.data().begin() + static_cast<std::ptrdiff_t>(r * n),
                                      noise.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * n));
        const double es = energy(speech[r]), en = energy(noise_ref);
        if (es <= 0.0) throw SimError("sim: clean signal has zero energy at the reference channel");
        if (en <= 0.0) throw SimError("sim: noise has zero energy at the reference channel");
        gain = std::sqrt(es / (en * std::pow(10.0, drawn / 10.0)));
    }
    std::vector<double> mix(M * n);
    for (std::size_t m = 0; m < M; ++m)
        for (std::size_t i = 0; i < n; ++i) mix[m * n + i] = speech[m][i] + gain * noise[m * n + i];
    out.noisy = {Tensor<double>({M, n}, std::move(mix)), sample_rate};
    out.snr_db = spec.noiseless ? std::numeric_limits<double>::infinity() : drawn;
    out.noise_gain = gain;
    return out;
}

/// Lag L in [-max_lag, max_lag] maximizing sum_i x[i+L] * ref[i].
inline long xcorr_peak_lag(const std::vector<double>& x, const std::vector<double>& ref, long max_lag) {
    const long n = static_cast<long>(std::min(x.size(), ref.size()));
    long best = 0;
    double best_v = -std::numeric_limits<double>::infinity();
    for (long lag = -max_lag; lag <= max_lag; ++lag) {
        double acc = 0.0;
        for (long i = std::max(0L, -lag); i < n && i + lag < n; ++i) acc += x[i + lag] * ref[i];
        if (acc > best_v) {
            best_v = acc;
            best = lag;
        }
    }
    return best;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

/// Harmonic "vowel": 3-8 harmonics of a gliding f0 under a smooth envelope, peak ~0.5.
inline std::vector<double> harmonic_vowel(std::size_t n, Rng& rng, double sample_rate = 16000.0) {
    const double f0a = uniform(rng, 100.0, 250.0), f0b = f0a * uniform(rng, 0.85, 1.15);
    const auto harmonics = static_cast<std::size_t>(3 + rng() % 6);
    std::vector<double> amp(harmonics), phase(harmonics);
    for (std::size_t h = 0; h < harmonics; ++h) {
        amp[h] = uniform(rng, 0.3, 1.0) / static_cast<double>(h + 1);
        phase[h] = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    }
    std::vector<double> x(n);
    double ph = 0.0, peak = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double u = static_cast<double>(i) / static_cast<double>(n);
        ph += 2.0 * std::numbers::pi * (f0a + (f0b - f0a) * u) / sample_rate;
        const double env = std::pow(std::sin(std::numbers::pi * u), 0.5);
        double s = 0.0;
        for (std::size_t h = 0; h < harmonics; ++h) s += amp[h] * std::sin(static_cast<double>(h + 1) * ph + phase[h]);
        x[i] = env * s;
        peak = std::max(peak, std::abs(x[i]));
    }
    if (peak > 0.0)
        for (auto& v : x) v *= 0.5 / peak;
    return x;
}

/// Multichannel noise: a low-passed directional source arriving with its own delays plus
/// independent white noise per channel.
inline Tensor<double> array_noise(std::size_t channels, std::size_t n, Rng& rng, double diffuse_level = 0.3) {
    std::vector<double> src(n);
    double lp = 0.0;
    for (auto& v : src) {
        lp = 0.7 * lp + 0.3 * uniform(rng, -1.0, 1.0);
        v = lp;
    }
    std::vector<double> out(channels * n);
    for (std::size_t m = 0; m < channels; ++m) {
        const auto d = fractional_delay(src, static_cast<double>((m * 3) % 5));
        for (std::size_t i = 0; i < n; ++i) out[m * n + i] = d[i] + diffuse_level * uniform(rng, -1.0, 1.0);
    }
    return Tensor<double>({channels, n}, std::move(out));
}

// ---------------------------------------------------------------------------
// Manifest: one record per line, tab separated: clean_path, noise_path, seed, snr_db.
// '#' starts a comment line. snr_db may be "inf" for a noiseless mixture.

struct ManifestRecord {
    std::string clean_path;
    std::string noise_path;
    std::uint64_t seed = 0;
    double snr_db = 0.0;
    bool operator==(const ManifestRecord&) const = default;
};

inline std::vector<ManifestRecord> parse_manifest(std::istream& is) {
    std::vector<ManifestRecord> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        std::vector<std::string> cols;
        std::stringstream ss(line);
        std::string c;
        while (std::getline(ss, c, '\t')) cols.push_back(c);
        if (cols.size() != 4) throw SimError("manifest: line " + std::to_string(lineno) + ": expected 4 tab-separated fields");
        ManifestRecord r;
        r.clean_path = cols[0];
        r.noise_path = cols[1];
        try {
            std::size_t p1 = 0, p2 = 0;
            r.seed = std::stoull(cols[2], &p1);
            r.snr_db = std::stod(cols[3], &p2);
            if (p1 != cols[2].size() || p2 != cols[3].size()) throw std::invalid_argument("trailing");
        } catch (const std::exception&) {
            throw SimError("manifest: line " + std::to_string(lineno) + ": bad seed or snr");
        }
        out.push_back(std::move(r));
    }
    return out;
}

inline void write_manifest(std::ostream& os, const std::vector<ManifestRecord>& records) {
    os << "# clean_path\tnoise_path\tseed\tsnr_db\n";
    for (const auto& r : records) {
        std::ostringstream snr;
        snr.precision(17);
        snr << r.snr_db;
        os << r.clean_path << '\t' << r.noise_path << '\t' << r.seed << '\t' << snr.str() << '\n';
    }
}

}  // namespace mcmamba
