#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace mcmamba {

struct WavError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Multichannel audio, samples [M, n].
struct AudioBuffer {
    Tensor<double> samples;
    double sample_rate = 16000.0;

    std::size_t channels() const { return samples.dim(0); }
    std::size_t length() const { return samples.dim(1); }

    std::vector<double> channel(std::size_t m) const {
        const auto d = samples.data();
        return {d.begin() + static_cast<std::ptrdiff_t>(m * length()),
                d.begin() + static_cast<std::ptrdiff_t>((m + 1) * length())};
    }

    static AudioBuffer mono(const std::vector<double>& x, double sr = 16000.0) {
        return {Tensor<double>({1, x.size()}, x), sr};
    }
};

enum class WavFormat { pcm16, float32 };

namespace detail {

inline constexpr std::uint16_t kFormatPcm = 1;
inline constexpr std::uint16_t kFormatFloat = 3;
inline constexpr std::uint16_t kFormatExtensible = 0xFFFE;

inline std::uint32_t rd_u32(const unsigned char* p) {
    return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
}
inline std::uint16_t rd_u16(const unsigned char* p) { return std::uint16_t(p[0] | p[1] << 8); }

inline void wr_u32(std::ostream& os, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}
inline void wr_u16(std::ostream& os, std::uint16_t v) {
    const unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
    os.write(reinterpret_cast<const char*>(b), 2);
}

}  // namespace detail

/// Parses a RIFF/WAVE image holding PCM16 or IEEE float32 samples (plain or extensible).
inline AudioBuffer parse_wav(const std::vector<unsigned char>& bytes) {
    const auto* b = bytes.data();
    if (bytes.size() < 12 || std::memcmp(b, "RIFF", 4) != 0 || std::memcmp(b + 8, "WAVE", 4) != 0)
        throw WavError("wav: not a RIFF/WAVE file");
    std::size_t pos = 12;
    bool have_fmt = false;
    std::uint16_t tag = 0, channels = 0, bits = 0;
    std::uint32_t rate = 0;
    const unsigned char* data = nullptr;
    std::size_t data_len = 0;
    while (pos + 8 <= bytes.size()) {
        const std::uint32_t len = detail::rd_u32(b + pos + 4);
        const std::size_t body = pos + 8;
        if (body + len > bytes.size()) throw WavError("wav: truncated chunk");
        if (std::memcmp(b + pos, "fmt ", 4) == 0) {
            if (len < 16) throw WavError("wav: fmt chunk too short");
            tag = detail::rd_u16(b + body);
            channels = detail::rd_u16(b + body + 2);
            rate = detail::rd_u32(b + body + 4);
            bits = detail::rd_u16(b + body + 14);
            if (tag == detail::kFormatExtensible) {
                if (len < 40) throw WavError("wav: extensible fmt chunk too short");
                tag = detail::rd_u16(b + body + 24);  // first two bytes of the subformat GUID
            }
            have_fmt = true;
        } else if (std::memcmp(b + pos, "data", 4) == 0) {
            data = b + body;
            data_len = len;
        }
        pos = body + len + (len & 1);
    }
    if (!have_fmt) throw WavError("wav: missing fmt chunk");
    if (!data) throw WavError("wav: missing data chunk");
    if (channels == 0) throw WavError("wav: zero channels");
    if (rate == 0) throw WavError("wav: zero sample rate");
    const bool pcm16 = tag == detail::kFormatPcm && bits == 16;
    const bool f32 = tag == detail::kFormatFloat && bits == 32;
    if (!pcm16 && !f32) {
        std::ostringstream os;
        os << "wav: unsupported format tag 0x" << std::hex << tag << std::dec << " with " << bits
           << " bits (PCM16 and float32 are supported)";
        throw WavError(os.str());
    }
    const std::size_t width = bits / 8, frame = width * channels, n = data_len / frame;
    if (n == 0) throw WavError("wav: no samples");
    std::vector<double> out(channels * n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t m = 0; m < channels; ++m) {
            const unsigned char* p = data + i * frame + m * width;
            double v;
            if (pcm16) {
                v = static_cast<double>(static_cast<std::int16_t>(detail::rd_u16(p))) / 32768.0;
            } else {
                const std::uint32_t u = detail::rd_u32(p);
                float f;
                std::memcpy(&f, &u, 4);
                v = f;
            }
            out[m * n + i] = v;
        }
    return {Tensor<double>({channels, n}, std::move(out)), static_cast<double>(rate)};
}

inline AudioBuffer read_wav(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw WavError("wav: cannot open " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    try {
        return parse_wav(bytes);
    } catch (const WavError& e) {
        throw WavError(std::string(e.what()) + " (" + path + ")");
    }
}

/// PCM16 clips to [-1, 32767/32768] and rounds to nearest.
inline void write_wav(std::ostream& os, const AudioBuffer& audio, WavFormat fmt = WavFormat::float32) {
    const std::size_t M = audio.channels(), n = audio.length();
    const std::uint16_t bits = fmt == WavFormat::pcm16 ? 16 : 32;
    const std::uint32_t data_len = static_cast<std::uint32_t>(M * n * bits / 8);
    const auto rate = static_cast<std::uint32_t>(std::lround(audio.sample_rate));
    os.write("RIFF", 4);
    detail::wr_u32(os, 36 + data_len);
    os.write("WAVEfmt ", 8);
    detail::wr_u32(os, 16);
    detail::wr_u16(os, fmt == WavFormat::pcm16 ? detail::kFormatPcm : detail::kFormatFloat);
    detail::wr_u16(os, static_cast<std::uint16_t>(M));
    detail::wr_u32(os, rate);
    detail::wr_u32(os, rate * static_cast<std::uint32_t>(M * bits / 8));
    detail::wr_u16(os, static_cast<std::uint16_t>(M * bits / 8));
    detail::wr_u16(os, bits);
    os.write("data", 4);
    detail::wr_u32(os, data_len);
    const auto d = audio.samples.data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t m = 0; m < M; ++m) {
            const double v = d[m * n + i];
            if (fmt == WavFormat::pcm16) {
                const double s = std::clamp(std::round(v * 32768.0), -32768.0, 32767.0);
                detail::wr_u16(os, static_cast<std::uint16_t>(static_cast<std::int16_t>(s)));
            } else {
                const float f = static_cast<float>(v);
                std::uint32_t u;
                std::memcpy(&u, &f, 4);
                detail::wr_u32(os, u);
            }
        }
}

inline void write_wav(const std::string& path, const AudioBuffer& audio, WavFormat fmt = WavFormat::float32) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw WavError("wav: cannot write " + path);
    write_wav(os, audio, fmt);
    if (!os) throw WavError("wav: write failed for " + path);
}

}  // namespace mcmamba
