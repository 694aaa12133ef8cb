#include <gtest/gtest.h>

#include <cstring>
#include <sstream>

#include "mcmamba/random.hpp"
#include "mcmamba/simulate.hpp"
#include "mcmamba/wav.hpp"

using namespace mcmamba;

namespace {

std::vector<unsigned char> bytes_of(const std::string& s) { return {s.begin(), s.end()}; }

void put16(std::vector<unsigned char>& b, std::uint16_t v) {
    b.push_back(static_cast<unsigned char>(v & 0xFF));
    b.push_back(static_cast<unsigned char>(v >> 8));
}

void put32(std::vector<unsigned char>& b, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFF));
}

/// Hand-assembled WAV with a plain 16-byte fmt chunk.
std::vector<unsigned char> wav_image(std::uint16_t tag, std::uint16_t channels, std::uint16_t bits,
                                     const std::vector<unsigned char>& payload) {
    std::vector<unsigned char> b = bytes_of("RIFF");
    put32(b, static_cast<std::uint32_t>(36 + payload.size()));
    for (char c : std::string("WAVEfmt ")) b.push_back(static_cast<unsigned char>(c));
    put32(b, 16);
    put16(b, tag);
    put16(b, channels);
    put32(b, 16000);
    put32(b, 16000u * channels * bits / 8);
    put16(b, static_cast<std::uint16_t>(channels * bits / 8));
    put16(b, bits);
    for (char c : std::string("data")) b.push_back(static_cast<unsigned char>(c));
    put32(b, static_cast<std::uint32_t>(payload.size()));
    b.insert(b.end(), payload.begin(), payload.end());
    return b;
}

std::vector<double> white(std::size_t n, Rng& rng) {
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<double> x(n);
    for (auto& v : x) v = g(rng);
    return x;
}

}  // namespace

TEST(Wav, Float32RoundTripIsExactForFloatValues) {
    Rng rng(1);
    std::vector<double> v(2 * 50);
    for (auto& x : v) x = static_cast<float>(uniform(rng, -1.0, 1.0));
    AudioBuffer a{Tensor<double>({2, 50}, v), 22050.0};
    std::stringstream ss;
    write_wav(ss, a);
    const auto s = ss.str();
    const auto back = parse_wav(bytes_of(s));
    EXPECT_EQ(back.sample_rate, 22050.0);
    EXPECT_TRUE(bit_equal(back.samples, a.samples));
}

TEST(Wav, Pcm16Scaling) {
    std::vector<unsigned char> payload;
    put16(payload, 0x8000);  // -32768
    put16(payload, 0x7FFF);
    put16(payload, 0x4000);
    const auto a = parse_wav(wav_image(1, 1, 16, payload));
    EXPECT_EQ(a.samples[0], -1.0);
    EXPECT_EQ(a.samples[1], 32767.0 / 32768.0);
    EXPECT_EQ(a.samples[2], 0.5);
}

TEST(Wav, Pcm16WriterRoundsAndClips) {
    AudioBuffer a{Tensor<double>({1, 3}, {0.5, 2.0, -3.0}), 16000.0};
    std::stringstream ss;
    write_wav(ss, a, WavFormat::pcm16);
    const auto back = parse_wav(bytes_of(ss.str()));
    EXPECT_EQ(back.samples[0], 0.5);
    EXPECT_EQ(back.samples[1], 32767.0 / 32768.0);
    EXPECT_EQ(back.samples[2], -1.0);
}

TEST(Wav, SixChannelHeaderAndInterleaving) {
    AudioBuffer a{Tensor<double>::zeros({6, 4}), 16000.0};
    auto d = a.samples.mutable_data();
    for (std::size_t m = 0; m < 6; ++m) d[m * 4 + 1] = 0.25 * double(m) / 8.0;
    std::stringstream ss;
    write_wav(ss, a, WavFormat::float32);
    const auto s = ss.str();
    ASSERT_EQ(s.size(), 44u + 6 * 4 * 4);
    std::uint16_t ch, align;
    std::memcpy(&ch, s.data() + 22, 2);
    std::memcpy(&align, s.data() + 32, 2);
    EXPECT_EQ(ch, 6);
    EXPECT_EQ(align, 24);
    // Frame 1, channel 3 sits at 44 + (1*6 + 3) * 4.
    float f;
    std::memcpy(&f, s.data() + 44 + (6 + 3) * 4, 4);
    EXPECT_EQ(f, static_cast<float>(0.25 * 3 / 8.0));
    EXPECT_EQ(parse_wav(bytes_of(s)).channel(3), a.channel(3));
}

TEST(Wav, UnsupportedFormatNamesTheTag) {
    try {
        parse_wav(wav_image(0x11, 1, 4, std::vector<unsigned char>(8, 0)));
        FAIL() << "expected WavError";
    } catch (const WavError& e) {
        EXPECT_NE(std::string(e.what()).find("0x11"), std::string::npos) << e.what();
    }
    EXPECT_THROW(parse_wav(wav_image(1, 1, 24, std::vector<unsigned char>(6, 0))), WavError);
}

TEST(Wav, MalformedFilesAreRejected) {
    EXPECT_THROW(parse_wav(bytes_of("RIFX")), WavError);
    auto truncated = wav_image(1, 1, 16, std::vector<unsigned char>(4, 0));
    truncated.resize(truncated.size() - 2);
    EXPECT_THROW(parse_wav(truncated), WavError);
    EXPECT_THROW(read_wav("/nonexistent/file.wav"), WavError);
}

TEST(Simulate, NoiselessMixtureIsDelayedClean) {
    Rng rng(2);
    const auto clean = white(400, rng);
    SimSpec spec;
    spec.noiseless = true;
    const auto r = simulate_multichannel(clean, Tensor<double>::zeros({6, 400}), spec);
    EXPECT_TRUE(std::isinf(r.snr_db));
    EXPECT_EQ(r.noise_gain, 0.0);
    // Channel 4 has delay 0, channel 3 an integer delay of 3.
    EXPECT_EQ(r.noisy.channel(4), clean);
    const auto c3 = r.noisy.channel(3);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(c3[i], 0.0);
    for (std::size_t i = 3; i < 400; ++i) EXPECT_EQ(c3[i], clean[i - 3]);
    EXPECT_EQ(r.target, clean);
}

TEST(Simulate, AchievedSnrMatchesDraw) {
    Rng rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        const auto clean = white(2000, rng);
        Tensor<double> noise({6, 2000}, white(12000, rng));
        SimSpec spec;
        spec.seed = rng();
        const auto r = simulate_multichannel(clean, noise, spec);
        EXPECT_GE(r.snr_db, -5.0);
        EXPECT_LE(r.snr_db, 10.0);
        const auto mix = r.noisy.channel(4);
        std::vector<double> residual(2000);
        for (std::size_t i = 0; i < 2000; ++i) residual[i] = mix[i] - r.target[i];
        EXPECT_NEAR(snr_db(r.target, residual), r.snr_db, 0.01);
    }
}

TEST(Simulate, DelaysRecoverableByCrossCorrelation) {
    Rng rng(4);
    const auto clean = white(4000, rng);
    SimSpec spec;
    spec.noiseless = true;
    const auto r = simulate_multichannel(clean, Tensor<double>::zeros({6, 4000}), spec);
    const auto ref = r.noisy.channel(4);
    // Integer delays come back exactly; a fractional one lands on a neighbouring integer lag.
    for (std::size_t m = 0; m < 6; ++m) {
        const double d = spec.delays[m], lag = double(xcorr_peak_lag(r.noisy.channel(m), ref, 10));
        if (d == std::floor(d))
            EXPECT_EQ(lag, d) << "channel " << m;
        else
            EXPECT_LE(std::abs(lag - d), 0.5) << "channel " << m;
    }
}

TEST(Simulate, FractionalDelayShiftsABandlimitedTone) {
    const std::size_t n = 1000;
    std::vector<double> x(n);
    const double w = 2.0 * std::numbers::pi * 0.05;
    for (std::size_t i = 0; i < n; ++i) x[i] = std::sin(w * double(i));
    const auto y = fractional_delay(x, 0.5);
    for (std::size_t i = 100; i < 900; ++i) EXPECT_NEAR(y[i], std::sin(w * (double(i) - 0.5)), 1e-3);
}

TEST(Simulate, DeterministicPerSeed) {
    Rng rng(5);
    const auto clean = white(500, rng);
    Tensor<double> noise({6, 500}, white(3000, rng));
    SimSpec spec;
    spec.seed = 42;
    const auto a = simulate_multichannel(clean, noise, spec), b = simulate_multichannel(clean, noise, spec);
    EXPECT_TRUE(bit_equal(a.noisy.samples, b.noisy.samples));
    spec.seed = 43;
    EXPECT_NE(simulate_multichannel(clean, noise, spec).snr_db, a.snr_db);
}

TEST(Simulate, InputValidation) {
    SimSpec spec;
    const std::vector<double> clean(100, 0.1);
    EXPECT_THROW(simulate_multichannel(clean, Tensor<double>::zeros({5, 100}), spec), SimError);
    EXPECT_THROW(simulate_multichannel(clean, Tensor<double>::zeros({6, 99}), spec), SimError);
    EXPECT_THROW(simulate_multichannel(clean, Tensor<double>::zeros({6, 100}), spec), SimError);  // zero-energy noise
    spec.delays.pop_back();
    EXPECT_THROW(spec.validate(), SimError);
}

TEST(Manifest, RoundTripAndErrors) {
    const std::vector<ManifestRecord> recs{{"a.wav", "n.wav", 7, 2.5},
                                           {"b.wav", "m.wav", 8, std::numeric_limits<double>::infinity()}};
    std::stringstream ss;
    write_manifest(ss, recs);
    EXPECT_EQ(parse_manifest(ss), recs);
    std::istringstream bad("a.wav\tn.wav\t7\n");
    EXPECT_THROW(parse_manifest(bad), SimError);
    std::istringstream bad_seed("a.wav\tn.wav\tx\t1.0\n");
    EXPECT_THROW(parse_manifest(bad_seed), SimError);
}
