#include <gtest/gtest.h>

#include <sstream>

#include "mcmamba/model.hpp"
#include "mcmamba/simulate.hpp"
#include "mcmamba/stft.hpp"
#include "mcmamba/train.hpp"
#include "mcmamba/verify.hpp"

using namespace mcmamba;
using T = Tensor<double>;
using Spec = ComplexSpectrogram<double>;

namespace {

Spec make_spec(std::size_t M, std::size_t Tn, std::size_t F, std::vector<double> re, std::vector<double> im) {
    Spec s;
    s.re = T({M, Tn, F}, std::move(re));
    s.im = T({M, Tn, F}, std::move(im));
    return s;
}

McMambaConfig small_config(bool causal) {
    auto c = McMambaConfig::tiny(3, 17, causal);
    c.reference_channel = 1;
    c.d_state = 4;
    return c;
}

}  // namespace

TEST(Features, SingleChannelSingleBin) {
    const auto s = make_spec(1, 1, 1, {1.0}, {2.0});
    const auto x1 = assemble_fullband_spatial(s);
    EXPECT_EQ(x1.shape(), (Shape{1, 1, 2}));
    EXPECT_EQ(x1.to_vector(), (std::vector<double>{1.0, 2.0}));
}

TEST(Features, ChannelsInterleaveReIm) {
    // Two channels, two frames, one bin.
    const auto s = make_spec(2, 2, 1, {1, 5, 3, 7}, {2, 6, 4, 8});
    const auto x1 = assemble_fullband_spatial(s);
    EXPECT_EQ(x1.to_vector(), (std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8}));
    const auto mag = reference_magnitude(s, 1);
    EXPECT_DOUBLE_EQ(mag[0], 5.0);
    EXPECT_DOUBLE_EQ(mag[1], std::hypot(7.0, 8.0));
}

TEST(Features, ZeroSpectrogramGivesZeroFeatures) {
    const auto s = make_spec(2, 3, 4, std::vector<double>(24, 0.0), std::vector<double>(24, 0.0));
    const auto x1 = assemble_fullband_spatial(s);
    for (double v : x1.data()) EXPECT_EQ(v, 0.0);
    const auto scales = frame_scales(s, 0, false);
    for (double v : scales) EXPECT_EQ(v, kScaleFloor);
}

TEST(Features, SubbandZeroPadsBelowFirstBin) {
    McMambaConfig cfg;
    cfg.neighbors = 3;
    const std::size_t F = 8;
    std::vector<double> m(F);
    for (std::size_t f = 0; f < F; ++f) m[f] = 10.0 + double(f);
    const auto sb = subband_magnitudes(T({1, F}, m), cfg);
    EXPECT_EQ(sb.shape(), (Shape{1, F, 7}));
    EXPECT_EQ(sb[0], 0.0);
    EXPECT_EQ(sb[1], 0.0);
    EXPECT_EQ(sb[2], 0.0);
    EXPECT_EQ(sb[3], 10.0);
    EXPECT_EQ(sb[6], 13.0);
    // Bin 4 sees bins 1..7.
    for (std::size_t k = 0; k < 7; ++k) EXPECT_EQ(sb[4 * 7 + k], 11.0 + double(k));
    // Top edge.
    EXPECT_EQ(sb[7 * 7 + 6], 0.0);

    cfg.subband_include_center = false;
    const auto sb2 = subband_magnitudes(T({1, F}, m), cfg);
    EXPECT_EQ(sb2.shape(), (Shape{1, F, 6}));
    EXPECT_EQ((std::vector<double>(sb2.data().begin() + 4 * 6, sb2.data().begin() + 5 * 6)),
              (std::vector<double>{11, 12, 13, 15, 16, 17}));
}

TEST(Features, ContextZeroPadsBeforeFirstFrame) {
    McMambaConfig cfg;
    cfg.context = 5;
    const std::size_t Tn = 8;
    std::vector<double> m(Tn);
    for (std::size_t t = 0; t < Tn; ++t) m[t] = 1.0 + double(t);
    const auto ctx = context_magnitudes(T({Tn, 1}, m), cfg);
    EXPECT_EQ(ctx.shape(), (Shape{Tn, 1, 6}));
    for (std::size_t k = 0; k < 5; ++k) EXPECT_EQ(ctx[k], 0.0);
    EXPECT_EQ(ctx[5], 1.0);
    // Frame 7 sees frames 2..7.
    for (std::size_t k = 0; k < 6; ++k) EXPECT_EQ(ctx[7 * 6 + k], 3.0 + double(k));

    cfg.context_include_current = false;
    const auto past = context_magnitudes(T({Tn, 1}, m), cfg);
    EXPECT_EQ(past.shape(), (Shape{Tn, 1, 5}));
    for (std::size_t k = 0; k < 5; ++k) EXPECT_EQ(past[7 * 5 + k], 3.0 + double(k));
}

TEST(Normalization, CausalRunningMeanAndUtteranceMean) {
    // Reference magnitudes per frame: mean 1, then 3.
    const auto s = make_spec(1, 2, 2, {1, 1, 3, 3}, {0, 0, 0, 0});
    const auto c = frame_scales(s, 0, true);
    EXPECT_DOUBLE_EQ(c[0], 1.0);
    EXPECT_DOUBLE_EQ(c[1], 2.0);
    const auto n = frame_scales(s, 0, false);
    EXPECT_DOUBLE_EQ(n[0], 2.0);
    EXPECT_DOUBLE_EQ(n[1], 2.0);
    const auto divided = scale_frames(s, c, true);
    EXPECT_DOUBLE_EQ(divided.re[2], 1.5);
    EXPECT_TRUE(bit_equal(scale_frames(divided, c, false).re, s.re));
}

TEST(Model, PaperConfigurationShapes) {
    const auto cfg = McMambaConfig::paper();
    EXPECT_EQ(cfg.channels, 6u);
    EXPECT_EQ(cfg.bins, 257u);
    Rng rng(1);
    const auto model = McMambaModel<double>::init(cfg, rng);
    EXPECT_EQ(model.stage(0).block.bi().w_proj_in.shape(), (Shape{12, 128}));
    EXPECT_EQ(model.stage(1).block.bi().w_proj_in.shape(), (Shape{12 + 64, 256}));
    EXPECT_EQ(model.stage(2).block.bi().w_proj_in.shape(), (Shape{7 + 64, 384}));
    EXPECT_EQ(model.stage(3).block.bi().w_proj_in.shape(), (Shape{6 + 64, 128}));
    const auto out = model.forward(random_spectrogram(6, 2, 257, rng));
    EXPECT_EQ(out.stage1.shape(), (Shape{2, 257, 64}));
    EXPECT_EQ(out.stage2.shape(), (Shape{2, 257, 64}));
    EXPECT_EQ(out.stage3.shape(), (Shape{2, 257, 64}));
    EXPECT_EQ(out.stage4.shape(), (Shape{2, 257, 2}));
}

TEST(Model, StageOneSeesOneFrameAtATime) {
    Rng rng(2);
    const auto cfg = small_config(false);
    const auto model = McMambaModel<double>::init(cfg, rng);
    const auto s = random_spectrogram(3, 4, 17, rng);
    auto s2 = s;
    auto re = s.re.to_vector();
    for (std::size_t f = 0; f < 17; ++f) re[(0 * 4 + 2) * 17 + f] += 1.0;  // channel 0, frame 2
    s2.re = T(s.re.shape(), re);
    const auto a = model.forward(s).stage1, b = model.forward(s2).stage1;
    const std::size_t per_frame = 17 * cfg.stage_dims[0];
    for (std::size_t t = 0; t < 4; ++t) {
        const bool same = std::equal(a.data().begin() + t * per_frame, a.data().begin() + (t + 1) * per_frame,
                                     b.data().begin() + t * per_frame);
        EXPECT_EQ(same, t != 2) << "frame " << t;
    }
}

TEST(Model, ChannelOrderMatters) {
    Rng rng(3);
    const auto cfg = small_config(false);
    const auto model = McMambaModel<double>::init(cfg, rng);
    const auto s = random_spectrogram(3, 3, 17, rng);
    // Swap channels 0 and 2 (the reference is channel 1).
    auto swap = [&](const T& x) {
        auto v = x.to_vector();
        std::swap_ranges(v.begin(), v.begin() + 3 * 17, v.begin() + 2 * 3 * 17);
        return T(x.shape(), v);
    };
    auto p = s;
    p.re = swap(s.re);
    p.im = swap(s.im);
    EXPECT_FALSE(bit_equal(enhance_offline(model, s).re, enhance_offline(model, p).re));
}

TEST(Model, ScaleEquivariantThroughNormalization) {
    Rng rng(4);
    for (bool causal : {false, true}) {
        const auto model = McMambaModel<double>::init(small_config(causal), rng);
        const auto s = random_spectrogram(3, 5, 17, rng);
        auto k = s;
        k.re = scale(s.re, 8.0);
        k.im = scale(s.im, 8.0);
        const auto a = enhance_offline(model, s), b = enhance_offline(model, k);
        for (std::size_t i = 0; i < a.re.size(); ++i) EXPECT_NEAR(b.re[i], 8.0 * a.re[i], 1e-12 * (1 + std::abs(b.re[i])));
    }
}

TEST(Model, RejectsMismatchedInput) {
    Rng rng(5);
    const auto model = McMambaModel<double>::init(small_config(false), rng);
    EXPECT_THROW(enhance_offline(model, random_spectrogram(2, 3, 17, rng)), ShapeError);
    EXPECT_THROW(enhance_offline(model, random_spectrogram(3, 3, 16, rng)), ShapeError);
}

TEST(Model, InferenceIsDeterministic) {
    Rng rng(6);
    const auto model = McMambaModel<double>::init(small_config(true), rng);
    const auto s = random_spectrogram(3, 6, 17, rng);
    EXPECT_TRUE(bit_equal(enhance_offline(model, s).re, enhance_offline(model, s).re));
    EXPECT_EQ(enhance_offline(model, s).re.shape(), (Shape{1, 6, 17}));
}

TEST(Streaming, MatchesOfflineBitExactForAnyChunking) {
    Rng rng(7);
    const auto model = McMambaModel<double>::init(small_config(true), rng);
    for (int fixture = 0; fixture < 4; ++fixture) {
        const std::size_t Tn = 5 + rng() % 12;
        const auto s = random_spectrogram(3, Tn, 17, rng);
        const auto offline = enhance_offline(model, s);
        auto ctx = model.make_stream_context();
        std::vector<Spec> parts;
        for (std::size_t t = 0; t < Tn;) {
            const std::size_t n = std::min<std::size_t>(Tn - t, 1 + rng() % 3);
            parts.push_back(enhance_streaming(model, s.frames_range(t, t + n), ctx));
            t += n;
        }
        const auto streamed = concat_frames(parts);
        EXPECT_TRUE(bit_equal(offline.re, streamed.re));
        EXPECT_TRUE(bit_equal(offline.im, streamed.im));
    }
}

TEST(Streaming, StateSizeIsBounded) {
    Rng rng(8);
    const auto model = McMambaModel<double>::init(small_config(true), rng);
    auto ctx = model.make_stream_context();
    const auto s = random_spectrogram(3, 30, 17, rng);
    enhance_streaming(model, s.frames_range(0, 10), ctx);
    const std::size_t after10 = ctx.value_count();
    enhance_streaming(model, s.frames_range(10, 30), ctx);
    EXPECT_EQ(ctx.value_count(), after10);
    EXPECT_EQ(ctx.history.size(), 5u);
}

TEST(Streaming, NonCausalModelIsRejected) {
    Rng rng(9);
    const auto model = McMambaModel<double>::init(small_config(false), rng);
    EXPECT_THROW(model.make_stream_context(), ModeError);
    StreamContext<double> ctx;
    EXPECT_THROW(enhance_streaming(model, random_spectrogram(3, 1, 17, rng), ctx), ModeError);
}

TEST(Passthrough, CleanInputReproducesReference) {
    // One second of audio: only the first and last hop are tapered by the synthesis.
    Rng rng(10);
    const auto clean = harmonic_vowel(16000, rng);
    SimSpec sim;
    sim.noiseless = true;
    const auto mix = simulate_multichannel(clean, T::zeros({6, 16000}), sim);
    const StftConfig sc;
    const auto spec = stft(mix.noisy.samples, sc);
    for (bool causal : {false, true}) {
        const auto model = McMambaModel<double>::passthrough(McMambaConfig::tiny(6, 257, causal));
        const auto wave = istft(enhance_offline(model, spec), sc);
        const auto ref = mix.noisy.channel(4);
        EXPECT_GT(si_sdr(wave, std::vector<double>(ref.begin(), ref.begin() + wave.size())), 30.0);
        for (std::size_t i = sc.hop; i + sc.hop < wave.size(); ++i) ASSERT_NEAR(wave[i], ref[i], 1e-12) << i;
    }
}

TEST(Weights, RoundTripThroughContainer) {
    Rng rng(11);
    const auto cfg = small_config(true);
    const auto model = McMambaModel<double>::init(cfg, rng);
    std::stringstream buf;
    write_weights(buf, model.to_weights());
    const auto back = McMambaModel<double>::from_weights(cfg, read_weights(buf));
    const auto s = random_spectrogram(3, 4, 17, rng);
    EXPECT_TRUE(bit_equal(enhance_offline(model, s).re, enhance_offline(back, s).re));
}

TEST(Weights, ModeMismatchIsExplicit) {
    Rng rng(12);
    const auto causal = McMambaModel<double>::init(small_config(true), rng);
    const auto noncausal = McMambaModel<double>::init(small_config(false), rng);
    try {
        McMambaModel<double>::from_weights(small_config(false), causal.to_weights());
        FAIL() << "expected ModeError";
    } catch (const ModeError& e) {
        EXPECT_NE(std::string(e.what()).find("mode mismatch"), std::string::npos);
    }
    EXPECT_THROW(McMambaModel<double>::from_weights(small_config(true), noncausal.to_weights()), ModeError);
}

TEST(Weights, MissingExtraAndMisshapedRecords) {
    Rng rng(13);
    const auto cfg = small_config(false);
    const auto w = McMambaModel<double>::init(cfg, rng).to_weights();
    auto missing = w;
    missing.erase("stage3.fc_b");
    EXPECT_THROW(McMambaModel<double>::from_weights(cfg, missing), FormatError);
    auto extra = w;
    extra["stage9.bogus"] = w.begin()->second;
    EXPECT_THROW(McMambaModel<double>::from_weights(cfg, extra), FormatError);
    auto wider = cfg;
    wider.stage_dims[0] = 9;
    EXPECT_THROW(McMambaModel<double>::from_weights(wider, w), FormatError);
}

TEST(Config, RoundTripAndErrors) {
    auto cfg = McMambaConfig::tiny(4, 33, true);
    cfg.neighbors = 2;
    std::stringstream ss;
    write_config(ss, cfg);
    EXPECT_EQ(parse_config(ss), cfg);

    auto parse = [](const std::string& text) {
        std::istringstream is(text);
        return parse_config(is);
    };
    EXPECT_EQ(parse("# defaults\n\n"), McMambaConfig::paper());
    EXPECT_THROW(parse("channels = 6\nwidth = 3\n"), ConfigError);
    EXPECT_THROW(parse("channels = -1\n"), ConfigError);
    EXPECT_THROW(parse("causal = maybe\n"), ConfigError);
    EXPECT_THROW(parse("stage_dims = 8,8,8\n"), ConfigError);
    EXPECT_THROW(parse("stage_dims = 8,8,8,3\n"), ConfigError);
    EXPECT_THROW(parse("channels = 2\nreference_channel = 4\n"), ConfigError);
    EXPECT_THROW(parse("channels\n"), ConfigError);
}
