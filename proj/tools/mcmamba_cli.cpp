#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "mcmamba/gradcheck.hpp"
#include "mcmamba/train.hpp"
#include "mcmamba/verify.hpp"

using namespace mcmamba;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kCheckFailed = 1, kUsage = 2 };

struct Global {
    bool json = false;
    std::uint64_t seed = 0;
};

/// Prints a JSON line in --json mode, the human text otherwise.
void emit(const Global& g, const json& record, const std::string& human) {
    if (g.json)
        std::cout << record.dump() << '\n';
    else
        std::cout << human << '\n';
}

std::string fixed(double v, int digits = 3) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(digits) << v;
    return os.str();
}

std::string sci(double v) {
    std::ostringstream os;
    os << std::scientific << std::setprecision(3) << v;
    return os.str();
}

StftConfig stft_for(const McMambaConfig& cfg, double sample_rate) {
    StftConfig s;
    s.window_len = 2 * (cfg.bins - 1);
    s.hop = s.window_len / 2;
    s.sample_rate = sample_rate;
    s.validate();
    return s;
}

McMambaModel<double> load_model(const std::string& config_path, const std::string& weights_path, bool force_causal) {
    auto cfg = load_config(config_path);
    if (force_causal) cfg.causal = true;
    return McMambaModel<double>::from_weights(cfg, load_weights(weights_path));
}

AudioBuffer load_input(const std::string& path, const McMambaConfig& cfg) {
    auto audio = read_wav(path);
    if (audio.channels() != cfg.channels)
        throw ShapeError(path + " has " + std::to_string(audio.channels()) + " channels, config expects " +
                         std::to_string(cfg.channels));
    return audio;
}

double percentile(std::vector<double> v, double q) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const auto k = static_cast<std::size_t>(std::ceil(q * static_cast<double>(v.size()))) - 1;
    return v[std::min(k, v.size() - 1)];
}

// ---------------------------------------------------------------------------

struct EnhanceArgs {
    std::string in, weights, config, out, ref;
    bool causal = false;
    double min_sisdr = -std::numeric_limits<double>::infinity();
};

int run_enhance(const Global& g, const EnhanceArgs& a) {
    const auto model = load_model(a.config, a.weights, a.causal);
    const auto& cfg = model.config();
    const auto audio = load_input(a.in, cfg);
    const auto sc = stft_for(cfg, audio.sample_rate);
    const auto wave = istft(enhance_offline(model, stft(audio.samples, sc)), sc);
    write_wav(a.out, AudioBuffer::mono(wave, audio.sample_rate));
    json rec{{"type", "enhance"}, {"out", a.out}, {"samples", wave.size()}, {"causal", cfg.causal}};
    std::string human = "wrote " + a.out + " (" + std::to_string(wave.size()) + " samples)";
    if (a.ref.empty()) {
        emit(g, rec, human);
        return kOk;
    }
    const auto ref = read_wav(a.ref).channel(0);
    const std::size_t n = std::min(ref.size(), wave.size());
    const double s = si_sdr(std::vector<double>(wave.begin(), wave.begin() + static_cast<std::ptrdiff_t>(n)),
                            std::vector<double>(ref.begin(), ref.begin() + static_cast<std::ptrdiff_t>(n)));
    rec["si_sdr_db"] = s;
    emit(g, rec, human + "\nSI-SDR vs reference: " + fixed(s, 2) + " dB");
    return s >= a.min_sisdr ? kOk : kCheckFailed;
}

struct StreamArgs {
    std::string in, weights, config, out;
    double frame_ms = 16.0;
};

int run_stream(const Global& g, const StreamArgs& a) {
    const auto model = load_model(a.config, a.weights, false);
    const auto& cfg = model.config();
    if (!cfg.causal) throw ModeError("mode mismatch: streaming requires causal weights");
    const auto audio = load_input(a.in, cfg);
    const auto sc = stft_for(cfg, audio.sample_rate);
    const auto block = static_cast<std::size_t>(std::llround(a.frame_ms * audio.sample_rate / 1000.0));
    if (block == 0) throw std::invalid_argument("stream: --frame-ms gives an empty block");

    StreamingStft<double> analysis(cfg.channels, sc);
    StreamingIstft<double> synthesis(sc);
    auto ctx = model.make_stream_context();
    std::vector<double> streamed, latency_ms;
    const std::size_t M = audio.channels(), n = audio.length();
    for (std::size_t i = 0; i < n; i += block) {
        const std::size_t len = std::min(block, n - i);
        std::vector<double> chunk(M * len);
        for (std::size_t m = 0; m < M; ++m)
            std::copy_n(audio.samples.data().begin() + static_cast<std::ptrdiff_t>(m * n + i), len,
                        chunk.begin() + static_cast<std::ptrdiff_t>(m * len));
        const auto t0 = std::chrono::steady_clock::now();
        for (const auto& frame : analysis.push(Tensor<double>({M, len}, std::move(chunk)))) {
            const auto out = synthesis.push(enhance_streaming(model, frame, ctx));
            streamed.insert(streamed.end(), out.begin(), out.end());
        }
        latency_ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    }
    const auto tail = synthesis.flush();
    streamed.insert(streamed.end(), tail.begin(), tail.end());

    const auto offline = istft(enhance_offline(model, stft(audio.samples, sc)), sc);
    const bool equal = offline.size() == streamed.size() &&
                       std::memcmp(offline.data(), streamed.data(), offline.size() * sizeof(double)) == 0;
    if (!a.out.empty()) write_wav(a.out, AudioBuffer::mono(streamed, audio.sample_rate));
    const double p50 = percentile(latency_ms, 0.5), p99 = percentile(latency_ms, 0.99);
    json rec{{"type", "stream"},       {"blocks", latency_ms.size()}, {"block_samples", block},
             {"p50_ms", p50},          {"p99_ms", p99},               {"streaming_equals_offline", equal}};
    emit(g, rec,
         "blocks " + std::to_string(latency_ms.size()) + " of " + std::to_string(block) + " samples\nlatency p50 " +
             fixed(p50) + " ms, p99 " + fixed(p99) + " ms\nstreaming==offline: " + (equal ? "PASS" : "FAIL"));
    return equal ? kOk : kCheckFailed;
}

struct TrainArgs {
    std::size_t utterances = 20, val = 4, test = 4, samples = 4096, epochs = 6, bins = 257;
    double lr = 1e-3, decay = 0.992, perturbation = 0.1;
    bool causal = false;
    std::string init = "near", out_weights, out_config, log;
};

int run_train(const Global& g, const TrainArgs& a) {
    if (a.val >= a.utterances) throw TrainError("train: --val must be smaller than --utterances");
    auto cfg = McMambaConfig::tiny(6, a.bins, a.causal);
    ToyCorpusSpec cs;
    cs.utterances = a.utterances;
    cs.samples = a.samples;
    cs.seed = g.seed * 2 + 1;
    cs.stft = stft_for(cfg, 16000.0);
    auto data = make_toy_corpus(cs);
    const std::vector<ToyExample> train(data.begin(), data.end() - static_cast<std::ptrdiff_t>(a.val));
    const std::vector<ToyExample> val(data.end() - static_cast<std::ptrdiff_t>(a.val), data.end());
    cs.utterances = a.test;
    cs.seed = g.seed * 2 + 2;
    const auto test = make_toy_corpus(cs);

    Rng rng(g.seed);
    McMambaModel<double> model;
    if (a.init == "near")
        model = McMambaModel<double>::init_near_passthrough(cfg, rng, a.perturbation);
    else if (a.init == "random")
        model = McMambaModel<double>::init(cfg, rng);
    else
        model = McMambaModel<double>::passthrough(cfg);

    TrainConfig tc;
    tc.lr0 = a.lr;
    tc.decay = a.decay;
    tc.max_epochs = a.epochs;
    tc.seed = g.seed + 17;
    tc.stft = cs.stft;
    std::ofstream log_file;
    if (!a.log.empty()) {
        log_file.open(a.log);
        if (!log_file) throw std::runtime_error("cannot write " + a.log);
    }
    const auto r = train_toy(std::move(model), train, val, tc, a.log.empty() ? nullptr : &log_file);
    for (const auto& e : r.curve)
        emit(g,
             {{"type", "epoch"}, {"epoch", e.epoch}, {"step", e.step}, {"lr", e.lr}, {"loss", e.loss},
              {"val_sisdr", e.val_sisdr}},
             "epoch " + std::to_string(e.epoch) + "  lr " + sci(e.lr) + "  loss " + sci(e.loss) + "  val SI-SDR " +
                 fixed(e.val_sisdr, 2) + " dB");
    const double noisy = mean_noisy_sisdr(test), enhanced = mean_enhanced_sisdr(r.best, test, tc.stft);
    if (!a.out_weights.empty()) save_weights(a.out_weights, r.best.to_weights());
    if (!a.out_config.empty()) save_config(a.out_config, cfg);
    emit(g,
         {{"type", "train_summary"}, {"best_epoch", r.best_epoch}, {"test_noisy_sisdr", noisy},
          {"test_enhanced_sisdr", enhanced}},
         "best epoch " + std::to_string(r.best_epoch) + "; held-out SI-SDR noisy " + fixed(noisy, 2) + " dB, enhanced " +
             fixed(enhanced, 2) + " dB");
    return kOk;
}

struct SimulateArgs {
    std::string manifest, out_dir;
    std::size_t synthetic = 0, samples = 16000;
};

/// Writes `count` synthetic clean/noise pairs and a manifest referencing them.
void write_synthetic(const Global& g, const SimulateArgs& a) {
    Rng rng(g.seed);
    std::vector<ManifestRecord> recs;
    for (std::size_t i = 0; i < a.synthetic; ++i) {
        const auto clean = harmonic_vowel(a.samples, rng);
        const auto noise = array_noise(6, a.samples, rng);
        const std::string c = "clean_" + std::to_string(i) + ".wav", n = "noise_" + std::to_string(i) + ".wav";
        write_wav((fs::path(a.out_dir) / c).string(), AudioBuffer::mono(clean));
        write_wav((fs::path(a.out_dir) / n).string(), AudioBuffer{noise, 16000.0});
        recs.push_back({c, n, rng(), uniform(rng, -5.0, 10.0)});
    }
    std::ofstream os(a.manifest);
    if (!os) throw SimError("cannot write " + a.manifest);
    write_manifest(os, recs);
}

int run_simulate(const Global& g, const SimulateArgs& a) {
    fs::create_directories(a.out_dir);
    if (a.synthetic > 0) write_synthetic(g, a);
    std::ifstream is(a.manifest);
    if (!is) throw SimError("cannot read manifest " + a.manifest);
    const auto recs = parse_manifest(is);
    const fs::path base = fs::path(a.manifest).parent_path();
    bool ok = true;
    for (std::size_t i = 0; i < recs.size(); ++i) {
        const auto& r = recs[i];
        const auto clean = read_wav((base / r.clean_path).string());
        const auto noise = read_wav((base / r.noise_path).string());
        SimSpec spec;
        spec.seed = r.seed;
        spec.noiseless = std::isinf(r.snr_db);
        spec.snr_low_db = spec.snr_high_db = spec.noiseless ? 0.0 : r.snr_db;
        const auto mix = simulate_multichannel(clean.channel(0), noise.samples, spec, clean.sample_rate);
        const std::string noisy_name = "noisy_" + std::to_string(i) + ".wav", target_name = "target_" + std::to_string(i) + ".wav";
        write_wav((fs::path(a.out_dir) / noisy_name).string(), mix.noisy);
        write_wav((fs::path(a.out_dir) / target_name).string(), AudioBuffer::mono(mix.target, clean.sample_rate));
        double achieved = std::numeric_limits<double>::infinity();
        if (!spec.noiseless) {
            const auto ref = mix.noisy.channel(spec.reference_channel);
            std::vector<double> residual(ref.size());
            for (std::size_t k = 0; k < ref.size(); ++k) residual[k] = ref[k] - mix.target[k];
            achieved = snr_db(mix.target, residual);
        }
        const bool rec_ok = spec.noiseless || std::abs(achieved - r.snr_db) < 0.01;
        ok = ok && rec_ok;
        json rec{{"type", "simulate"}, {"noisy", noisy_name}, {"target", target_name}, {"ok", rec_ok}};
        if (!spec.noiseless) rec["target_snr_db"] = r.snr_db, rec["achieved_snr_db"] = achieved;
        emit(g, rec,
             noisy_name + "  target SNR " + (spec.noiseless ? std::string("inf") : fixed(r.snr_db, 3)) + " dB, achieved " +
                 (spec.noiseless ? std::string("inf") : fixed(achieved, 3)) + " dB");
    }
    return ok ? kOk : kCheckFailed;
}

struct GradArgs {
    std::size_t bins = 9, frames = 3, entries = 4;
    bool causal = false;
};

int run_gradcheck(const Global& g, const GradArgs& a) {
    ModelGradCheckSpec spec;
    spec.frames = a.frames;
    spec.entries_per_tensor = a.entries;
    spec.seed = g.seed;
    bool ok = true;
    for (const auto& r : gradcheck_model(McMambaConfig::tiny(2, a.bins, a.causal), spec)) {
        ok = ok && r.pass();
        std::ostringstream os;
        os << std::left << std::setw(40) << r.name << " entries " << std::setw(4) << r.entries << " max rel err "
           << sci(r.max_rel_error) << (r.pass() ? "  PASS" : "  FAIL");
        emit(g, {{"type", "gradcheck"}, {"tensor", r.name}, {"entries", r.entries}, {"max_rel_error", r.max_rel_error},
                 {"pass", r.pass()}},
             os.str());
    }
    return ok ? kOk : kCheckFailed;
}

struct BenchArgs {
    std::size_t len = 4096, width = 32, state = 16;
    std::string mode = "par";
};

int run_bench(const Global& g, const BenchArgs& a) {
    Rng rng(g.seed);
    const auto p = SsmParams<double>::init(a.width, a.state, rng);
    const auto x = random_normal<double>({a.len, a.width}, 1.0, rng);
    const auto ref = reference_scan(p, x);
    const std::vector<double> refd(ref.begin(), ref.end());
    auto run_once = [&]() -> std::vector<double> {
        if (a.mode == "seq") return scan_sequential(p, x, SsmState<double>::fresh(a.width, a.state)).y.to_vector();
        if (a.mode == "par") return scan_parallel(p, x).to_vector();
        const std::size_t cut = std::max<std::size_t>(1, a.len / 8);
        std::vector<Tensor<double>> chunks;
        for (std::size_t s = 0; s < a.len; s += cut) {
            const std::size_t e = std::min(a.len, s + cut);
            chunks.emplace_back(Shape{e - s, a.width},
                                std::vector<double>(x.data().begin() + static_cast<std::ptrdiff_t>(s * a.width),
                                                    x.data().begin() + static_cast<std::ptrdiff_t>(e * a.width)));
        }
        auto st = SsmState<double>::fresh(a.width, a.state);
        std::vector<double> y;
        for (const auto& c : scan_chunked<double>(p, chunks, st)) y.insert(y.end(), c.data().begin(), c.data().end());
        return y;
    };
    std::vector<double> y;
    std::size_t reps = 0;
    const auto t0 = std::chrono::steady_clock::now();
    double elapsed = 0.0;
    do {
        y = run_once();
        ++reps;
        elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    } while (elapsed < 0.2 && reps < 1000);
    const double dev = max_rel_diff(y, refd), rate = static_cast<double>(a.len * reps) / elapsed;
    // Work in state updates: every step touches d_inner * d_state cells.
    const std::size_t work = a.len * a.width * a.state;
    const bool ok = dev < 1e-10;
    emit(g,
         {{"type", "bench_scan"}, {"mode", a.mode}, {"len", a.len}, {"width", a.width}, {"state", a.state},
          {"steps_per_sec", rate}, {"work", work}, {"max_rel_dev", dev}, {"pass", ok}},
         "mode " + a.mode + "  L " + std::to_string(a.len) + "  D " + std::to_string(a.width) + "  N " +
             std::to_string(a.state) + "\nthroughput " + sci(rate) + " steps/s, work " + std::to_string(work) +
             " state updates\nmax rel deviation vs oracle " + sci(dev) + (ok ? "  PASS" : "  FAIL"));
    return ok ? kOk : kCheckFailed;
}

struct VerifyArgs {
    std::vector<std::string> only;
    std::string fault;
    std::size_t trials = 20;
};

int run_verify_cmd(const Global& g, const VerifyArgs& a) {
    VerifyOptions o;
    o.seed = g.seed + 1;
    o.only = a.only;
    o.inject_fault = a.fault;
    o.trials = a.trials;
    bool ok = true;
    for (const auto& r : run_verify(o)) {
        ok = ok && r.pass;
        std::ostringstream os;
        os << std::left << std::setw(10) << r.name << (r.pass ? "PASS  " : "FAIL  ") << r.detail << " (" << fixed(r.seconds, 2)
           << " s)";
        emit(g, {{"type", "verify"}, {"check", r.name}, {"pass", r.pass}, {"detail", r.detail}, {"seconds", r.seconds}},
             os.str());
    }
    return ok ? kOk : kCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multichannel speech enhancement with selective state-space blocks"};
    app.require_subcommand(1);
    Global g;
    app.add_flag("--json", g.json, "Emit JSON lines instead of tables");
    app.add_option("--seed", g.seed, "Seed for every random draw");

    EnhanceArgs ea;
    auto* enhance = app.add_subcommand("enhance", "Enhance a multichannel WAV offline");
    enhance->add_option("--in", ea.in, "Noisy multichannel WAV")->required()->check(CLI::ExistingFile);
    enhance->add_option("--weights", ea.weights, "Weight file")->required()->check(CLI::ExistingFile);
    enhance->add_option("--config", ea.config, "Model config file")->required()->check(CLI::ExistingFile);
    enhance->add_option("--out", ea.out, "Enhanced mono WAV")->required();
    enhance->add_flag("--causal", ea.causal, "Require causal weights");
    enhance->add_option("--ref", ea.ref, "Clean reference WAV for SI-SDR")->check(CLI::ExistingFile);
    enhance->add_option("--min-sisdr", ea.min_sisdr, "Fail (exit 1) below this SI-SDR in dB");

    StreamArgs sa;
    auto* stream = app.add_subcommand("stream", "Frame-by-frame causal enhancement with latency statistics");
    stream->add_option("--in", sa.in, "Noisy multichannel WAV")->required()->check(CLI::ExistingFile);
    stream->add_option("--weights", sa.weights, "Causal weight file")->required()->check(CLI::ExistingFile);
    stream->add_option("--config", sa.config, "Model config file")->required()->check(CLI::ExistingFile);
    stream->add_option("--frame-ms", sa.frame_ms, "Input block length in ms")->check(CLI::PositiveNumber);
    stream->add_option("--out", sa.out, "Enhanced mono WAV");

    TrainArgs ta;
    auto* train = app.add_subcommand("train-toy", "Train on a synthetic toy corpus");
    train->add_option("--utterances", ta.utterances, "Train plus validation utterances");
    train->add_option("--val", ta.val, "Validation utterances (taken from the end)");
    train->add_option("--test", ta.test, "Held-out test utterances");
    train->add_option("--samples", ta.samples, "Samples per utterance");
    train->add_option("--epochs", ta.epochs, "Epochs");
    train->add_option("--bins", ta.bins, "Frequency bins (window = 2 * (bins - 1))");
    train->add_option("--lr", ta.lr, "Initial learning rate")->check(CLI::PositiveNumber);
    train->add_option("--decay", ta.decay, "Per-epoch learning-rate decay");
    train->add_option("--init", ta.init, "Initial weights")->check(CLI::IsMember({"near", "random", "identity"}));
    train->add_option("--perturbation", ta.perturbation, "Random share of the near-passthrough init");
    train->add_flag("--causal", ta.causal, "Train the causal model");
    train->add_option("--out-weights", ta.out_weights, "Write the selected weights here");
    train->add_option("--out-config", ta.out_config, "Write the model config here");
    train->add_option("--log", ta.log, "Write epoch records here");

    SimulateArgs ma;
    auto* simulate = app.add_subcommand("simulate", "Mix clean speech and array noise per a manifest");
    simulate->add_option("--manifest", ma.manifest, "Manifest: clean, noise, seed, snr_db (tab separated)")->required();
    simulate->add_option("--out-dir", ma.out_dir, "Output directory")->required();
    simulate->add_option("--synthetic", ma.synthetic, "First write this many synthetic pairs and their manifest");
    simulate->add_option("--samples", ma.samples, "Samples per synthetic utterance");

    GradArgs ga;
    auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every learnable tensor");
    grad->add_option("--bins", ga.bins, "Frequency bins of the tiny model");
    grad->add_option("--frames", ga.frames, "Frames in the probe input");
    grad->add_option("--entries", ga.entries, "Entries probed per tensor");
    grad->add_flag("--causal", ga.causal, "Check the causal model");

    BenchArgs ba;
    auto* bench = app.add_subcommand("bench-scan", "Selective-scan throughput and accuracy");
    bench->add_option("--len", ba.len, "Sequence length")->check(CLI::PositiveNumber);
    bench->add_option("--width", ba.width, "Inner width")->check(CLI::PositiveNumber);
    bench->add_option("--state", ba.state, "State size")->check(CLI::PositiveNumber);
    bench->add_option("--mode", ba.mode, "Kernel")->check(CLI::IsMember({"seq", "par", "chunk"}));

    VerifyArgs va;
    auto* verify = app.add_subcommand("verify", "Run the invariant suite");
    verify->add_option("--only", va.only, "Run only these checks")->delimiter(',')->check(CLI::IsMember(verify_check_names()));
    verify->add_option("--inject-fault", va.fault, "Deliberately break a component")->check(CLI::IsMember({"causality"}));
    verify->add_option("--trials", va.trials, "Randomized trials per check")->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        std::cerr << '\n' << app.help();
        return kUsage;
    }

    try {
        if (*enhance) return run_enhance(g, ea);
        if (*stream) return run_stream(g, sa);
        if (*train) return run_train(g, ta);
        if (*simulate) return run_simulate(g, ma);
        if (*grad) return run_gradcheck(g, ga);
        if (*bench) return run_bench(g, ba);
        if (*verify) return run_verify_cmd(g, va);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kCheckFailed;
    }
    return kUsage;
}
