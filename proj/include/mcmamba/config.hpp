#pragma once

#include <array>
#include <cstddef>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mcmamba {

struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Topology of the four-stage cascade: full-band spatial, narrow-band spatial, sub-band
/// spectral, full-band spectral.
struct McMambaConfig {
    std::size_t channels = 6;
    std::size_t bins = 257;
    std::size_t reference_channel = 4;  // 0-based
    bool causal = false;
    std::array<std::size_t, 4> stage_dims{64, 64, 64, 2};
    std::array<std::size_t, 4> hidden_dims{128, 256, 384, 128};
    std::size_t neighbors = 3;               // N
    std::size_t context = 5;                 // C
    bool subband_include_center = true;      // false: the 2N neighbours only
    bool context_include_current = true;     // false: frames t-C .. t-1 only
    std::size_t expand = 2;
    std::size_t d_conv = 4;
    std::size_t d_state = 16;
    bool block_norm = true;  // RMS norm on each Mamba block input; false is the bare block

    static McMambaConfig paper() { return {}; }

    /// Small widths for gradient checks and toy training.
    static McMambaConfig tiny(std::size_t channels = 6, std::size_t bins = 257, bool causal = false) {
        McMambaConfig c;
        c.channels = channels;
        c.bins = bins;
        c.reference_channel = channels > 4 ? 4 : channels - 1;
        c.causal = causal;
        c.stage_dims = {8, 8, 8, 2};
        c.hidden_dims = {16, 16, 16, 16};
        return c;
    }

    std::size_t subband_width() const { return 2 * neighbors + (subband_include_center ? 1 : 0); }
    std::size_t context_width() const { return context + (context_include_current ? 1 : 0); }

    std::size_t stage_input(std::size_t stage) const {
        switch (stage) {
            case 0: return 2 * channels;
            case 1: return 2 * channels + stage_dims[0];
            case 2: return subband_width() + stage_dims[1];
            case 3: return context_width() + stage_dims[2];
            default: throw ConfigError("config: stage index out of range");
        }
    }

    void validate() const {
        if (channels < 1) throw ConfigError("config: channels must be >= 1");
        if (bins < 1) throw ConfigError("config: bins must be >= 1");
        if (reference_channel >= channels)
            throw ConfigError("config: reference_channel " + std::to_string(reference_channel) + " out of range for " +
                              std::to_string(channels) + " channels");
        if (stage_dims[3] != 2) throw ConfigError("config: the last stage must output 2 values (re, im)");
        for (std::size_t s = 0; s < 4; ++s)
            if (stage_dims[s] < 1 || hidden_dims[s] < 1) throw ConfigError("config: stage widths must be >= 1");
        if (subband_width() < 1 || context_width() < 1) throw ConfigError("config: empty spectral feature window");
        if (expand < 1 || d_conv < 1 || d_state < 1) throw ConfigError("config: expand, d_conv, d_state must be >= 1");
    }

    bool operator==(const McMambaConfig&) const = default;
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline std::size_t parse_size(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    unsigned long long out = 0;
    try {
        out = std::stoull(v, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (pos != v.size() || v.empty() || v[0] == '-') throw ConfigError("config: " + key + " expects an unsigned integer, got '" + v + "'");
    return static_cast<std::size_t>(out);
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config: " + key + " expects true/false, got '" + v + "'");
}

inline std::array<std::size_t, 4> parse_quad(const std::string& key, const std::string& v) {
    std::array<std::size_t, 4> out{};
    std::stringstream ss(v);
    std::string item;
    std::size_t i = 0;
    while (std::getline(ss, item, ',')) {
        if (i == 4) throw ConfigError("config: " + key + " expects 4 comma-separated values");
        out[i++] = parse_size(key, trim(item));
    }
    if (i != 4) throw ConfigError("config: " + key + " expects 4 comma-separated values");
    return out;
}

}  // namespace detail

/// Parses the key/value model config format:
///
///     # comment
///     channels = 6
///     bins = 257
///     reference_channel = 4
///     causal = false
///     stage_dims = 64,64,64,2
///     hidden_dims = 128,256,384,128
///     neighbors = 3
///     context = 5
///     subband_include_center = true
///     context_include_current = true
///     expand = 2
///     d_conv = 4
///     d_state = 16
///     block_norm = true
///
/// Missing keys keep their defaults; unknown keys are rejected.
inline McMambaConfig parse_config(std::istream& is) {
    McMambaConfig c;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("config: line " + std::to_string(lineno) + ": expected key = value");
        const auto key = detail::trim(line.substr(0, eq));
        const auto val = detail::trim(line.substr(eq + 1));
        if (key == "channels") c.channels = detail::parse_size(key, val);
        else if (key == "bins") c.bins = detail::parse_size(key, val);
        else if (key == "reference_channel") c.reference_channel = detail::parse_size(key, val);
        else if (key == "causal") c.causal = detail::parse_bool(key, val);
        else if (key == "stage_dims") c.stage_dims = detail::parse_quad(key, val);
        else if (key == "hidden_dims") c.hidden_dims = detail::parse_quad(key, val);
        else if (key == "neighbors") c.neighbors = detail::parse_size(key, val);
        else if (key == "context") c.context = detail::parse_size(key, val);
        else if (key == "subband_include_center") c.subband_include_center = detail::parse_bool(key, val);
        else if (key == "context_include_current") c.context_include_current = detail::parse_bool(key, val);
        else if (key == "expand") c.expand = detail::parse_size(key, val);
        else if (key == "d_conv") c.d_conv = detail::parse_size(key, val);
        else if (key == "d_state") c.d_state = detail::parse_size(key, val);
        else if (key == "block_norm") c.block_norm = detail::parse_bool(key, val);
        else throw ConfigError("config: line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
    c.validate();
    return c;
}

inline void write_config(std::ostream& os, const McMambaConfig& c) {
    auto quad = [](const std::array<std::size_t, 4>& q) {
        return std::to_string(q[0]) + "," + std::to_string(q[1]) + "," + std::to_string(q[2]) + "," + std::to_string(q[3]);
    };
    os << "channels = " << c.channels << "\n"
       << "bins = " << c.bins << "\n"
       << "reference_channel = " << c.reference_channel << "\n"
       << "causal = " << (c.causal ? "true" : "false") << "\n"
       << "stage_dims = " << quad(c.stage_dims) << "\n"
       << "hidden_dims = " << quad(c.hidden_dims) << "\n"
       << "neighbors = " << c.neighbors << "\n"
       << "context = " << c.context << "\n"
       << "subband_include_center = " << (c.subband_include_center ? "true" : "false") << "\n"
       << "context_include_current = " << (c.context_include_current ? "true" : "false") << "\n"
       << "expand = " << c.expand << "\n"
       << "d_conv = " << c.d_conv << "\n"
       << "d_state = " << c.d_state << "\n"
       << "block_norm = " << (c.block_norm ? "true" : "false") << "\n";
}

inline McMambaConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open " + path);
    return parse_config(is);
}

inline void save_config(const std::string& path, const McMambaConfig& c) {
    std::ofstream os(path);
    if (!os) throw ConfigError("config: cannot write " + path);
    write_config(os, c);
}

}  // namespace mcmamba
