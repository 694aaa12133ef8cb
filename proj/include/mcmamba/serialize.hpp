#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "tensor.hpp"

// Flat binary weight container:
//   "MCMB" | u32 version
//   repeated until EOF: u32 name_len | name bytes (UTF-8) | u8 dtype (0 = f32, 1 = f64)
//                       | u32 rank | u64 dims[rank] | raw little-endian values

namespace mcmamba {

struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline constexpr std::array<char, 4> kWeightMagic{'M', 'C', 'M', 'B'};
inline constexpr std::uint32_t kWeightVersion = 1;

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

/// A named tensor as stored on disk. Values are kept in double; f32 records are widened
/// on read and narrowed on write, which is lossless for data that originated as float.
struct WeightRecord {
    DType dtype = DType::f64;
    Shape shape;
    std::vector<double> values;
};

using WeightMap = std::map<std::string, WeightRecord>;

namespace detail {

template <class U>
U byteswap_if_big(U v) {
    if constexpr (std::endian::native == std::endian::big) {
        auto bytes = std::bit_cast<std::array<unsigned char, sizeof(U)>>(v);
        std::reverse(bytes.begin(), bytes.end());
        return std::bit_cast<U>(bytes);
    } else {
        return v;
    }
}

template <class U>
void put(std::ostream& os, U v) {
    v = byteswap_if_big(v);
    os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <class U>
U get(std::istream& is, const char* what) {
    U v;
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(U))) throw FormatError(std::string("weights: truncated ") + what);
    return byteswap_if_big(v);
}

}  // namespace detail

inline void write_weights(std::ostream& os, const WeightMap& weights) {
    os.write(kWeightMagic.data(), 4);
    detail::put<std::uint32_t>(os, kWeightVersion);
    for (const auto& [name, rec] : weights) {
        detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::put<std::uint8_t>(os, static_cast<std::uint8_t>(rec.dtype));
        detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(rec.shape.size()));
        for (auto d : rec.shape) detail::put<std::uint64_t>(os, d);
        for (double v : rec.values) {
            if (rec.dtype == DType::f32)
                detail::put(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
            else
                detail::put(os, std::bit_cast<std::uint64_t>(v));
        }
    }
    if (!os) throw FormatError("weights: write failed");
}

inline WeightMap read_weights(std::istream& is) {
    std::array<char, 4> magic{};
    if (!is.read(magic.data(), 4) || magic != kWeightMagic) throw FormatError("weights: bad magic, not an MCMB file");
    const auto version = detail::get<std::uint32_t>(is, "version");
    if (version != kWeightVersion) throw FormatError("weights: unsupported version " + std::to_string(version));
    WeightMap out;
    while (is.peek() != std::char_traits<char>::eof()) {
        const auto len = detail::get<std::uint32_t>(is, "name length");
        std::string name(len, '\0');
        if (!is.read(name.data(), len)) throw FormatError("weights: truncated name");
        WeightRecord rec;
        const auto tag = detail::get<std::uint8_t>(is, "dtype");
        if (tag > 1) throw FormatError("weights: unknown dtype tag " + std::to_string(tag) + " for " + name);
        rec.dtype = static_cast<DType>(tag);
        const auto rank = detail::get<std::uint32_t>(is, "rank");
        if (rank == 0 || rank > 8) throw FormatError("weights: bad rank for " + name);
        for (std::uint32_t i = 0; i < rank; ++i) {
            const auto d = detail::get<std::uint64_t>(is, "dims");
            if (d == 0) throw FormatError("weights: zero dimension in " + name);
            rec.shape.push_back(static_cast<std::size_t>(d));
        }
        const auto n = shape_size(rec.shape);
        rec.values.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            if (rec.dtype == DType::f32)
                rec.values[i] = std::bit_cast<float>(detail::get<std::uint32_t>(is, "values"));
            else
                rec.values[i] = std::bit_cast<double>(detail::get<std::uint64_t>(is, "values"));
        }
        if (!out.emplace(std::move(name), std::move(rec)).second) throw FormatError("weights: duplicate record");
    }
    return out;
}

inline void save_weights(const std::string& path, const WeightMap& weights) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("weights: cannot open " + path + " for writing");
    write_weights(os, weights);
}

inline WeightMap load_weights(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("weights: cannot open " + path);
    return read_weights(is);
}

template <class T>
WeightRecord to_record(const Tensor<T>& t) {
    WeightRecord r;
    r.dtype = std::is_same_v<T, float> ? DType::f32 : DType::f64;
    r.shape = t.shape();
    r.values.assign(t.data().begin(), t.data().end());
    return r;
}

template <class T>
Tensor<T> from_record(const WeightRecord& r) {
    std::vector<T> v(r.values.begin(), r.values.end());
    return Tensor<T>(r.shape, std::move(v));
}

}  // namespace mcmamba
