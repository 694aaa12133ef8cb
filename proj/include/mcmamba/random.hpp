#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "tensor.hpp"

namespace mcmamba {

using Rng = std::mt19937_64;

template <class T>
Tensor<T> random_uniform(Shape shape, double lo, double hi, Rng& rng) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<T> v(shape_size(shape));
    for (auto& x : v) x = static_cast<T>(dist(rng));
    return Tensor<T>(std::move(shape), std::move(v));
}

template <class T>
Tensor<T> random_normal(Shape shape, double stddev, Rng& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<T> v(shape_size(shape));
    for (auto& x : v) x = static_cast<T>(dist(rng));
    return Tensor<T>(std::move(shape), std::move(v));
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weight matrix [fan_in, fan_out].
template <class T>
Tensor<T> linear_init(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return random_uniform<T>({fan_in, fan_out}, -bound, bound, rng);
}

}  // namespace mcmamba
