#pragma once

#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mcmamba {

using Shape = std::vector<std::size_t>;

struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

inline std::string to_string(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

inline std::size_t shape_size(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

/// Identifies a slot on a specific gradient tape.
struct GradHandle {
    std::uint64_t tape;
    std::size_t slot;
};

/// Dense row-major array. Storage is shared between copies and treated as immutable;
/// mutable_data() detaches before writing, so a Tensor behaves as a value.
template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)) {
        validate_shape(shape_);
        if (shape_size(shape_) != values.size())
            throw ShapeError("tensor: shape " + to_string(shape_) + " needs " + std::to_string(shape_size(shape_)) +
                             " values, got " + std::to_string(values.size()));
        data_ = std::make_shared<std::vector<T>>(std::move(values));
    }

    static Tensor zeros(Shape shape) { return full(std::move(shape), T(0)); }

    static Tensor full(Shape shape, T v) {
        validate_shape(shape);
        const auto n = shape_size(shape);
        return Tensor(std::move(shape), std::vector<T>(n, v));
    }

    static Tensor scalar(T v) { return Tensor({1}, {v}); }

    bool empty() const { return !data_; }
    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    /// Negative-friendly accessor: dim_from_back(1) is the last dimension.
    std::size_t dim_from_back(std::size_t i) const { return shape_.at(shape_.size() - i); }
    std::size_t size() const { return data_ ? data_->size() : 0; }
    std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }
    std::size_t rows() const { return cols() ? size() / cols() : 0; }

    std::span<const T> data() const {
        return data_ ? std::span<const T>(*data_) : std::span<const T>();
    }

    std::span<T> mutable_data() {
        if (!data_) return {};
        if (data_.use_count() > 1) data_ = std::make_shared<std::vector<T>>(*data_);
        return std::span<T>(*data_);
    }

    T operator[](std::size_t i) const { return (*data_)[i]; }
    T item() const {
        if (size() != 1) throw ShapeError("tensor: item() on shape " + to_string(shape_));
        return (*data_)[0];
    }

    std::vector<T> to_vector() const { return data_ ? *data_ : std::vector<T>{}; }

    /// Same values, new shape; does not participate in gradient tracking (see ops::reshape).
    Tensor reshaped(Shape shape) const {
        validate_shape(shape);
        if (shape_size(shape) != size())
            throw ShapeError("reshape: " + to_string(shape_) + " -> " + to_string(shape));
        Tensor out;
        out.shape_ = std::move(shape);
        out.data_ = data_;
        return out;
    }

    const std::optional<GradHandle>& grad_handle() const { return grad_; }
    void set_grad_handle(std::optional<GradHandle> h) { grad_ = h; }

    Tensor detached() const {
        Tensor t = *this;
        t.grad_.reset();
        return t;
    }

    bool same_storage(const Tensor& other) const { return data_ == other.data_; }

private:
    static void validate_shape(const Shape& s) {
        if (s.empty()) throw ShapeError("tensor: rank-0 shapes are not allowed, use {1}");
        for (auto d : s)
            if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + to_string(s));
    }

    Shape shape_;
    std::shared_ptr<std::vector<T>> data_;
    std::optional<GradHandle> grad_;
};

template <class T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) return false;
    auto x = a.data();
    auto y = b.data();
    return std::memcmp(x.data(), y.data(), x.size_bytes()) == 0;
}

}  // namespace mcmamba
