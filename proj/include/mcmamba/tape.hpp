#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "tensor.hpp"

namespace mcmamba {

struct TapeError : std::logic_error {
    using std::logic_error::logic_error;
};

/// Append-only record of differentiable primitives. Nodes are replayed in exact reverse
/// append order by backward(). One tape per thread; recording is not thread-safe.
template <class T>
class GradientTape {
public:
    using BackwardFn = std::function<void(GradientTape&, std::span<const T>)>;

    GradientTape() : serial_(next_serial()) {}
    GradientTape(const GradientTape&) = delete;
    GradientTape& operator=(const GradientTape&) = delete;

    std::uint64_t serial() const { return serial_; }

    /// Registers `t` as a leaf that requires a gradient. The handle is written into `t`.
    void watch(Tensor<T>& t) {
        t.set_grad_handle(GradHandle{serial_, new_slot(t.shape(), true)});
    }

    Tensor<T> watched(Tensor<T> t) {
        watch(t);
        return t;
    }

    bool tracks(const Tensor<T>& t) const {
        const auto& h = t.grad_handle();
        return h && h->tape == serial_ && h->slot < shapes_.size();
    }

    /// Allocates an output slot and records how to push its gradient to the inputs.
    void record(Tensor<T>& output, BackwardFn fn) {
        if (consumed_) throw TapeError("tape: recording after backward(); start a new tape");
        const auto slot = new_slot(output.shape(), false);
        output.set_grad_handle(GradHandle{serial_, slot});
        nodes_.push_back(Node{slot, std::move(fn)});
    }

    /// Gradient accumulator for a tracked tensor, or an empty span when `t` is not on this tape.
    std::span<T> grad_sink(const Tensor<T>& t) {
        if (!tracks(t)) return {};
        return buffer(t.grad_handle()->slot);
    }

    void backward(const Tensor<T>& loss) {
        if (consumed_) throw TapeError("tape: backward() already ran on this recording");
        if (loss.size() != 1) throw TapeError("tape: loss must be scalar, got shape " + to_string(loss.shape()));
        if (!tracks(loss)) throw TapeError("tape: loss was not produced under this tape");
        consumed_ = true;
        buffer(loss.grad_handle()->slot)[0] += T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            auto& g = grads_[it->slot];
            if (g.empty()) continue;
            it->backward(*this, std::span<const T>(g));
        }
        for (std::size_t s = 0; s < shapes_.size(); ++s)
            if (leaf_[s]) buffer(s);
    }

    /// Gradient of a watched leaf after backward(); same shape as the leaf.
    Tensor<T> gradient(const Tensor<T>& leaf) const {
        if (!tracks(leaf)) throw TapeError("tape: tensor is not watched by this tape");
        const auto slot = leaf.grad_handle()->slot;
        if (grads_[slot].empty()) return Tensor<T>::zeros(shapes_[slot]);
        return Tensor<T>(shapes_[slot], grads_[slot]);
    }

    std::size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        std::size_t slot;
        BackwardFn backward;
    };

    static std::uint64_t next_serial() {
        static std::atomic<std::uint64_t> counter{1};
        return counter.fetch_add(1);
    }

    std::size_t new_slot(const Shape& shape, bool leaf) {
        shapes_.push_back(shape);
        grads_.emplace_back();
        leaf_.push_back(leaf);
        return shapes_.size() - 1;
    }

    std::span<T> buffer(std::size_t slot) {
        auto& g = grads_[slot];
        if (g.empty()) g.assign(shape_size(shapes_[slot]), T(0));
        return g;
    }

    std::uint64_t serial_;
    std::vector<Shape> shapes_;
    std::vector<std::vector<T>> grads_;
    std::vector<bool> leaf_;
    std::vector<Node> nodes_;
    bool consumed_ = false;
};

namespace detail {
template <class T>
GradientTape<T>*& active_tape_slot() {
    thread_local GradientTape<T>* tape = nullptr;
    return tape;
}
}  // namespace detail

template <class T>
GradientTape<T>* active_tape() {
    return detail::active_tape_slot<T>();
}

/// Makes `tape` the recording target for the current thread until destruction.
template <class T>
class TapeScope {
public:
    explicit TapeScope(GradientTape<T>& tape) : previous_(detail::active_tape_slot<T>()) {
        detail::active_tape_slot<T>() = &tape;
    }
    ~TapeScope() { detail::active_tape_slot<T>() = previous_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    GradientTape<T>* previous_;
};

/// Suspends recording for the current thread (inference sections inside a training step).
template <class T>
class NoGradScope {
public:
    NoGradScope() : previous_(detail::active_tape_slot<T>()) { detail::active_tape_slot<T>() = nullptr; }
    ~NoGradScope() { detail::active_tape_slot<T>() = previous_; }
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    GradientTape<T>* previous_;
};

namespace detail {
/// Records `fn` for `out` when any input is tracked by the active tape.
template <class T, class Fn>
void track(Tensor<T>& out, std::initializer_list<const Tensor<T>*> inputs, Fn&& fn) {
    auto* tape = active_tape<T>();
    if (!tape) return;
    const bool any = std::any_of(inputs.begin(), inputs.end(), [&](const Tensor<T>* t) { return tape->tracks(*t); });
    if (!any) return;
    tape->record(out, std::forward<Fn>(fn));
}

template <class T, class Fn>
void track(Tensor<T>& out, const std::vector<Tensor<T>>& inputs, Fn&& fn) {
    auto* tape = active_tape<T>();
    if (!tape) return;
    const bool any = std::any_of(inputs.begin(), inputs.end(), [&](const Tensor<T>& t) { return tape->tracks(t); });
    if (!any) return;
    tape->record(out, std::forward<Fn>(fn));
}
}  // namespace detail

}  // namespace mcmamba
