#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <variant>

#include "ops.hpp"
#include "random.hpp"
#include "ssm.hpp"
#include "tensor.hpp"

namespace mcmamba {

struct MambaBlockConfig {
    std::size_t d_model = 0;
    std::size_t expand = 2;
    std::size_t d_conv = 4;
    std::size_t d_state = 16;
    bool norm = true;  // RMS-normalize the block input

    std::size_t d_inner() const { return expand * d_model; }

    void validate() const {
        if (d_model < 1 || expand < 1 || d_conv < 1 || d_state < 1)
            throw std::invalid_argument("mamba: d_model, expand, d_conv and d_state must all be >= 1");
    }
};

/// Per-lane carry for streaming a block: the last d_conv-1 conv inputs and the SSM state.
template <class T>
struct BlockStream {
    Tensor<T> conv_tail;  // [lanes, d_conv-1, d_inner]; empty when d_conv == 1
    SsmState<T> ssm;      // [lanes, d_inner, d_state]
    std::size_t lanes = 0;

    static BlockStream fresh(const MambaBlockConfig& cfg, std::size_t lanes) {
        BlockStream s;
        s.lanes = lanes;
        if (cfg.d_conv > 1) s.conv_tail = Tensor<T>::zeros({lanes, cfg.d_conv - 1, cfg.d_inner()});
        s.ssm.h = Tensor<T>::zeros({lanes, cfg.d_inner(), cfg.d_state});
        return s;
    }

    std::size_t value_count() const { return conv_tail.size() + ssm.h.size(); }
};

/// Y' = SSM(SiLU(Conv(Linear(X)))) * SiLU(Linear(X)),  Y = Linear(Y').
/// In/out projections carry no bias; the conv and the delta projection do. With cfg.norm,
/// X is first RMS-normalized per step with a learnable gain.
template <class T>
struct MambaBlock {
    MambaBlockConfig cfg;
    Tensor<T> norm_gain;    // [d_model]; empty without cfg.norm
    Tensor<T> w_in_x;       // [d_model, d_inner]
    Tensor<T> w_in_z;       // [d_model, d_inner]
    Tensor<T> conv_kernel;  // [d_inner, d_conv]
    Tensor<T> conv_bias;    // [d_inner]
    SsmParams<T> ssm;
    Tensor<T> w_out;        // [d_inner, d_model]

    static MambaBlock init(const MambaBlockConfig& cfg, Rng& rng) {
        cfg.validate();
        MambaBlock m;
        m.cfg = cfg;
        const auto di = cfg.d_inner();
        if (cfg.norm) m.norm_gain = Tensor<T>::full({cfg.d_model}, T(1));
        m.w_in_x = linear_init<T>(cfg.d_model, di, rng);
        m.w_in_z = linear_init<T>(cfg.d_model, di, rng);
        const double cb = 1.0 / std::sqrt(static_cast<double>(cfg.d_conv));
        m.conv_kernel = random_uniform<T>({di, cfg.d_conv}, -cb, cb, rng);
        m.conv_bias = random_uniform<T>({di}, -cb, cb, rng);
        m.ssm = SsmParams<T>::init(di, cfg.d_state, rng);
        m.w_out = linear_init<T>(di, cfg.d_model, rng);
        return m;
    }

    static MambaBlock zeros(const MambaBlockConfig& cfg) {
        cfg.validate();
        MambaBlock m;
        m.cfg = cfg;
        const auto di = cfg.d_inner();
        if (cfg.norm) m.norm_gain = Tensor<T>::zeros({cfg.d_model});
        m.w_in_x = Tensor<T>::zeros({cfg.d_model, di});
        m.w_in_z = Tensor<T>::zeros({cfg.d_model, di});
        m.conv_kernel = Tensor<T>::zeros({di, cfg.d_conv});
        m.conv_bias = Tensor<T>::zeros({di});
        m.ssm = SsmParams<T>::zeros(di, cfg.d_state);
        m.w_out = Tensor<T>::zeros({di, cfg.d_model});
        return m;
    }

    /// x is [L, d_model] or [lanes, L, d_model]. With `stream`, runs causally from the
    /// carried state and advances it.
    Tensor<T> forward(const Tensor<T>& x, BlockStream<T>* stream = nullptr) const {
        if (x.cols() != cfg.d_model)
            throw ShapeError("mamba: input width " + std::to_string(x.cols()) + " != d_model " +
                             std::to_string(cfg.d_model));
        detail::require_finite(x, "mamba");
        const auto xn = cfg.norm ? rms_norm(x, norm_gain) : x;
        const auto xi = matmul(xn, w_in_x);
        const auto z = matmul(xn, w_in_z);
        Tensor<T> xc;
        if (stream) {
            const std::size_t lanes = x.rank() == 2 ? 1 : x.size() / (x.dim_from_back(2) * x.cols());
            if (stream->lanes != lanes)
                throw ShapeError("mamba: stream has " + std::to_string(stream->lanes) + " lanes, input has " +
                                 std::to_string(lanes));
            xc = depthwise_causal_conv1d_stream(xi, conv_kernel, conv_bias, stream->conv_tail);
        } else {
            xc = depthwise_causal_conv1d(xi, conv_kernel, conv_bias);
        }
        const auto u = silu(xc);
        const auto sel = select(ssm, u);
        const auto ys = selective_scan(u, sel.delta, ssm.a_log, sel.b, sel.c, stream ? &stream->ssm : nullptr);
        return matmul(mul(ys, silu(z)), w_out);
    }

    template <class Fn>
    void for_each_parameter(const std::string& prefix, Fn&& fn) {
        if (cfg.norm) fn(prefix + "norm_gain", norm_gain);
        fn(prefix + "w_in_x", w_in_x);
        fn(prefix + "w_in_z", w_in_z);
        fn(prefix + "conv_kernel", conv_kernel);
        fn(prefix + "conv_bias", conv_bias);
        ssm.for_each_parameter(prefix + "ssm.", fn);
        fn(prefix + "w_out", w_out);
    }
};

/// Widths of a directional wrapper. The inner Mamba block(s) run at `hidden`.
struct DirectionalBlockConfig {
    std::size_t d_in = 0;
    std::size_t hidden = 0;
    std::size_t d_out = 0;
    bool causal = true;
    std::size_t expand = 2;
    std::size_t d_conv = 4;
    std::size_t d_state = 16;
    bool norm = true;

    MambaBlockConfig block() const { return {hidden, expand, d_conv, d_state, norm}; }

    void validate() const {
        if (d_in < 1 || hidden < 1 || d_out < 1) throw std::invalid_argument("directional block: widths must be >= 1");
        block().validate();
    }
};

/// Causal wrapper: Y = ProjOut(Mamba(ProjIn(X))) + Residual(X), with a learnable linear
/// residual map d_in -> d_out.
template <class T>
struct UniMamba {
    DirectionalBlockConfig cfg;
    Tensor<T> w_proj_in;   // [d_in, hidden]
    MambaBlock<T> block;
    Tensor<T> w_proj_out;  // [hidden, d_out]
    Tensor<T> w_residual;  // [d_in, d_out]

    static UniMamba init(const DirectionalBlockConfig& cfg, Rng& rng) {
        cfg.validate();
        UniMamba u;
        u.cfg = cfg;
        u.w_proj_in = linear_init<T>(cfg.d_in, cfg.hidden, rng);
        u.block = MambaBlock<T>::init(cfg.block(), rng);
        u.w_proj_out = linear_init<T>(cfg.hidden, cfg.d_out, rng);
        u.w_residual = linear_init<T>(cfg.d_in, cfg.d_out, rng);
        return u;
    }

    static UniMamba zeros(const DirectionalBlockConfig& cfg) {
        cfg.validate();
        UniMamba u;
        u.cfg = cfg;
        u.w_proj_in = Tensor<T>::zeros({cfg.d_in, cfg.hidden});
        u.block = MambaBlock<T>::zeros(cfg.block());
        u.w_proj_out = Tensor<T>::zeros({cfg.hidden, cfg.d_out});
        u.w_residual = Tensor<T>::zeros({cfg.d_in, cfg.d_out});
        return u;
    }

    Tensor<T> forward(const Tensor<T>& x, BlockStream<T>* stream = nullptr) const {
        if (x.cols() != cfg.d_in)
            throw ShapeError("uni-mamba: input width " + std::to_string(x.cols()) + " != " + std::to_string(cfg.d_in));
        const auto main = matmul(block.forward(matmul(x, w_proj_in), stream), w_proj_out);
        return add(main, matmul(x, w_residual));
    }

    BlockStream<T> fresh_stream(std::size_t lanes) const { return BlockStream<T>::fresh(block.cfg, lanes); }

    template <class Fn>
    void for_each_parameter(const std::string& prefix, Fn&& fn) {
        fn(prefix + "proj_in", w_proj_in);
        block.for_each_parameter(prefix + "block.", fn);
        fn(prefix + "proj_out", w_proj_out);
        fn(prefix + "residual", w_residual);
    }
};

/// Non-causal wrapper: one block reads the sequence forwards, a second reads it reversed.
/// Their outputs are concatenated (width 2*hidden), summed with a learnable linear residual
/// of the input at that doubled width, and mapped to d_out by a final linear layer.
template <class T>
struct BiMamba {
    DirectionalBlockConfig cfg;
    Tensor<T> w_proj_in;  // [d_in, hidden]
    MambaBlock<T> forward_block;
    MambaBlock<T> backward_block;
    Tensor<T> w_residual;  // [d_in, 2*hidden]
    Tensor<T> w_out;       // [2*hidden, d_out]

    static BiMamba init(const DirectionalBlockConfig& cfg, Rng& rng) {
        cfg.validate();
        BiMamba b;
        b.cfg = cfg;
        b.w_proj_in = linear_init<T>(cfg.d_in, cfg.hidden, rng);
        b.forward_block = MambaBlock<T>::init(cfg.block(), rng);
        b.backward_block = MambaBlock<T>::init(cfg.block(), rng);
        b.w_residual = linear_init<T>(cfg.d_in, 2 * cfg.hidden, rng);
        b.w_out = linear_init<T>(2 * cfg.hidden, cfg.d_out, rng);
        return b;
    }

    static BiMamba zeros(const DirectionalBlockConfig& cfg) {
        cfg.validate();
        BiMamba b;
        b.cfg = cfg;
        b.w_proj_in = Tensor<T>::zeros({cfg.d_in, cfg.hidden});
        b.forward_block = MambaBlock<T>::zeros(cfg.block());
        b.backward_block = MambaBlock<T>::zeros(cfg.block());
        b.w_residual = Tensor<T>::zeros({cfg.d_in, 2 * cfg.hidden});
        b.w_out = Tensor<T>::zeros({2 * cfg.hidden, cfg.d_out});
        return b;
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        if (x.cols() != cfg.d_in)
            throw ShapeError("bi-mamba: input width " + std::to_string(x.cols()) + " != " + std::to_string(cfg.d_in));
        const auto u = matmul(x, w_proj_in);
        const auto fwd = forward_block.forward(u);
        const auto bwd = reverse_sequence(backward_block.forward(reverse_sequence(u)));
        const auto both = add(concat_last<T>({fwd, bwd}), matmul(x, w_residual));
        return matmul(both, w_out);
    }

    template <class Fn>
    void for_each_parameter(const std::string& prefix, Fn&& fn) {
        fn(prefix + "proj_in", w_proj_in);
        forward_block.for_each_parameter(prefix + "fwd.", fn);
        backward_block.for_each_parameter(prefix + "bwd.", fn);
        fn(prefix + "residual", w_residual);
        fn(prefix + "out", w_out);
    }
};

/// Uni-Mamba when causal, Bi-Mamba otherwise.
template <class T>
class DirectionalBlock {
public:
    DirectionalBlock() = default;
    explicit DirectionalBlock(UniMamba<T> u) : impl_(std::move(u)) {}
    explicit DirectionalBlock(BiMamba<T> b) : impl_(std::move(b)) {}

    static DirectionalBlock init(const DirectionalBlockConfig& cfg, Rng& rng) {
        return cfg.causal ? DirectionalBlock(UniMamba<T>::init(cfg, rng)) : DirectionalBlock(BiMamba<T>::init(cfg, rng));
    }

    static DirectionalBlock zeros(const DirectionalBlockConfig& cfg) {
        return cfg.causal ? DirectionalBlock(UniMamba<T>::zeros(cfg)) : DirectionalBlock(BiMamba<T>::zeros(cfg));
    }

    bool causal() const { return std::holds_alternative<UniMamba<T>>(impl_); }
    const DirectionalBlockConfig& config() const {
        return std::visit([](const auto& b) -> const DirectionalBlockConfig& { return b.cfg; }, impl_);
    }

    UniMamba<T>& uni() { return std::get<UniMamba<T>>(impl_); }
    const UniMamba<T>& uni() const { return std::get<UniMamba<T>>(impl_); }
    BiMamba<T>& bi() { return std::get<BiMamba<T>>(impl_); }
    const BiMamba<T>& bi() const { return std::get<BiMamba<T>>(impl_); }

    Tensor<T> forward(const Tensor<T>& x, BlockStream<T>* stream = nullptr) const {
        if (auto* u = std::get_if<UniMamba<T>>(&impl_)) return u->forward(x, stream);
        if (stream) throw std::logic_error("bi-mamba: streaming state supplied to a non-causal block");
        return std::get<BiMamba<T>>(impl_).forward(x);
    }

    template <class Fn>
    void for_each_parameter(const std::string& prefix, Fn&& fn) {
        if (auto* u = std::get_if<UniMamba<T>>(&impl_))
            u->for_each_parameter(prefix + "uni.", fn);
        else
            std::get<BiMamba<T>>(impl_).for_each_parameter(prefix + "bi.", fn);
    }

private:
    std::variant<UniMamba<T>, BiMamba<T>> impl_;
};

}  // namespace mcmamba
