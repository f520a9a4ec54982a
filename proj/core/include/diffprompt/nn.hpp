#pragma once

// Neural network building blocks on top of the autograd tape: a parameter
// registry, linear / conv / norm / attention modules, and AdamW. Modules
// register their parameters into a ParamSetT at construction and must stay at
// a fixed address afterwards, so they are neither copyable nor movable.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "diffprompt/autograd.hpp"
#include "diffprompt/rng.hpp"

namespace dp {

template <typename T>
class ParamSetT {
public:
    void add(ParamT<T>* p) { params_.push_back(p); }

    const std::vector<ParamT<T>*>& params() const { return params_; }

    ParamT<T>* find(const std::string& name) const {
        for (auto* p : params_)
            if (p->name == name) return p;
        return nullptr;
    }

    int64_t count_params(bool trainable_only = false) const {
        int64_t n = 0;
        for (auto* p : params_)
            if (!trainable_only || p->trainable) n += p->value.numel();
        return n;
    }

    void zero_grad() {
        for (auto* p : params_) p->zero_grad();
    }

    void set_trainable(bool trainable) {
        for (auto* p : params_) p->trainable = trainable;
    }

    bool frozen() const {
        for (auto* p : params_)
            if (p->trainable) return false;
        return true;
    }

private:
    std::vector<ParamT<T>*> params_;
};

// ---------------------------------------------------------------------------
// Initialization.
// ---------------------------------------------------------------------------

template <typename T>
void init_xavier_uniform(TensorT<T>& t, int64_t fan_in, int64_t fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (auto& v : t.data) v = static_cast<T>(rng.uniform(-limit, limit));
}

template <typename T>
void init_normal(TensorT<T>& t, double stddev, Rng& rng) {
    for (auto& v : t.data) v = static_cast<T>(stddev * rng.normal());
}

// ---------------------------------------------------------------------------
// Modules.
// ---------------------------------------------------------------------------

struct NoCopyMove {
    NoCopyMove() = default;
    NoCopyMove(const NoCopyMove&) = delete;
    NoCopyMove& operator=(const NoCopyMove&) = delete;
};

template <typename T>
struct LinearT : NoCopyMove {
    ParamT<T> w;  // (in, out)
    ParamT<T> b;  // (1, out)
    bool has_bias;

    LinearT(ParamSetT<T>& ps, const std::string& name, int64_t in, int64_t out, Rng& rng,
            bool bias = true)
        : has_bias(bias) {
        w.name = name + ".w";
        w.init_shape({in, out});
        init_xavier_uniform(w.value, in, out, rng);
        ps.add(&w);
        if (bias) {
            b.name = name + ".b";
            b.init_shape({1, out});
            ps.add(&b);
        }
    }

    ValueT<T> forward(TapeT<T>& tape, const ValueT<T>& x) {
        auto y = matmul(x, tape.param(w));
        if (has_bias) y = add_rowvec(y, tape.param(b));
        return y;
    }
};

template <typename T>
struct Conv2dT : NoCopyMove {
    ParamT<T> w;  // (cout, cin*k*k)
    ParamT<T> b;  // (1, cout)
    int64_t k, stride, pad;

    Conv2dT(ParamSetT<T>& ps, const std::string& name, int64_t cin, int64_t cout, int64_t k_,
            int64_t stride_, int64_t pad_, Rng& rng)
        : k(k_), stride(stride_), pad(pad_) {
        w.name = name + ".w";
        w.init_shape({cout, cin * k * k});
        init_xavier_uniform(w.value, cin * k * k, cout * k * k, rng);
        ps.add(&w);
        b.name = name + ".b";
        b.init_shape({1, cout});
        ps.add(&b);
    }

    ValueT<T> forward(TapeT<T>& tape, const ValueT<T>& x) {
        return conv2d(x, tape.param(w), tape.param(b), k, stride, pad);
    }
};

template <typename T>
struct LayerNormT : NoCopyMove {
    ParamT<T> gamma, beta;
    T eps;

    LayerNormT(ParamSetT<T>& ps, const std::string& name, int64_t d, T eps_ = T(1e-5))
        : eps(eps_) {
        gamma.name = name + ".gamma";
        gamma.init_shape({1, d});
        gamma.value.fill(T(1));
        ps.add(&gamma);
        beta.name = name + ".beta";
        beta.init_shape({1, d});
        ps.add(&beta);
    }

    ValueT<T> forward(TapeT<T>& tape, const ValueT<T>& x) {
        return layernorm(x, tape.param(gamma), tape.param(beta), eps);
    }
};

template <typename T>
struct MultiHeadAttentionT : NoCopyMove {
    LinearT<T> wq, wk, wv, wo;
    int64_t dim, heads;

    MultiHeadAttentionT(ParamSetT<T>& ps, const std::string& name, int64_t d, int64_t h, Rng& rng)
        : wq(ps, name + ".wq", d, d, rng),
          wk(ps, name + ".wk", d, d, rng),
          wv(ps, name + ".wv", d, d, rng),
          wo(ps, name + ".wo", d, d, rng),
          dim(d),
          heads(h) {
        if (d % h) throw ConfigError("attention width not divisible by heads");
    }

    // Self or cross attention. mask, when present, is an additive (n_q, n_kv)
    // constant applied to the logits (0 to keep, large negative to drop).
    ValueT<T> forward(TapeT<T>& tape, const ValueT<T>& q_in, const ValueT<T>& kv_in,
                      const TensorT<T>* mask = nullptr) {
        const int64_t dh = dim / heads;
        auto q = wq.forward(tape, q_in);
        auto kx = wk.forward(tape, kv_in);
        auto v = wv.forward(tape, kv_in);
        std::vector<ValueT<T>> ctx;
        ctx.reserve(static_cast<size_t>(heads));
        const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
        for (int64_t hh = 0; hh < heads; ++hh) {
            auto qh = slice_cols(q, hh * dh, dh);
            auto kh = slice_cols(kx, hh * dh, dh);
            auto vh = slice_cols(v, hh * dh, dh);
            auto scores = scale(matmul(qh, kh, false, true), inv_sqrt);
            if (mask) scores = add(scores, tape.leaf(*mask));
            ctx.push_back(matmul(softmax_rows(scores), vh));
        }
        return wo.forward(tape, concat_cols(ctx));
    }

    ValueT<T> forward_self(TapeT<T>& tape, const ValueT<T>& x, const TensorT<T>* mask = nullptr) {
        return forward(tape, x, x, mask);
    }
};

// Pre-norm transformer block: x + Attn(LN(x)), then x + MLP(LN(x)).
template <typename T>
struct TransformerLayerT : NoCopyMove {
    LayerNormT<T> ln1, ln2;
    MultiHeadAttentionT<T> attn;
    LinearT<T> fc1, fc2;

    TransformerLayerT(ParamSetT<T>& ps, const std::string& name, int64_t d, int64_t heads,
                      int64_t mlp_hidden, Rng& rng)
        : ln1(ps, name + ".ln1", d),
          ln2(ps, name + ".ln2", d),
          attn(ps, name + ".attn", d, heads, rng),
          fc1(ps, name + ".fc1", d, mlp_hidden, rng),
          fc2(ps, name + ".fc2", mlp_hidden, d, rng) {}

    ValueT<T> forward(TapeT<T>& tape, const ValueT<T>& x, const TensorT<T>* mask = nullptr) {
        auto h = add(x, attn.forward_self(tape, ln1.forward(tape, x), mask));
        return add(h, fc2.forward(tape, gelu(fc1.forward(tape, ln2.forward(tape, h)))));
    }
};

// ---------------------------------------------------------------------------
// Optimizer.
// ---------------------------------------------------------------------------

template <typename T>
class AdamWT {
public:
    AdamWT(ParamSetT<T>& ps, T lr, T weight_decay = T(0), T beta1 = T(0.9), T beta2 = T(0.999),
           T eps = T(1e-8))
        : ps_(&ps), lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {
        states_.resize(ps.params().size());
    }

    void set_lr(T lr) { lr_ = lr; }
    T lr() const { return lr_; }

    // Applies one decoupled-weight-decay Adam step to trainable parameters.
    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(static_cast<double>(b1_), static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(static_cast<double>(b2_), static_cast<double>(t_));
        const auto& params = ps_->params();
        for (size_t i = 0; i < params.size(); ++i) {
            ParamT<T>* p = params[i];
            if (!p->trainable) continue;
            State& st = states_[i];
            if (st.m.data.size() != p->value.data.size()) {
                st.m = TensorT<T>(p->value.shape);
                st.v = TensorT<T>(p->value.shape);
            }
            for (size_t j = 0; j < p->value.data.size(); ++j) {
                const T g = p->grad.data[j];
                st.m.data[j] = b1_ * st.m.data[j] + (T(1) - b1_) * g;
                st.v.data[j] = b2_ * st.v.data[j] + (T(1) - b2_) * g * g;
                const T mhat = st.m.data[j] / static_cast<T>(bc1);
                const T vhat = st.v.data[j] / static_cast<T>(bc2);
                p->value.data[j] -=
                    lr_ * (mhat / (std::sqrt(vhat) + eps_) + wd_ * p->value.data[j]);
            }
        }
    }

    void zero_grad() { ps_->zero_grad(); }

private:
    struct State {
        TensorT<T> m, v;
    };
    ParamSetT<T>* ps_;
    std::vector<State> states_;
    T lr_, wd_, b1_, b2_, eps_;
    int64_t t_ = 0;
};

// Scales gradients in place so their global L2 norm is at most max_norm.
// Returns the pre-clip norm.
template <typename T>
double clip_grad_norm(ParamSetT<T>& ps, double max_norm) {
    double sq = 0.0;
    for (auto* p : ps.params()) {
        if (!p->trainable) continue;
        for (T g : p->grad.data) sq += static_cast<double>(g) * static_cast<double>(g);
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const T s = static_cast<T>(max_norm / norm);
        for (auto* p : ps.params()) {
            if (!p->trainable) continue;
            for (auto& g : p->grad.data) g *= s;
        }
    }
    return norm;
}

}  // namespace dp
