#pragma once

// Tape-based reverse-mode automatic differentiation, templated on the scalar
// type so training runs in float while gradient checks run in double. The tape
// records nodes in creation order, which is a valid topological order, and
// backward() walks it in reverse. Nodes whose inputs do not require gradients
// are not recorded and carry no closure, so inference costs no tape memory.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "diffprompt/errors.hpp"
#include "diffprompt/flops.hpp"
#include "diffprompt/tensor.hpp"

namespace dp {

// ---------------------------------------------------------------------------
// GEMM wrapper. Every matrix product in the project goes through here so the
// FLOP counter sees all of them.
// ---------------------------------------------------------------------------

template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// C (+)= op(A) * op(B) where op transposes when the flag is set. A and B are
// interpreted as 2-D via rows()/cols(); C must be preallocated to (m, n).
template <typename T>
void gemm(TensorT<T>& C, const TensorT<T>& A, bool ta, const TensorT<T>& B, bool tb,
          bool accumulate) {
    const int64_t m = ta ? A.cols() : A.rows();
    const int64_t k = ta ? A.rows() : A.cols();
    const int64_t kb = tb ? B.cols() : B.rows();
    const int64_t n = tb ? B.rows() : B.cols();
    if (k != kb)
        throw ShapeError("gemm inner dimensions " + shape_str(A.shape) + " x " + shape_str(B.shape));
    if (C.rows() != m || C.cols() != n)
        throw ShapeError("gemm output shape " + shape_str(C.shape));
    ConstMatMap<T> a(A.data.data(), A.rows(), A.cols());
    ConstMatMap<T> b(B.data.data(), B.rows(), B.cols());
    MatMap<T> c(C.data.data(), m, n);
    if (!ta && !tb) {
        if (accumulate) c.noalias() += a * b; else c.noalias() = a * b;
    } else if (!ta && tb) {
        if (accumulate) c.noalias() += a * b.transpose(); else c.noalias() = a * b.transpose();
    } else if (ta && !tb) {
        if (accumulate) c.noalias() += a.transpose() * b; else c.noalias() = a.transpose() * b;
    } else {
        if (accumulate) c.noalias() += a.transpose() * b.transpose();
        else c.noalias() = a.transpose() * b.transpose();
    }
    FlopCounter::add(2ull * static_cast<uint64_t>(m) * static_cast<uint64_t>(n) *
                     static_cast<uint64_t>(k));
}

// ---------------------------------------------------------------------------
// Tape machinery.
// ---------------------------------------------------------------------------

template <typename T>
class TapeT;

template <typename T>
struct NodeT {
    TensorT<T> val;
    TensorT<T> grad;  // allocated on first use during backward
    bool requires_grad = false;
    TapeT<T>* tape = nullptr;
    std::function<void(NodeT<T>*)> backward;

    void ensure_grad() {
        if (grad.data.size() != val.data.size()) {
            grad.shape = val.shape;
            grad.data.assign(val.data.size(), T(0));
        }
    }
};

template <typename T>
struct ValueT {
    std::shared_ptr<NodeT<T>> node;

    const TensorT<T>& val() const { return node->val; }
    const TensorT<T>& grad() const { return node->grad; }
    TapeT<T>* tape() const { return node->tape; }
    bool requires_grad() const { return node->requires_grad; }
    int64_t rows() const { return node->val.rows(); }
    int64_t cols() const { return node->val.cols(); }
};

// A named, long-lived parameter. Gradients accumulate here across backward
// passes until the optimizer consumes and clears them. Frozen parameters
// (trainable == false) never receive gradient.
template <typename T>
struct ParamT {
    std::string name;
    TensorT<T> value;
    TensorT<T> grad;
    bool trainable = true;

    void init_shape(std::vector<int64_t> s) {
        value = TensorT<T>(std::move(s));
        grad = TensorT<T>(value.shape);
    }
    void zero_grad() { grad.fill(T(0)); }
};

template <typename T>
class TapeT {
public:
    explicit TapeT(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    bool grad_enabled() const { return grad_enabled_; }

    ValueT<T> leaf(TensorT<T> v, bool requires_grad = false) {
        auto n = std::make_shared<NodeT<T>>();
        n->val = std::move(v);
        n->tape = this;
        n->requires_grad = requires_grad && grad_enabled_;
        if (n->requires_grad) nodes_.push_back(n);
        return ValueT<T>{std::move(n)};
    }

    // Leaf bound to a parameter. The value is copied onto the tape; backward
    // accumulates into the parameter's persistent grad buffer.
    ValueT<T> param(ParamT<T>& p) {
        auto v = leaf(p.value, p.trainable);
        if (v.node->requires_grad) {
            ParamT<T>* pp = &p;
            v.node->backward = [pp](NodeT<T>* self) {
                T* dst = pp->grad.data.data();
                const T* src = self->grad.data.data();
                for (size_t i = 0; i < self->grad.data.size(); ++i) dst[i] += src[i];
            };
        }
        return v;
    }

    void record(std::shared_ptr<NodeT<T>> n) { nodes_.push_back(std::move(n)); }

    // Seeds the root gradient with ones and sweeps the tape in reverse
    // creation order. Safe to call once per tape.
    void backward(const ValueT<T>& root) {
        if (!root.node->requires_grad)
            throw ShapeError("backward on a value that does not require grad");
        root.node->ensure_grad();
        std::fill(root.node->grad.data.begin(), root.node->grad.data.end(), T(1));
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            NodeT<T>* n = it->get();
            if (!n->backward || n->grad.data.empty()) continue;
            n->backward(n);
        }
    }

    size_t size() const { return nodes_.size(); }

private:
    std::vector<std::shared_ptr<NodeT<T>>> nodes_;
    bool grad_enabled_;
};

namespace detail {

template <typename T>
ValueT<T> make_op(TapeT<T>* tape, TensorT<T> val, bool needs_grad,
                  std::function<void(NodeT<T>*)> bw) {
    auto n = std::make_shared<NodeT<T>>();
    n->val = std::move(val);
    n->tape = tape;
    n->requires_grad = needs_grad && tape->grad_enabled();
    if (n->requires_grad) {
        n->backward = std::move(bw);
        tape->record(n);
    }
    return ValueT<T>{std::move(n)};
}

template <typename T>
void accum(const ValueT<T>& p, const T* g, size_t count) {
    NodeT<T>* n = p.node.get();
    if (!n->requires_grad) return;
    n->ensure_grad();
    T* dst = n->grad.data.data();
    for (size_t i = 0; i < count; ++i) dst[i] += g[i];
}

template <typename T>
void check_same_shape(const ValueT<T>& a, const ValueT<T>& b, const char* op) {
    if (a.val().shape != b.val().shape)
        throw ShapeError(std::string(op) + ": " + shape_str(a.val().shape) + " vs " +
                         shape_str(b.val().shape));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and broadcast arithmetic.
// ---------------------------------------------------------------------------

template <typename T>
ValueT<T> add(const ValueT<T>& a, const ValueT<T>& b) {
    detail::check_same_shape(a, b, "add");
    TensorT<T> out(a.val().shape);
    for (int64_t i = 0; i < out.numel(); ++i) out.at(i) = a.val().at(i) + b.val().at(i);
    bool req = a.requires_grad() || b.requires_grad();
    return detail::make_op<T>(a.tape(), std::move(out), req, [a, b](NodeT<T>* self) {
        detail::accum(a, self->grad.data.data(), self->grad.data.size());
        detail::accum(b, self->grad.data.data(), self->grad.data.size());
    });
}

template <typename T>
ValueT<T> sub(const ValueT<T>& a, const ValueT<T>& b) {
    detail::check_same_shape(a, b, "sub");
    TensorT<T> out(a.val().shape);
    for (int64_t i = 0; i < out.numel(); ++i) out.at(i) = a.val().at(i) - b.val().at(i);
    bool req = a.requires_grad() || b.requires_grad();
    return detail::make_op<T>(a.tape(), std::move(out), req, [a, b](NodeT<T>* self) {
        detail::accum(a, self->grad.data.data(), self->grad.data.size());
        if (b.requires_grad()) {
            b.node->ensure_grad();
            for (size_t i = 0; i < self->grad.data.size(); ++i)
                b.node->grad.data[i] -= self->grad.data[i];
        }
    });
}

template <typename T>
ValueT<T> mul(const ValueT<T>& a, const ValueT<T>& b) {
    detail::check_same_shape(a, b, "mul");
    TensorT<T> out(a.val().shape);
    for (int64_t i = 0; i < out.numel(); ++i) out.at(i) = a.val().at(i) * b.val().at(i);
    bool req = a.requires_grad() || b.requires_grad();
    return detail::make_op<T>(a.tape(), std::move(out), req, [a, b](NodeT<T>* self) {
        if (a.requires_grad()) {
            a.node->ensure_grad();
            for (size_t i = 0; i < self->grad.data.size(); ++i)
                a.node->grad.data[i] += self->grad.data[i] * b.val().data[i];
        }
        if (b.requires_grad()) {
            b.node->ensure_grad();
            for (size_t i = 0; i < self->grad.data.size(); ++i)
                b.node->grad.data[i] += self->grad.data[i] * a.val().data[i];
        }
    });
}

template <typename T>
ValueT<T> scale(const ValueT<T>& a, T c) {
    TensorT<T> out(a.val().shape);
    for (int64_t i = 0; i < out.numel(); ++i) out.at(i) = a.val().at(i) * c;
    return detail::make_op<T>(a.tape(), std::move(out), a.requires_grad(), [a, c](NodeT<T>* self) {
        if (!a.requires_grad()) return;
        a.node->ensure_grad();
        for (size_t i = 0; i < self->grad.data.size(); ++i)
            a.node->grad.data[i] += self->grad.data[i] * c;
    });
}

template <typename T>
ValueT<T> add_scalar(const ValueT<T>& a, T c) {
    TensorT<T> out(a.val().shape);
    for (int64_t i = 0; i < out.numel(); ++i) out.at(i) = a.val().at(i) + c;
    return detail::make_op<T>(a.tape(), std::move(out), a.requires_grad(), [a](NodeT<T>* self) {
        detail::accum(a, self->grad.data.data(), self->grad.data.size());
    });
}

// x (n, d) + v (1, d), broadcast over rows.
template <typename T>
ValueT<T> add_rowvec(const ValueT<T>& x, const ValueT<T>& v) {
    const int64_t n = x.rows(), d = x.cols();
    if (v.val().numel() != d)
        throw ShapeError("add_rowvec: " + shape_str(x.val().shape) + " vs " +
                         shape_str(v.val().shape));
    TensorT<T> out(x.val().shape);
    for (int64_t r = 0; r < n; ++r)
        for (int64_t c = 0; c < d; ++c) out.at(r * d + c) = x.val().at(r * d + c) + v.val().at(c);
    bool req = x.requires_grad() || v.requires_grad();
    return detail::make_op<T>(x.tape(), std::move(out), req, [x, v, n, d](NodeT<T>* self) {
        detail::accum(x, self->grad.data.data(), self->grad.data.size());
        if (v.requires_grad()) {
            v.node->ensure_grad();
            for (int64_t r = 0; r < n; ++r)
                for (int64_t c = 0; c < d; ++c) v.node->grad.data[c] += self->grad.at(r * d + c);
        }
    });
}

// x (n, d) * v (1, d), broadcast over rows.
template <typename T>
ValueT<T> mul_rowvec(const ValueT<T>& x, const ValueT<T>& v) {
    const int64_t n = x.rows(), d = x.cols();
    if (v.val().numel() != d)
        throw ShapeError("mul_rowvec: " + shape_str(x.val().shape) + " vs " +
                         shape_str(v.val().shape));
    TensorT<T> out(x.val().shape);
    for (int64_t r = 0; r < n; ++r)
        for (int64_t c = 0; c < d; ++c) out.at(r * d + c) = x.val().at(r * d + c) * v.val().at(c);
    bool req = x.requires_grad() || v.requires_grad();
    return detail::make_op<T>(x.tape(), std::move(out), req, [x, v, n, d](NodeT<T>* self) {
        if (x.requires_grad()) {
            x.node->ensure_grad();
            for (int64_t r = 0; r < n; ++r)
                for (int64_t c = 0; c < d; ++c)
                    x.node->grad.data[r * d + c] += self->grad.at(r * d + c) * v.val().at(c);
        }
        if (v.requires_grad()) {
            v.node->ensure_grad();
            for (int64_t r = 0; r < n; ++r)
                for (int64_t c = 0; c < d; ++c)
                    v.node->grad.data[c] += self->grad.at(r * d + c) * x.val().at(r * d + c);
        }
    });
}

// ---------------------------------------------------------------------------
// Matrix multiply.
// ---------------------------------------------------------------------------

template <typename T>
ValueT<T> matmul(const ValueT<T>& a, const ValueT<T>& b, bool ta = false, bool tb = false) {
    const int64_t m = ta ? a.cols() : a.rows();
    const int64_t n = tb ? b.rows() : b.cols();
    TensorT<T> out({m, n});
    gemm(out, a.val(), ta, b.val(), tb, false);
    bool req = a.requires_grad() || b.requires_grad();
    return detail::make_op<T>(a.tape(), std::move(out), req, [a, b, ta, tb](NodeT<T>* self) {
        const TensorT<T>& dc = self->grad;
        if (a.requires_grad()) {
            a.node->ensure_grad();
            if (!ta && !tb) gemm(a.node->grad, dc, false, b.val(), true, true);
            else if (!ta && tb) gemm(a.node->grad, dc, false, b.val(), false, true);
            else if (ta && !tb) gemm(a.node->grad, b.val(), false, dc, true, true);
            else gemm(a.node->grad, b.val(), true, dc, true, true);
        }
        if (b.requires_grad()) {
            b.node->ensure_grad();
            if (!ta && !tb) gemm(b.node->grad, a.val(), true, dc, false, true);
            else if (!ta && tb) gemm(b.node->grad, dc, true, a.val(), false, true);
            else if (ta && !tb) gemm(b.node->grad, a.val(), false, dc, false, true);
            else gemm(b.node->grad, dc, true, a.val(), true, true);
        }
    });
}

// ---------------------------------------------------------------------------
// Activations.
// ---------------------------------------------------------------------------

// GELU in its exact erf form. Smooth everywhere, which keeps central finite
// differences well conditioned in the gradient-check suite.
template <typename T>
ValueT<T> gelu(const ValueT<T>& x) {
    TensorT<T> out(x.val().shape);
    for (int64_t i = 0; i < out.numel(); ++i) {
        double v = static_cast<double>(x.val().at(i));
        out.at(i) = static_cast<T>(0.5 * v * (1.0 + std::erf(v / 1.4142135623730951)));
    }
    return detail::make_op<T>(x.tape(), std::move(out), x.requires_grad(), [x](NodeT<T>* self) {
        if (!x.requires_grad()) return;
        x.node->ensure_grad();
        for (size_t i = 0; i < self->grad.data.size(); ++i) {
            double v = static_cast<double>(x.val().data[i]);
            double cdf = 0.5 * (1.0 + std::erf(v / 1.4142135623730951));
            double pdf = std::exp(-0.5 * v * v) / 2.5066282746310002;
            x.node->grad.data[i] += self->grad.data[i] * static_cast<T>(cdf + v * pdf);
        }
    });
}

template <typename T>
ValueT<T> sigmoid(const ValueT<T>& x) {
    TensorT<T> out(x.val().shape);
    for (int64_t i = 0; i < out.numel(); ++i) {
        double v = static_cast<double>(x.val().at(i));
        double s = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
        out.at(i) = static_cast<T>(s);
    }
    return detail::make_op<T>(x.tape(), std::move(out), x.requires_grad(), [x](NodeT<T>* self) {
        if (!x.requires_grad()) return;
        x.node->ensure_grad();
        for (size_t i = 0; i < self->grad.data.size(); ++i) {
            T s = self->val.data[i];
            x.node->grad.data[i] += self->grad.data[i] * s * (T(1) - s);
        }
    });
}

template <typename T>
ValueT<T> exp_op(const ValueT<T>& x) {
    TensorT<T> out(x.val().shape);
    for (int64_t i = 0; i < out.numel(); ++i) out.at(i) = std::exp(x.val().at(i));
    return detail::make_op<T>(x.tape(), std::move(out), x.requires_grad(), [x](NodeT<T>* self) {
        if (!x.requires_grad()) return;
        x.node->ensure_grad();
        for (size_t i = 0; i < self->grad.data.size(); ++i)
            x.node->grad.data[i] += self->grad.data[i] * self->val.data[i];
    });
}

// Row-wise softmax with the usual max-subtraction for stability. Masking is
// done upstream by adding a large negative constant to excluded logits.
template <typename T>
ValueT<T> softmax_rows(const ValueT<T>& x) {
    const int64_t n = x.rows(), d = x.cols();
    TensorT<T> out(x.val().shape);
    for (int64_t r = 0; r < n; ++r) {
        T mx = x.val().at(r * d);
        for (int64_t c = 1; c < d; ++c) mx = std::max(mx, x.val().at(r * d + c));
        T sum = T(0);
        for (int64_t c = 0; c < d; ++c) {
            T e = std::exp(x.val().at(r * d + c) - mx);
            out.at(r * d + c) = e;
            sum += e;
        }
        for (int64_t c = 0; c < d; ++c) out.at(r * d + c) /= sum;
    }
    return detail::make_op<T>(x.tape(), std::move(out), x.requires_grad(), [x, n, d](NodeT<T>* self) {
        if (!x.requires_grad()) return;
        x.node->ensure_grad();
        for (int64_t r = 0; r < n; ++r) {
            T dot = T(0);
            for (int64_t c = 0; c < d; ++c)
                dot += self->grad.at(r * d + c) * self->val.at(r * d + c);
            for (int64_t c = 0; c < d; ++c)
                x.node->grad.data[r * d + c] +=
                    self->val.at(r * d + c) * (self->grad.at(r * d + c) - dot);
        }
    });
}

// Per-row layer normalization: y = gamma * (x - mean) / sqrt(var + eps) + beta.
template <typename T>
ValueT<T> layernorm(const ValueT<T>& x, const ValueT<T>& gamma, const ValueT<T>& beta, T eps) {
    const int64_t n = x.rows(), d = x.cols();
    if (gamma.val().numel() != d || beta.val().numel() != d)
        throw ShapeError("layernorm affine params must have width " + std::to_string(d));
    TensorT<T> out(x.val().shape);
    TensorT<T> xhat({n, d});
    TensorT<T> inv_std({n, 1});
    for (int64_t r = 0; r < n; ++r) {
        T mean = T(0);
        for (int64_t c = 0; c < d; ++c) mean += x.val().at(r * d + c);
        mean /= static_cast<T>(d);
        T var = T(0);
        for (int64_t c = 0; c < d; ++c) {
            T dv = x.val().at(r * d + c) - mean;
            var += dv * dv;
        }
        var /= static_cast<T>(d);
        T is = T(1) / std::sqrt(var + eps);
        inv_std.at(r) = is;
        for (int64_t c = 0; c < d; ++c) {
            T xh = (x.val().at(r * d + c) - mean) * is;
            xhat.at(r * d + c) = xh;
            out.at(r * d + c) = gamma.val().at(c) * xh + beta.val().at(c);
        }
    }
    bool req = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    return detail::make_op<T>(
        x.tape(), std::move(out), req,
        [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), n,
         d](NodeT<T>* self) {
            if (beta.requires_grad()) {
                beta.node->ensure_grad();
                for (int64_t r = 0; r < n; ++r)
                    for (int64_t c = 0; c < d; ++c)
                        beta.node->grad.data[c] += self->grad.at(r * d + c);
            }
            if (gamma.requires_grad()) {
                gamma.node->ensure_grad();
                for (int64_t r = 0; r < n; ++r)
                    for (int64_t c = 0; c < d; ++c)
                        gamma.node->grad.data[c] += self->grad.at(r * d + c) * xhat.at(r * d + c);
            }
            if (x.requires_grad()) {
                x.node->ensure_grad();
                for (int64_t r = 0; r < n; ++r) {
                    T mean_g = T(0), mean_gx = T(0);
                    for (int64_t c = 0; c < d; ++c) {
                        T g = self->grad.at(r * d + c) * gamma.val().at(c);
                        mean_g += g;
                        mean_gx += g * xhat.at(r * d + c);
                    }
                    mean_g /= static_cast<T>(d);
                    mean_gx /= static_cast<T>(d);
                    for (int64_t c = 0; c < d; ++c) {
                        T g = self->grad.at(r * d + c) * gamma.val().at(c);
                        x.node->grad.data[r * d + c] +=
                            (g - mean_g - xhat.at(r * d + c) * mean_gx) * inv_std.at(r);
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Reductions and losses.
// ---------------------------------------------------------------------------

template <typename T>
ValueT<T> sum_all(const ValueT<T>& x) {
    TensorT<T> out({1, 1});
    T s = T(0);
    for (int64_t i = 0; i < x.val().numel(); ++i) s += x.val().at(i);
    out.at(0) = s;
    return detail::make_op<T>(x.tape(), std::move(out), x.requires_grad(), [x](NodeT<T>* self) {
        if (!x.requires_grad()) return;
        x.node->ensure_grad();
        T g = self->grad.at(0);
        for (auto& v : x.node->grad.data) v += g;
    });
}

template <typename T>
ValueT<T> mean_all(const ValueT<T>& x) {
    const T inv = T(1) / static_cast<T>(x.val().numel());
    return scale(sum_all(x), inv);
}

// Weighted sum of rows: out (1, d) = sum_i w[i] * x[i, :]. Weights are plain
// constants.
template <typename T>
ValueT<T> weighted_row_sum(const ValueT<T>& x, std::vector<T> w) {
    const int64_t n = x.rows(), d = x.cols();
    if (static_cast<int64_t>(w.size()) != n)
        throw ShapeError("weighted_row_sum weight count " + std::to_string(w.size()));
    TensorT<T> out({1, d});
    for (int64_t r = 0; r < n; ++r)
        for (int64_t c = 0; c < d; ++c) out.at(c) += w[static_cast<size_t>(r)] * x.val().at(r * d + c);
    return detail::make_op<T>(x.tape(), std::move(out), x.requires_grad(),
                              [x, w = std::move(w), n, d](NodeT<T>* self) {
                                  if (!x.requires_grad()) return;
                                  x.node->ensure_grad();
                                  for (int64_t r = 0; r < n; ++r)
                                      for (int64_t c = 0; c < d; ++c)
                                          x.node->grad.data[r * d + c] +=
                                              w[static_cast<size_t>(r)] * self->grad.at(c);
                              });
}

// Numerically stable binary cross entropy with logits, summed with per-element
// constant weights: sum_i w_i * (max(x_i,0) - x_i*t_i + log(1 + exp(-|x_i|))).
template <typename T>
ValueT<T> bce_logits_wsum(const ValueT<T>& logits, TensorT<T> targets, TensorT<T> weights) {
    if (targets.shape != logits.val().shape || weights.shape != logits.val().shape)
        throw ShapeError("bce_logits_wsum shape mismatch");
    TensorT<T> out({1, 1});
    T s = T(0);
    for (int64_t i = 0; i < logits.val().numel(); ++i) {
        T x = logits.val().at(i);
        T t = targets.at(i);
        T loss = std::max(x, T(0)) - x * t + std::log1p(std::exp(-std::abs(x)));
        s += weights.at(i) * loss;
    }
    out.at(0) = s;
    return detail::make_op<T>(
        logits.tape(), std::move(out), logits.requires_grad(),
        [logits, targets = std::move(targets), weights = std::move(weights)](NodeT<T>* self) {
            if (!logits.requires_grad()) return;
            logits.node->ensure_grad();
            T g = self->grad.at(0);
            for (int64_t i = 0; i < logits.val().numel(); ++i) {
                double x = static_cast<double>(logits.val().at(i));
                double sg = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
                logits.node->grad.data[i] +=
                    g * weights.at(i) * (static_cast<T>(sg) - targets.at(i));
            }
        });
}

// Smooth L1 (Huber with delta 1), summed with per-element constant weights.
template <typename T>
ValueT<T> smooth_l1_wsum(const ValueT<T>& pred, TensorT<T> target, TensorT<T> weights) {
    if (target.shape != pred.val().shape || weights.shape != pred.val().shape)
        throw ShapeError("smooth_l1_wsum shape mismatch");
    TensorT<T> out({1, 1});
    T s = T(0);
    for (int64_t i = 0; i < pred.val().numel(); ++i) {
        T d = pred.val().at(i) - target.at(i);
        T a = std::abs(d);
        s += weights.at(i) * (a < T(1) ? T(0.5) * d * d : a - T(0.5));
    }
    out.at(0) = s;
    return detail::make_op<T>(
        pred.tape(), std::move(out), pred.requires_grad(),
        [pred, target = std::move(target), weights = std::move(weights)](NodeT<T>* self) {
            if (!pred.requires_grad()) return;
            pred.node->ensure_grad();
            T g = self->grad.at(0);
            for (int64_t i = 0; i < pred.val().numel(); ++i) {
                T d = pred.val().at(i) - target.at(i);
                T dd = d < T(-1) ? T(-1) : (d > T(1) ? T(1) : d);
                pred.node->grad.data[i] += g * weights.at(i) * dd;
            }
        });
}

// ---------------------------------------------------------------------------
// Shape manipulation.
// ---------------------------------------------------------------------------

template <typename T>
ValueT<T> reshape(const ValueT<T>& x, std::vector<int64_t> new_shape) {
    if (TensorT<T>::numel_of(new_shape) != x.val().numel())
        throw ShapeError("reshape " + shape_str(x.val().shape) + " -> " + shape_str(new_shape));
    TensorT<T> out(std::move(new_shape), x.val().data);
    return detail::make_op<T>(x.tape(), std::move(out), x.requires_grad(), [x](NodeT<T>* self) {
        detail::accum(x, self->grad.data.data(), self->grad.data.size());
    });
}

template <typename T>
ValueT<T> concat_rows(const std::vector<ValueT<T>>& xs) {
    if (xs.empty()) throw ShapeError("concat_rows of nothing");
    const int64_t d = xs[0].cols();
    int64_t n = 0;
    bool req = false;
    for (const auto& v : xs) {
        if (v.cols() != d) throw ShapeError("concat_rows width mismatch");
        n += v.rows();
        req = req || v.requires_grad();
    }
    TensorT<T> out({n, d});
    int64_t r0 = 0;
    for (const auto& v : xs) {
        std::copy(v.val().data.begin(), v.val().data.end(), out.data.begin() + r0 * d);
        r0 += v.rows();
    }
    return detail::make_op<T>(xs[0].tape(), std::move(out), req, [xs, d](NodeT<T>* self) {
        int64_t r0 = 0;
        for (const auto& v : xs) {
            detail::accum(v, self->grad.data.data() + r0 * d, static_cast<size_t>(v.rows() * d));
            r0 += v.rows();
        }
    });
}

template <typename T>
ValueT<T> slice_rows(const ValueT<T>& x, int64_t start, int64_t count) {
    const int64_t n = x.rows(), d = x.cols();
    if (start < 0 || count < 0 || start + count > n)
        throw ShapeError("slice_rows out of range");
    TensorT<T> out({count, d});
    std::copy(x.val().data.begin() + start * d, x.val().data.begin() + (start + count) * d,
              out.data.begin());
    return detail::make_op<T>(x.tape(), std::move(out), x.requires_grad(),
                              [x, start, count, d](NodeT<T>* self) {
                                  if (!x.requires_grad()) return;
                                  x.node->ensure_grad();
                                  for (int64_t i = 0; i < count * d; ++i)
                                      x.node->grad.data[start * d + i] += self->grad.at(i);
                              });
}

template <typename T>
ValueT<T> concat_cols(const std::vector<ValueT<T>>& xs) {
    if (xs.empty()) throw ShapeError("concat_cols of nothing");
    const int64_t n = xs[0].rows();
    int64_t d = 0;
    bool req = false;
    for (const auto& v : xs) {
        if (v.rows() != n) throw ShapeError("concat_cols height mismatch");
        d += v.cols();
        req = req || v.requires_grad();
    }
    TensorT<T> out({n, d});
    int64_t c0 = 0;
    for (const auto& v : xs) {
        const int64_t vc = v.cols();
        for (int64_t r = 0; r < n; ++r)
            std::copy(v.val().data.begin() + r * vc, v.val().data.begin() + (r + 1) * vc,
                      out.data.begin() + r * d + c0);
        c0 += vc;
    }
    return detail::make_op<T>(xs[0].tape(), std::move(out), req, [xs, n, d](NodeT<T>* self) {
        int64_t c0 = 0;
        for (const auto& v : xs) {
            const int64_t vc = v.cols();
            if (v.requires_grad()) {
                v.node->ensure_grad();
                for (int64_t r = 0; r < n; ++r)
                    for (int64_t c = 0; c < vc; ++c)
                        v.node->grad.data[r * vc + c] += self->grad.at(r * d + c0 + c);
            }
            c0 += vc;
        }
    });
}

template <typename T>
ValueT<T> slice_cols(const ValueT<T>& x, int64_t start, int64_t count) {
    const int64_t n = x.rows(), d = x.cols();
    if (start < 0 || count < 0 || start + count > d)
        throw ShapeError("slice_cols out of range");
    TensorT<T> out({n, count});
    for (int64_t r = 0; r < n; ++r)
        std::copy(x.val().data.begin() + r * d + start, x.val().data.begin() + r * d + start + count,
                  out.data.begin() + r * count);
    return detail::make_op<T>(x.tape(), std::move(out), x.requires_grad(),
                              [x, start, count, n, d](NodeT<T>* self) {
                                  if (!x.requires_grad()) return;
                                  x.node->ensure_grad();
                                  for (int64_t r = 0; r < n; ++r)
                                      for (int64_t c = 0; c < count; ++c)
                                          x.node->grad.data[r * d + start + c] +=
                                              self->grad.at(r * count + c);
                              });
}

// Channel slice of a {C, H, W} tensor. Channels are contiguous in row-major
// layout, so this is a flat range copy with reshaped metadata.
template <typename T>
ValueT<T> slice_channels(const ValueT<T>& x, int64_t start, int64_t count) {
    if (x.val().shape.size() != 3) throw ShapeError("slice_channels expects {C,H,W}");
    const int64_t C = x.val().shape[0], H = x.val().shape[1], W = x.val().shape[2];
    if (start < 0 || count < 0 || start + count > C) throw ShapeError("slice_channels range");
    const int64_t hw = H * W;
    TensorT<T> out({count, H, W});
    std::copy(x.val().data.begin() + start * hw, x.val().data.begin() + (start + count) * hw,
              out.data.begin());
    return detail::make_op<T>(x.tape(), std::move(out), x.requires_grad(),
                              [x, start, count, hw](NodeT<T>* self) {
                                  if (!x.requires_grad()) return;
                                  x.node->ensure_grad();
                                  for (int64_t i = 0; i < count * hw; ++i)
                                      x.node->grad.data[start * hw + i] += self->grad.at(i);
                              });
}

// ---------------------------------------------------------------------------
// Embedding lookup.
// ---------------------------------------------------------------------------

template <typename T>
ValueT<T> embedding(const ValueT<T>& table, const std::vector<int>& ids) {
    const int64_t v = table.rows(), d = table.cols();
    TensorT<T> out({static_cast<int64_t>(ids.size()), d});
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= v)
            throw ShapeError("embedding id " + std::to_string(ids[i]) + " out of range");
        std::copy(table.val().data.begin() + ids[i] * d, table.val().data.begin() + (ids[i] + 1) * d,
                  out.data.begin() + static_cast<int64_t>(i) * d);
    }
    return detail::make_op<T>(table.tape(), std::move(out), table.requires_grad(),
                              [table, ids, d](NodeT<T>* self) {
                                  if (!table.requires_grad()) return;
                                  table.node->ensure_grad();
                                  for (size_t i = 0; i < ids.size(); ++i)
                                      for (int64_t c = 0; c < d; ++c)
                                          table.node->grad.data[ids[i] * d + c] +=
                                              self->grad.at(static_cast<int64_t>(i) * d + c);
                              });
}

// ---------------------------------------------------------------------------
// Spatial ops on {C, H, W} tensors.
// ---------------------------------------------------------------------------

namespace detail {

// Unfolds x {Cin, H, W} into cols (Cin*k*k, Hout*Wout) for a k x k kernel.
template <typename T>
void im2col(const TensorT<T>& x, int64_t k, int64_t stride, int64_t pad, int64_t hout,
            int64_t wout, TensorT<T>& cols) {
    const int64_t cin = x.shape[0], h = x.shape[1], w = x.shape[2];
    const int64_t width = hout * wout;
    for (int64_t c = 0; c < cin; ++c)
        for (int64_t ki = 0; ki < k; ++ki)
            for (int64_t kj = 0; kj < k; ++kj) {
                const int64_t row = (c * k + ki) * k + kj;
                for (int64_t oy = 0; oy < hout; ++oy) {
                    const int64_t iy = oy * stride + ki - pad;
                    for (int64_t ox = 0; ox < wout; ++ox) {
                        const int64_t ix = ox * stride + kj - pad;
                        T v = T(0);
                        if (iy >= 0 && iy < h && ix >= 0 && ix < w)
                            v = x.data[static_cast<size_t>((c * h + iy) * w + ix)];
                        cols.data[static_cast<size_t>(row * width + oy * wout + ox)] = v;
                    }
                }
            }
}

// Scatter-add of cols back into dx {Cin, H, W}.
template <typename T>
void col2im(const TensorT<T>& cols, int64_t k, int64_t stride, int64_t pad, int64_t hout,
            int64_t wout, TensorT<T>& dx) {
    const int64_t cin = dx.shape[0], h = dx.shape[1], w = dx.shape[2];
    const int64_t width = hout * wout;
    for (int64_t c = 0; c < cin; ++c)
        for (int64_t ki = 0; ki < k; ++ki)
            for (int64_t kj = 0; kj < k; ++kj) {
                const int64_t row = (c * k + ki) * k + kj;
                for (int64_t oy = 0; oy < hout; ++oy) {
                    const int64_t iy = oy * stride + ki - pad;
                    if (iy < 0 || iy >= h) continue;
                    for (int64_t ox = 0; ox < wout; ++ox) {
                        const int64_t ix = ox * stride + kj - pad;
                        if (ix < 0 || ix >= w) continue;
                        dx.data[static_cast<size_t>((c * h + iy) * w + ix)] +=
                            cols.data[static_cast<size_t>(row * width + oy * wout + ox)];
                    }
                }
            }
}

}  // namespace detail

// 2-D convolution via im2col + GEMM. x is {Cin, H, W}; w is (Cout, Cin*k*k);
// b is (1, Cout). Output is {Cout, Hout, Wout}.
template <typename T>
ValueT<T> conv2d(const ValueT<T>& x, const ValueT<T>& w, const ValueT<T>& b, int64_t k,
                 int64_t stride, int64_t pad) {
    if (x.val().shape.size() != 3) throw ShapeError("conv2d input must be {C,H,W}");
    const int64_t cin = x.val().shape[0], h = x.val().shape[1], wd = x.val().shape[2];
    const int64_t cout = w.rows();
    if (w.cols() != cin * k * k)
        throw ShapeError("conv2d weight " + shape_str(w.val().shape) + " for cin " +
                         std::to_string(cin) + " k " + std::to_string(k));
    if (b.val().numel() != cout) throw ShapeError("conv2d bias size");
    const int64_t hout = (h + 2 * pad - k) / stride + 1;
    const int64_t wout = (wd + 2 * pad - k) / stride + 1;
    if (hout <= 0 || wout <= 0) throw ShapeError("conv2d empty output");

    TensorT<T> cols({cin * k * k, hout * wout});
    detail::im2col(x.val(), k, stride, pad, hout, wout, cols);
    TensorT<T> y2d({cout, hout * wout});
    gemm(y2d, w.val(), false, cols, false, false);
    for (int64_t c = 0; c < cout; ++c) {
        const T bias = b.val().at(c);
        for (int64_t i = 0; i < hout * wout; ++i) y2d.at(c * hout * wout + i) += bias;
    }
    y2d.shape = {cout, hout, wout};

    bool req = x.requires_grad() || w.requires_grad() || b.requires_grad();
    std::function<void(NodeT<T>*)> bw;
    if (req) {
        bw = [x, w, b, cols = std::move(cols), k, stride, pad, hout, wout, cout](NodeT<T>* self) {
            TensorT<T> dy = self->grad;
            dy.shape = {cout, hout * wout};
            if (b.requires_grad()) {
                b.node->ensure_grad();
                for (int64_t c = 0; c < cout; ++c) {
                    T s = T(0);
                    for (int64_t i = 0; i < hout * wout; ++i) s += dy.at(c * hout * wout + i);
                    b.node->grad.data[c] += s;
                }
            }
            if (w.requires_grad()) {
                w.node->ensure_grad();
                gemm(w.node->grad, dy, false, cols, true, true);
            }
            if (x.requires_grad()) {
                x.node->ensure_grad();
                TensorT<T> dcols({cols.shape[0], cols.shape[1]});
                gemm(dcols, w.val(), true, dy, false, false);
                detail::col2im(dcols, k, stride, pad, hout, wout, x.node->grad);
            }
        };
    }
    return detail::make_op<T>(x.tape(), std::move(y2d), req, std::move(bw));
}

// Nearest-neighbour 2x upsample of a {C, H, W} tensor.
template <typename T>
ValueT<T> upsample_nearest2(const ValueT<T>& x) {
    if (x.val().shape.size() != 3) throw ShapeError("upsample_nearest2 expects {C,H,W}");
    const int64_t c = x.val().shape[0], h = x.val().shape[1], w = x.val().shape[2];
    TensorT<T> out({c, 2 * h, 2 * w});
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t y = 0; y < 2 * h; ++y)
            for (int64_t xx = 0; xx < 2 * w; ++xx)
                out.at((ch * 2 * h + y) * 2 * w + xx) = x.val().at((ch * h + y / 2) * w + xx / 2);
    return detail::make_op<T>(x.tape(), std::move(out), x.requires_grad(),
                              [x, c, h, w](NodeT<T>* self) {
                                  if (!x.requires_grad()) return;
                                  x.node->ensure_grad();
                                  for (int64_t ch = 0; ch < c; ++ch)
                                      for (int64_t y = 0; y < 2 * h; ++y)
                                          for (int64_t xx = 0; xx < 2 * w; ++xx)
                                              x.node->grad.data[(ch * h + y / 2) * w + xx / 2] +=
                                                  self->grad.at((ch * 2 * h + y) * 2 * w + xx);
                              });
}

// {C, H, W} -> ((H/p)*(W/p), C*p*p) token matrix, row r = patch (py, px) with
// py*(W/p)+px == r, features ordered channel-major then patch rows.
template <typename T>
ValueT<T> patchify(const ValueT<T>& x, int64_t p) {
    if (x.val().shape.size() != 3) throw ShapeError("patchify expects {C,H,W}");
    const int64_t c = x.val().shape[0], h = x.val().shape[1], w = x.val().shape[2];
    if (h % p || w % p) throw ShapeError("patchify size must divide image");
    const int64_t gh = h / p, gw = w / p, d = c * p * p;
    TensorT<T> out({gh * gw, d});
    for (int64_t py = 0; py < gh; ++py)
        for (int64_t px = 0; px < gw; ++px)
            for (int64_t ch = 0; ch < c; ++ch)
                for (int64_t iy = 0; iy < p; ++iy)
                    for (int64_t ix = 0; ix < p; ++ix)
                        out.at((py * gw + px) * d + (ch * p + iy) * p + ix) =
                            x.val().at((ch * h + py * p + iy) * w + px * p + ix);
    return detail::make_op<T>(
        x.tape(), std::move(out), x.requires_grad(), [x, p, c, h, w](NodeT<T>* self) {
            if (!x.requires_grad()) return;
            x.node->ensure_grad();
            const int64_t gh = h / p, gw = w / p, d = c * p * p;
            for (int64_t py = 0; py < gh; ++py)
                for (int64_t px = 0; px < gw; ++px)
                    for (int64_t ch = 0; ch < c; ++ch)
                        for (int64_t iy = 0; iy < p; ++iy)
                            for (int64_t ix = 0; ix < p; ++ix)
                                x.node->grad.data[(ch * h + py * p + iy) * w + px * p + ix] +=
                                    self->grad.at((py * gw + px) * d + (ch * p + iy) * p + ix);
        });
}

// Inverse of patchify: ((H/p)*(W/p), C*p*p) -> {C, H, W}.
template <typename T>
ValueT<T> unpatchify(const ValueT<T>& x, int64_t c, int64_t h, int64_t w, int64_t p) {
    const int64_t gh = h / p, gw = w / p, d = c * p * p;
    if (x.rows() != gh * gw || x.cols() != d)
        throw ShapeError("unpatchify input " + shape_str(x.val().shape));
    TensorT<T> out({c, h, w});
    for (int64_t py = 0; py < gh; ++py)
        for (int64_t px = 0; px < gw; ++px)
            for (int64_t ch = 0; ch < c; ++ch)
                for (int64_t iy = 0; iy < p; ++iy)
                    for (int64_t ix = 0; ix < p; ++ix)
                        out.at((ch * h + py * p + iy) * w + px * p + ix) =
                            x.val().at((py * gw + px) * d + (ch * p + iy) * p + ix);
    return detail::make_op<T>(
        x.tape(), std::move(out), x.requires_grad(), [x, c, h, w, p](NodeT<T>* self) {
            if (!x.requires_grad()) return;
            x.node->ensure_grad();
            const int64_t gh = h / p, gw = w / p, d = c * p * p;
            for (int64_t py = 0; py < gh; ++py)
                for (int64_t px = 0; px < gw; ++px)
                    for (int64_t ch = 0; ch < c; ++ch)
                        for (int64_t iy = 0; iy < p; ++iy)
                            for (int64_t ix = 0; ix < p; ++ix)
                                x.node->grad.data[(py * gw + px) * d + (ch * p + iy) * p + ix] +=
                                    self->grad.at((ch * h + py * p + iy) * w + px * p + ix);
        });
}

// Constant copy that blocks gradient flow.
template <typename T>
ValueT<T> detach(const ValueT<T>& x) {
    return x.tape()->leaf(x.val(), false);
}

// Convenience compositions.
template <typename T>
ValueT<T> mse_loss(const ValueT<T>& pred, const TensorT<T>& target) {
    auto d = sub(pred, pred.tape()->leaf(target));
    return mean_all(mul(d, d));
}

template <typename T>
ValueT<T> sse_loss(const ValueT<T>& pred, const TensorT<T>& target) {
    auto d = sub(pred, pred.tape()->leaf(target));
    return sum_all(mul(d, d));
}

}  // namespace dp
