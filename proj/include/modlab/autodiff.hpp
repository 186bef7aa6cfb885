#pragma once

// Reverse-mode differentiation over a linear tape.
//
// Every primitive appends one node holding its forward value and a closure
// that maps the node's output gradient onto its operands.  Nodes are
// created in evaluation order, so walking the tape backwards is a valid
// topological order; each node is visited once and operand gradients
// accumulate with +=, which handles fan-out.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "modlab/error.hpp"
#include "modlab/random.hpp"
#include "modlab/tensor.hpp"

namespace modlab::ad {

/// A trainable array and its gradient accumulator.
template <class T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    /// False for layer-norm gains and biases, which AdamW does not decay.
    bool decay = true;

    void zero_grad() {
        if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
        else grad.fill(T(0));
    }
};

template <class T>
class Tape;

/// Handle to a node on a tape.
template <class T>
struct Var {
    Tape<T>* tape = nullptr;
    std::size_t id = 0;

    [[nodiscard]] const Tensor<T>& value() const { return tape->value(id); }
    [[nodiscard]] const Tensor<T>& grad() const { return tape->grad(id); }
    [[nodiscard]] bool requires_grad() const { return tape->requires_grad(id); }
};

template <class T>
class Tape {
public:
    using Backward = std::function<void(Tape&, std::size_t self)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Input that carries no gradient.
    Var<T> constant(Tensor<T> value) { return push(std::move(value), false, nullptr); }

    /// Leaf with its own gradient buffer (used for gradient checks).
    Var<T> input(Tensor<T> value) { return push(std::move(value), true, nullptr); }

    /// Leaf bound to a parameter: the value is read in place and the
    /// gradient accumulates directly into parameter.grad.
    Var<T> param(Parameter<T>& p) {
        if (p.grad.shape() != p.value.shape()) p.zero_grad();
        Node n;
        n.external = &p.value;
        n.param = &p;
        n.requires_grad = grad_enabled_;
        nodes_.push_back(std::move(n));
        return {this, nodes_.size() - 1};
    }

    Var<T> push(Tensor<T> value, bool requires_grad, Backward backward) {
        if (check_finite_ && !nonfinite_ && !value.all_finite()) {
            nonfinite_ = true;
            nonfinite_node_ = nodes_.size();
        }
        Node n;
        n.value = std::move(value);
        n.requires_grad = requires_grad && grad_enabled_;
        if (n.requires_grad) n.backward = std::move(backward);
        nodes_.push_back(std::move(n));
        return {this, nodes_.size() - 1};
    }

    [[nodiscard]] const Tensor<T>& value(std::size_t id) const {
        const Node& n = nodes_[id];
        return n.external ? *n.external : n.value;
    }

    [[nodiscard]] bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

    /// Gradient buffer of node id, allocated (zeroed) on first use.
    Tensor<T>& grad(std::size_t id) {
        Node& n = nodes_[id];
        if (n.param) return n.param->grad;
        if (n.grad.shape() != value(id).shape()) n.grad = Tensor<T>(value(id).shape());
        return n.grad;
    }
    [[nodiscard]] const Tensor<T>& grad(std::size_t id) const {
        const Node& n = nodes_[id];
        return n.param ? n.param->grad : n.grad;
    }

    /// Seeds d(root)/d(root) = 1 and runs every backward rule once, in
    /// reverse creation order.
    void backward(Var<T> root) {
        if (value(root.id).size() != 1) throw ShapeError("Tape::backward: root must be a scalar");
        if (!nodes_[root.id].requires_grad) return;
        grad(root.id).fill(T(1));
        for (std::size_t i = root.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.requires_grad || !n.backward) continue;
            if (n.grad.empty()) continue;  // never reached from root
            n.backward(*this, i);
        }
    }

    [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }

    /// True once any forward value was NaN or infinite.
    [[nodiscard]] bool nonfinite() const noexcept { return nonfinite_; }
    [[nodiscard]] std::size_t nonfinite_node() const noexcept { return nonfinite_node_; }
    void set_check_finite(bool on) noexcept { check_finite_ = on; }

    /// With gradients disabled no closures are stored (inference).
    void set_grad_enabled(bool on) noexcept { grad_enabled_ = on; }
    [[nodiscard]] bool grad_enabled() const noexcept { return grad_enabled_; }

private:
    struct Node {
        Tensor<T> value;
        const Tensor<T>* external = nullptr;
        Parameter<T>* param = nullptr;
        Tensor<T> grad;
        bool requires_grad = false;
        Backward backward;
    };

    std::vector<Node> nodes_;
    bool grad_enabled_ = true;
    bool check_finite_ = true;
    bool nonfinite_ = false;
    std::size_t nonfinite_node_ = 0;
};

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <class T>
MatMap<T> as_matrix(Tensor<T>& t) {
    return MatMap<T>(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
template <class T>
ConstMatMap<T> as_matrix(const Tensor<T>& t) {
    return ConstMatMap<T>(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

template <class T>
bool any_grad(std::initializer_list<Var<T>> vs) {
    for (const auto& v : vs)
        if (v.requires_grad()) return true;
    return false;
}

inline std::vector<std::size_t> matrix_shape(std::size_t rows, std::size_t cols) { return {rows, cols}; }

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitives

/// [m x k] . [k x n] -> [m x n]
template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
    const auto& av = a.value();
    const auto& bv = b.value();
    if (av.shape().size() != 2 || bv.shape().size() != 2 || av.cols() != bv.rows())
        throw ShapeError("matmul: " + av.shape_string() + " x " + bv.shape_string());
    Tensor<T> out(detail::matrix_shape(av.rows(), bv.cols()));
    detail::as_matrix(out).noalias() = detail::as_matrix(av) * detail::as_matrix(bv);
    const std::size_t ia = a.id, ib = b.id;
    return a.tape->push(std::move(out), detail::any_grad({a, b}), [ia, ib](Tape<T>& t, std::size_t self) {
        const auto g = detail::as_matrix(std::as_const(t).grad(self));
        if (t.requires_grad(ia))
            detail::as_matrix(t.grad(ia)).noalias() += g * detail::as_matrix(t.value(ib)).transpose();
        if (t.requires_grad(ib))
            detail::as_matrix(t.grad(ib)).noalias() += detail::as_matrix(t.value(ia)).transpose() * g;
    });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
    if (!same_shape(a.value(), b.value()))
        throw ShapeError("add: " + a.value().shape_string() + " vs " + b.value().shape_string());
    Tensor<T> out = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    const std::size_t ia = a.id, ib = b.id;
    return a.tape->push(std::move(out), detail::any_grad({a, b}), [ia, ib](Tape<T>& t, std::size_t self) {
        const auto& g = std::as_const(t).grad(self);
        for (std::size_t id : {ia, ib}) {
            if (!t.requires_grad(id)) continue;
            auto& d = t.grad(id);
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
        }
    });
}

/// Adds a length-n bias to every row of an [m x n] operand.
template <class T>
Var<T> add_bias(Var<T> x, Var<T> bias) {
    const auto& xv = x.value();
    const auto& bv = bias.value();
    if (bv.size() != xv.cols()) throw ShapeError("add_bias: bias " + bv.shape_string() + " for " + xv.shape_string());
    Tensor<T> out = xv;
    const std::size_t n = xv.cols();
    for (std::size_t r = 0; r < out.rows(); ++r)
        for (std::size_t c = 0; c < n; ++c) out[r * n + c] += bv[c];
    const std::size_t ix = x.id, ib = bias.id;
    return x.tape->push(std::move(out), detail::any_grad({x, bias}), [ix, ib, n](Tape<T>& t, std::size_t self) {
        const auto& g = std::as_const(t).grad(self);
        if (t.requires_grad(ix)) {
            auto& d = t.grad(ix);
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
        }
        if (t.requires_grad(ib)) {
            auto& d = t.grad(ib);
            const std::size_t rows = g.size() / n;
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < n; ++c) d[c] += g[r * n + c];
        }
    });
}

template <class T>
Var<T> scale(Var<T> x, T s) {
    Tensor<T> out = x.value();
    for (auto& v : out.values()) v *= s;
    const std::size_t ix = x.id;
    return x.tape->push(std::move(out), x.requires_grad(), [ix, s](Tape<T>& t, std::size_t self) {
        const auto& g = std::as_const(t).grad(self);
        auto& d = t.grad(ix);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += s * g[i];
    });
}

/// Sum of all elements, as a 1-element tensor.
template <class T>
Var<T> sum(Var<T> x) {
    T acc = 0;
    for (T v : x.value().values()) acc += v;
    const std::size_t ix = x.id;
    return x.tape->push(Tensor<T>::scalar(acc), x.requires_grad(), [ix](Tape<T>& t, std::size_t self) {
        const T g = std::as_const(t).grad(self)[0];
        for (auto& v : t.grad(ix).values()) v += g;
    });
}

/// x . w (+ b) with w stored [in x out].
template <class T>
Var<T> linear(Var<T> x, Var<T> w, std::optional<Var<T>> b = std::nullopt) {
    const auto& xv = x.value();
    const auto& wv = w.value();
    if (wv.shape().size() != 2 || xv.cols() != wv.rows())
        throw ShapeError("linear: input " + xv.shape_string() + " weight " + wv.shape_string());
    if (b && b->value().size() != wv.cols()) throw ShapeError("linear: bias " + b->value().shape_string());
    Tensor<T> out(detail::matrix_shape(xv.rows(), wv.cols()));
    auto om = detail::as_matrix(out);
    om.noalias() = detail::as_matrix(xv) * detail::as_matrix(wv);
    if (b) {
        const auto& bv = b->value();
        om.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bv.data(), static_cast<Eigen::Index>(bv.size()));
    }
    const std::size_t ix = x.id, iw = w.id;
    const std::optional<std::size_t> ib = b ? std::optional<std::size_t>(b->id) : std::nullopt;
    const bool rg = x.requires_grad() || w.requires_grad() || (b && b->requires_grad());
    return x.tape->push(std::move(out), rg, [ix, iw, ib](Tape<T>& t, std::size_t self) {
        const auto g = detail::as_matrix(std::as_const(t).grad(self));
        if (t.requires_grad(ix))
            detail::as_matrix(t.grad(ix)).noalias() += g * detail::as_matrix(t.value(iw)).transpose();
        if (t.requires_grad(iw))
            detail::as_matrix(t.grad(iw)).noalias() += detail::as_matrix(t.value(ix)).transpose() * g;
        if (ib && t.requires_grad(*ib)) {
            auto& d = t.grad(*ib);
            detail::MatMap<T>(d.data(), 1, static_cast<Eigen::Index>(d.size())) += g.colwise().sum();
        }
    });
}

/// Rows of table [V x d] selected by indices -> [len x d].
template <class T>
Var<T> embedding_lookup(Var<T> table, std::span<const std::int64_t> indices) {
    const auto& tv = table.value();
    const std::size_t d = tv.cols(), vocab = tv.rows();
    Tensor<T> out(detail::matrix_shape(indices.size(), d));
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const auto idx = indices[i];
        if (idx < 0 || static_cast<std::size_t>(idx) >= vocab)
            throw InvalidArgument("embedding_lookup: index " + std::to_string(idx) + " outside vocabulary of " +
                                  std::to_string(vocab));
        std::copy_n(tv.data() + idx * d, d, out.data() + i * d);
    }
    const std::size_t it = table.id;
    std::vector<std::int64_t> idx(indices.begin(), indices.end());
    return table.tape->push(std::move(out), table.requires_grad(),
                            [it, idx = std::move(idx), d](Tape<T>& t, std::size_t self) {
                                const auto& g = std::as_const(t).grad(self);
                                auto& dt = t.grad(it);
                                for (std::size_t i = 0; i < idx.size(); ++i)
                                    for (std::size_t c = 0; c < d; ++c) dt[idx[i] * d + c] += g[i * d + c];
                            });
}

/// Normalizes each row to zero mean and unit variance, then applies the
/// optional affine gain and bias.
template <class T>
Var<T> layer_norm(Var<T> x, std::optional<Var<T>> gain = std::nullopt, std::optional<Var<T>> bias = std::nullopt,
                  T eps = T(1e-5)) {
    const auto& xv = x.value();
    const std::size_t n = xv.cols(), rows = xv.rows();
    if (gain && gain->value().size() != n) throw ShapeError("layer_norm: gain size");
    if (bias && bias->value().size() != n) throw ShapeError("layer_norm: bias size");
    Tensor<T> xhat(xv.shape());
    std::vector<T> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* px = xv.data() + r * n;
        T mean = 0;
        for (std::size_t c = 0; c < n; ++c) mean += px[c];
        mean /= static_cast<T>(n);
        T var = 0;
        for (std::size_t c = 0; c < n; ++c) var += (px[c] - mean) * (px[c] - mean);
        var /= static_cast<T>(n);
        const T is = T(1) / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t c = 0; c < n; ++c) xhat[r * n + c] = (px[c] - mean) * is;
    }
    Tensor<T> out = xhat;
    if (gain || bias) {
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < n; ++c) {
                T& o = out[r * n + c];
                if (gain) o *= gain->value()[c];
                if (bias) o += bias->value()[c];
            }
    }
    const std::size_t ix = x.id;
    const std::optional<std::size_t> ig = gain ? std::optional<std::size_t>(gain->id) : std::nullopt;
    const std::optional<std::size_t> ib = bias ? std::optional<std::size_t>(bias->id) : std::nullopt;
    const bool rg = x.requires_grad() || (gain && gain->requires_grad()) || (bias && bias->requires_grad());
    return x.tape->push(
        std::move(out), rg,
        [ix, ig, ib, n, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& t, std::size_t self) {
            const auto& g = std::as_const(t).grad(self);
            if (ig && t.requires_grad(*ig)) {
                auto& dg = t.grad(*ig);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < n; ++c) dg[c] += g[r * n + c] * xhat[r * n + c];
            }
            if (ib && t.requires_grad(*ib)) {
                auto& db = t.grad(*ib);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < n; ++c) db[c] += g[r * n + c];
            }
            if (!t.requires_grad(ix)) return;
            const Tensor<T>* gainv = ig ? &t.value(*ig) : nullptr;
            auto& dx = t.grad(ix);
            std::vector<T> dxhat(n);
            for (std::size_t r = 0; r < rows; ++r) {
                T mean_d = 0, mean_dx = 0;
                for (std::size_t c = 0; c < n; ++c) {
                    dxhat[c] = g[r * n + c] * (gainv ? (*gainv)[c] : T(1));
                    mean_d += dxhat[c];
                    mean_dx += dxhat[c] * xhat[r * n + c];
                }
                mean_d /= static_cast<T>(n);
                mean_dx /= static_cast<T>(n);
                for (std::size_t c = 0; c < n; ++c)
                    dx[r * n + c] += inv_std[r] * (dxhat[c] - mean_d - xhat[r * n + c] * mean_dx);
            }
        });
}

namespace detail {

template <class T>
void softmax_row(const T* in, T* out, std::size_t n) {
    T mx = in[0];
    for (std::size_t c = 1; c < n; ++c) mx = std::max(mx, in[c]);
    T total = 0;
    for (std::size_t c = 0; c < n; ++c) {
        out[c] = std::exp(in[c] - mx);
        total += out[c];
    }
    for (std::size_t c = 0; c < n; ++c) out[c] /= total;
}

}  // namespace detail

/// Softmax along the last axis.
template <class T>
Var<T> softmax(Var<T> x) {
    const auto& xv = x.value();
    const std::size_t n = xv.cols();
    Tensor<T> out(xv.shape());
    for (std::size_t r = 0; r < xv.rows(); ++r) detail::softmax_row(xv.data() + r * n, out.data() + r * n, n);
    const std::size_t ix = x.id;
    return x.tape->push(std::move(out), x.requires_grad(), [ix, n](Tape<T>& t, std::size_t self) {
        const auto& g = std::as_const(t).grad(self);
        const auto& y = t.value(self);
        auto& dx = t.grad(ix);
        for (std::size_t r = 0; r < y.rows(); ++r) {
            T dot = 0;
            for (std::size_t c = 0; c < n; ++c) dot += g[r * n + c] * y[r * n + c];
            for (std::size_t c = 0; c < n; ++c) dx[r * n + c] += y[r * n + c] * (g[r * n + c] - dot);
        }
    });
}

/// Multi-head scaled dot-product attention without masking.
///
/// q, k, v are [batch*seq x d]; rows b*seq .. b*seq+seq-1 form sequence b and
/// columns h*d/heads .. (h+1)*d/heads-1 form head h.  Scores are scaled by
/// 1/sqrt(d/heads).
template <class T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, std::size_t batch, std::size_t seq, std::size_t heads) {
    const auto& qv = q.value();
    const auto& kv = k.value();
    const auto& vv = v.value();
    if (!same_shape(qv, kv) || !same_shape(qv, vv)) throw ShapeError("attention: q/k/v shapes differ");
    const std::size_t d = qv.cols();
    if (heads == 0 || d % heads != 0) throw ShapeError("attention: width not divisible by heads");
    if (qv.rows() != batch * seq) throw ShapeError("attention: rows != batch*seq");
    const std::size_t dh = d / heads;
    const T sc = T(1) / std::sqrt(static_cast<T>(dh));

    Tensor<T> out(qv.shape());
    Tensor<T> probs({batch, heads, seq, seq});
    std::vector<T> scores(seq);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h) {
            T* p = probs.data() + ((b * heads + h) * seq) * seq;
            for (std::size_t i = 0; i < seq; ++i) {
                const T* qi = qv.data() + (b * seq + i) * d + h * dh;
                for (std::size_t j = 0; j < seq; ++j) {
                    const T* kj = kv.data() + (b * seq + j) * d + h * dh;
                    T s = 0;
                    for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
                    scores[j] = s * sc;
                }
                detail::softmax_row(scores.data(), p + i * seq, seq);
                T* oi = out.data() + (b * seq + i) * d + h * dh;
                for (std::size_t j = 0; j < seq; ++j) {
                    const T pij = p[i * seq + j];
                    const T* vj = vv.data() + (b * seq + j) * d + h * dh;
                    for (std::size_t c = 0; c < dh; ++c) oi[c] += pij * vj[c];
                }
            }
        }

    const std::size_t iq = q.id, ik = k.id, iv = v.id;
    return q.tape->push(
        std::move(out), detail::any_grad({q, k, v}),
        [iq, ik, iv, batch, seq, heads, d, dh, sc, probs = std::move(probs)](Tape<T>& t, std::size_t self) {
            const auto& g = std::as_const(t).grad(self);
            const auto& qv = t.value(iq);
            const auto& kv = t.value(ik);
            const auto& vv = t.value(iv);
            Tensor<T>* dq = t.requires_grad(iq) ? &t.grad(iq) : nullptr;
            Tensor<T>* dk = t.requires_grad(ik) ? &t.grad(ik) : nullptr;
            Tensor<T>* dv = t.requires_grad(iv) ? &t.grad(iv) : nullptr;
            std::vector<T> dp(seq);
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t h = 0; h < heads; ++h) {
                    const T* p = probs.data() + ((b * heads + h) * seq) * seq;
                    for (std::size_t i = 0; i < seq; ++i) {
                        const T* gi = g.data() + (b * seq + i) * d + h * dh;
                        T dot = 0;
                        for (std::size_t j = 0; j < seq; ++j) {
                            const T* vj = vv.data() + (b * seq + j) * d + h * dh;
                            T s = 0;
                            for (std::size_t c = 0; c < dh; ++c) s += gi[c] * vj[c];
                            dp[j] = s;
                            dot += s * p[i * seq + j];
                            if (dv) {
                                T* dvj = dv->data() + (b * seq + j) * d + h * dh;
                                const T pij = p[i * seq + j];
                                for (std::size_t c = 0; c < dh; ++c) dvj[c] += pij * gi[c];
                            }
                        }
                        const T* qi = qv.data() + (b * seq + i) * d + h * dh;
                        for (std::size_t j = 0; j < seq; ++j) {
                            const T ds = p[i * seq + j] * (dp[j] - dot) * sc;
                            if (dq) {
                                T* dqi = dq->data() + (b * seq + i) * d + h * dh;
                                const T* kj = kv.data() + (b * seq + j) * d + h * dh;
                                for (std::size_t c = 0; c < dh; ++c) dqi[c] += ds * kj[c];
                            }
                            if (dk) {
                                T* dkj = dk->data() + (b * seq + j) * d + h * dh;
                                for (std::size_t c = 0; c < dh; ++c) dkj[c] += ds * qi[c];
                            }
                        }
                    }
                }
        });
}

/// GELU, tanh approximation.
template <class T>
Var<T> gelu(Var<T> x) {
    constexpr T kAlpha = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
    constexpr T kBeta = static_cast<T>(0.044715);
    const auto& xv = x.value();
    Tensor<T> out(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) {
        const T u = xv[i];
        out[i] = T(0.5) * u * (T(1) + std::tanh(kAlpha * (u + kBeta * u * u * u)));
    }
    const std::size_t ix = x.id;
    return x.tape->push(std::move(out), x.requires_grad(), [ix](Tape<T>& t, std::size_t self) {
        const auto& g = std::as_const(t).grad(self);
        const auto& xv = t.value(ix);
        auto& dx = t.grad(ix);
        for (std::size_t i = 0; i < xv.size(); ++i) {
            const T u = xv[i];
            const T th = std::tanh(kAlpha * (u + kBeta * u * u * u));
            const T dinner = kAlpha * (T(1) + T(3) * kBeta * u * u);
            dx[i] += g[i] * (T(0.5) * (T(1) + th) + T(0.5) * u * (T(1) - th * th) * dinner);
        }
    });
}

/// Mean over the sequence axis: [batch*seq x d] -> [batch x d].
template <class T>
Var<T> mean_pool(Var<T> x, std::size_t batch, std::size_t seq) {
    const auto& xv = x.value();
    const std::size_t d = xv.cols();
    if (xv.rows() != batch * seq) throw ShapeError("mean_pool: rows != batch*seq");
    Tensor<T> out(detail::matrix_shape(batch, d));
    const T inv = T(1) / static_cast<T>(seq);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t s = 0; s < seq; ++s)
            for (std::size_t c = 0; c < d; ++c) out[b * d + c] += xv[(b * seq + s) * d + c];
    for (auto& v : out.values()) v *= inv;
    const std::size_t ix = x.id;
    return x.tape->push(std::move(out), x.requires_grad(), [ix, batch, seq, d, inv](Tape<T>& t, std::size_t self) {
        const auto& g = std::as_const(t).grad(self);
        auto& dx = t.grad(ix);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t s = 0; s < seq; ++s)
                for (std::size_t c = 0; c < d; ++c) dx[(b * seq + s) * d + c] += inv * g[b * d + c];
    });
}

/// Last position of every sequence: [batch*seq x d] -> [batch x d].
template <class T>
Var<T> last_token(Var<T> x, std::size_t batch, std::size_t seq) {
    const auto& xv = x.value();
    const std::size_t d = xv.cols();
    if (xv.rows() != batch * seq) throw ShapeError("last_token: rows != batch*seq");
    Tensor<T> out(detail::matrix_shape(batch, d));
    for (std::size_t b = 0; b < batch; ++b) std::copy_n(xv.data() + (b * seq + seq - 1) * d, d, out.data() + b * d);
    const std::size_t ix = x.id;
    return x.tape->push(std::move(out), x.requires_grad(), [ix, batch, seq, d](Tape<T>& t, std::size_t self) {
        const auto& g = std::as_const(t).grad(self);
        auto& dx = t.grad(ix);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t c = 0; c < d; ++c) dx[(b * seq + seq - 1) * d + c] += g[b * d + c];
    });
}

/// Inverted dropout: kept entries are scaled by 1/(1-rate).
template <class T>
Var<T> dropout(Var<T> x, double rate, Rng& rng) {
    if (rate <= 0.0) return x;
    if (rate >= 1.0) throw InvalidArgument("dropout: rate must be < 1");
    const auto& xv = x.value();
    Tensor<T> mask(xv.shape());
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    for (auto& m : mask.values()) m = rng.uniform01() < rate ? T(0) : keep_scale;
    Tensor<T> out(xv.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * mask[i];
    const std::size_t ix = x.id;
    return x.tape->push(std::move(out), x.requires_grad(), [ix, mask = std::move(mask)](Tape<T>& t, std::size_t self) {
        const auto& g = std::as_const(t).grad(self);
        auto& dx = t.grad(ix);
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[i] * mask[i];
    });
}

/// Mean cross-entropy of [batch x classes] logits against class indices.
template <class T>
Var<T> cross_entropy(Var<T> logits, std::span<const std::int64_t> targets) {
    const auto& lv = logits.value();
    const std::size_t n = lv.cols(), batch = lv.rows();
    if (targets.size() != batch) throw ShapeError("cross_entropy: target count != batch");
    Tensor<T> probs(lv.shape());
    T total = 0;
    for (std::size_t b = 0; b < batch; ++b) {
        const auto y = targets[b];
        if (y < 0 || static_cast<std::size_t>(y) >= n)
            throw InvalidArgument("cross_entropy: target " + std::to_string(y) + " outside " + std::to_string(n) +
                                  " classes");
        const T* row = lv.data() + b * n;
        T mx = row[0];
        for (std::size_t c = 1; c < n; ++c) mx = std::max(mx, row[c]);
        T z = 0;
        for (std::size_t c = 0; c < n; ++c) z += std::exp(row[c] - mx);
        total += std::log(z) + mx - row[y];
        detail::softmax_row(row, probs.data() + b * n, n);
    }
    const std::size_t il = logits.id;
    std::vector<std::int64_t> ys(targets.begin(), targets.end());
    return logits.tape->push(Tensor<T>::scalar(total / static_cast<T>(batch)), logits.requires_grad(),
                             [il, n, batch, probs = std::move(probs), ys = std::move(ys)](Tape<T>& t, std::size_t self) {
                                 const T g = std::as_const(t).grad(self)[0] / static_cast<T>(batch);
                                 auto& dl = t.grad(il);
                                 for (std::size_t b = 0; b < batch; ++b)
                                     for (std::size_t c = 0; c < n; ++c) {
                                         const T onehot = static_cast<std::int64_t>(c) == ys[b] ? T(1) : T(0);
                                         dl[b * n + c] += g * (probs[b * n + c] - onehot);
                                     }
                             });
}

/// Mean squared error over the entries where mask is non-zero.  Entries
/// with a zero mask contribute nothing and receive exactly zero gradient.
template <class T>
Var<T> mse(Var<T> pred, const Tensor<T>& target, const Tensor<T>& mask) {
    const auto& pv = pred.value();
    if (!same_shape(pv, target) || !same_shape(pv, mask)) throw ShapeError("mse: pred/target/mask shapes differ");
    T count = 0, total = 0;
    for (std::size_t i = 0; i < pv.size(); ++i) {
        if (mask[i] == T(0)) continue;
        count += mask[i];
        const T e = pv[i] - target[i];
        total += mask[i] * e * e;
    }
    if (count == T(0)) throw InvalidArgument("mse: empty mask");
    const std::size_t ip = pred.id;
    return pred.tape->push(Tensor<T>::scalar(total / count), pred.requires_grad(),
                           [ip, count, target, mask](Tape<T>& t, std::size_t self) {
                               const T g = std::as_const(t).grad(self)[0];
                               const auto& pv = t.value(ip);
                               auto& dp = t.grad(ip);
                               for (std::size_t i = 0; i < pv.size(); ++i)
                                   if (mask[i] != T(0)) dp[i] += g * T(2) * mask[i] * (pv[i] - target[i]) / count;
                           });
}

/// Unmasked mean squared error.
template <class T>
Var<T> mse(Var<T> pred, const Tensor<T>& target) {
    return mse(pred, target, Tensor<T>(pred.value().shape(), T(1)));
}

}  // namespace modlab::ad
