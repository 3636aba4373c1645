#pragma once

// Tape-based reverse-mode differentiation over tensor ops. Nodes are recorded
// in execution order (which is already topological), so backward is a single
// reverse sweep. A tape is single-threaded and single-use: calling backward
// twice without reset() is an error.

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "dcmha/contract.hpp"
#include "dcmha/tensor.hpp"

namespace dcmha {

template <typename T>
class Tape;

template <typename T>
struct TapeNode {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    bool grad_alloc = false;
    std::string name;
    std::function<void(TapeNode<T>&)> backward_fn;

    Tensor<T>& ensure_grad() {
        if (!grad_alloc) {
            grad = Tensor<T>(value.shape());
            grad_alloc = true;
        }
        return grad;
    }
};

template <typename T>
void acc_into(TapeNode<T>* n, const Tensor<T>& delta) {
    Tensor<T>& g = n->ensure_grad();
    check_same_shape(g, delta, "grad accumulate");
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += delta[i];
}

template <typename T>
class Var {
public:
    Var() = default;
    Var(TapeNode<T>* n, Tape<T>* t) : node_(n), tape_(t) {}
    const Tensor<T>& value() const { return node_->value; }
    const Tensor<T>& grad() const {
        if (!node_->grad_alloc) throw std::runtime_error("no gradient recorded for '" + node_->name + "'");
        return node_->grad;
    }
    bool requires_grad() const { return node_->requires_grad; }
    const std::string& name() const { return node_->name; }
    TapeNode<T>* node() const { return node_; }
    Tape<T>* tape() const { return tape_; }

private:
    TapeNode<T>* node_ = nullptr;
    Tape<T>* tape_ = nullptr;
};

template <typename T>
class Tape {
public:
    Var<T> leaf(Tensor<T> v, bool requires_grad, std::string name = "") {
        auto node = std::make_unique<TapeNode<T>>();
        node->value = std::move(v);
        node->requires_grad = requires_grad;
        node->name = std::move(name);
        nodes_.push_back(std::move(node));
        if (requires_grad) leaves_.push_back(nodes_.back().get());
        return {nodes_.back().get(), this};
    }

    Var<T> record(Tensor<T> v, std::initializer_list<Var<T>> parents,
                  std::function<void(TapeNode<T>&)> bwd) {
        auto node = std::make_unique<TapeNode<T>>();
        node->value = std::move(v);
        for (const Var<T>& p : parents) node->requires_grad = node->requires_grad || p.requires_grad();
        if (node->requires_grad) node->backward_fn = std::move(bwd);
        nodes_.push_back(std::move(node));
        return {nodes_.back().get(), this};
    }

    // Accumulates dLoss/dLeaf for every requires_grad leaf. Loss must be scalar.
    void backward(Var<T> loss) {
        if (loss.value().numel() != 1)
            throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                        shape_str(loss.value().shape()));
        if (backward_done_) throw std::runtime_error("backward: repeated call without reset");
        backward_done_ = true;
        detached_ = false;
        if (loss.requires_grad()) {
            loss.node()->ensure_grad()[0] = T(1);
            for (size_t i = nodes_.size(); i-- > 0;) {
                TapeNode<T>& n = *nodes_[i];
                if (n.requires_grad && n.grad_alloc && n.backward_fn) n.backward_fn(n);
            }
        }
        for (TapeNode<T>* l : leaves_)
            if (!l->grad_alloc) {
                l->ensure_grad();
                detached_ = true;
            }
    }

    void reset() {
        backward_done_ = false;
        detached_ = false;
        for (auto& n : nodes_) {
            n->grad_alloc = false;
            n->grad = Tensor<T>();
        }
    }

    bool detached() const { return detached_; }
    size_t size() const { return nodes_.size(); }

private:
    std::vector<std::unique_ptr<TapeNode<T>>> nodes_;
    std::vector<TapeNode<T>*> leaves_;
    bool backward_done_ = false;
    bool detached_ = false;
};

// ---- recorded ops ----

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    auto* an = a.node();
    auto* bn = b.node();
    return a.tape()->record(add(a.value(), b.value()), {a, b}, [an, bn](TapeNode<T>& n) {
        if (an->requires_grad) acc_into(an, n.grad);
        if (bn->requires_grad) acc_into(bn, n.grad);
    });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    auto* an = a.node();
    auto* bn = b.node();
    return a.tape()->record(sub(a.value(), b.value()), {a, b}, [an, bn](TapeNode<T>& n) {
        if (an->requires_grad) acc_into(an, n.grad);
        if (bn->requires_grad) acc_into(bn, scale(n.grad, T(-1)));
    });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    auto* an = a.node();
    auto* bn = b.node();
    return a.tape()->record(mul(a.value(), b.value()), {a, b}, [an, bn](TapeNode<T>& n) {
        if (an->requires_grad) acc_into(an, mul(n.grad, bn->value));
        if (bn->requires_grad) acc_into(bn, mul(n.grad, an->value));
    });
}

template <typename T>
Var<T> scale(Var<T> a, T c) {
    auto* an = a.node();
    return a.tape()->record(scale(a.value(), c), {a},
                            [an, c](TapeNode<T>& n) { acc_into(an, scale(n.grad, c)); });
}

template <typename T>
Var<T> contract(Var<T> a, Var<T> b, std::string_view spec) {
    detail::ContractPlan p = detail::parse_contract_spec(spec, a.value().dim(), b.value().dim());
    for (char c : p.batch) {
        int64_t ea = a.value().shape()[p.la.find(c)];
        int64_t eb = b.value().shape()[p.lb.find(c)];
        if (ea != eb)
            throw std::invalid_argument(std::string("contract (recorded): broadcasting on axis '") + c +
                                        "' is not differentiable");
    }
    auto* an = a.node();
    auto* bn = b.node();
    std::string ga_spec = p.lout + "," + p.lb + "->" + p.la;
    std::string gb_spec = p.lout + "," + p.la + "->" + p.lb;
    return a.tape()->record(contract(a.value(), b.value(), spec), {a, b},
                            [an, bn, ga_spec, gb_spec](TapeNode<T>& n) {
                                if (an->requires_grad) acc_into(an, contract(n.grad, bn->value, ga_spec));
                                if (bn->requires_grad) acc_into(bn, contract(n.grad, an->value, gb_spec));
                            });
}

template <typename T>
Var<T> gelu(Var<T> a) {
    auto* an = a.node();
    return a.tape()->record(gelu(a.value()), {a}, [an](TapeNode<T>& n) {
        Tensor<T> d(n.grad.shape());
        for (int64_t i = 0; i < d.numel(); ++i) d[i] = n.grad[i] * gelu_grad_scalar(an->value[i]);
        acc_into(an, d);
    });
}

template <typename T>
Var<T> tanh(Var<T> a) {
    auto* an = a.node();
    return a.tape()->record(tanh(a.value()), {a}, [an](TapeNode<T>& n) {
        Tensor<T> d(n.grad.shape());
        for (int64_t i = 0; i < d.numel(); ++i) d[i] = n.grad[i] * (T(1) - n.value[i] * n.value[i]);
        acc_into(an, d);
    });
}

template <typename T>
Var<T> silu(Var<T> a) {
    Tensor<T> y = map(a.value(), [](T x) { return x / (T(1) + std::exp(-x)); });
    auto* an = a.node();
    return a.tape()->record(std::move(y), {a}, [an](TapeNode<T>& n) {
        Tensor<T> d(n.grad.shape());
        for (int64_t i = 0; i < d.numel(); ++i) {
            T x = an->value[i];
            T s = T(1) / (T(1) + std::exp(-x));
            d[i] = n.grad[i] * s * (T(1) + x * (T(1) - s));
        }
        acc_into(an, d);
    });
}

namespace detail {
// per-lane sum of g*y broadcast back over the lane, used by softmax/rmsnorm
template <typename T, typename F>
void per_lane(const Tensor<T>& ref, int64_t axis, F&& f) {
    axis = ref.normalize_axis(axis);
    const Shape& s = ref.shape();
    int64_t outer = 1, inner = 1, len = s[axis];
    for (int64_t d = 0; d < axis; ++d) outer *= s[d];
    for (int64_t d = axis + 1; d < ref.dim(); ++d) inner *= s[d];
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) f(o * len * inner + i, len, inner);
}
}  // namespace detail

template <typename T>
Var<T> softmax(Var<T> a, int64_t axis) {
    auto* an = a.node();
    return a.tape()->record(softmax(a.value(), axis), {a}, [an, axis](TapeNode<T>& n) {
        Tensor<T> d(n.grad.shape());
        detail::per_lane(n.value, axis, [&](int64_t base, int64_t len, int64_t stride) {
            T dot = 0;
            for (int64_t j = 0; j < len; ++j) dot += n.grad[base + j * stride] * n.value[base + j * stride];
            for (int64_t j = 0; j < len; ++j) {
                int64_t ix = base + j * stride;
                d[ix] = n.value[ix] * (n.grad[ix] - dot);
            }
        });
        acc_into(an, d);
    });
}

template <typename T>
Var<T> rmsnorm_noscale(Var<T> a, int64_t axis, T eps) {
    auto* an = a.node();
    return a.tape()->record(rmsnorm_noscale(a.value(), axis, eps), {a}, [an, axis, eps](TapeNode<T>& n) {
        Tensor<T> d(n.grad.shape());
        detail::per_lane(an->value, axis, [&](int64_t base, int64_t len, int64_t stride) {
            T ms = 0, dot = 0;
            for (int64_t j = 0; j < len; ++j) {
                T x = an->value[base + j * stride];
                ms += x * x;
                dot += n.grad[base + j * stride] * x;
            }
            ms /= static_cast<T>(len);
            T r = T(1) / std::sqrt(ms + eps);
            T coef = r * r * r * dot / static_cast<T>(len);
            for (int64_t j = 0; j < len; ++j) {
                int64_t ix = base + j * stride;
                d[ix] = r * n.grad[ix] - coef * an->value[ix];
            }
        });
        acc_into(an, d);
    });
}

// (x - mean) / sqrt(var + eps) along `axis`; no learned affine.
template <typename T>
Var<T> layernorm_noscale(Var<T> a, int64_t axis, T eps) {
    Tensor<T> y(a.value().shape());
    detail::per_lane(a.value(), axis, [&](int64_t base, int64_t len, int64_t stride) {
        T mean = 0;
        for (int64_t j = 0; j < len; ++j) mean += a.value()[base + j * stride];
        mean /= static_cast<T>(len);
        T var = 0;
        for (int64_t j = 0; j < len; ++j) {
            T d = a.value()[base + j * stride] - mean;
            var += d * d;
        }
        var /= static_cast<T>(len);
        T inv = T(1) / std::sqrt(var + eps);
        for (int64_t j = 0; j < len; ++j) {
            int64_t ix = base + j * stride;
            y[ix] = (a.value()[ix] - mean) * inv;
        }
    });
    auto* an = a.node();
    return a.tape()->record(std::move(y), {a}, [an, axis, eps](TapeNode<T>& n) {
        Tensor<T> d(n.grad.shape());
        detail::per_lane(an->value, axis, [&](int64_t base, int64_t len, int64_t stride) {
            T mean = 0;
            for (int64_t j = 0; j < len; ++j) mean += an->value[base + j * stride];
            mean /= static_cast<T>(len);
            T var = 0;
            for (int64_t j = 0; j < len; ++j) {
                T dv = an->value[base + j * stride] - mean;
                var += dv * dv;
            }
            var /= static_cast<T>(len);
            T inv = T(1) / std::sqrt(var + eps);
            T gmean = 0, gydot = 0;
            for (int64_t j = 0; j < len; ++j) {
                int64_t ix = base + j * stride;
                T yh = (an->value[ix] - mean) * inv;
                gmean += n.grad[ix];
                gydot += n.grad[ix] * yh;
            }
            gmean /= static_cast<T>(len);
            gydot /= static_cast<T>(len);
            for (int64_t j = 0; j < len; ++j) {
                int64_t ix = base + j * stride;
                T yh = (an->value[ix] - mean) * inv;
                d[ix] = inv * (n.grad[ix] - gmean - yh * gydot);
            }
        });
        acc_into(an, d);
    });
}

// out[..., d] = a[..., d] * v[d]
template <typename T>
Var<T> mul_last(Var<T> a, Var<T> v) {
    const int64_t D = a.value().shape().back();
    if (v.value().dim() != 1 || v.value().shape()[0] != D)
        throw std::invalid_argument("mul_last: vector must match trailing axis");
    Tensor<T> out(a.value().shape());
    const int64_t rows = a.value().numel() / D;
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t d = 0; d < D; ++d) out[r * D + d] = a.value()[r * D + d] * v.value()[d];
    auto* an = a.node();
    auto* vn = v.node();
    return a.tape()->record(std::move(out), {a, v}, [an, vn, rows, D](TapeNode<T>& n) {
        if (an->requires_grad) {
            Tensor<T> d(an->value.shape());
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < D; ++j) d[r * D + j] = n.grad[r * D + j] * vn->value[j];
            acc_into(an, d);
        }
        if (vn->requires_grad) {
            Tensor<T> d({D});
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < D; ++j) d[j] += n.grad[r * D + j] * an->value[r * D + j];
            acc_into(vn, d);
        }
    });
}

// out[..., d] = a[..., d] + v[d]
template <typename T>
Var<T> add_last(Var<T> a, Var<T> v) {
    const int64_t D = a.value().shape().back();
    if (v.value().dim() != 1 || v.value().shape()[0] != D)
        throw std::invalid_argument("add_last: vector must match trailing axis");
    Tensor<T> out(a.value().shape());
    const int64_t rows = a.value().numel() / D;
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t d = 0; d < D; ++d) out[r * D + d] = a.value()[r * D + d] + v.value()[d];
    auto* an = a.node();
    auto* vn = v.node();
    return a.tape()->record(std::move(out), {a, v}, [an, vn, rows, D](TapeNode<T>& n) {
        if (an->requires_grad) acc_into(an, n.grad);
        if (vn->requires_grad) {
            Tensor<T> d({D});
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < D; ++j) d[j] += n.grad[r * D + j];
            acc_into(vn, d);
        }
    });
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
    auto* an = a.node();
    return a.tape()->record(a.value().reshaped(std::move(shape)), {a}, [an](TapeNode<T>& n) {
        acc_into(an, n.grad.reshaped(an->value.shape()));
    });
}

template <typename T>
Var<T> permute(Var<T> a, std::vector<int64_t> perm) {
    std::vector<int64_t> inv(perm.size());
    for (size_t d = 0; d < perm.size(); ++d) inv[perm[d]] = static_cast<int64_t>(d);
    auto* an = a.node();
    return a.tape()->record(permuted(a.value(), perm), {a},
                            [an, inv](TapeNode<T>& n) { acc_into(an, permuted(n.grad, inv)); });
}

template <typename T>
Var<T> slice_axis(Var<T> a, int64_t axis, int64_t from, int64_t to) {
    axis = a.value().normalize_axis(axis);
    const Shape& s = a.value().shape();
    if (from < 0 || to > s[axis] || from >= to) throw std::invalid_argument("slice_axis: bad range");
    Shape out_shape = s;
    out_shape[axis] = to - from;
    int64_t outer = 1, inner = 1;
    for (int64_t d = 0; d < axis; ++d) outer *= s[d];
    for (int64_t d = axis + 1; d < a.value().dim(); ++d) inner *= s[d];

    Tensor<T> out(out_shape);
    const int64_t len = s[axis], cut = to - from;
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t j = 0; j < cut; ++j)
            std::copy_n(a.value().data() + (o * len + from + j) * inner, inner,
                        out.data() + (o * cut + j) * inner);

    auto* an = a.node();
    return a.tape()->record(std::move(out), {a}, [an, axis, from, cut, outer, inner, len](TapeNode<T>& n) {
        Tensor<T>& g = an->ensure_grad();
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t j = 0; j < cut; ++j) {
                const T* src = n.grad.data() + (o * cut + j) * inner;
                T* dst = g.data() + (o * len + from + j) * inner;
                for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
            }
    });
}

template <typename T>
Var<T> concat_axis(const std::vector<Var<T>>& parts, int64_t axis) {
    if (parts.empty()) throw std::invalid_argument("concat_axis: no parts");
    if (parts.size() == 1) return parts[0];
    axis = parts[0].value().normalize_axis(axis);
    Shape out_shape = parts[0].value().shape();
    int64_t total = 0;
    for (const auto& p : parts) total += p.value().shape()[axis];
    out_shape[axis] = total;
    int64_t outer = 1, inner = 1;
    for (int64_t d = 0; d < axis; ++d) outer *= out_shape[d];
    for (int64_t d = axis + 1; d < static_cast<int64_t>(out_shape.size()); ++d) inner *= out_shape[d];

    Tensor<T> out(out_shape);
    int64_t at = 0;
    for (const auto& p : parts) {
        int64_t plen = p.value().shape()[axis];
        for (int64_t o = 0; o < outer; ++o)
            std::copy_n(p.value().data() + o * plen * inner, plen * inner,
                        out.data() + (o * total + at) * inner);
        at += plen;
    }

    std::vector<TapeNode<T>*> pnodes;
    for (const auto& p : parts) pnodes.push_back(p.node());
    Var<T> result = parts[0].tape()->record(std::move(out), {}, nullptr);
    // record() with explicit parent list: rebuild flags and closure by hand
    TapeNode<T>* rn = result.node();
    for (auto* pn : pnodes) rn->requires_grad = rn->requires_grad || pn->requires_grad;
    if (rn->requires_grad)
        rn->backward_fn = [pnodes, axis, outer, inner, total](TapeNode<T>& n) {
            int64_t at2 = 0;
            for (auto* pn : pnodes) {
                int64_t plen = pn->value.shape()[axis];
                if (pn->requires_grad) {
                    Tensor<T>& g = pn->ensure_grad();
                    for (int64_t o = 0; o < outer; ++o) {
                        const T* src = n.grad.data() + (o * total + at2) * inner;
                        T* dst = g.data() + o * plen * inner;
                        for (int64_t i = 0; i < plen * inner; ++i) dst[i] += src[i];
                    }
                }
                at2 += plen;
            }
        };
    return result;
}

// out[..., t, s] = a[..., t, s] + m[t, s]; m is a constant (no gradient).
template <typename T>
Var<T> add_mask(Var<T> a, const Tensor<T>& m) {
    const Shape& s = a.value().shape();
    if (m.dim() != 2 || s[s.size() - 2] != m.shape()[0] || s.back() != m.shape()[1])
        throw std::invalid_argument("add_mask: mask " + shape_str(m.shape()) + " does not match " +
                                    shape_str(s));
    Tensor<T> out(s);
    int64_t plane = m.numel(), outer = a.value().numel() / plane;
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < plane; ++i) out[o * plane + i] = a.value()[o * plane + i] + m[i];
    auto* an = a.node();
    return a.tape()->record(std::move(out), {a}, [an](TapeNode<T>& n) { acc_into(an, n.grad); });
}

// row gather: out[b, t, :] = table[ids[b*T + t], :]
template <typename T>
Var<T> embedding(Var<T> table, const std::vector<int32_t>& ids, int64_t B, int64_t Tlen) {
    const int64_t V = table.value().shape()[0], D = table.value().shape()[1];
    if (static_cast<int64_t>(ids.size()) != B * Tlen)
        throw std::invalid_argument("embedding: ids length mismatch");
    Tensor<T> out({B, Tlen, D});
    for (int64_t i = 0; i < B * Tlen; ++i) {
        int32_t id = ids[i];
        if (id < 0 || id >= V) throw std::out_of_range("embedding: token id out of range");
        std::copy_n(table.value().data() + static_cast<int64_t>(id) * D, D, out.data() + i * D);
    }
    auto* tn = table.node();
    return table.tape()->record(std::move(out), {table}, [tn, ids, D](TapeNode<T>& n) {
        Tensor<T>& g = tn->ensure_grad();
        for (size_t i = 0; i < ids.size(); ++i) {
            const T* src = n.grad.data() + static_cast<int64_t>(i) * D;
            T* dst = g.data() + static_cast<int64_t>(ids[i]) * D;
            for (int64_t d = 0; d < D; ++d) dst[d] += src[d];
        }
    });
}

// Mean masked token-level cross entropy. logits (B,T,V); targets/weights (B*T).
template <typename T>
Var<T> cross_entropy(Var<T> logits, const std::vector<int32_t>& targets, const std::vector<T>& weights) {
    const Shape& s = logits.value().shape();
    const int64_t rows = s[0] * s[1], V = s[2];
    if (static_cast<int64_t>(targets.size()) != rows || static_cast<int64_t>(weights.size()) != rows)
        throw std::invalid_argument("cross_entropy: target/weight length mismatch");
    T wsum = 0;
    for (T w : weights) wsum += w;
    if (!(wsum > 0)) throw std::invalid_argument("cross_entropy: no unmasked positions");

    T loss = 0;
    for (int64_t r = 0; r < rows; ++r) {
        if (weights[r] == T(0)) continue;
        const T* row = logits.value().data() + r * V;
        T m = row[0];
        for (int64_t v = 1; v < V; ++v) m = std::max(m, row[v]);
        T lse = 0;
        for (int64_t v = 0; v < V; ++v) lse += std::exp(row[v] - m);
        lse = std::log(lse) + m;
        loss += weights[r] * (lse - row[targets[r]]);
    }
    loss /= wsum;

    auto* ln = logits.node();
    return logits.tape()->record(Tensor<T>::scalar(loss), {logits},
                                 [ln, targets, weights, wsum, V](TapeNode<T>& n) {
        T gout = n.grad[0];
        Tensor<T>& g = ln->ensure_grad();
        const int64_t rows2 = static_cast<int64_t>(targets.size());
        for (int64_t r = 0; r < rows2; ++r) {
            if (weights[r] == T(0)) continue;
            const T* row = ln->value.data() + r * V;
            T m = row[0];
            for (int64_t v = 1; v < V; ++v) m = std::max(m, row[v]);
            T z = 0;
            for (int64_t v = 0; v < V; ++v) z += std::exp(row[v] - m);
            T coef = gout * weights[r] / wsum;
            T* grow = g.data() + r * V;
            for (int64_t v = 0; v < V; ++v) grow[v] += coef * std::exp(row[v] - m) / z;
            grow[targets[r]] -= coef;
        }
    });
}

template <typename T>
Var<T> sum_all(Var<T> a) {
    auto* an = a.node();
    return a.tape()->record(Tensor<T>::scalar(sum(a.value())), {a}, [an](TapeNode<T>& n) {
        acc_into(an, Tensor<T>::full(an->value.shape(), n.grad[0]));
    });
}

template <typename T>
Var<T> mean_all(Var<T> a) {
    return scale(sum_all(a), T(1) / static_cast<T>(a.value().numel()));
}

// ---- finite-difference oracle ----

struct FdLeafReport {
    std::string name;
    double max_rel = 0;
};

struct FdReport {
    std::vector<FdLeafReport> leaves;
    double max_rel = 0;
};

// Central differences (f(x+h)-f(x-h))/2h against tape gradients. `build` must
// construct the scalar loss from the given leaf Vars; it is re-run for every
// perturbed element, so keep the configuration tiny.
template <typename T, typename BuildFn>
FdReport fd_check(BuildFn&& build, std::vector<std::pair<std::string, Tensor<T>>> leaves, double h) {
    if (!(h > 0)) throw std::invalid_argument("fd_check: h must be positive");
    std::vector<Tensor<T>> grads;
    {
        Tape<T> tape;
        std::vector<Var<T>> vars;
        vars.reserve(leaves.size());
        for (auto& [name, v] : leaves) vars.push_back(tape.leaf(v, true, name));
        Var<T> loss = build(tape, vars);
        tape.backward(loss);
        for (auto& v : vars) grads.push_back(v.grad());
    }

    auto eval = [&]() -> double {
        Tape<T> tape;
        std::vector<Var<T>> vars;
        vars.reserve(leaves.size());
        for (auto& [name, v] : leaves) vars.push_back(tape.leaf(v, false, name));
        return static_cast<double>(build(tape, vars).value()[0]);
    };

    FdReport report;
    for (size_t li = 0; li < leaves.size(); ++li) {
        FdLeafReport lr{leaves[li].first, 0.0};
        Tensor<T>& point = leaves[li].second;
        for (int64_t e = 0; e < point.numel(); ++e) {
            T orig = point[e];
            point[e] = orig + static_cast<T>(h);
            double fp = eval();
            point[e] = orig - static_cast<T>(h);
            double fm = eval();
            point[e] = orig;
            double numeric = (fp - fm) / (2 * h);
            double analytic = static_cast<double>(grads[li][e]);
            double rel = std::abs(analytic - numeric) /
                         std::max({std::abs(analytic), std::abs(numeric), 1e-8});
            lr.max_rel = std::max(lr.max_rel, rel);
        }
        report.max_rel = std::max(report.max_rel, lr.max_rel);
        report.leaves.push_back(std::move(lr));
    }
    return report;
}

}  // namespace dcmha
