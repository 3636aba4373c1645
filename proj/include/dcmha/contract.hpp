#pragma once

// Index-notation contraction over two operands ("BHTS,BTRH->BRTS" style).
// Internally: permute both operands into (batch, m, k) x (batch, k, n) layout,
// run a batched GEMM, permute back. Labels shared by both operands and the
// output act as batch axes and may broadcast when one extent is 1; contracted
// and free labels must agree exactly.

#include <algorithm>
#include <map>
#include <string>
#include <string_view>

#include "dcmha/tensor.hpp"

namespace dcmha {

namespace detail {

struct ContractPlan {
    std::string la, lb, lout;
    std::string batch, m, n, k;  // label classes, in output/appearance order
};

inline ContractPlan parse_contract_spec(std::string_view spec, int64_t dim_a, int64_t dim_b) {
    ContractPlan p;
    size_t comma = spec.find(',');
    size_t arrow = spec.find("->");
    if (comma == std::string_view::npos || arrow == std::string_view::npos || comma > arrow)
        throw std::invalid_argument("contract: malformed spec '" + std::string(spec) + "'");
    p.la = std::string(spec.substr(0, comma));
    p.lb = std::string(spec.substr(comma + 1, arrow - comma - 1));
    p.lout = std::string(spec.substr(arrow + 2));
    auto check_unique = [&](const std::string& labels, const char* which) {
        for (size_t i = 0; i < labels.size(); ++i)
            for (size_t j = i + 1; j < labels.size(); ++j)
                if (labels[i] == labels[j])
                    throw std::invalid_argument(std::string("contract: label '") + labels[i] +
                                                "' repeated in " + which + " of '" + std::string(spec) + "'");
    };
    check_unique(p.la, "operand A");
    check_unique(p.lb, "operand B");
    check_unique(p.lout, "output");
    if (static_cast<int64_t>(p.la.size()) != dim_a || static_cast<int64_t>(p.lb.size()) != dim_b)
        throw std::invalid_argument("contract: spec '" + std::string(spec) + "' rank does not match operands");

    auto in = [](const std::string& s, char c) { return s.find(c) != std::string::npos; };
    for (char c : p.lout) {
        bool a = in(p.la, c), b = in(p.lb, c);
        if (!a && !b)
            throw std::invalid_argument(std::string("contract: output label '") + c + "' appears in no operand");
        if (a && b)
            p.batch += c;
        else if (a)
            p.m += c;
        else
            p.n += c;
    }
    for (char c : p.la) {
        if (in(p.lout, c)) continue;
        if (!in(p.lb, c))
            throw std::invalid_argument(std::string("contract: label '") + c +
                                        "' of operand A is neither contracted nor in the output");
        p.k += c;
    }
    for (char c : p.lb)
        if (!in(p.lout, c) && !in(p.la, c))
            throw std::invalid_argument(std::string("contract: label '") + c +
                                        "' of operand B is neither contracted nor in the output");
    return p;
}

// C(MxN) += A(MxK) * B(KxN), row-major. All paths reduce over k in ascending
// order, so results are bit-identical regardless of which path a shape takes.

template <typename T>
void gemm_rows_simple(const T* __restrict a, const T* __restrict b, T* __restrict c,
                      int64_t i0, int64_t i1, int64_t k, int64_t n) {
    for (int64_t i = i0; i < i1; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (int64_t p = 0; p < k; ++p) {
            const T av = arow[p];
            const T* brow = b + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// 4 rows x JW columns accumulated in registers across the full k extent.
template <typename T, int JW>
inline void gemm_tile4(const T* __restrict a, const T* __restrict b, T* __restrict c,
                       int64_t k, int64_t n) {
    T acc0[JW] = {}, acc1[JW] = {}, acc2[JW] = {}, acc3[JW] = {};
    const T *a0 = a, *a1 = a + k, *a2 = a + 2 * k, *a3 = a + 3 * k;
    for (int64_t p = 0; p < k; ++p) {
        const T* brow = b + p * n;
        T v0 = a0[p], v1 = a1[p], v2 = a2[p], v3 = a3[p];
        for (int j = 0; j < JW; ++j) {
            T bj = brow[j];
            acc0[j] += v0 * bj;
            acc1[j] += v1 * bj;
            acc2[j] += v2 * bj;
            acc3[j] += v3 * bj;
        }
    }
    for (int j = 0; j < JW; ++j) {
        c[j] += acc0[j];
        c[n + j] += acc1[j];
        c[2 * n + j] += acc2[j];
        c[3 * n + j] += acc3[j];
    }
}

template <typename T, int JW>
void gemm_tiled(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    int64_t i = 0;
    for (; i + 4 <= m; i += 4) {
        int64_t j = 0;
        for (; j + JW <= n; j += JW) gemm_tile4<T, JW>(a + i * k, b + j, c + i * n + j, k, n);
        if (j < n) {
            // column tail: same k-ascending accumulation per element
            for (int r = 0; r < 4; ++r) {
                const T* arow = a + (i + r) * k;
                T* crow = c + (i + r) * n;
                for (int64_t p = 0; p < k; ++p) {
                    const T av = arow[p];
                    const T* brow = b + p * n;
                    for (int64_t jj = j; jj < n; ++jj) crow[jj] += av * brow[jj];
                }
            }
        }
    }
    gemm_rows_simple(a, b, c, i, m, k, n);
}

template <typename T>
void gemm_acc(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    if (m < 4 || n < 8) {
        gemm_rows_simple(a, b, c, 0, m, k, n);
        return;
    }
    if (n >= 32)
        gemm_tiled<T, 32>(a, b, c, m, k, n);
    else if (n >= 16)
        gemm_tiled<T, 16>(a, b, c, m, k, n);
    else
        gemm_tiled<T, 8>(a, b, c, m, k, n);
}

// Batched C_b += A_b B_b with shape-specialized paths. Every path reduces over
// k in ascending order per output element, so which path a shape takes never
// changes the bits of the result.
template <typename T>
void batched_gemm(const T* a, const T* b, T* c, int64_t nbatch, int64_t m, int64_t k, int64_t n) {
    if (k == 1 && n == 1) {
        // broadcast scale over each batch's m-vector (gating branches)
        for (int64_t bi = 0; bi < nbatch; ++bi) {
            const T s = b[bi];
            const T* arow = a + bi * m;
            T* crow = c + bi * m;
            for (int64_t j = 0; j < m; ++j) crow[j] = arow[j] * s;
        }
        return;
    }
    if (m == 1 && n == 1) {
        // batched dot products (gate gradients)
        for (int64_t bi = 0; bi < nbatch; ++bi) {
            const T* arow = a + bi * k;
            const T* brow = b + bi * k;
            T acc = 0;
            for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            c[bi] = acc;
        }
        return;
    }
    if (k <= 4 && n <= 16 && nbatch > 1) {
        // very thin contractions (low-rank compose, rank <= 4): unrolled dots
        for (int64_t bi = 0; bi < nbatch; ++bi) {
            const T* bb = b + bi * k * n;
            const T* ab = a + bi * m * k;
            T* cb = c + bi * m * n;
            for (int64_t i = 0; i < m; ++i) {
                const T* arow = ab + i * k;
                for (int64_t j = 0; j < n; ++j) {
                    T acc = arow[0] * bb[j];
                    for (int64_t p = 1; p < k; ++p) acc += arow[p] * bb[p * n + j];
                    cb[i * n + j] += acc;
                }
            }
        }
        return;
    }
    if (n <= 8 && k <= 64 && nbatch > 1) {
        // small right-hand tiles: keep B transposed in a local buffer so each
        // output is one short contiguous dot
        for (int64_t bi = 0; bi < nbatch; ++bi) {
            T bt_loc[8 * 64];
            const T* bb = b + bi * k * n;
            for (int64_t j = 0; j < n; ++j)
                for (int64_t p = 0; p < k; ++p) bt_loc[j * k + p] = bb[p * n + j];
            const T* ab = a + bi * m * k;
            T* cb = c + bi * m * n;
            for (int64_t i = 0; i < m; ++i) {
                const T* arow = ab + i * k;
                for (int64_t j = 0; j < n; ++j) {
                    const T* brow = bt_loc + j * k;
                    T acc = 0;
                    for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
                    cb[i * n + j] += acc;
                }
            }
        }
        return;
    }
    for (int64_t bi = 0; bi < nbatch; ++bi)
        gemm_acc(a + bi * m * k, b + bi * k * n, c + bi * m * n, m, k, n);
}

// Repeat a (batch-major) tensor along broadcast batch axes so extents match.
template <typename T>
Tensor<T> expand_batch(const Tensor<T>& t, const Shape& want) {
    if (t.shape() == want) return t;
    Tensor<T> out(want);
    Shape st = shape_strides(t.shape());
    std::vector<int64_t> eff(st.size());
    for (size_t d = 0; d < st.size(); ++d) eff[d] = (t.shape()[d] == 1 && want[d] != 1) ? 0 : st[d];
    std::vector<int64_t> idx(want.size(), 0);
    int64_t off = 0;
    for (int64_t i = 0; i < out.numel(); ++i) {
        out[i] = t[off];
        for (int64_t d = static_cast<int64_t>(want.size()) - 1; d >= 0; --d) {
            off += eff[d];
            if (++idx[d] < want[d]) break;
            off -= eff[d] * want[d];
            idx[d] = 0;
        }
    }
    return out;
}

}  // namespace detail

template <typename T>
Tensor<T> contract(const Tensor<T>& a, const Tensor<T>& b, std::string_view spec) {
    using namespace detail;
    ContractPlan p = parse_contract_spec(spec, a.dim(), b.dim());

    auto extent_in = [](const std::string& labels, const Tensor<T>& t, char c) -> int64_t {
        size_t pos = labels.find(c);
        return pos == std::string::npos ? -1 : t.shape()[pos];
    };

    // resolve extents; batch labels may broadcast 1 -> E
    std::map<char, int64_t> extent;
    for (char c : p.batch) {
        int64_t ea = extent_in(p.la, a, c), eb = extent_in(p.lb, b, c);
        if (ea != eb && ea != 1 && eb != 1)
            throw std::invalid_argument(std::string("contract: axis '") + c + "' extent mismatch: operand A " +
                                        p.la + shape_str(a.shape()) + " has " + std::to_string(ea) +
                                        ", operand B " + p.lb + shape_str(b.shape()) + " has " + std::to_string(eb));
        extent[c] = std::max(ea, eb);
    }
    for (char c : p.k) {
        int64_t ea = extent_in(p.la, a, c), eb = extent_in(p.lb, b, c);
        if (ea != eb)
            throw std::invalid_argument(std::string("contract: axis '") + c + "' extent mismatch: operand A " +
                                        p.la + shape_str(a.shape()) + " has " + std::to_string(ea) +
                                        ", operand B " + p.lb + shape_str(b.shape()) + " has " + std::to_string(eb));
        extent[c] = ea;
    }
    for (char c : p.m) extent[c] = extent_in(p.la, a, c);
    for (char c : p.n) extent[c] = extent_in(p.lb, b, c);

    auto perm_for = [&](const std::string& labels, const std::string& order) {
        std::vector<int64_t> perm;
        for (char c : order) {
            size_t pos = labels.find(c);
            if (pos != std::string::npos) perm.push_back(static_cast<int64_t>(pos));
        }
        return perm;
    };
    auto extents_of = [&](const std::string& labels) {
        int64_t e = 1;
        for (char c : labels) e *= extent[c];
        return e;
    };
    auto is_identity = [](const std::vector<int64_t>& perm) {
        for (size_t d = 0; d < perm.size(); ++d)
            if (perm[d] != static_cast<int64_t>(d)) return false;
        return true;
    };

    // A -> (batch, m, k); B -> (batch, k, n); materialize only when the layout
    // actually changes
    const Tensor<T>* at = &a;
    const Tensor<T>* bt = &b;
    Tensor<T> at_store, bt_store;
    {
        auto pa = perm_for(p.la, p.batch + p.m + p.k);
        if (!is_identity(pa)) {
            at_store = permuted(a, pa);
            at = &at_store;
        }
        auto pb = perm_for(p.lb, p.batch + p.k + p.n);
        if (!is_identity(pb)) {
            bt_store = permuted(b, pb);
            bt = &bt_store;
        }
        Shape want_a, want_b;
        for (char c : p.batch) want_a.push_back(extent[c]);
        want_b = want_a;
        for (char c : p.m) want_a.push_back(extent[c]);
        for (char c : p.k) want_a.push_back(extent[c]);
        for (char c : p.k) want_b.push_back(extent[c]);
        for (char c : p.n) want_b.push_back(extent[c]);
        if (at->shape() != want_a) {
            at_store = detail::expand_batch(*at, want_a);
            at = &at_store;
        }
        if (bt->shape() != want_b) {
            bt_store = detail::expand_batch(*bt, want_b);
            bt = &bt_store;
        }
    }

    const int64_t nbatch = extents_of(p.batch);
    const int64_t m = extents_of(p.m), k = extents_of(p.k), n = extents_of(p.n);

    Shape nat_shape;
    for (char c : p.batch + p.m + p.n) nat_shape.push_back(extent[c]);
    if (nat_shape.empty()) nat_shape = {1};
    Tensor<T> nat(nat_shape);
    detail::batched_gemm(at->data(), bt->data(), nat.data(), nbatch, m, k, n);

    // (batch, m, n) natural order -> requested output order
    std::string nat_labels = p.batch + p.m + p.n;
    if (nat_labels == p.lout) return nat;
    std::vector<int64_t> out_perm;
    for (char c : p.lout) out_perm.push_back(static_cast<int64_t>(nat_labels.find(c)));
    return permuted(nat, out_perm);
}

}  // namespace dcmha
