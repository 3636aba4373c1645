#pragma once

// Executable oracles for the two head-composition equivalence theorems and for
// the dense two-level decomposition of the composition tensor. These evaluate
// both sides of each identity numerically and report the worst deviation.
//
// Conventions: a composition map C acts on stacked attention matrices as
// A'_h = sum_j C[h][j] A_j. Compose's static base multiplies attention vectors
// on the right (A' = A W_b), so the map realized by W_b is C = W_b^T.

#include "dcmha/attention.hpp"
#include "dcmha/contract.hpp"
#include "dcmha/tensor.hpp"

namespace dcmha {

using CompositionMap = Tensor<double>;

// A'_h = sum_j C[h][j] A_j over the head axis of (H,T,S).
template <typename T>
Tensor<T> compose_scores_static(const Tensor<T>& scores, const Tensor<T>& c) {
    if (scores.dim() != 3 || c.dim() != 2 || c.shape()[0] != scores.shape()[0] ||
        c.shape()[1] != scores.shape()[0])
        throw std::invalid_argument("compose_scores_static: want (H,T,S) scores and (H,H) map");
    return contract(c, scores, "gh,hts->gts");
}

namespace detail {
inline Tensor<double> randn(Shape shape, Rng& rng, double std = 1.0) {
    Tensor<double> t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal() * std;
    return t;
}
}  // namespace detail

// Theorem 1: composing attention scores with C equals computing scores with
// H-fold expanded projections W~q_i = Concat_j[C_ij Wq_j], W~k_i = Concat_j[Wk_j].
// Returns the max absolute deviation between the two routes.
inline double check_theorem1(int64_t H, int64_t Dh, int64_t Dm, int64_t Tlen, int64_t S, Rng& rng,
                             const Tensor<double>* c_override = nullptr) {
    double wstd = 1.0 / std::sqrt(static_cast<double>(Dm));
    Tensor<double> q = detail::randn({Tlen, Dm}, rng);
    Tensor<double> k = detail::randn({S, Dm}, rng);
    std::vector<Tensor<double>> wq, wk;
    for (int64_t i = 0; i < H; ++i) {
        wq.push_back(detail::randn({Dm, Dh}, rng, wstd));
        wk.push_back(detail::randn({Dm, Dh}, rng, wstd));
    }
    Tensor<double> c = c_override ? *c_override : detail::randn({H, H}, rng);

    // route 1: per-head scores, then compose over heads
    Tensor<double> scores({H, Tlen, S});
    for (int64_t i = 0; i < H; ++i) {
        Tensor<double> qi = contract(q, wq[i], "td,de->te");
        Tensor<double> ki = contract(k, wk[i], "sd,de->se");
        Tensor<double> a = contract(qi, ki, "te,se->ts");
        std::copy_n(a.data(), a.numel(), scores.data() + i * Tlen * S);
    }
    Tensor<double> composed = compose_scores_static(scores, c);

    // route 2: expanded projections with H-times larger head dim
    double dev = 0;
    for (int64_t i = 0; i < H; ++i) {
        Tensor<double> wq_exp({Dm, H * Dh});
        Tensor<double> wk_exp({Dm, H * Dh});
        for (int64_t j = 0; j < H; ++j)
            for (int64_t d = 0; d < Dm; ++d)
                for (int64_t e = 0; e < Dh; ++e) {
                    wq_exp(d, j * Dh + e) = c(i, j) * wq[j](d, e);
                    wk_exp(d, j * Dh + e) = wk[j](d, e);
                }
        Tensor<double> qi = contract(q, wq_exp, "td,de->te");
        Tensor<double> ki = contract(k, wk_exp, "sd,de->se");
        Tensor<double> a = contract(qi, ki, "te,se->ts");
        for (int64_t t = 0; t < Tlen; ++t)
            for (int64_t s = 0; s < S; ++s) dev = std::max(dev, std::abs(a(t, s) - composed(i, t, s)));
    }
    return dev;
}

// Theorem 2: composing attention weights with C equals the expanded OV route
// W~v_i = Concat_j[C_ij Wv_j], W~o = Tile(Wo, (H, 1)).
inline double check_theorem2(int64_t H, int64_t Dh, int64_t Dm, int64_t Tlen, int64_t S, Rng& rng,
                             const Tensor<double>* c_override = nullptr) {
    double wstd = 1.0 / std::sqrt(static_cast<double>(Dm));
    Tensor<double> weights = detail::randn({H, Tlen, S}, rng);
    Tensor<double> v = detail::randn({S, Dm}, rng);
    std::vector<Tensor<double>> wv;
    for (int64_t i = 0; i < H; ++i) wv.push_back(detail::randn({Dm, Dh}, rng, wstd));
    Tensor<double> wo = detail::randn({H * Dh, Dm}, rng, wstd);
    Tensor<double> c = c_override ? *c_override : detail::randn({H, H}, rng);

    // route 1: composed weights, original projections. The OV equivalence as
    // proved pairs the expansion with A'_j = sum_i C_ij A_i, i.e. the transpose
    // of the score-composition index order.
    Tensor<double> ct({H, H});
    for (int64_t i = 0; i < H; ++i)
        for (int64_t j = 0; j < H; ++j) ct(i, j) = c(j, i);
    Tensor<double> composed = compose_scores_static(weights, ct);
    Tensor<double> out1({Tlen, Dm});
    for (int64_t j = 0; j < H; ++j) {
        Tensor<double> vj = contract(v, wv[j], "sd,de->se");
        Tensor<double> aj({Tlen, S});
        std::copy_n(composed.data() + j * Tlen * S, Tlen * S, aj.data());
        Tensor<double> oj = contract(aj, vj, "ts,se->te");
        Tensor<double> woj({Dh, Dm});
        std::copy_n(wo.data() + j * Dh * Dm, Dh * Dm, woj.data());
        out1 = add(out1, contract(oj, woj, "te,ed->td"));
    }

    // route 2: original weights, expanded projections (each head's output block
    // of Tile(Wo,(H,1)) is Wo itself)
    Tensor<double> out2({Tlen, Dm});
    for (int64_t i = 0; i < H; ++i) {
        Tensor<double> wv_exp({Dm, H * Dh});
        for (int64_t j = 0; j < H; ++j)
            for (int64_t d = 0; d < Dm; ++d)
                for (int64_t e = 0; e < Dh; ++e) wv_exp(d, j * Dh + e) = c(i, j) * wv[j](d, e);
        Tensor<double> vi = contract(v, wv_exp, "sd,de->se");
        Tensor<double> ai({Tlen, S});
        std::copy_n(weights.data() + i * Tlen * S, Tlen * S, ai.data());
        Tensor<double> oi = contract(ai, vi, "ts,se->te");
        out2 = add(out2, contract(oi, wo, "te,ed->td"));
    }
    return max_abs_diff(out1, out2);
}

// Materializes the 4-D transformation tensor W (T,S,H,H) from the two-level
// decomposition and applies it vector-wise: A'[b,:,i,j] = A[b,:,i,j] W[i,j].
// Memory is O(T*S*H^2); refuses big shapes. This is the correctness oracle for
// attention::compose.
template <typename T>
Tensor<T> dense_compose_oracle(const Tensor<T>& a, const Tensor<T>& q_in, const Tensor<T>& k_in,
                               const ComposeParams<T>& th, const AttentionConfig& cfg) {
    const Shape& s = a.shape();
    const int64_t B = s[0], H = s[1], Tl = s[2], S = s[3];
    if (Tl * S * H * H > 10'000'000)
        throw std::invalid_argument("dense_compose_oracle: T*S*H^2 too large to materialize");
    const int64_t G = cfg.groups, R = cfg.rank, hpg = cfg.heads_per_group();

    Tensor<T> out(a.shape());
    for (int64_t b = 0; b < B; ++b) {
        Tensor<T> qb = slice_axis(q_in, 0, b, b + 1);
        Tensor<T> kb = slice_axis(k_in, 0, b, b + 1);
        std::vector<std::pair<Tensor<T>, Tensor<T>>> dwq, dwk;  // per group (1,T,R,H')
        for (int64_t g = 0; g < G; ++g) {
            if (cfg.q_lowrank) dwq.push_back(dw_proj(qb, th.w_q1[g], th.w_q2[g], R, cfg.rmsnorm_eps));
            if (cfg.k_lowrank) dwk.push_back(dw_proj(kb, th.w_k1[g], th.w_k2[g], R, cfg.rmsnorm_eps));
        }
        Tensor<T> gq = cfg.q_gate ? tanh(contract(qb, th.w_qg, "btd,dh->bth")) : Tensor<T>();
        Tensor<T> gk = cfg.k_gate ? tanh(contract(kb, th.w_kg, "btd,dh->bth")) : Tensor<T>();

        Tensor<T> w({H, H});
        for (int64_t i = 0; i < Tl; ++i)
            for (int64_t j = 0; j < S; ++j) {
                // W_ij = base + row-wise(i) + column-wise(j) terms
                for (int64_t h = 0; h < H; ++h)
                    for (int64_t hp = 0; hp < H; ++hp)
                        w(h, hp) = cfg.base_mode == BaseMode::skip ? T(h == hp)
                                                                   : (*th.w_b)(h, hp);
                for (int64_t g = 0; g < G; ++g) {
                    if (cfg.q_lowrank)
                        for (int64_t h = 0; h < hpg; ++h)
                            for (int64_t hp = 0; hp < hpg; ++hp) {
                                T acc = 0;
                                for (int64_t r = 0; r < R; ++r)
                                    acc += dwq[g].first(0, i, r, h) * dwq[g].second(0, i, r, hp);
                                w(g * hpg + h, g * hpg + hp) += acc;
                            }
                    if (cfg.k_lowrank)
                        for (int64_t h = 0; h < hpg; ++h)
                            for (int64_t hp = 0; hp < hpg; ++hp) {
                                T acc = 0;
                                for (int64_t r = 0; r < R; ++r)
                                    acc += dwk[g].first(0, j, r, h) * dwk[g].second(0, j, r, hp);
                                w(g * hpg + h, g * hpg + hp) += acc;
                            }
                }
                for (int64_t h = 0; h < H; ++h) {
                    if (cfg.q_gate) w(h, h) += gq(0, i, h);
                    if (cfg.k_gate) w(h, h) += gk(0, j, h);
                }
                for (int64_t hp = 0; hp < H; ++hp) {
                    T acc = 0;
                    for (int64_t h = 0; h < H; ++h) acc += a(b, h, i, j) * w(h, hp);
                    out(b, hp, i, j) = acc;
                }
            }
    }
    return out;
}

// ---- dynamic non-equivalence witness ----

// Solve M X = rhs (column-wise) via Gauss-Jordan with partial pivoting.
inline Tensor<double> solve_linear(Tensor<double> m, Tensor<double> rhs) {
    const int64_t n = m.shape()[0], k = rhs.shape()[1];
    for (int64_t col = 0; col < n; ++col) {
        int64_t piv = col;
        for (int64_t r = col + 1; r < n; ++r)
            if (std::abs(m(r, col)) > std::abs(m(piv, col))) piv = r;
        if (piv != col) {
            for (int64_t c2 = 0; c2 < n; ++c2) std::swap(m(col, c2), m(piv, c2));
            for (int64_t c2 = 0; c2 < k; ++c2) std::swap(rhs(col, c2), rhs(piv, c2));
        }
        double d = m(col, col);
        if (d == 0) throw std::runtime_error("solve_linear: singular system");
        for (int64_t c2 = col; c2 < n; ++c2) m(col, c2) /= d;
        for (int64_t c2 = 0; c2 < k; ++c2) rhs(col, c2) /= d;
        for (int64_t r = 0; r < n; ++r) {
            if (r == col) continue;
            double f = m(r, col);
            if (f == 0) continue;
            for (int64_t c2 = col; c2 < n; ++c2) m(r, c2) -= f * m(col, c2);
            for (int64_t c2 = 0; c2 < k; ++c2) rhs(r, c2) -= f * rhs(col, c2);
        }
    }
    return rhs;
}

struct WitnessResult {
    double residual_fit;    // relative residual of the least-squares fit on pair 1
    double residual_other;  // relative residual of the fitted map on pair 2
};

// For a random trained-scale dynamic theta, fit a single static map C by least
// squares against Compose's action on one (Q_i, K_j) pair; measure how badly C
// reproduces the action on a second pair. A dynamic composition admits no
// single equivalent static map, so the second residual stays large.
inline WitnessResult static_fit_witness(const AttentionConfig& cfg_in, uint64_t seed, int64_t n_samples = 64) {
    AttentionConfig cfg = cfg_in;
    cfg.causal = false;
    cfg.window.reset();
    Rng rng(seed);
    Rng prng = rng.split(1);
    ComposeParams<double> th = ComposeParams<double>::zeros(cfg);
    // trained-scale draws: Xavier everywhere so the normalized dynamic weights
    // are O(1), unlike the deliberately tiny training initialization
    for (int64_t g = 0; g < cfg.groups; ++g) {
        th.w_q1[g] = init<double>(th.w_q1[g].shape(), InitSpec::xavier_normal(), prng);
        th.w_q2[g] = init<double>(th.w_q2[g].shape(), InitSpec::xavier_normal(), prng);
        th.w_k1[g] = init<double>(th.w_k1[g].shape(), InitSpec::xavier_normal(), prng);
        th.w_k2[g] = init<double>(th.w_k2[g].shape(), InitSpec::xavier_normal(), prng);
    }
    th.w_qg = init<double>(th.w_qg.shape(), InitSpec::xavier_normal(), prng);
    th.w_kg = init<double>(th.w_kg.shape(), InitSpec::xavier_normal(), prng);

    const int64_t H = cfg.n_heads;
    double qstd = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
    auto action = [&](const Tensor<double>& q1, const Tensor<double>& k1, const Tensor<double>& a_rows) {
        // apply Compose at the single position (0,0) to each sample row
        Tensor<double> out({a_rows.shape()[0], H});
        for (int64_t r = 0; r < a_rows.shape()[0]; ++r) {
            Tensor<double> a({1, H, 1, 1});
            for (int64_t h = 0; h < H; ++h) a(0, h, 0, 0) = a_rows(r, h);
            Tensor<double> composed = compose(a, q1, k1, th, cfg);
            for (int64_t h = 0; h < H; ++h) out(r, h) = composed(0, h, 0, 0);
        }
        return out;
    };

    Tensor<double> q1 = detail::randn({1, 1, cfg.d_model}, rng, qstd);
    Tensor<double> k1 = detail::randn({1, 1, cfg.d_model}, rng, qstd);
    Tensor<double> q2 = detail::randn({1, 1, cfg.d_model}, rng, qstd);
    Tensor<double> k2 = detail::randn({1, 1, cfg.d_model}, rng, qstd);
    Tensor<double> samples = detail::randn({n_samples, H}, rng);

    Tensor<double> y1 = action(q1, k1, samples);
    // least squares for C in samples * C = y1: C = (X^T X)^{-1} X^T y1
    Tensor<double> xtx = contract(samples, samples, "ni,nj->ij");
    Tensor<double> xty = contract(samples, y1, "ni,nj->ij");
    Tensor<double> c_fit = solve_linear(xtx, xty);

    auto rel_residual = [&](const Tensor<double>& y) {
        Tensor<double> pred = contract(samples, c_fit, "nh,hg->ng");
        return norm(sub(y, pred)) / norm(y);
    };
    double r1 = rel_residual(y1);
    double r2 = rel_residual(action(q2, k2, samples));
    return {r1, r2};
}

}  // namespace dcmha
