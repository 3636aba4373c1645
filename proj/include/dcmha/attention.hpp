#pragma once

// Multi-head attention with dynamically composed heads. Two Compose sites wrap
// the softmax: pre-compose transforms attention scores, post-compose transforms
// attention weights. Each Compose sums a base term (skip or static H x H map)
// with up to four dynamic branches: query/key low-rank projections and
// query/key gates, all computed from the raw layer inputs.
//
// Tensor-level functions here are the reference path (used by oracles, the
// decode cache and analysis); *_graph builders record the same computation on
// an autodiff tape for training.

#include <optional>

#include "dcmha/autodiff.hpp"
#include "dcmha/contract.hpp"
#include "dcmha/tensor.hpp"

namespace dcmha {

enum class BaseMode { skip, static_proj };

constexpr double kMaskValue = -1e9;  // finite additive mask; keeps gradients NaN-free

struct AttentionConfig {
    int64_t d_model = 128;
    int64_t n_heads = 8;
    int64_t d_head = 16;
    int64_t rank = 2;
    int64_t groups = 1;
    BaseMode base_mode = BaseMode::skip;
    bool q_lowrank = true, q_gate = true, k_lowrank = true, k_gate = true;
    bool pre_compose = true, post_compose = true;
    bool causal = true;
    std::optional<int64_t> window;
    bool use_rope = false;
    double rope_fraction = 1.0;
    bool use_qknorm = false;
    bool scale_before_compose = true;  // Eq.-form order; false defers 1/sqrt(D_h) until after pre-compose
    double rmsnorm_eps = 1e-6;

    int64_t heads_per_group() const { return n_heads / groups; }
    int64_t inner_dim() const { return 2 * heads_per_group() * rank; }
    bool any_compose() const { return pre_compose || post_compose; }

    void validate() const {
        if (n_heads <= 0 || d_head <= 0 || d_model <= 0 || rank < 1 || groups < 1)
            throw std::invalid_argument("attention config: dims must be positive");
        if (n_heads % groups != 0) throw std::invalid_argument("attention config: H mod G != 0");
        if (window && *window < 1) throw std::invalid_argument("attention config: window must be >= 1");
        if (use_rope) {
            int64_t rot = rotary_dims();
            if (rot % 2 != 0 || rot <= 0 || rot > d_head)
                throw std::invalid_argument("attention config: rope_fraction * d_head must be even");
        }
    }

    int64_t rotary_dims() const { return static_cast<int64_t>(std::llround(rope_fraction * d_head)); }
};

template <typename T>
struct ComposeParams {
    std::vector<Tensor<T>> w_q1, w_q2, w_k1, w_k2;  // per group: (D_m x I), (I x I)
    Tensor<T> w_qg, w_kg;                           // (D_m x H)
    std::optional<Tensor<T>> w_b;                   // (H x H), present iff base is static

    static ComposeParams zeros(const AttentionConfig& cfg) {
        ComposeParams p;
        int64_t I = cfg.inner_dim();
        for (int64_t g = 0; g < cfg.groups; ++g) {
            p.w_q1.push_back(Tensor<T>({cfg.d_model, I}));
            p.w_q2.push_back(Tensor<T>({I, I}));
            p.w_k1.push_back(Tensor<T>({cfg.d_model, I}));
            p.w_k2.push_back(Tensor<T>({I, I}));
        }
        p.w_qg = Tensor<T>({cfg.d_model, cfg.n_heads});
        p.w_kg = Tensor<T>({cfg.d_model, cfg.n_heads});
        if (cfg.base_mode == BaseMode::static_proj) {
            Tensor<T> eye({cfg.n_heads, cfg.n_heads});
            for (int64_t h = 0; h < cfg.n_heads; ++h) eye(h, h) = T(1);
            p.w_b = std::move(eye);
        }
        return p;
    }

    // Initialization stds: w_q2/w_k2 ~ N(0, 0.02/(sqrt(2 H' R) (H'+R))), gates
    // ~ N(0, 0.05 sqrt(2/(D_m+H))), w_q1/w_k1 Xavier normal, W_b identity.
    // These keep the dynamic contribution tiny at the start of training.
    static ComposeParams init(const AttentionConfig& cfg, Rng& rng) {
        ComposeParams p = zeros(cfg);
        int64_t hpg = cfg.heads_per_group(), R = cfg.rank;
        double std2 = 0.02 / (std::sqrt(2.0 * hpg * R) * static_cast<double>(hpg + R));
        double stdg = 0.05 * std::sqrt(2.0 / static_cast<double>(cfg.d_model + cfg.n_heads));
        for (int64_t g = 0; g < cfg.groups; ++g) {
            p.w_q1[g] = dcmha::init<T>(p.w_q1[g].shape(), InitSpec::xavier_normal(), rng);
            p.w_q2[g] = dcmha::init<T>(p.w_q2[g].shape(), InitSpec::normal(std2), rng);
            p.w_k1[g] = dcmha::init<T>(p.w_k1[g].shape(), InitSpec::xavier_normal(), rng);
            p.w_k2[g] = dcmha::init<T>(p.w_k2[g].shape(), InitSpec::normal(std2), rng);
        }
        p.w_qg = dcmha::init<T>(p.w_qg.shape(), InitSpec::normal(stdg), rng);
        p.w_kg = dcmha::init<T>(p.w_kg.shape(), InitSpec::normal(stdg), rng);
        return p;
    }
};

template <typename T>
struct ProjectionParams {
    Tensor<T> w_q, w_k, w_v;  // (D_m x H*D_h), head i owns columns [i*D_h, (i+1)*D_h)
    Tensor<T> w_o;            // (H*D_h x D_m)

    static ProjectionParams init(const AttentionConfig& cfg, Rng& rng) {
        ProjectionParams p;
        int64_t hd = cfg.n_heads * cfg.d_head;
        p.w_q = dcmha::init<T>({cfg.d_model, hd}, InitSpec::xavier_normal(), rng);
        p.w_k = dcmha::init<T>({cfg.d_model, hd}, InitSpec::xavier_normal(), rng);
        p.w_v = dcmha::init<T>({cfg.d_model, hd}, InitSpec::xavier_normal(), rng);
        p.w_o = dcmha::init<T>({hd, cfg.d_model}, InitSpec::xavier_normal(), rng);
        return p;
    }
};

// ---- rotary embedding ----

// Rotates the first `fraction * D_h` dims of (B,H,T,D_h) in adjacent 2-d planes
// by position-dependent angles with base-10000 geometric frequencies; the
// remaining dims pass through. `dir` = -1 applies the inverse rotation.
template <typename T>
Tensor<T> rope_apply(const Tensor<T>& x, int64_t start_pos, double fraction, int dir = 1) {
    const Shape& s = x.shape();
    int64_t dh = s.back(), tlen = s[s.size() - 2];
    int64_t rot = static_cast<int64_t>(std::llround(fraction * dh));
    if (rot % 2 != 0 || rot <= 0 || rot > dh)
        throw std::invalid_argument("rope: rotated dim count must be even and within head dim");
    Tensor<T> out = x;
    int64_t lanes = x.numel() / (tlen * dh);
    for (int64_t l = 0; l < lanes; ++l)
        for (int64_t t = 0; t < tlen; ++t) {
            T* row = out.data() + (l * tlen + t) * dh;
            double pos = static_cast<double>(start_pos + t);
            for (int64_t i = 0; i < rot / 2; ++i) {
                double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(rot));
                double ang = dir * pos * freq;
                T c = static_cast<T>(std::cos(ang)), sn = static_cast<T>(std::sin(ang));
                T x0 = row[2 * i], x1 = row[2 * i + 1];
                row[2 * i] = x0 * c - x1 * sn;
                row[2 * i + 1] = x0 * sn + x1 * c;
            }
        }
    return out;
}

template <typename T>
Var<T> rope(Var<T> x, int64_t start_pos, double fraction) {
    auto* xn = x.node();
    return x.tape()->record(rope_apply(x.value(), start_pos, fraction), {x},
                            [xn, start_pos, fraction](TapeNode<T>& n) {
                                acc_into(xn, rope_apply(n.grad, start_pos, fraction, -1));
                            });
}

// RMS-normalize each per-head position vector along the head dim.
template <typename T>
Tensor<T> qknorm(const Tensor<T>& x, double eps = 1e-6) {
    return rmsnorm_noscale(x, -1, static_cast<T>(eps));
}

// ---- masks ----

// Additive (T x S) mask: 0 where attention is allowed, kMaskValue elsewhere.
// `offset` aligns query row i with absolute position i + offset (used when S > T).
template <typename T>
Tensor<T> build_mask(const AttentionConfig& cfg, int64_t tlen, int64_t slen, int64_t offset = 0) {
    Tensor<T> m({tlen, slen});
    int64_t w = cfg.window ? std::min(*cfg.window, slen) : slen;
    for (int64_t i = 0; i < tlen; ++i) {
        int64_t qi = i + offset;
        for (int64_t j = 0; j < slen; ++j) {
            bool ok = true;
            if (cfg.causal && j > qi) ok = false;
            if (cfg.window && j < qi - w + 1) ok = false;
            m(i, j) = ok ? T(0) : static_cast<T>(kMaskValue);
        }
    }
    return m;
}

// ---- dw_proj: dynamic low-rank weights from one input stream ----

// dw = GELU(x W1) W2 chunked in two halves; both reshaped (.., R, H'); the
// down-projection half is RMS-normalized over the trailing head axis.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> dw_proj(const Tensor<T>& x, const Tensor<T>& w1, const Tensor<T>& w2,
                                        int64_t rank, double eps) {
    const int64_t I = w1.shape()[1];
    if (w2.shape()[0] != I || w2.shape()[1] != I)
        throw std::invalid_argument("dw_proj: W2 must be (I x I) with I = " + std::to_string(I));
    if (I % (2 * rank) != 0) throw std::invalid_argument("dw_proj: I must equal 2*H'*R");
    const int64_t hpg = I / (2 * rank);
    Tensor<T> dw = contract(gelu(contract(x, w1, "btd,di->bti")), w2, "bti,ij->btj");
    const int64_t B = x.shape()[0], L = x.shape()[1];
    Tensor<T> dw1 = slice_axis(dw, 2, 0, I / 2).reshaped({B, L, rank, hpg});
    Tensor<T> dw2 = slice_axis(dw, 2, I / 2, I).reshaped({B, L, rank, hpg});
    dw1 = rmsnorm_noscale(dw1, -1, static_cast<T>(eps));
    return {std::move(dw1), std::move(dw2)};
}

namespace detail {
template <typename T>
void add_into_heads(Tensor<T>& out, const Tensor<T>& part, int64_t h0) {
    const Shape& s = out.shape();  // (B,H,T,S)
    const int64_t H = s[1], plane = s[2] * s[3], hp = part.shape()[1];
    for (int64_t b = 0; b < s[0]; ++b)
        for (int64_t h = 0; h < hp; ++h) {
            T* dst = out.data() + ((b * H + h0 + h) * plane);
            const T* src = part.data() + ((b * hp + h) * plane);
            for (int64_t i = 0; i < plane; ++i) dst[i] += src[i];
        }
}
}  // namespace detail

// ---- Compose: base + selected dynamic branches over the head axis ----

template <typename T>
Tensor<T> compose(const Tensor<T>& a, const Tensor<T>& q_in, const Tensor<T>& k_in,
                  const ComposeParams<T>& th, const AttentionConfig& cfg) {
    const Shape& s = a.shape();  // (B,H,T,S)
    if (s.size() != 4 || s[1] != cfg.n_heads)
        throw std::invalid_argument("compose: attention tensor must be (B,H,T,S)");
    const int64_t hpg = cfg.heads_per_group();

    Tensor<T> out;
    if (cfg.base_mode == BaseMode::skip) {
        out = a;
    } else {
        if (!th.w_b) throw std::invalid_argument("compose: static base requires W_b");
        out = contract(a, *th.w_b, "bhts,hg->bgts");
    }

    for (int64_t g = 0; g < cfg.groups && (cfg.q_lowrank || cfg.k_lowrank); ++g) {
        Tensor<T> ag = cfg.groups == 1 ? a : slice_axis(a, 1, g * hpg, (g + 1) * hpg);
        if (cfg.q_lowrank) {
            auto [dw1, dw2] = dw_proj(q_in, th.w_q1[g], th.w_q2[g], cfg.rank, cfg.rmsnorm_eps);
            Tensor<T> o = contract(contract(ag, dw1, "bhts,btrh->brts"), dw2, "brts,btrh->bhts");
            detail::add_into_heads(out, o, g * hpg);
        }
        if (cfg.k_lowrank) {
            auto [dw1, dw2] = dw_proj(k_in, th.w_k1[g], th.w_k2[g], cfg.rank, cfg.rmsnorm_eps);
            Tensor<T> o = contract(contract(ag, dw1, "bhts,bsrh->brts"), dw2, "brts,bsrh->bhts");
            detail::add_into_heads(out, o, g * hpg);
        }
    }
    if (cfg.q_gate) {
        Tensor<T> gq = tanh(contract(q_in, th.w_qg, "btd,dh->bth"));
        out = add(out, contract(a, gq, "bhts,bth->bhts"));
    }
    if (cfg.k_gate) {
        Tensor<T> gk = tanh(contract(k_in, th.w_kg, "btd,dh->bth"));
        out = add(out, contract(a, gk, "bhts,bsh->bhts"));
    }
    return out;
}

// ---- forwards ----

template <typename T>
struct AttnOut {
    Tensor<T> output;   // (B,T,D_m)
    Tensor<T> weights;  // (B,H,T,S) post-softmax (and post-compose for DCMHA)
};

namespace detail {
template <typename T>
Tensor<T> project_heads(const Tensor<T>& x, const Tensor<T>& w, int64_t H, int64_t Dh) {
    Tensor<T> p = contract(x, w, "btd,de->bte");
    const Shape& s = x.shape();
    return permuted(p.reshaped({s[0], s[1], H, Dh}), {0, 2, 1, 3});  // (B,H,T,Dh)
}

template <typename T>
Tensor<T> heads_to_output(const Tensor<T>& o, const Tensor<T>& w_o) {
    const Shape& s = o.shape();  // (B,H,T,Dh)
    Tensor<T> merged = permuted(o, {0, 2, 1, 3}).reshaped({s[0], s[2], s[1] * s[3]});
    return contract(merged, w_o, "bte,ed->btd");
}

template <typename T>
struct QKV {
    Tensor<T> q, k, v;
};

template <typename T>
QKV<T> prepare_qkv(const Tensor<T>& q_in, const Tensor<T>& k_in, const Tensor<T>& v_in,
                   const ProjectionParams<T>& p, const AttentionConfig& cfg, int64_t q_pos0 = 0) {
    QKV<T> r;
    r.q = project_heads(q_in, p.w_q, cfg.n_heads, cfg.d_head);
    r.k = project_heads(k_in, p.w_k, cfg.n_heads, cfg.d_head);
    r.v = project_heads(v_in, p.w_v, cfg.n_heads, cfg.d_head);
    if (cfg.use_qknorm) {
        r.q = qknorm(r.q, cfg.rmsnorm_eps);
        r.k = qknorm(r.k, cfg.rmsnorm_eps);
    }
    if (cfg.use_rope) {
        r.q = rope_apply(r.q, q_pos0, cfg.rope_fraction);
        r.k = rope_apply(r.k, 0, cfg.rope_fraction);
    }
    return r;
}
}  // namespace detail

template <typename T>
AttnOut<T> mha_forward(const Tensor<T>& q_in, const Tensor<T>& k_in, const Tensor<T>& v_in,
                       const ProjectionParams<T>& p, const AttentionConfig& cfg) {
    cfg.validate();
    const int64_t tlen = q_in.shape()[1], slen = k_in.shape()[1];
    if (cfg.causal && tlen != slen)
        throw std::invalid_argument("mha_forward: causal full pass needs T == S");
    auto qkv = detail::prepare_qkv(q_in, k_in, v_in, p, cfg);
    Tensor<T> scores = scale(contract(qkv.q, qkv.k, "bhtd,bhsd->bhts"),
                             static_cast<T>(1.0 / std::sqrt(static_cast<double>(cfg.d_head))));
    Tensor<T> mask = build_mask<T>(cfg, tlen, slen);
    int64_t plane = tlen * slen;
    for (int64_t o = 0; o < scores.numel() / plane; ++o)
        for (int64_t i = 0; i < plane; ++i) scores[o * plane + i] += mask[i];
    Tensor<T> weights = softmax(scores, -1);
    return {detail::heads_to_output(contract(weights, qkv.v, "bhts,bhsd->bhtd"), p.w_o), weights};
}

template <typename T>
struct DcmhaDiag {
    Tensor<T> scores;         // scaled scores before pre-compose
    Tensor<T> pre_composed;   // after pre-compose (== scores when site off)
    Tensor<T> weights;        // post-softmax
    Tensor<T> post_composed;  // after post-compose (== weights when site off)
};

template <typename T>
AttnOut<T> dcmha_forward(const Tensor<T>& q_in, const Tensor<T>& k_in, const Tensor<T>& v_in,
                         const ProjectionParams<T>& p, const ComposeParams<T>& th_pre,
                         const ComposeParams<T>& th_post, const AttentionConfig& cfg,
                         DcmhaDiag<T>* diag = nullptr) {
    cfg.validate();
    const int64_t tlen = q_in.shape()[1], slen = k_in.shape()[1];
    if (cfg.causal && tlen != slen)
        throw std::invalid_argument("dcmha_forward: causal full pass needs T == S");
    auto qkv = detail::prepare_qkv(q_in, k_in, v_in, p, cfg);
    const T sc = static_cast<T>(1.0 / std::sqrt(static_cast<double>(cfg.d_head)));

    Tensor<T> a = contract(qkv.q, qkv.k, "bhtd,bhsd->bhts");
    if (cfg.scale_before_compose) a = scale(a, sc);
    if (diag) diag->scores = a;
    if (cfg.pre_compose) a = compose(a, q_in, k_in, th_pre, cfg);
    if (!cfg.scale_before_compose) a = scale(a, sc);
    if (diag) diag->pre_composed = a;

    Tensor<T> mask = build_mask<T>(cfg, tlen, slen);
    int64_t plane = tlen * slen;
    for (int64_t o = 0; o < a.numel() / plane; ++o)
        for (int64_t i = 0; i < plane; ++i) a[o * plane + i] += mask[i];
    Tensor<T> w = softmax(a, -1);
    if (diag) diag->weights = w;
    if (cfg.post_compose) w = compose(w, q_in, k_in, th_post, cfg);
    if (diag) diag->post_composed = w;

    return {detail::heads_to_output(contract(w, qkv.v, "bhts,bhsd->bhtd"), p.w_o), w};
}

// ---- incremental decoding ----

template <typename T>
struct DecodeCache {
    struct SiteEntry {
        Tensor<T> dw1, dw2;   // (G, R, H') key-side dynamic weights at this position
        std::vector<T> gate;  // (H) tanh(K_j W_kg)
    };
    struct Entry {
        Tensor<T> k, v;  // (H, D_h)
        std::optional<SiteEntry> pre, post;
    };
    std::vector<Entry> entries;
    int64_t size() const { return static_cast<int64_t>(entries.size()); }
};

namespace detail {
// dw_proj for a single position vector x (D_m) -> (G*R*H' halves)
template <typename T>
typename DecodeCache<T>::SiteEntry key_site_entry(const Tensor<T>& x, const ComposeParams<T>& th,
                                                  const AttentionConfig& cfg) {
    typename DecodeCache<T>::SiteEntry e;
    const int64_t G = cfg.groups, R = cfg.rank, hpg = cfg.heads_per_group(), H = cfg.n_heads;
    e.dw1 = Tensor<T>({G, R, hpg});
    e.dw2 = Tensor<T>({G, R, hpg});
    Tensor<T> xr = x.reshaped({1, 1, cfg.d_model});
    for (int64_t g = 0; g < G; ++g) {
        auto [dw1, dw2] = dw_proj(xr, th.w_k1[g], th.w_k2[g], R, cfg.rmsnorm_eps);
        for (int64_t r = 0; r < R; ++r)
            for (int64_t h = 0; h < hpg; ++h) {
                e.dw1(g, r, h) = dw1(0, 0, r, h);
                e.dw2(g, r, h) = dw2(0, 0, r, h);
            }
    }
    e.gate.resize(H);
    for (int64_t h = 0; h < H; ++h) {
        T acc = 0;
        for (int64_t d = 0; d < cfg.d_model; ++d) acc += x[d] * th.w_kg(d, h);
        e.gate[h] = std::tanh(acc);
    }
    return e;
}

// In-place Compose of one attention row a (H x S) for query position `pos`.
template <typename T>
void compose_row(Tensor<T>& a, const Tensor<T>& x, const ComposeParams<T>& th,
                 const AttentionConfig& cfg, const DecodeCache<T>& cache, bool pre_site) {
    const int64_t H = cfg.n_heads, S = a.shape()[1], G = cfg.groups, R = cfg.rank;
    const int64_t hpg = cfg.heads_per_group();
    Tensor<T> out;
    if (cfg.base_mode == BaseMode::skip) {
        out = a;
    } else {
        out = Tensor<T>({H, S});
        for (int64_t hp = 0; hp < H; ++hp)
            for (int64_t j = 0; j < S; ++j) {
                T acc = 0;
                for (int64_t h = 0; h < H; ++h) acc += a(h, j) * (*th.w_b)(h, hp);
                out(hp, j) = acc;
            }
    }

    Tensor<T> xr = x.reshaped({1, 1, cfg.d_model});
    if (cfg.q_lowrank) {
        for (int64_t g = 0; g < G; ++g) {
            auto [dw1, dw2] = dw_proj(xr, th.w_q1[g], th.w_q2[g], R, cfg.rmsnorm_eps);
            for (int64_t j = 0; j < S; ++j) {
                for (int64_t r = 0; r < R; ++r) {
                    T inner = 0;
                    for (int64_t h = 0; h < hpg; ++h) inner += a(g * hpg + h, j) * dw1(0, 0, r, h);
                    for (int64_t hp = 0; hp < hpg; ++hp) out(g * hpg + hp, j) += inner * dw2(0, 0, r, hp);
                }
            }
        }
    }
    if (cfg.k_lowrank) {
        for (int64_t j = 0; j < S; ++j) {
            const auto& se = pre_site ? *cache.entries[j].pre : *cache.entries[j].post;
            for (int64_t g = 0; g < G; ++g)
                for (int64_t r = 0; r < R; ++r) {
                    T inner = 0;
                    for (int64_t h = 0; h < hpg; ++h) inner += a(g * hpg + h, j) * se.dw1(g, r, h);
                    for (int64_t hp = 0; hp < hpg; ++hp) out(g * hpg + hp, j) += inner * se.dw2(g, r, hp);
                }
        }
    }
    if (cfg.q_gate) {
        std::vector<T> gq(H);
        for (int64_t h = 0; h < H; ++h) {
            T acc = 0;
            for (int64_t d = 0; d < cfg.d_model; ++d) acc += x[d] * th.w_qg(d, h);
            gq[h] = std::tanh(acc);
        }
        for (int64_t h = 0; h < H; ++h)
            for (int64_t j = 0; j < S; ++j) out(h, j) += a(h, j) * gq[h];
    }
    if (cfg.k_gate) {
        for (int64_t j = 0; j < S; ++j) {
            const auto& se = pre_site ? *cache.entries[j].pre : *cache.entries[j].post;
            for (int64_t h = 0; h < H; ++h) out(h, j) += a(h, j) * se.gate[h];
        }
    }
    a = std::move(out);
}
}  // namespace detail

// One decoding step: append the key-side cache entry for `x` (layer input at
// the next position), then compute that position's attention output. Key-side
// dynamic weights of earlier positions are never recomputed.
template <typename T>
Tensor<T> dcmha_decode_step(const Tensor<T>& x, DecodeCache<T>& cache, const ProjectionParams<T>& p,
                            const ComposeParams<T>* th_pre, const ComposeParams<T>* th_post,
                            const AttentionConfig& cfg) {
    cfg.validate();
    if (x.numel() != cfg.d_model) throw std::invalid_argument("decode_step: token state must be (D_m)");
    const int64_t H = cfg.n_heads, Dh = cfg.d_head, D = cfg.d_model;
    const int64_t pos = cache.size();
    if ((cfg.pre_compose && !th_pre) || (cfg.post_compose && !th_post))
        throw std::invalid_argument("decode_step: missing compose params for enabled site");

    typename DecodeCache<T>::Entry entry;
    auto project_row = [&](const Tensor<T>& w) {
        Tensor<T> r({H, Dh});
        for (int64_t h = 0; h < H; ++h)
            for (int64_t d = 0; d < Dh; ++d) {
                T acc = 0;
                for (int64_t e = 0; e < D; ++e) acc += x[e] * w(e, h * Dh + d);
                r(h, d) = acc;
            }
        return r;
    };
    Tensor<T> q = project_row(p.w_q);
    entry.k = project_row(p.w_k);
    entry.v = project_row(p.w_v);
    if (cfg.use_qknorm) {
        q = qknorm(q, cfg.rmsnorm_eps);
        entry.k = qknorm(entry.k, cfg.rmsnorm_eps);
    }
    if (cfg.use_rope) {
        q = rope_apply(q.reshaped({H, 1, Dh}), pos, cfg.rope_fraction).reshaped({H, Dh});
        entry.k = rope_apply(entry.k.reshaped({H, 1, Dh}), pos, cfg.rope_fraction).reshaped({H, Dh});
    }
    if (cfg.pre_compose) entry.pre = detail::key_site_entry(x, *th_pre, cfg);
    if (cfg.post_compose) entry.post = detail::key_site_entry(x, *th_post, cfg);
    cache.entries.push_back(std::move(entry));

    const int64_t S = cache.size();
    const T sc = static_cast<T>(1.0 / std::sqrt(static_cast<double>(Dh)));
    Tensor<T> a({H, S});
    for (int64_t h = 0; h < H; ++h)
        for (int64_t j = 0; j < S; ++j) {
            T acc = 0;
            const Tensor<T>& kj = cache.entries[j].k;
            for (int64_t d = 0; d < Dh; ++d) acc += q(h, d) * kj(h, d);
            a(h, j) = acc;
        }
    if (cfg.scale_before_compose) a = scale(a, sc);
    if (cfg.pre_compose) detail::compose_row(a, x, *th_pre, cfg, cache, true);
    if (!cfg.scale_before_compose) a = scale(a, sc);

    Tensor<T> mask = build_mask<T>(cfg, 1, S, pos);
    for (int64_t h = 0; h < H; ++h)
        for (int64_t j = 0; j < S; ++j) a(h, j) += mask(0, j);
    Tensor<T> w = softmax(a, -1);
    if (cfg.post_compose) detail::compose_row(w, x, *th_post, cfg, cache, false);

    Tensor<T> merged({1, 1, H * Dh});
    for (int64_t h = 0; h < H; ++h)
        for (int64_t d = 0; d < Dh; ++d) {
            T acc = 0;
            for (int64_t j = 0; j < S; ++j) acc += w(h, j) * cache.entries[j].v(h, d);
            merged(0, 0, h * Dh + d) = acc;
        }
    return contract(merged, p.w_o, "bte,ed->btd").reshaped({D});
}

// ---- autodiff graph builders (training path) ----

template <typename T>
struct ComposeVars {
    std::vector<Var<T>> w_q1, w_q2, w_k1, w_k2;
    Var<T> w_qg, w_kg;
    std::optional<Var<T>> w_b;
};

template <typename T>
struct ProjectionVars {
    Var<T> w_q, w_k, w_v, w_o;
};

template <typename T>
std::pair<Var<T>, Var<T>> dw_proj_graph(Var<T> x, Var<T> w1, Var<T> w2, int64_t rank, double eps) {
    const int64_t I = w1.value().shape()[1];
    const int64_t hpg = I / (2 * rank);
    const int64_t B = x.value().shape()[0], L = x.value().shape()[1];
    Var<T> h = gelu(contract(x, w1, "btd,di->bti"));
    Var<T> full = contract(h, w2, "bti,ij->btj");
    Var<T> dw1 = reshape(slice_axis(full, 2, 0, I / 2), {B, L, rank, hpg});
    Var<T> dw2 = reshape(slice_axis(full, 2, I / 2, I), {B, L, rank, hpg});
    dw1 = rmsnorm_noscale(dw1, -1, static_cast<T>(eps));
    return {dw1, dw2};
}

template <typename T>
Var<T> compose_graph(Var<T> a, Var<T> q_in, Var<T> k_in, const ComposeVars<T>& th,
                     const AttentionConfig& cfg) {
    const int64_t hpg = cfg.heads_per_group();
    Var<T> out = cfg.base_mode == BaseMode::skip ? a : contract(a, *th.w_b, "bhts,hg->bgts");

    if (cfg.q_lowrank || cfg.k_lowrank) {
        if (cfg.groups == 1) {
            if (cfg.q_lowrank) {
                auto [dw1, dw2] = dw_proj_graph(q_in, th.w_q1[0], th.w_q2[0], cfg.rank, cfg.rmsnorm_eps);
                out = add(out, contract(contract(a, dw1, "bhts,btrh->brts"), dw2, "brts,btrh->bhts"));
            }
            if (cfg.k_lowrank) {
                auto [dw1, dw2] = dw_proj_graph(k_in, th.w_k1[0], th.w_k2[0], cfg.rank, cfg.rmsnorm_eps);
                out = add(out, contract(contract(a, dw1, "bhts,bsrh->brts"), dw2, "brts,bsrh->bhts"));
            }
        } else {
            std::vector<Var<T>> parts;
            for (int64_t g = 0; g < cfg.groups; ++g) {
                Var<T> ag = slice_axis(a, 1, g * hpg, (g + 1) * hpg);
                std::optional<Var<T>> og;
                if (cfg.q_lowrank) {
                    auto [dw1, dw2] = dw_proj_graph(q_in, th.w_q1[g], th.w_q2[g], cfg.rank, cfg.rmsnorm_eps);
                    og = contract(contract(ag, dw1, "bhts,btrh->brts"), dw2, "brts,btrh->bhts");
                }
                if (cfg.k_lowrank) {
                    auto [dw1, dw2] = dw_proj_graph(k_in, th.w_k1[g], th.w_k2[g], cfg.rank, cfg.rmsnorm_eps);
                    Var<T> o = contract(contract(ag, dw1, "bhts,bsrh->brts"), dw2, "brts,bsrh->bhts");
                    og = og ? add(*og, o) : o;
                }
                parts.push_back(*og);
            }
            out = add(out, concat_axis(parts, 1));
        }
    }
    if (cfg.q_gate) {
        Var<T> gq = tanh(contract(q_in, th.w_qg, "btd,dh->bth"));
        out = add(out, contract(a, gq, "bhts,bth->bhts"));
    }
    if (cfg.k_gate) {
        Var<T> gk = tanh(contract(k_in, th.w_kg, "btd,dh->bth"));
        out = add(out, contract(a, gk, "bhts,bsh->bhts"));
    }
    return out;
}

// Full DCMHA on a tape; q_in/k_in/v_in are (B,T,D_m) layer inputs. The mask is
// a constant (T x S) additive tensor.
template <typename T>
Var<T> dcmha_graph(Var<T> q_in, Var<T> k_in, Var<T> v_in, const ProjectionVars<T>& p,
                   const ComposeVars<T>* th_pre, const ComposeVars<T>* th_post,
                   const AttentionConfig& cfg, const Tensor<T>& mask) {
    const int64_t B = q_in.value().shape()[0];
    const int64_t tlen = q_in.value().shape()[1], slen = k_in.value().shape()[1];
    const int64_t H = cfg.n_heads, Dh = cfg.d_head;
    auto project = [&](Var<T> x, Var<T> w, int64_t L) {
        return permute(reshape(contract(x, w, "btd,de->bte"), {B, L, H, Dh}), {0, 2, 1, 3});
    };
    Var<T> q = project(q_in, p.w_q, tlen);
    Var<T> k = project(k_in, p.w_k, slen);
    Var<T> v = project(v_in, p.w_v, slen);
    if (cfg.use_qknorm) {
        q = rmsnorm_noscale(q, -1, static_cast<T>(cfg.rmsnorm_eps));
        k = rmsnorm_noscale(k, -1, static_cast<T>(cfg.rmsnorm_eps));
    }
    if (cfg.use_rope) {
        q = rope(q, 0, cfg.rope_fraction);
        k = rope(k, 0, cfg.rope_fraction);
    }
    const T sc = static_cast<T>(1.0 / std::sqrt(static_cast<double>(Dh)));
    Var<T> a = contract(q, k, "bhtd,bhsd->bhts");
    if (cfg.scale_before_compose) a = scale(a, sc);
    if (cfg.pre_compose) a = compose_graph(a, q_in, k_in, *th_pre, cfg);
    if (!cfg.scale_before_compose) a = scale(a, sc);
    a = add_mask(a, mask);
    Var<T> w = softmax(a, -1);
    if (cfg.post_compose) w = compose_graph(w, q_in, k_in, *th_post, cfg);
    Var<T> o = contract(w, v, "bhts,bhsd->bhtd");
    Var<T> merged = reshape(permute(o, {0, 2, 1, 3}), {B, tlen, H * Dh});
    return contract(merged, p.w_o, "bte,ed->btd");
}

}  // namespace dcmha
