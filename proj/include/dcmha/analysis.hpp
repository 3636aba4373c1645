#pragma once

// Trained-model analysis: head-diversity curves (cumulative PCA variance of
// stacked per-head circuit matrices) and the per-attention-vector breakdown of
// Compose into its five branch terms.

#include "dcmha/model.hpp"

namespace dcmha {

// Eigenvalues of a symmetric matrix, descending (cyclic Jacobi).
inline std::vector<double> sym_eigenvalues_desc(Tensor<double> a) {
    const int64_t n = a.shape()[0];
    for (int sweep = 0; sweep < 128; ++sweep) {
        double off = 0;
        for (int64_t p = 0; p < n; ++p)
            for (int64_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
        if (off < 1e-28) break;
        for (int64_t p = 0; p < n; ++p)
            for (int64_t q = p + 1; q < n; ++q) {
                if (a(p, q) == 0) continue;
                double theta = (a(q, q) - a(p, p)) / (2 * a(p, q));
                double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1));
                double c = 1.0 / std::sqrt(t * t + 1), s = t * c;
                for (int64_t k = 0; k < n; ++k) {
                    double akp = a(k, p), akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (int64_t k = 0; k < n; ++k) {
                    double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
            }
    }
    std::vector<double> ev(n);
    for (int64_t i = 0; i < n; ++i) ev[i] = a(i, i);
    std::sort(ev.begin(), ev.end(), std::greater<double>());
    return ev;
}

// Cumulative captured variance of the rows of `stack` (H x D^2), k = 1..H.
// Degenerate all-zero stacks use the zero-variance convention: curve == 1.
inline std::vector<double> circuit_cumvar(const Tensor<double>& stack, bool center) {
    const int64_t H = stack.shape()[0], D2 = stack.shape()[1];
    double raw = 0;
    for (int64_t i = 0; i < stack.numel(); ++i) raw += stack[i] * stack[i];
    Tensor<double> s = stack;
    if (center)
        for (int64_t c = 0; c < D2; ++c) {
            double mean = 0;
            for (int64_t h = 0; h < H; ++h) mean += s(h, c);
            mean /= static_cast<double>(H);
            for (int64_t h = 0; h < H; ++h) s(h, c) -= mean;
        }
    Tensor<double> gram = contract(s, s, "hx,gx->hg");
    std::vector<double> ev = sym_eigenvalues_desc(gram);
    double total = 0;
    for (double e : ev) total += std::max(e, 0.0);
    std::vector<double> curve(H, 1.0);
    // zero-variance convention; the threshold is relative so that centering
    // round-off on an all-identical stack still counts as degenerate
    if (total <= 1e-18 * std::max(raw, 1.0)) return curve;
    double acc = 0;
    for (int64_t k = 0; k < H; ++k) {
        acc += std::max(ev[k], 0.0);
        curve[k] = acc / total;
    }
    return curve;
}

struct DiversityCurve {
    std::vector<double> qk;  // cumulative variance of stacked W_Q W_K^T circuits
    std::vector<double> ov;  // cumulative variance of stacked W_V W_O circuits
};

template <typename T>
std::vector<DiversityCurve> head_diversity(const Model<T>& m, bool center = true) {
    const ModelConfig& cfg = m.config();
    const int64_t H = cfg.n_heads, Dh = cfg.d_head, D = cfg.d_model;
    std::vector<DiversityCurve> out;
    for (int64_t l = 0; l < cfg.n_layers; ++l) {
        ProjectionParams<T> p = m.projection_params(l);
        Tensor<double> wq = p.w_q.template cast<double>();
        Tensor<double> wk = p.w_k.template cast<double>();
        Tensor<double> wv = p.w_v.template cast<double>();
        Tensor<double> wo = p.w_o.template cast<double>();
        Tensor<double> qk_stack({H, D * D}), ov_stack({H, D * D});
        for (int64_t h = 0; h < H; ++h) {
            Tensor<double> wq_h = slice_axis(wq, 1, h * Dh, (h + 1) * Dh);
            Tensor<double> wk_h = slice_axis(wk, 1, h * Dh, (h + 1) * Dh);
            Tensor<double> wv_h = slice_axis(wv, 1, h * Dh, (h + 1) * Dh);
            Tensor<double> wo_h = slice_axis(wo, 0, h * Dh, (h + 1) * Dh);
            Tensor<double> qk_circ = contract(wq_h, wk_h, "de,fe->df");
            Tensor<double> ov_circ = contract(wv_h, wo_h, "de,ef->df");
            std::copy_n(qk_circ.data(), D * D, qk_stack.data() + h * D * D);
            std::copy_n(ov_circ.data(), D * D, ov_stack.data() + h * D * D);
        }
        out.push_back({circuit_cumvar(qk_stack, center), circuit_cumvar(ov_stack, center)});
    }
    return out;
}

// ---- Compose branch breakdown ----

struct BranchBreakdown {
    std::vector<double> a;        // A_{:ij} entering the site
    std::vector<double> base;     // skip copy of A, or A W_b for the static base
    std::vector<double> o_qp, o_qg, o_kp, o_kg;
    std::vector<double> a_prime;  // composed vector from the diagnostic forward
    std::vector<Tensor<double>> w_k1_j, w_k2_j;  // per group (R,H') at key j
    std::vector<double> q_gate, k_gate;
};

template <typename T>
BranchBreakdown compose_breakdown(Model<T>& model, const std::vector<int32_t>& tokens, int64_t layer,
                                  const std::string& site, int64_t qi, int64_t kj) {
    const ModelConfig& mcfg = model.config();
    const int64_t Tlen = static_cast<int64_t>(tokens.size());
    if (layer < 0 || layer >= mcfg.n_layers) throw std::out_of_range("breakdown: layer out of range");
    if (site != "pre" && site != "post") throw std::invalid_argument("breakdown: site must be pre|post");
    if (qi < 0 || qi >= Tlen || kj < 0 || kj >= Tlen) throw std::out_of_range("breakdown: index out of range");

    AttentionConfig cfg = mcfg.layer_attn(layer);
    bool pre_site = site == "pre";
    if ((pre_site && !cfg.pre_compose) || (!pre_site && !cfg.post_compose))
        throw std::invalid_argument("breakdown: compose site '" + site + "' is disabled in this config");

    Tensor<T> x_in = model.attn_input(tokens, 1, Tlen, layer);
    ProjectionParams<T> proj = model.projection_params(layer);
    ComposeParams<T> th_pre = cfg.pre_compose ? model.site_params(layer, "pre")
                                              : ComposeParams<T>::zeros(cfg);
    ComposeParams<T> th_post = cfg.post_compose ? model.site_params(layer, "post")
                                                : ComposeParams<T>::zeros(cfg);
    DcmhaDiag<T> diag;
    dcmha_forward(x_in, x_in, x_in, proj, th_pre, th_post, cfg, &diag);

    const Tensor<T>& a_t = pre_site ? diag.scores : diag.weights;
    const Tensor<T>& ap_t = pre_site ? diag.pre_composed : diag.post_composed;
    const ComposeParams<T>& th = pre_site ? th_pre : th_post;

    const int64_t H = cfg.n_heads, G = cfg.groups, R = cfg.rank, hpg = cfg.heads_per_group();
    BranchBreakdown bd;
    bd.a.resize(H);
    bd.a_prime.resize(H);
    for (int64_t h = 0; h < H; ++h) {
        bd.a[h] = static_cast<double>(a_t(int64_t(0), h, qi, kj));
        bd.a_prime[h] = static_cast<double>(ap_t(int64_t(0), h, qi, kj));
    }
    bd.base.assign(H, 0.0);
    if (cfg.base_mode == BaseMode::skip) {
        bd.base = bd.a;
    } else {
        for (int64_t hp = 0; hp < H; ++hp)
            for (int64_t h = 0; h < H; ++h)
                bd.base[hp] += bd.a[h] * static_cast<double>((*th.w_b)(h, hp));
    }
    bd.o_qp.assign(H, 0.0);
    bd.o_kp.assign(H, 0.0);
    bd.o_qg.assign(H, 0.0);
    bd.o_kg.assign(H, 0.0);
    bd.q_gate.assign(H, 0.0);
    bd.k_gate.assign(H, 0.0);

    for (int64_t g = 0; g < G; ++g) {
        Tensor<double> z({R, hpg});
        bd.w_k1_j.push_back(z);
        bd.w_k2_j.push_back(z);
    }
    for (int64_t g = 0; g < G; ++g) {
        if (cfg.q_lowrank) {
            auto [dw1, dw2] = dw_proj(x_in, th.w_q1[g], th.w_q2[g], R, cfg.rmsnorm_eps);
            for (int64_t r = 0; r < R; ++r) {
                double inner = 0;
                for (int64_t h = 0; h < hpg; ++h)
                    inner += bd.a[g * hpg + h] * static_cast<double>(dw1(int64_t(0), qi, r, h));
                for (int64_t hp = 0; hp < hpg; ++hp)
                    bd.o_qp[g * hpg + hp] += inner * static_cast<double>(dw2(int64_t(0), qi, r, hp));
            }
        }
        if (cfg.k_lowrank) {
            auto [dw1, dw2] = dw_proj(x_in, th.w_k1[g], th.w_k2[g], R, cfg.rmsnorm_eps);
            for (int64_t r = 0; r < R; ++r) {
                double inner = 0;
                for (int64_t h = 0; h < hpg; ++h)
                    inner += bd.a[g * hpg + h] * static_cast<double>(dw1(int64_t(0), kj, r, h));
                for (int64_t hp = 0; hp < hpg; ++hp)
                    bd.o_kp[g * hpg + hp] += inner * static_cast<double>(dw2(int64_t(0), kj, r, hp));
                for (int64_t h = 0; h < hpg; ++h) {
                    bd.w_k1_j[g](r, h) = static_cast<double>(dw1(int64_t(0), kj, r, h));
                    bd.w_k2_j[g](r, h) = static_cast<double>(dw2(int64_t(0), kj, r, h));
                }
            }
        }
    }
    if (cfg.q_gate) {
        Tensor<T> gq = tanh(contract(x_in, th.w_qg, "btd,dh->bth"));
        for (int64_t h = 0; h < H; ++h) {
            bd.q_gate[h] = static_cast<double>(gq(int64_t(0), qi, h));
            bd.o_qg[h] = bd.a[h] * bd.q_gate[h];
        }
    }
    if (cfg.k_gate) {
        Tensor<T> gk = tanh(contract(x_in, th.w_kg, "btd,dh->bth"));
        for (int64_t h = 0; h < H; ++h) {
            bd.k_gate[h] = static_cast<double>(gk(int64_t(0), kj, h));
            bd.o_kg[h] = bd.a[h] * bd.k_gate[h];
        }
    }
    return bd;
}

inline json breakdown_json(const BranchBreakdown& bd) {
    json j{{"A", bd.a},       {"base", bd.base},   {"O_qp", bd.o_qp},   {"O_qg", bd.o_qg},
           {"O_kp", bd.o_kp}, {"O_kg", bd.o_kg},   {"A_prime", bd.a_prime},
           {"w_qg_gate", bd.q_gate}, {"w_kg_gate", bd.k_gate}};
    json k1 = json::array(), k2 = json::array();
    for (const auto& t : bd.w_k1_j) k1.push_back(t.vec());
    for (const auto& t : bd.w_k2_j) k2.push_back(t.vec());
    j["w_k1_j"] = k1;
    j["w_k2_j"] = k2;
    return j;
}

}  // namespace dcmha
