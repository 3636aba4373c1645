#pragma once

// Analytic parameter/FLOP overhead ratios of DCMHA and shape-derived counters.
//
// Counting convention: counters tally multiply-accumulates, the same unit as
// the overhead-ratio numerators (whose leading factors of 2 come from counting
// the query and key sides of both compose sites). One MAC = 2 scalar FLOPs.
// The exact FLOP ratio uses the expanded form
//   [2(T+S)(2 D_h R H^2 + 4 R^2 H^2 + D_h H^2) + 4 T S H (2R+1)]
//     / (H D_h T (12 D_m + S));
// the compact first-line form in the source derivation has a bracket typo, the
// expanded line is the authoritative one.

#include <optional>

#include "dcmha/attention.hpp"

namespace dcmha {

struct ComplexityInputs {
    int64_t R = 2;
    int64_t H = 32;
    int64_t D_h = 64;
    std::optional<int64_t> D_m;  // defaults to H * D_h
    int64_t S = 2048;            // sequence length (T = S, self-attention)
    int64_t L = 24;              // layers; ratios are per-layer so L cancels

    int64_t d_model() const { return D_m ? *D_m : H * D_h; }
    double rho() const { return static_cast<double>(S) / static_cast<double>(d_model()); }
};

struct DeltaRatio {
    double exact = 0;
    double approx = 0;
};

// Extra parameters of theta_pre + theta_post relative to one layer's 12 D_m^2.
inline DeltaRatio delta_params(const ComplexityInputs& in) {
    const double R = static_cast<double>(in.R), H = static_cast<double>(in.H);
    const double Dm = static_cast<double>(in.d_model()), Dh = static_cast<double>(in.D_h);
    DeltaRatio r;
    r.exact = (4.0 * Dm * (2.0 * R * H) + 4.0 * (2.0 * R * H) * (2.0 * R * H) + 4.0 * Dm * H) /
              (12.0 * Dm * Dm);
    r.approx = (2.0 * R + 1.0) / (3.0 * Dh);
    return r;
}

// Extra forward FLOPs of the two compose functions relative to one layer.
inline DeltaRatio delta_flops(const ComplexityInputs& in) {
    const double R = static_cast<double>(in.R), H = static_cast<double>(in.H);
    const double Dm = static_cast<double>(in.d_model()), Dh = static_cast<double>(in.D_h);
    const double S = static_cast<double>(in.S), T = S;
    DeltaRatio r;
    r.exact = (2.0 * (T + S) * (2.0 * Dh * R * H * H + 4.0 * R * R * H * H + Dh * H * H) +
               4.0 * T * S * H * (2.0 * R + 1.0)) /
              (H * Dh * T * (12.0 * Dm + S));
    double rho = in.rho();
    r.approx = 4.0 * (2.0 * R + 1.0) * (1.0 + rho) / ((12.0 + rho) * Dh);
    return r;
}

// ---- exact counters from a concrete attention configuration ----

struct ComposeParamCounts {
    int64_t lowrank = 0;  // W_q1/W_q2/W_k1/W_k2 across groups and sites
    int64_t gates = 0;    // W_qg/W_kg across sites
    int64_t base = 0;     // W_b across sites (static base only)
    int64_t total() const { return lowrank + gates + base; }
};

inline ComposeParamCounts count_compose_params(const AttentionConfig& cfg) {
    ComposeParamCounts c;
    const int64_t I = cfg.inner_dim();
    const int64_t sites = (cfg.pre_compose ? 1 : 0) + (cfg.post_compose ? 1 : 0);
    int64_t per_side = cfg.groups * (cfg.d_model * I + I * I);
    if (cfg.q_lowrank) c.lowrank += sites * per_side;
    if (cfg.k_lowrank) c.lowrank += sites * per_side;
    if (cfg.q_gate) c.gates += sites * cfg.d_model * cfg.n_heads;
    if (cfg.k_gate) c.gates += sites * cfg.d_model * cfg.n_heads;
    if (cfg.base_mode == BaseMode::static_proj) c.base += sites * cfg.n_heads * cfg.n_heads;
    return c;
}

inline int64_t count_attention_base_params(const AttentionConfig& cfg) {
    return 4 * cfg.d_model * cfg.n_heads * cfg.d_head;  // W_Q, W_K, W_V, W_O
}

struct ComposeFlopCounts {  // multiply-accumulate counts per layer forward
    int64_t dw_generate = 0;
    int64_t gate_generate = 0;
    int64_t gate_apply = 0;
    int64_t lowrank_apply = 0;
    int64_t base_apply = 0;
    int64_t layer_total = 0;  // 12 D_m^2 T dense + 2 T S D_m attention matmuls
    int64_t extra_total() const { return dw_generate + gate_generate + gate_apply + lowrank_apply + base_apply; }
    double ratio() const { return static_cast<double>(extra_total()) / static_cast<double>(layer_total); }
};

inline ComposeFlopCounts count_compose_flops(const AttentionConfig& cfg, int64_t T, int64_t S) {
    ComposeFlopCounts c;
    const int64_t I = cfg.inner_dim(), G = cfg.groups, H = cfg.n_heads, R = cfg.rank;
    const int64_t Dm = cfg.d_model;
    const int64_t sites = (cfg.pre_compose ? 1 : 0) + (cfg.post_compose ? 1 : 0);
    if (cfg.q_lowrank) {
        c.dw_generate += sites * G * T * (Dm * I + I * I);
        c.lowrank_apply += sites * 2 * T * S * H * R;
    }
    if (cfg.k_lowrank) {
        c.dw_generate += sites * G * S * (Dm * I + I * I);
        c.lowrank_apply += sites * 2 * T * S * H * R;
    }
    if (cfg.q_gate) {
        c.gate_generate += sites * T * Dm * H;
        c.gate_apply += sites * T * S * H;
    }
    if (cfg.k_gate) {
        c.gate_generate += sites * S * Dm * H;
        c.gate_apply += sites * T * S * H;
    }
    if (cfg.base_mode == BaseMode::static_proj) c.base_apply += sites * T * S * H * H;
    c.layer_total = 12 * Dm * Dm * T + 2 * T * S * Dm;
    return c;
}

}  // namespace dcmha
