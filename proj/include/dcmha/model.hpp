#pragma once

// Desk-scale decoder-only transformer covering the four variants: Transformer
// (learned positions + GELU MLP + LayerNorm), Transformer++ (RoPE + SwiGLU +
// RMSNorm), and their DCMHA counterparts DCFormer / DCFormer++. Pre-norm
// residual blocks, untied embeddings by default, no dropout, no biases on
// linear projections.

#include <chrono>
#include <filesystem>
#include <functional>

#include <json.hpp>

#include "dcmha/attention.hpp"
#include "dcmha/autodiff.hpp"
#include "dcmha/checkpoint.hpp"
#include "dcmha/data.hpp"

namespace dcmha {

enum class MlpKind { standard, swiglu };
enum class NormKind { layernorm, rmsnorm };
enum class PositionalKind { learned, rope };

struct ModelConfig {
    int64_t n_layers = 4;
    int64_t d_model = 128;
    int64_t n_heads = 8;
    int64_t d_head = 16;
    int64_t vocab_size = 128;
    int64_t max_seq_len = 128;
    AttentionConfig attn;  // window here is the local-layer window length
    MlpKind mlp = MlpKind::swiglu;
    int64_t mlp_hidden_override = 0;  // 0 derives from kind
    NormKind norm = NormKind::rmsnorm;
    PositionalKind positional = PositionalKind::rope;
    std::string local_global_pattern = "LG";
    bool tie_embeddings = false;
    bool parallel_block = false;

    int64_t mlp_hidden() const {
        if (mlp_hidden_override > 0) return mlp_hidden_override;
        if (mlp == MlpKind::standard) return 4 * d_model;
        return (8 * d_model / 3 + 7) / 8 * 8;  // 8/3 d, rounded up to a multiple of 8
    }

    void validate() const {
        if (d_model != n_heads * d_head)
            throw std::invalid_argument("model config: d_model must equal n_heads * d_head");
        if (local_global_pattern.empty() ||
            n_layers % static_cast<int64_t>(local_global_pattern.size()) != 0)
            throw std::invalid_argument("model config: pattern length must divide n_layers");
        for (char c : local_global_pattern)
            if (c != 'L' && c != 'G')
                throw std::invalid_argument("model config: pattern must be over {L,G}");
        layer_attn(0).validate();
    }

    AttentionConfig layer_attn(int64_t layer) const {
        AttentionConfig c = attn;
        c.d_model = d_model;
        c.n_heads = n_heads;
        c.d_head = d_head;
        c.causal = true;
        c.use_rope = positional == PositionalKind::rope;
        char kind = local_global_pattern[layer % local_global_pattern.size()];
        if (kind == 'G') c.window.reset();
        return c;
    }
};

struct TrainConfig {
    double lr = 1e-3;
    double beta1 = 0.9, beta2 = 0.95;
    double grad_clip = 1.0;
    double weight_decay = 0.1;
    double warmup_frac = 0.01;
    double final_lr_frac = 0.1;
    double adam_eps = 1e-8;
    int64_t steps = 3000;
    int64_t batch_size = 8;
    uint64_t seed = 0;
    std::string dtype = "float32";
};

// ---- config JSON ----

inline void to_json(json& j, const AttentionConfig& c) {
    j = json{{"rank", c.rank},
             {"groups", c.groups},
             {"base_mode", c.base_mode == BaseMode::skip ? "skip" : "static"},
             {"q_lowrank", c.q_lowrank},
             {"q_gate", c.q_gate},
             {"k_lowrank", c.k_lowrank},
             {"k_gate", c.k_gate},
             {"pre_compose", c.pre_compose},
             {"post_compose", c.post_compose},
             {"window", c.window ? json(*c.window) : json(nullptr)},
             {"rope_fraction", c.rope_fraction},
             {"use_qknorm", c.use_qknorm},
             {"scale_before_compose", c.scale_before_compose},
             {"rmsnorm_eps", c.rmsnorm_eps}};
}

inline void from_json(const json& j, AttentionConfig& c) {
    c = AttentionConfig{};
    c.rank = j.value("rank", c.rank);
    c.groups = j.value("groups", c.groups);
    std::string base = j.value("base_mode", "skip");
    c.base_mode = base == "static" ? BaseMode::static_proj : BaseMode::skip;
    c.q_lowrank = j.value("q_lowrank", c.q_lowrank);
    c.q_gate = j.value("q_gate", c.q_gate);
    c.k_lowrank = j.value("k_lowrank", c.k_lowrank);
    c.k_gate = j.value("k_gate", c.k_gate);
    c.pre_compose = j.value("pre_compose", c.pre_compose);
    c.post_compose = j.value("post_compose", c.post_compose);
    if (j.contains("window") && !j.at("window").is_null()) c.window = j.at("window").get<int64_t>();
    c.rope_fraction = j.value("rope_fraction", c.rope_fraction);
    c.use_qknorm = j.value("use_qknorm", c.use_qknorm);
    c.scale_before_compose = j.value("scale_before_compose", c.scale_before_compose);
    c.rmsnorm_eps = j.value("rmsnorm_eps", c.rmsnorm_eps);
}

inline void to_json(json& j, const ModelConfig& c) {
    j = json{{"n_layers", c.n_layers},
             {"d_model", c.d_model},
             {"n_heads", c.n_heads},
             {"d_head", c.d_head},
             {"vocab_size", c.vocab_size},
             {"max_seq_len", c.max_seq_len},
             {"attn", c.attn},
             {"mlp", c.mlp == MlpKind::standard ? "standard" : "swiglu"},
             {"mlp_hidden_override", c.mlp_hidden_override},
             {"norm", c.norm == NormKind::layernorm ? "layernorm" : "rmsnorm"},
             {"positional", c.positional == PositionalKind::learned ? "learned" : "rope"},
             {"local_global_pattern", c.local_global_pattern},
             {"tie_embeddings", c.tie_embeddings},
             {"parallel_block", c.parallel_block}};
}

inline void from_json(const json& j, ModelConfig& c) {
    c = ModelConfig{};
    c.n_layers = j.value("n_layers", c.n_layers);
    c.d_model = j.value("d_model", c.d_model);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.d_head = j.value("d_head", c.d_head);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
    if (j.contains("attn")) c.attn = j.at("attn").get<AttentionConfig>();
    c.mlp = j.value("mlp", "swiglu") == std::string("standard") ? MlpKind::standard : MlpKind::swiglu;
    c.mlp_hidden_override = j.value("mlp_hidden_override", int64_t(0));
    c.norm = j.value("norm", "rmsnorm") == std::string("layernorm") ? NormKind::layernorm
                                                                    : NormKind::rmsnorm;
    c.positional = j.value("positional", "rope") == std::string("learned") ? PositionalKind::learned
                                                                           : PositionalKind::rope;
    c.local_global_pattern = j.value("local_global_pattern", c.local_global_pattern);
    c.tie_embeddings = j.value("tie_embeddings", c.tie_embeddings);
    c.parallel_block = j.value("parallel_block", c.parallel_block);
}

inline void to_json(json& j, const TrainConfig& c) {
    j = json{{"lr", c.lr},           {"beta1", c.beta1},
             {"beta2", c.beta2},     {"grad_clip", c.grad_clip},
             {"weight_decay", c.weight_decay}, {"warmup_frac", c.warmup_frac},
             {"final_lr_frac", c.final_lr_frac}, {"adam_eps", c.adam_eps},
             {"steps", c.steps},     {"batch_size", c.batch_size},
             {"seed", c.seed},       {"dtype", c.dtype}};
}

inline void from_json(const json& j, TrainConfig& c) {
    c = TrainConfig{};
    c.lr = j.value("lr", c.lr);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.warmup_frac = j.value("warmup_frac", c.warmup_frac);
    c.final_lr_frac = j.value("final_lr_frac", c.final_lr_frac);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    c.dtype = j.value("dtype", c.dtype);
}

// ---- parameters ----

template <typename T>
struct Param {
    std::string name;
    Tensor<T> value;
    Tensor<T> adam_m, adam_v;
    bool decay = true;
};

template <typename T>
class ParamStore {
public:
    Param<T>& add(std::string name, Tensor<T> value, bool decay) {
        items_.push_back(Param<T>{std::move(name), std::move(value), {}, {}, decay});
        return items_.back();
    }
    Param<T>& at(const std::string& name) {
        for (auto& p : items_)
            if (p.name == name) return p;
        throw std::out_of_range("no parameter named '" + name + "'");
    }
    const Param<T>& at(const std::string& name) const {
        return const_cast<ParamStore*>(this)->at(name);
    }
    std::vector<Param<T>>& items() { return items_; }
    const std::vector<Param<T>>& items() const { return items_; }

private:
    std::vector<Param<T>> items_;
};

// ---- model ----

template <typename T>
class Model {
public:
    Model(ModelConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        Rng root(seed);
        uint64_t stream = 0;
        auto draw = [&](const std::string& name, Shape shape, InitSpec spec, bool decay) {
            Rng r = root.split(stream++);
            params_.add(name, init<T>(shape, spec, r), decay);
        };
        const int64_t D = cfg_.d_model, V = cfg_.vocab_size, HD = cfg_.n_heads * cfg_.d_head;
        draw("embed.tok", {V, D}, InitSpec::xavier_normal(), true);
        if (cfg_.positional == PositionalKind::learned)
            draw("embed.pos", {cfg_.max_seq_len, D}, InitSpec::normal(0.01), true);
        for (int64_t l = 0; l < cfg_.n_layers; ++l) {
            std::string lp = "layer" + std::to_string(l) + ".";
            AttentionConfig ac = cfg_.layer_attn(l);
            draw(lp + "attn.W_Q", {D, HD}, InitSpec::xavier_normal(), true);
            draw(lp + "attn.W_K", {D, HD}, InitSpec::xavier_normal(), true);
            draw(lp + "attn.W_V", {D, HD}, InitSpec::xavier_normal(), true);
            draw(lp + "attn.W_O", {HD, D}, InitSpec::xavier_normal(), true);
            for (const char* site : {"pre", "post"}) {
                bool on = site == std::string("pre") ? ac.pre_compose : ac.post_compose;
                if (!on) continue;
                Rng r = root.split(stream++);
                ComposeParams<T> cp = ComposeParams<T>::init(ac, r);
                std::string sp = lp + "attn." + site + ".";
                auto gname = [&](const char* base, int64_t g) {
                    return ac.groups == 1 ? sp + base : sp + base + ".group" + std::to_string(g);
                };
                for (int64_t g = 0; g < ac.groups; ++g) {
                    if (ac.q_lowrank) {
                        params_.add(gname("W_q1", g), cp.w_q1[g], true);
                        params_.add(gname("W_q2", g), cp.w_q2[g], true);
                    }
                    if (ac.k_lowrank) {
                        params_.add(gname("W_k1", g), cp.w_k1[g], true);
                        params_.add(gname("W_k2", g), cp.w_k2[g], true);
                    }
                }
                if (ac.q_gate) params_.add(sp + "W_qg", cp.w_qg, true);
                if (ac.k_gate) params_.add(sp + "W_kg", cp.w_kg, true);
                if (ac.base_mode == BaseMode::static_proj) params_.add(sp + "W_b", *cp.w_b, true);
            }
            draw(lp + "norm1.gain", {D}, InitSpec::zeros(), false);
            fill_ones(params_.at(lp + "norm1.gain").value);
            draw(lp + "norm2.gain", {D}, InitSpec::zeros(), false);
            fill_ones(params_.at(lp + "norm2.gain").value);
            if (cfg_.norm == NormKind::layernorm) {
                draw(lp + "norm1.bias", {D}, InitSpec::zeros(), false);
                draw(lp + "norm2.bias", {D}, InitSpec::zeros(), false);
            }
            int64_t hidden = cfg_.mlp_hidden();
            if (cfg_.mlp == MlpKind::swiglu) draw(lp + "mlp.W_gate", {D, hidden}, InitSpec::xavier_normal(), true);
            draw(lp + "mlp.W_in", {D, hidden}, InitSpec::xavier_normal(), true);
            draw(lp + "mlp.W_out", {hidden, D}, InitSpec::xavier_normal(), true);
        }
        draw("final_norm.gain", {D}, InitSpec::zeros(), false);
        fill_ones(params_.at("final_norm.gain").value);
        if (cfg_.norm == NormKind::layernorm) draw("final_norm.bias", {D}, InitSpec::zeros(), false);
        if (!cfg_.tie_embeddings) draw("unembed.W", {D, V}, InitSpec::xavier_normal(), true);
    }

    const ModelConfig& config() const { return cfg_; }
    ParamStore<T>& params() { return params_; }
    const ParamStore<T>& params() const { return params_; }

    // Builds the full forward graph and returns (B,T,vocab) logits. The leaf
    // Var of each parameter is exposed through `leaves_out` for the optimizer.
    // When `stop_at_attn_input` >= 0, returns that layer's normed attention
    // input instead (diagnostic path for the analysis tooling).
    Var<T> forward(Tape<T>& tape, const std::vector<int32_t>& ids, int64_t B, int64_t Tlen,
                   bool requires_grad, std::map<std::string, Var<T>>* leaves_out = nullptr,
                   int64_t stop_at_attn_input = -1) {
        if (Tlen > cfg_.max_seq_len) throw std::invalid_argument("forward: T exceeds max_seq_len");
        std::map<std::string, Var<T>> vars;
        for (auto& p : params_.items()) vars.emplace(p.name, tape.leaf(p.value, requires_grad, p.name));
        if (leaves_out) *leaves_out = vars;

        Var<T> x = embedding(vars.at("embed.tok"), ids, B, Tlen);
        if (cfg_.positional == PositionalKind::learned) {
            Var<T> pos = slice_axis(vars.at("embed.pos"), 0, 0, Tlen);
            Var<T> pos3 = reshape(pos, {1, Tlen, cfg_.d_model});
            // broadcast add over batch: materialize by stacking
            std::vector<Var<T>> reps(B, pos3);
            x = add(x, B == 1 ? pos3 : concat_axis(reps, 0));
        }

        for (int64_t l = 0; l < cfg_.n_layers; ++l) {
            std::string lp = "layer" + std::to_string(l) + ".";
            AttentionConfig ac = cfg_.layer_attn(l);
            Tensor<T> mask = build_mask<T>(ac, Tlen, Tlen);

            Var<T> a_in = norm_graph(x, lp + "norm1", vars);
            if (l == stop_at_attn_input) return a_in;
            ProjectionVars<T> pv{vars.at(lp + "attn.W_Q"), vars.at(lp + "attn.W_K"),
                                 vars.at(lp + "attn.W_V"), vars.at(lp + "attn.W_O")};
            std::optional<ComposeVars<T>> pre, post;
            if (ac.pre_compose) pre = compose_vars(lp + "attn.pre.", ac, vars);
            if (ac.post_compose) post = compose_vars(lp + "attn.post.", ac, vars);
            Var<T> attn = dcmha_graph(a_in, a_in, a_in, pv, pre ? &*pre : nullptr,
                                      post ? &*post : nullptr, ac, mask);
            if (cfg_.parallel_block) {
                Var<T> m_in = norm_graph(x, lp + "norm2", vars);
                x = add(add(x, attn), mlp_graph(m_in, lp, vars));
            } else {
                x = add(x, attn);
                Var<T> m_in = norm_graph(x, lp + "norm2", vars);
                x = add(x, mlp_graph(m_in, lp, vars));
            }
        }
        x = norm_graph(x, "final_norm", vars);
        if (cfg_.tie_embeddings) return contract(x, vars.at("embed.tok"), "btd,vd->btv");
        return contract(x, vars.at("unembed.W"), "btd,dv->btv");
    }

    Tensor<T> forward_logits(const std::vector<int32_t>& ids, int64_t B, int64_t Tlen) {
        Tape<T> tape;
        return forward(tape, ids, B, Tlen, false).value();
    }

    // Normed attention input of one layer (B,T,D_m), for diagnostics.
    Tensor<T> attn_input(const std::vector<int32_t>& ids, int64_t B, int64_t Tlen, int64_t layer) {
        if (layer < 0 || layer >= cfg_.n_layers) throw std::out_of_range("attn_input: layer out of range");
        Tape<T> tape;
        return forward(tape, ids, B, Tlen, false, nullptr, layer).value();
    }

    ProjectionParams<T> projection_params(int64_t layer) const {
        std::string lp = "layer" + std::to_string(layer) + ".";
        return ProjectionParams<T>{params_.at(lp + "attn.W_Q").value, params_.at(lp + "attn.W_K").value,
                                   params_.at(lp + "attn.W_V").value, params_.at(lp + "attn.W_O").value};
    }

    // theta of one compose site ("pre"/"post") of one layer.
    ComposeParams<T> site_params(int64_t layer, const std::string& site) const {
        AttentionConfig ac = cfg_.layer_attn(layer);
        bool on = site == "pre" ? ac.pre_compose : ac.post_compose;
        if (!on) throw std::invalid_argument("site_params: compose site '" + site + "' is disabled");
        return compose_params("layer" + std::to_string(layer) + ".attn." + site + ".", ac);
    }

    // ---- incremental decoding ----

    struct GenState {
        std::vector<DecodeCache<T>> caches;  // one per layer
        int64_t pos = 0;
    };

    GenState make_gen_state() const { return GenState{std::vector<DecodeCache<T>>(cfg_.n_layers), 0}; }

    // Feeds one token; returns that position's logits (vocab).
    Tensor<T> decode_step(GenState& st, int32_t token) {
        if (st.pos >= cfg_.max_seq_len) throw std::invalid_argument("decode: max_seq_len overflow");
        const int64_t D = cfg_.d_model, V = cfg_.vocab_size;
        if (token < 0 || token >= V) throw std::out_of_range("decode: token id out of range");
        Tensor<T> x({D});
        const Tensor<T>& emb = params_.at("embed.tok").value;
        std::copy_n(emb.data() + static_cast<int64_t>(token) * D, D, x.data());
        if (cfg_.positional == PositionalKind::learned) {
            const Tensor<T>& pos = params_.at("embed.pos").value;
            for (int64_t d = 0; d < D; ++d) x[d] += pos(st.pos, d);
        }
        for (int64_t l = 0; l < cfg_.n_layers; ++l) {
            std::string lp = "layer" + std::to_string(l) + ".";
            AttentionConfig ac = cfg_.layer_attn(l);
            Tensor<T> a_in = norm_row(x, lp + "norm1");
            ProjectionParams<T> proj{params_.at(lp + "attn.W_Q").value, params_.at(lp + "attn.W_K").value,
                                     params_.at(lp + "attn.W_V").value, params_.at(lp + "attn.W_O").value};
            std::optional<ComposeParams<T>> pre, post;
            if (ac.pre_compose) pre = compose_params(lp + "attn.pre.", ac);
            if (ac.post_compose) post = compose_params(lp + "attn.post.", ac);
            Tensor<T> attn = dcmha_decode_step(a_in, st.caches[l], proj, pre ? &*pre : nullptr,
                                               post ? &*post : nullptr, ac);
            if (cfg_.parallel_block) {
                Tensor<T> m_in = norm_row(x, lp + "norm2");
                Tensor<T> m = mlp_row(m_in, lp);
                for (int64_t d = 0; d < D; ++d) x[d] += attn[d] + m[d];
            } else {
                for (int64_t d = 0; d < D; ++d) x[d] += attn[d];
                Tensor<T> m = mlp_row(norm_row(x, lp + "norm2"), lp);
                for (int64_t d = 0; d < D; ++d) x[d] += m[d];
            }
        }
        x = norm_row(x, "final_norm");
        Tensor<T> logits({V});
        if (cfg_.tie_embeddings) {
            for (int64_t v = 0; v < V; ++v) {
                T acc = 0;
                for (int64_t d = 0; d < D; ++d) acc += x[d] * emb(v, d);
                logits[v] = acc;
            }
        } else {
            const Tensor<T>& u = params_.at("unembed.W").value;
            for (int64_t v = 0; v < V; ++v) {
                T acc = 0;
                for (int64_t d = 0; d < D; ++d) acc += x[d] * u(d, v);
                logits[v] = acc;
            }
        }
        st.pos++;
        return logits;
    }

    // Greedy generation via the decode cache; ties resolve to the lowest id.
    std::vector<int32_t> generate(const std::vector<int32_t>& prompt, int64_t n_tokens,
                                  std::vector<Tensor<T>>* step_logits = nullptr) {
        if (prompt.empty()) throw std::invalid_argument("generate: empty prompt");
        if (static_cast<int64_t>(prompt.size()) + n_tokens > cfg_.max_seq_len)
            throw std::invalid_argument("generate: prompt + n_tokens exceeds max_seq_len");
        GenState st = make_gen_state();
        std::vector<int32_t> out = prompt;
        Tensor<T> logits;
        for (int32_t tok : prompt) {
            logits = decode_step(st, tok);
            if (step_logits) step_logits->push_back(logits);
        }
        for (int64_t i = 0; i < n_tokens; ++i) {
            int32_t best = 0;
            for (int64_t v = 1; v < cfg_.vocab_size; ++v)
                if (logits[v] > logits[best]) best = static_cast<int32_t>(v);
            out.push_back(best);
            if (i + 1 < n_tokens || step_logits) {
                logits = decode_step(st, best);
                if (step_logits) step_logits->push_back(logits);
            }
        }
        return out;
    }

    // ---- persistence ----

    std::map<std::string, Tensor<T>> named_tensors() const {
        std::map<std::string, Tensor<T>> out;
        for (const auto& p : params_.items()) out.emplace(p.name, p.value);
        return out;
    }

    void save(const std::string& dir, const json& extra = json::object()) const {
        std::filesystem::create_directories(dir);
        json meta = extra;
        meta["config"] = cfg_;
        meta["format"] = "dcmha-checkpoint-v1";
        save_tensors<T>(dir + "/manifest.json", dir + "/weights.bin", named_tensors(), meta);
    }

    static Model load(const std::string& dir, json* extra_out = nullptr) {
        json meta;
        auto tensors = load_tensors<T>(dir + "/manifest.json", dir + "/weights.bin", &meta);
        if (extra_out) *extra_out = meta;
        Model m(meta.at("config").get<ModelConfig>(), /*seed=*/0);
        for (auto& p : m.params_.items()) {
            auto it = tensors.find(p.name);
            if (it == tensors.end()) throw std::runtime_error("checkpoint missing tensor " + p.name);
            if (it->second.shape() != p.value.shape())
                throw std::runtime_error("checkpoint tensor " + p.name + " has shape " +
                                         shape_str(it->second.shape()) + ", expected " +
                                         shape_str(p.value.shape()));
            p.value = it->second;
        }
        return m;
    }

private:
    static void fill_ones(Tensor<T>& t) {
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = T(1);
    }

    ComposeVars<T> compose_vars(const std::string& prefix, const AttentionConfig& ac,
                                std::map<std::string, Var<T>>& vars) {
        ComposeVars<T> cv;
        auto gname = [&](const char* base, int64_t g) {
            return ac.groups == 1 ? prefix + base : prefix + base + ".group" + std::to_string(g);
        };
        for (int64_t g = 0; g < ac.groups; ++g) {
            if (ac.q_lowrank) {
                cv.w_q1.push_back(vars.at(gname("W_q1", g)));
                cv.w_q2.push_back(vars.at(gname("W_q2", g)));
            }
            if (ac.k_lowrank) {
                cv.w_k1.push_back(vars.at(gname("W_k1", g)));
                cv.w_k2.push_back(vars.at(gname("W_k2", g)));
            }
        }
        if (ac.q_gate) cv.w_qg = vars.at(prefix + "W_qg");
        if (ac.k_gate) cv.w_kg = vars.at(prefix + "W_kg");
        if (ac.base_mode == BaseMode::static_proj) cv.w_b = vars.at(prefix + "W_b");
        return cv;
    }

    ComposeParams<T> compose_params(const std::string& prefix, const AttentionConfig& ac) const {
        ComposeParams<T> cp = ComposeParams<T>::zeros(ac);
        auto gname = [&](const char* base, int64_t g) {
            return ac.groups == 1 ? prefix + base : prefix + base + ".group" + std::to_string(g);
        };
        for (int64_t g = 0; g < ac.groups; ++g) {
            if (ac.q_lowrank) {
                cp.w_q1[g] = params_.at(gname("W_q1", g)).value;
                cp.w_q2[g] = params_.at(gname("W_q2", g)).value;
            }
            if (ac.k_lowrank) {
                cp.w_k1[g] = params_.at(gname("W_k1", g)).value;
                cp.w_k2[g] = params_.at(gname("W_k2", g)).value;
            }
        }
        if (ac.q_gate) cp.w_qg = params_.at(prefix + "W_qg").value;
        if (ac.k_gate) cp.w_kg = params_.at(prefix + "W_kg").value;
        if (ac.base_mode == BaseMode::static_proj) cp.w_b = params_.at(prefix + "W_b").value;
        return cp;
    }

    Var<T> norm_graph(Var<T> x, const std::string& prefix, std::map<std::string, Var<T>>& vars) {
        T eps = static_cast<T>(cfg_.attn.rmsnorm_eps);
        if (cfg_.norm == NormKind::rmsnorm)
            return mul_last(rmsnorm_noscale(x, -1, eps), vars.at(prefix + ".gain"));
        Var<T> y = layernorm_noscale(x, -1, eps);
        return add_last(mul_last(y, vars.at(prefix + ".gain")), vars.at(prefix + ".bias"));
    }

    Var<T> mlp_graph(Var<T> x, const std::string& lp, std::map<std::string, Var<T>>& vars) {
        if (cfg_.mlp == MlpKind::standard)
            return contract(gelu(contract(x, vars.at(lp + "mlp.W_in"), "btd,dh->bth")),
                            vars.at(lp + "mlp.W_out"), "bth,hd->btd");
        Var<T> g = silu(contract(x, vars.at(lp + "mlp.W_gate"), "btd,dh->bth"));
        Var<T> u = contract(x, vars.at(lp + "mlp.W_in"), "btd,dh->bth");
        return contract(mul(g, u), vars.at(lp + "mlp.W_out"), "bth,hd->btd");
    }

    Tensor<T> norm_row(const Tensor<T>& x, const std::string& prefix) const {
        T eps = static_cast<T>(cfg_.attn.rmsnorm_eps);
        const Tensor<T>& gain = params_.at(prefix + ".gain").value;
        const int64_t D = x.numel();
        Tensor<T> y({D});
        if (cfg_.norm == NormKind::rmsnorm) {
            T ms = 0;
            for (int64_t d = 0; d < D; ++d) ms += x[d] * x[d];
            T inv = T(1) / std::sqrt(ms / static_cast<T>(D) + eps);
            for (int64_t d = 0; d < D; ++d) y[d] = x[d] * inv * gain[d];
            return y;
        }
        const Tensor<T>& bias = params_.at(prefix + ".bias").value;
        T mean = 0;
        for (int64_t d = 0; d < D; ++d) mean += x[d];
        mean /= static_cast<T>(D);
        T var = 0;
        for (int64_t d = 0; d < D; ++d) var += (x[d] - mean) * (x[d] - mean);
        var /= static_cast<T>(D);
        T inv = T(1) / std::sqrt(var + eps);
        for (int64_t d = 0; d < D; ++d) y[d] = (x[d] - mean) * inv * gain[d] + bias[d];
        return y;
    }

    Tensor<T> mlp_row(const Tensor<T>& x, const std::string& lp) const {
        Tensor<T> x3 = x.reshaped({1, 1, x.numel()});
        Tensor<T> out;
        if (cfg_.mlp == MlpKind::standard) {
            Tensor<T> h = gelu(contract(x3, params_.at(lp + "mlp.W_in").value, "btd,dh->bth"));
            out = contract(h, params_.at(lp + "mlp.W_out").value, "bth,hd->btd");
        } else {
            Tensor<T> g = contract(x3, params_.at(lp + "mlp.W_gate").value, "btd,dh->bth");
            g = map(g, [](T z) { return z / (T(1) + std::exp(-z)); });
            Tensor<T> u = contract(x3, params_.at(lp + "mlp.W_in").value, "btd,dh->bth");
            out = contract(mul(g, u), params_.at(lp + "mlp.W_out").value, "bth,hd->btd");
        }
        return out.reshaped({x.numel()});
    }

    ModelConfig cfg_;
    ParamStore<T> params_;
};

// The six branch-ablation variants used by gradient checks and the parameter
// parity harness: static projection only, dynamic projections only, gates
// only, query-wise only, key-wise only, and the full dynamic set (skip base).
inline std::vector<std::pair<std::string, AttentionConfig>> branch_ablations(AttentionConfig base) {
    auto with = [&](bool ql, bool qg, bool kl, bool kg, BaseMode bm) {
        AttentionConfig c = base;
        c.q_lowrank = ql;
        c.q_gate = qg;
        c.k_lowrank = kl;
        c.k_gate = kg;
        c.base_mode = bm;
        return c;
    };
    return {{"static_proj", with(false, false, false, false, BaseMode::static_proj)},
            {"dyn_proj", with(true, false, true, false, BaseMode::skip)},
            {"gate_only", with(false, true, false, true, BaseMode::skip)},
            {"query_wise", with(true, true, false, false, BaseMode::skip)},
            {"key_wise", with(false, false, true, true, BaseMode::skip)},
            {"full", with(true, true, true, true, BaseMode::skip)}};
}

// ---- training ----

struct StepMetrics {
    int64_t step = 0;
    double loss = 0;
    double lr = 0;
    double grad_norm = 0;
    int64_t tokens_seen = 0;
    double wall_ms = 0;
};

inline json metrics_json(const StepMetrics& m) {
    return json{{"step", m.step},           {"loss", m.loss},
                {"lr", m.lr},               {"grad_norm", m.grad_norm},
                {"tokens_seen", m.tokens_seen}, {"wall_ms", m.wall_ms}};
}

inline double lr_at(const TrainConfig& tc, int64_t step) {
    int64_t warmup = std::max<int64_t>(1, static_cast<int64_t>(std::llround(tc.warmup_frac * tc.steps)));
    if (step < warmup) return tc.lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
    double progress = tc.steps == warmup
                          ? 1.0
                          : static_cast<double>(step - warmup) / static_cast<double>(tc.steps - warmup);
    double lo = tc.lr * tc.final_lr_frac;
    return lo + (tc.lr - lo) * 0.5 * (1.0 + std::cos(M_PI * progress));
}

template <typename T>
struct TrainResult {
    std::vector<StepMetrics> metrics;
    bool aborted_nan = false;
};

// Central-difference check of every parameter tensor of a model against the
// tape gradients. Parameters are re-drawn at Xavier scale first: the
// deliberately tiny compose initialization leaves gradients below
// finite-difference noise, which would measure the oracle's noise floor rather
// than the backward pass. The loss is the mean square distance of the logits
// to a fixed nearby target; keeping |loss| small keeps the f(x+h)-f(x-h)
// round-off (~ eps |loss| / 2h) below tolerance for every gradient magnitude.
inline FdReport model_gradcheck(const ModelConfig& mcfg, int64_t B, int64_t Tlen, uint64_t seed,
                                double h = 1e-5) {
    Model<double> model(mcfg, seed);
    Rng rng(seed + 0x6AD);
    for (auto& p : model.params().items())
        if (p.value.dim() == 2) p.value = init<double>(p.value.shape(), InitSpec::xavier_normal(), rng);
    const int64_t V = mcfg.vocab_size;
    std::vector<int32_t> inputs(B * Tlen);
    for (auto& x : inputs) x = static_cast<int32_t>(1 + rng.below(static_cast<uint64_t>(V - 1)));

    Tensor<double> target;
    {
        Tape<double> tape;
        target = model.forward(tape, inputs, B, Tlen, false).value();
        for (int64_t i = 0; i < target.numel(); ++i) target[i] += rng.normal() * 0.02;
    }
    // The overall scale aligns the oracle's absolute resolution (truncation
    // plus round-off) with the metric's 1e-8 denominator floor: elements the
    // floor classifies as sub-resolution then carry their fd artifacts inside
    // the floor, while measurable gradients keep the full relative comparison.
    auto loss_of = [&](Var<double> logits) {
        Var<double> diff = sub(logits, logits.tape()->leaf(target, false, "target"));
        return scale(mean_all(mul(diff, diff)), 1e-8);
    };
    auto loss_value = [&]() {
        Tape<double> tape;
        return loss_of(model.forward(tape, inputs, B, Tlen, false)).value()[0];
    };
    std::map<std::string, Tensor<double>> grads;
    {
        Tape<double> tape;
        std::map<std::string, Var<double>> leaves;
        Var<double> logits = model.forward(tape, inputs, B, Tlen, true, &leaves);
        tape.backward(loss_of(logits));
        for (auto& [name, v] : leaves) grads.emplace(name, v.grad());
    }
    FdReport rep;
    for (auto& p : model.params().items()) {
        FdLeafReport lr{p.name, 0.0};
        const Tensor<double>& g = grads.at(p.name);
        for (int64_t e = 0; e < p.value.numel(); ++e) {
            double orig = p.value[e];
            p.value[e] = orig + h;
            double fp = loss_value();
            p.value[e] = orig - h;
            double fm = loss_value();
            p.value[e] = orig;
            double numeric = (fp - fm) / (2 * h);
            double analytic = g[e];
            double rel = std::abs(analytic - numeric) /
                         std::max({std::abs(analytic), std::abs(numeric), 1e-8});
            lr.max_rel = std::max(lr.max_rel, rel);
        }
        rep.max_rel = std::max(rep.max_rel, lr.max_rel);
        rep.leaves.push_back(std::move(lr));
    }
    return rep;
}

// Cross-entropy next-token training with AdamW (decoupled decay, none on 1-d
// gains/biases), global-norm clipping, linear warmup + cosine decay. Batches
// are drawn by epoch-wise shuffling from the seed; PAD targets are masked.
template <typename T>
TrainResult<T> train(Model<T>& model, const TrainConfig& tc, const TokenDataset& data,
                     const std::function<void(const StepMetrics&)>& on_step = {}) {
    if (data.count == 0) throw std::invalid_argument("train: empty dataset");
    if (data.seq_len < 2) throw std::invalid_argument("train: sequences too short");
    Rng rng(tc.seed);
    Rng order_rng = rng.split(0xDA7A);
    std::vector<int64_t> order(data.count);
    for (int64_t i = 0; i < data.count; ++i) order[i] = i;
    int64_t cursor = 0;
    auto reshuffle = [&]() {
        for (int64_t i = data.count - 1; i > 0; --i)
            std::swap(order[i], order[order_rng.below(static_cast<uint64_t>(i + 1))]);
        cursor = 0;
    };
    reshuffle();

    const int64_t B = tc.batch_size, L = data.seq_len, Tlen = L - 1;
    TrainResult<T> result;
    int64_t tokens_seen = 0;
    auto t0 = std::chrono::steady_clock::now();

    for (int64_t step = 0; step < tc.steps; ++step) {
        std::vector<int32_t> inputs(B * Tlen), targets(B * Tlen);
        std::vector<T> weights(B * Tlen);
        for (int64_t b = 0; b < B; ++b) {
            if (cursor >= data.count) reshuffle();
            const uint16_t* row = data.row(order[cursor++]);
            for (int64_t t = 0; t < Tlen; ++t) {
                inputs[b * Tlen + t] = row[t];
                targets[b * Tlen + t] = row[t + 1];
                weights[b * Tlen + t] = row[t + 1] == kPadToken ? T(0) : T(1);
            }
        }

        Tape<T> tape;
        std::map<std::string, Var<T>> leaves;
        Var<T> logits = model.forward(tape, inputs, B, Tlen, true, &leaves);
        Var<T> loss = cross_entropy(logits, targets, weights);
        double loss_val = static_cast<double>(loss.value()[0]);
        if (!std::isfinite(loss_val)) {
            result.aborted_nan = true;  // params are still pre-update = last good
            break;
        }
        tape.backward(loss);
        tokens_seen += B * Tlen;

        double gn2 = 0;
        std::vector<std::pair<Param<T>*, const Tensor<T>*>> updates;
        for (auto& p : model.params().items()) {
            const Tensor<T>& g = leaves.at(p.name).grad();
            for (int64_t i = 0; i < g.numel(); ++i) gn2 += static_cast<double>(g[i]) * g[i];
            updates.emplace_back(&p, &g);
        }
        double gnorm = std::sqrt(gn2);
        double clip = tc.grad_clip > 0 && gnorm > tc.grad_clip ? tc.grad_clip / gnorm : 1.0;
        double lr = lr_at(tc, step);
        double bc1 = 1.0 - std::pow(tc.beta1, static_cast<double>(step + 1));
        double bc2 = 1.0 - std::pow(tc.beta2, static_cast<double>(step + 1));
        for (auto& [p, g] : updates) {
            if (p->adam_m.numel() == 0) {
                p->adam_m = Tensor<T>(p->value.shape());
                p->adam_v = Tensor<T>(p->value.shape());
            }
            for (int64_t i = 0; i < p->value.numel(); ++i) {
                double gi = static_cast<double>((*g)[i]) * clip;
                double m = tc.beta1 * static_cast<double>(p->adam_m[i]) + (1 - tc.beta1) * gi;
                double v = tc.beta2 * static_cast<double>(p->adam_v[i]) + (1 - tc.beta2) * gi * gi;
                p->adam_m[i] = static_cast<T>(m);
                p->adam_v[i] = static_cast<T>(v);
                double update = (m / bc1) / (std::sqrt(v / bc2) + tc.adam_eps);
                if (p->decay) update += tc.weight_decay * static_cast<double>(p->value[i]);
                p->value[i] = static_cast<T>(static_cast<double>(p->value[i]) - lr * update);
            }
        }

        StepMetrics sm;
        sm.step = step;
        sm.loss = loss_val;
        sm.lr = lr;
        sm.grad_norm = gnorm;
        sm.tokens_seen = tokens_seen;
        sm.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        if (on_step) on_step(sm);
        result.metrics.push_back(sm);
    }
    return result;
}

}  // namespace dcmha
