// dcmha: one binary for every workflow — training, evaluation, generation,
// dataset synthesis, gradient checks, equivalence oracles, complexity tables,
// and trained-model analysis. All stochastic outputs are fully determined by
// --seed; DCMHA_DTYPE=f32|f64 overrides the configured dtype.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "dcmha/analysis.hpp"
#include "dcmha/complexity.hpp"
#include "dcmha/equivalence.hpp"
#include "dcmha/model.hpp"
#include "dcmha/synthtask.hpp"

using namespace dcmha;

namespace {

json read_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read " + path);
    return json::parse(f);
}

std::string effective_dtype(std::string configured) {
    const char* env = std::getenv("DCMHA_DTYPE");
    if (env) {
        std::string e = env;
        if (e == "f32" || e == "float32") return "float32";
        if (e == "f64" || e == "float64") return "float64";
        throw std::runtime_error("DCMHA_DTYPE must be f32 or f64");
    }
    if (configured == "f32") return "float32";
    if (configured == "f64") return "float64";
    return configured;
}

std::vector<int32_t> parse_id_list(const std::string& text) {
    std::vector<int32_t> ids;
    std::string cur;
    for (char c : text + ",") {
        if (c == ',' || c == ' ' || c == '\n' || c == '\t') {
            if (!cur.empty()) ids.push_back(std::stoi(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    return ids;
}

// ---- train ----

template <typename T>
int run_train_typed(const json& cfg_json, const std::string& out_dir, uint64_t seed) {
    ModelConfig mc = cfg_json.at("model").get<ModelConfig>();
    TrainConfig tc = cfg_json.value("train", TrainConfig{});
    tc.seed = seed;
    TokenDataset data = TokenDataset::load(cfg_json.at("data").get<std::string>());
    if (data.vocab_size > mc.vocab_size)
        throw std::runtime_error("dataset vocab exceeds model vocab");

    std::filesystem::create_directories(out_dir);
    std::ofstream metrics(out_dir + "/metrics.jsonl");
    Model<T> model(mc, seed);
    int64_t nparams = 0;
    for (auto& p : model.params().items()) nparams += p.value.numel();
    std::fprintf(stderr, "training %ld params, %ld steps, batch %ld, seq %ld\n", (long)nparams,
                 (long)tc.steps, (long)tc.batch_size, (long)data.seq_len);

    auto result = train(model, tc, data, [&](const StepMetrics& m) {
        metrics << metrics_json(m).dump() << "\n";
        if (m.step % 100 == 0 || m.step == tc.steps - 1)
            std::fprintf(stderr, "step %ld loss %.4f lr %.2e gnorm %.3f\n", (long)m.step, m.loss, m.lr,
                         m.grad_norm);
    });
    json extra;
    extra["train"] = tc;
    extra["rng"] = {{"seed", tc.seed}, {"steps_completed", result.metrics.size()}};
    model.save(out_dir, extra);
    if (result.aborted_nan) {
        std::cerr << json{{"error", "NaN loss; aborted with last-good checkpoint"}}.dump() << "\n";
        return 2;
    }
    double final_loss = result.metrics.empty() ? 0.0 : result.metrics.back().loss;
    std::cout << json{{"final_loss", final_loss}, {"checkpoint", out_dir}}.dump() << "\n";
    return 0;
}

int run_train(const std::string& config_path, const std::string& out_dir, int64_t seed_flag) {
    json cfg = read_json_file(config_path);
    TrainConfig tc = cfg.value("train", TrainConfig{});
    uint64_t seed = seed_flag >= 0 ? static_cast<uint64_t>(seed_flag) : tc.seed;
    std::string dtype = effective_dtype(tc.dtype);
    if (dtype == "float64") return run_train_typed<double>(cfg, out_dir, seed);
    return run_train_typed<float>(cfg, out_dir, seed);
}

// ---- eval ----

template <typename T>
int run_eval_typed(const std::string& ckpt, const std::string& data_path, int64_t k_shot) {
    Model<T> model = Model<T>::load(ckpt);
    TokenDataset data = TokenDataset::load(data_path);
    if (k_shot > 0) {
        // filter via sidecar per-example shot counts
        json side = read_json_file(data_path + ".json");
        auto ks = side.at("k_shots").get<std::vector<int64_t>>();
        TokenDataset filtered;
        filtered.vocab_size = data.vocab_size;
        filtered.seq_len = data.seq_len;
        for (int64_t i = 0; i < data.count; ++i)
            if (ks[i] == k_shot) {
                filtered.tokens.insert(filtered.tokens.end(), data.row(i), data.row(i) + data.seq_len);
                filtered.count++;
            }
        if (filtered.count == 0) throw std::runtime_error("no examples with requested k_shot");
        data = std::move(filtered);
    }
    EvalResult r = evaluate(model, data);
    std::cout << json{{"accuracy", r.accuracy}, {"perplexity", r.perplexity}, {"n", r.n}}.dump() << "\n";
    return 0;
}

// ---- generate ----

template <typename T>
int run_generate_typed(const std::string& ckpt, const std::string& prompt, int64_t n) {
    Model<T> model = Model<T>::load(ckpt);
    std::vector<int32_t> ids = parse_id_list(prompt);
    auto out = model.generate(ids, n);
    std::cout << json{{"tokens", out}}.dump() << "\n";
    return 0;
}

// ---- gradcheck ----

int run_gradcheck(const std::string& config_path, double tol, bool all_ablations) {
    json cfg = read_json_file(config_path);
    ModelConfig mc = cfg.at("model").get<ModelConfig>();
    json gc = cfg.value("gradcheck", json::object());
    int64_t B = gc.value("batch", 1), Tlen = gc.value("seq_len", 6);
    uint64_t seed = gc.value("seed", 0);
    double h = gc.value("h", 1e-5);

    std::vector<std::pair<std::string, AttentionConfig>> configs;
    if (all_ablations)
        configs = branch_ablations(mc.attn);
    else
        configs = {{"config", mc.attn}};

    bool ok = true;
    for (auto& [name, attn] : configs) {
        ModelConfig m2 = mc;
        m2.attn = attn;
        FdReport rep = model_gradcheck(m2, B, Tlen, seed, h);
        for (auto& l : rep.leaves)
            std::printf("%-12s %-32s max_rel %.3e\n", name.c_str(), l.name.c_str(), l.max_rel);
        std::printf("%-12s OVERALL %.3e %s\n", name.c_str(), rep.max_rel,
                    rep.max_rel < tol ? "ok" : "FAIL");
        ok = ok && rep.max_rel < tol;
    }
    if (!ok) std::cerr << json{{"error", "gradient check exceeded tolerance"}, {"tol", tol}}.dump() << "\n";
    return ok ? 0 : 1;
}

// ---- equiv ----

int run_equiv(const std::string& theorem, int64_t trials, double tol) {
    double worst = 0;
    for (int64_t t = 0; t < trials; ++t) {
        double dev = 0;
        if (theorem == "1") {
            Rng rng(1000 + t);
            dev = check_theorem1(4, 8, 16, 8, 8, rng);
        } else if (theorem == "2") {
            Rng rng(2000 + t);
            dev = check_theorem2(4, 8, 16, 8, 8, rng);
        } else if (theorem == "dense") {
            AttentionConfig cfg;
            cfg.d_model = 16;
            cfg.n_heads = 4;
            cfg.d_head = 4;
            cfg.rank = 2;
            cfg.causal = false;
            cfg.base_mode = t % 2 == 0 ? BaseMode::skip : BaseMode::static_proj;
            Rng rng(3000 + t);
            Rng prng = rng.split(9);
            ComposeParams<double> th = ComposeParams<double>::zeros(cfg);
            for (int64_t g = 0; g < cfg.groups; ++g) {
                th.w_q1[g] = init<double>(th.w_q1[g].shape(), InitSpec::xavier_normal(), prng);
                th.w_q2[g] = init<double>(th.w_q2[g].shape(), InitSpec::xavier_normal(), prng);
                th.w_k1[g] = init<double>(th.w_k1[g].shape(), InitSpec::xavier_normal(), prng);
                th.w_k2[g] = init<double>(th.w_k2[g].shape(), InitSpec::xavier_normal(), prng);
            }
            th.w_qg = init<double>(th.w_qg.shape(), InitSpec::xavier_normal(), prng);
            th.w_kg = init<double>(th.w_kg.shape(), InitSpec::xavier_normal(), prng);
            if (cfg.base_mode == BaseMode::static_proj)
                th.w_b = init<double>({cfg.n_heads, cfg.n_heads}, InitSpec::xavier_normal(), prng);
            double istd = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
            Tensor<double> a({1, cfg.n_heads, 4, 4});
            for (int64_t i = 0; i < a.numel(); ++i) a[i] = rng.normal();
            Tensor<double> q({1, 4, cfg.d_model}), k({1, 4, cfg.d_model});
            for (int64_t i = 0; i < q.numel(); ++i) q[i] = rng.normal() * istd;
            for (int64_t i = 0; i < k.numel(); ++i) k[i] = rng.normal() * istd;
            dev = max_abs_diff(compose(a, q, k, th, cfg), dense_compose_oracle(a, q, k, th, cfg));
        } else {
            throw std::runtime_error("equiv: --theorem must be 1, 2 or dense");
        }
        worst = std::max(worst, dev);
        std::cout << json{{"trial", t}, {"theorem", theorem}, {"deviation", dev}, {"tol", tol}}.dump()
                  << "\n";
    }
    if (worst >= tol) {
        std::cerr << json{{"error", "deviation exceeded tolerance"}, {"worst", worst}}.dump() << "\n";
        return 1;
    }
    return 0;
}

// ---- complexity ----

int run_complexity(int64_t dh, int64_t r, double rho, bool exact, bool as_json) {
    if (dh > 0) {
        ComplexityInputs in;
        in.R = r;
        in.D_h = dh;
        in.H = 32;
        in.S = static_cast<int64_t>(std::llround(rho * static_cast<double>(32 * dh)));
        DeltaRatio dp = delta_params(in), df = delta_flops(in);
        if (as_json) {
            json j{{"dh", dh},
                   {"r", r},
                   {"rho", in.rho()},
                   {"dparams_approx", dp.approx},
                   {"dflops_approx", df.approx}};
            if (exact) {
                j["dparams_exact"] = dp.exact;
                j["dflops_exact"] = df.exact;
            }
            std::cout << j.dump() << "\n";
        } else {
            std::printf("R=%ld D_h=%ld rho=%.2f:  dparams %.1f%%  dflops %.1f%%\n", (long)r, (long)dh,
                        in.rho(), 100 * dp.approx, 100 * df.approx);
            if (exact)
                std::printf("  exact: dparams %.4f%%  dflops %.4f%%\n", 100 * dp.exact, 100 * df.exact);
        }
        return 0;
    }

    // no dims given: mirror the reference table (plus exact columns)
    struct Row {
        const char* model;
        int64_t R, L, H, Dh, S;
    };
    std::vector<Row> rows = {{"1.4B", 2, 24, 32, 64, 2048},
                             {"6.9B", 2, 24, 32, 128, 2048},
                             {"6.9B", 2, 24, 32, 128, 4096},
                             {"6.9B", 2, 24, 32, 128, 8192}};
    json jrows = json::array();
    if (!as_json)
        std::printf("%-6s %-10s %-10s %2s %3s %3s %4s %5s %5s\n", "size", "dparams", "dflops", "R", "L",
                    "H", "D_h", "S", "rho");
    for (auto& row : rows) {
        ComplexityInputs in;
        in.R = row.R;
        in.H = row.H;
        in.D_h = row.Dh;
        in.S = row.S;
        in.L = row.L;
        DeltaRatio dp = delta_params(in), df = delta_flops(in);
        if (as_json) {
            jrows.push_back(json{{"model", row.model},
                                 {"dparams_approx", dp.approx},
                                 {"dflops_approx", df.approx},
                                 {"dparams_exact", dp.exact},
                                 {"dflops_exact", df.exact},
                                 {"R", row.R},
                                 {"L", row.L},
                                 {"H", row.H},
                                 {"D_h", row.Dh},
                                 {"S", row.S},
                                 {"rho", in.rho()}});
        } else {
            std::printf("%-6s %7.1f%%   %7.1f%%  %2ld %3ld %3ld %4ld %5ld %5.1f", row.model,
                        100 * dp.approx, 100 * df.approx, (long)row.R, (long)row.L, (long)row.H,
                        (long)row.Dh, (long)row.S, in.rho());
            if (exact) std::printf("   (exact %.3f%% / %.3f%%)", 100 * dp.exact, 100 * df.exact);
            std::printf("\n");
        }
    }
    if (as_json) std::cout << jrows.dump() << "\n";
    return 0;
}

// ---- breakdown / diversity ----

template <typename T>
int run_breakdown_typed(const std::string& ckpt, const std::string& input, int64_t layer,
                        const std::string& site, int64_t i, int64_t j) {
    Model<T> model = Model<T>::load(ckpt);
    std::ifstream f(input);
    if (!f) throw std::runtime_error("cannot read " + input);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    std::vector<int32_t> tokens = parse_id_list(text);
    BranchBreakdown bd = compose_breakdown(model, tokens, layer, site, i, j);
    std::cout << breakdown_json(bd).dump() << "\n";
    return 0;
}

template <typename T>
int run_diversity_typed(const std::string& ckpt, bool center) {
    Model<T> model = Model<T>::load(ckpt);
    auto curves = head_diversity(model, center);
    json layers = json::array();
    for (auto& c : curves) layers.push_back(json{{"qk", c.qk}, {"ov", c.ov}});
    std::cout << json{{"centered", center}, {"layers", layers}}.dump() << "\n";
    return 0;
}

// ---- bench ----

template <typename T>
double bench_tokens_per_s(const ModelConfig& mc, int64_t steps, int64_t B, int64_t Tlen) {
    Model<T> model(mc, 0);
    TrainConfig tc;
    tc.steps = steps;
    tc.batch_size = B;
    tc.lr = 1e-4;
    TokenDataset ds;
    ds.vocab_size = mc.vocab_size;
    ds.seq_len = Tlen + 1;
    ds.count = 64;
    Rng rng(5);
    ds.tokens.resize(ds.count * ds.seq_len);
    for (auto& t : ds.tokens) t = static_cast<uint16_t>(1 + rng.below(mc.vocab_size - 1));
    auto t0 = std::chrono::steady_clock::now();
    auto res = train(model, tc, ds);
    double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return static_cast<double>(res.metrics.back().tokens_seen) / sec;
}

int run_bench(const std::string& config_path, int64_t steps) {
    json cfg = read_json_file(config_path);
    ModelConfig mc = cfg.at("model").get<ModelConfig>();
    TrainConfig tc = cfg.value("train", TrainConfig{});
    int64_t Tlen = cfg.value("bench_seq_len", std::min<int64_t>(mc.max_seq_len, 32));
    ModelConfig mha = mc;
    mha.attn.pre_compose = mha.attn.post_compose = false;
    double dc = bench_tokens_per_s<float>(mc, steps, tc.batch_size, Tlen);
    double base = bench_tokens_per_s<float>(mha, steps, tc.batch_size, Tlen);
    std::cout << json{{"mha_tokens_per_s", base},
                      {"dcmha_tokens_per_s", dc},
                      {"dcmha_vs_mha", dc / base},
                      {"note", "informational only; no assertion"}}
                     .dump()
              << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dynamically composable multi-head attention workbench"};
    app.require_subcommand(1);

    std::string config_path, out_dir, ckpt, data_path, spec_path, out_path, prompt, input_file;
    std::string theorem = "1", site = "post";
    int64_t seed_flag = -1, k_shot = -1, n_examples = 512, n_tokens = 16, trials = 100;
    int64_t layer = 0, qi = 0, kj = 0, dh = 0, r = 2, steps = 20;
    double tol = 1e-5, equiv_tol = 1e-10, rho = 1.0;
    bool all_ablations = false, exact = false, as_json = false, no_center = false;

    auto* c_train = app.add_subcommand("train", "train a model from a config file");
    c_train->add_option("--config", config_path)->required();
    c_train->add_option("--out", out_dir)->required();
    c_train->add_option("--seed", seed_flag);

    auto* c_eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    c_eval->add_option("--ckpt", ckpt)->required();
    c_eval->add_option("--data", data_path)->required();
    c_eval->add_option("--k-shot", k_shot);

    auto* c_gen = app.add_subcommand("generate", "greedy decoding from a prompt");
    c_gen->add_option("--ckpt", ckpt)->required();
    c_gen->add_option("--prompt", prompt)->required();
    c_gen->add_option("--n", n_tokens);

    auto* c_data = app.add_subcommand("gen-data", "generate a synthetic task dataset");
    c_data->add_option("--spec", spec_path)->required();
    c_data->add_option("--out", out_path)->required();
    c_data->add_option("--n", n_examples);
    c_data->add_option("--seed", seed_flag);

    auto* c_grad = app.add_subcommand("gradcheck", "finite-difference gradient check");
    c_grad->add_option("--config", config_path)->required();
    c_grad->add_option("--tol", tol);
    c_grad->add_flag("--ablations", all_ablations, "run all six branch ablations");

    auto* c_equiv = app.add_subcommand("equiv", "equivalence-theorem oracles");
    c_equiv->add_option("--theorem", theorem, "1, 2 or dense");
    c_equiv->add_option("--trials", trials);
    c_equiv->add_option("--tol", equiv_tol);

    auto* c_cx = app.add_subcommand("complexity", "parameter/FLOP overhead table");
    c_cx->add_option("--dh", dh);
    c_cx->add_option("--r", r);
    c_cx->add_option("--rho", rho);
    c_cx->add_flag("--exact", exact);
    c_cx->add_flag("--json", as_json);

    auto* c_bd = app.add_subcommand("breakdown", "compose branch breakdown at one (i,j)");
    c_bd->add_option("--ckpt", ckpt)->required();
    c_bd->add_option("--input", input_file)->required();
    c_bd->add_option("--layer", layer)->required();
    c_bd->add_option("--site", site)->required();
    c_bd->add_option("--i", qi)->required();
    c_bd->add_option("--j", kj)->required();

    auto* c_div = app.add_subcommand("diversity", "head-diversity curves");
    c_div->add_option("--ckpt", ckpt)->required();
    c_div->add_flag("--no-center", no_center);

    auto* c_bench = app.add_subcommand("bench", "tokens/s for MHA vs DCMHA (informational)");
    c_bench->add_option("--config", config_path)->required();
    c_bench->add_option("--steps", steps);

    CLI11_PARSE(app, argc, argv);

    try {
        if (c_train->parsed()) return run_train(config_path, out_dir, seed_flag);
        if (c_eval->parsed()) {
            if (effective_dtype(checkpoint_dtype(ckpt + "/manifest.json")) == "float64")
                return run_eval_typed<double>(ckpt, data_path, k_shot);
            return run_eval_typed<float>(ckpt, data_path, k_shot);
        }
        if (c_gen->parsed()) {
            if (effective_dtype(checkpoint_dtype(ckpt + "/manifest.json")) == "float64")
                return run_generate_typed<double>(ckpt, prompt, n_tokens);
            return run_generate_typed<float>(ckpt, prompt, n_tokens);
        }
        if (c_data->parsed()) {
            TaskSpec spec = read_json_file(spec_path).get<TaskSpec>();
            if (seed_flag >= 0) spec.seed = static_cast<uint64_t>(seed_flag);
            DatasetSidecar side;
            TokenDataset ds = generate_dataset(spec, n_examples, &side);
            ds.save(out_path);
            std::ofstream sf(out_path + ".json");
            sf << json(side).dump(2) << "\n";
            std::cout << json{{"examples", ds.count},
                              {"seq_len", ds.seq_len},
                              {"vocab_size", ds.vocab_size},
                              {"out", out_path}}
                             .dump()
                      << "\n";
            return 0;
        }
        if (c_grad->parsed()) return run_gradcheck(config_path, tol, all_ablations);
        if (c_equiv->parsed()) return run_equiv(theorem, trials, equiv_tol);
        if (c_cx->parsed()) return run_complexity(dh, r, rho, exact, as_json);
        if (c_bd->parsed()) {
            if (effective_dtype(checkpoint_dtype(ckpt + "/manifest.json")) == "float64")
                return run_breakdown_typed<double>(ckpt, input_file, layer, site, qi, kj);
            return run_breakdown_typed<float>(ckpt, input_file, layer, site, qi, kj);
        }
        if (c_div->parsed()) {
            if (effective_dtype(checkpoint_dtype(ckpt + "/manifest.json")) == "float64")
                return run_diversity_typed<double>(ckpt, !no_center);
            return run_diversity_typed<float>(ckpt, !no_center);
        }
        if (c_bench->parsed()) return run_bench(config_path, steps);
    } catch (const std::exception& e) {
        std::cerr << json{{"error", e.what()}}.dump() << "\n";
        return 1;
    }
    return 1;
}
