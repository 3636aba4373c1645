#include <catch2/catch_amalgamated.hpp>

#include "dcmha/attention.hpp"
#include "dcmha/autodiff.hpp"

using namespace dcmha;

namespace {
Tensor<double> randn(Shape s, Rng& rng, double std = 1.0) {
    Tensor<double> t(std::move(s));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal() * std;
    return t;
}
Tensor<double> randu(Shape s, Rng& rng) {  // uniform in [-1, 1]
    Tensor<double> t(std::move(s));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = 2 * rng.uniform() - 1;
    return t;
}
}  // namespace

TEST_CASE("backward of a linear functional is all ones", "[autodiff]") {
    Rng rng(1);
    Tape<double> tape;
    Var<double> x = tape.leaf(randn({3, 4}, rng), true, "x");
    tape.backward(sum_all(x));
    for (int64_t i = 0; i < 12; ++i) REQUIRE(x.grad()[i] == 1.0);
}

TEST_CASE("backward of sum(softmax(x)) vanishes", "[autodiff]") {
    Rng rng(2);
    Tape<double> tape;
    Var<double> x = tape.leaf(randn({5, 6}, rng), true, "x");
    tape.backward(sum_all(softmax(x, -1)));
    REQUIRE(max_abs(x.grad()) < 1e-12);
}

TEST_CASE("backward rejects non-scalar losses and repeated calls", "[autodiff]") {
    Rng rng(3);
    Tape<double> tape;
    Var<double> x = tape.leaf(randn({2, 2}, rng), true, "x");
    Var<double> y = mul(x, x);
    REQUIRE_THROWS_AS(tape.backward(y), std::invalid_argument);
    Var<double> loss = sum_all(y);
    tape.backward(loss);
    REQUIRE_THROWS_AS(tape.backward(loss), std::runtime_error);
    tape.reset();
    tape.backward(loss);  // fine after reset
}

TEST_CASE("detached leaves get zero grads and a warning flag", "[autodiff]") {
    Rng rng(4);
    Tape<double> tape;
    Var<double> x = tape.leaf(randn({3}, rng), true, "x");
    Var<double> orphan = tape.leaf(randn({3}, rng), true, "orphan");
    tape.backward(sum_all(x));
    REQUIRE(tape.detached());
    REQUIRE(max_abs(orphan.grad()) == 0.0);
    REQUIRE(max_abs(x.grad()) == 1.0);
}

TEST_CASE("fd_check on a quadratic is clean", "[autodiff]") {
    Rng rng(5);
    auto build = [](Tape<double>& t, std::vector<Var<double>>& leaves) {
        return scale(sum_all(mul(leaves[0], leaves[0])), 0.5);
    };
    std::vector<std::pair<std::string, Tensor<double>>> leaves = {{"x", randn({4, 3}, rng)}};
    auto rep = fd_check(build, std::move(leaves), 1e-5);
    REQUIRE(rep.max_rel < 1e-9);
}

TEST_CASE("every recorded op passes an isolated fd check", "[autodiff]") {
    Rng rng(6);
    double h = 1e-5, tol = 1e-7;
    auto check = [&](const char* name, auto&& build, std::vector<std::pair<std::string, Tensor<double>>> leaves) {
        auto rep = fd_check(build, std::move(leaves), h);
        INFO(name);
        REQUIRE(rep.max_rel < tol);
    };

    check("contract", [](Tape<double>& t, std::vector<Var<double>>& l) {
        return sum_all(mul(contract(l[0], l[1], "bij,bjk->bik"),
                           contract(l[0], l[1], "bij,bjk->bik")));
    }, {{"a", randu({2, 3, 4}, rng)}, {"b", randu({2, 4, 5}, rng)}});

    check("gelu", [](Tape<double>& t, std::vector<Var<double>>& l) {
        return sum_all(mul(gelu(l[0]), gelu(l[0])));
    }, {{"x", randu({3, 7}, rng)}});

    check("tanh", [](Tape<double>& t, std::vector<Var<double>>& l) {
        return sum_all(mul(tanh(l[0]), tanh(l[0])));
    }, {{"x", randu({3, 7}, rng)}});

    check("silu", [](Tape<double>& t, std::vector<Var<double>>& l) {
        return sum_all(mul(silu(l[0]), silu(l[0])));
    }, {{"x", randu({3, 7}, rng)}});

    check("softmax", [](Tape<double>& t, std::vector<Var<double>>& l) {
        Var<double> y = softmax(l[0], -1);
        return sum_all(mul(y, mul(y, y)));
    }, {{"x", randu({4, 6}, rng)}});

    check("rmsnorm", [](Tape<double>& t, std::vector<Var<double>>& l) {
        Var<double> y = rmsnorm_noscale(l[0], -1, 1e-6);
        return sum_all(mul(y, mul(y, y)));
    }, {{"x", randu({4, 6}, rng)}});

    check("layernorm", [](Tape<double>& t, std::vector<Var<double>>& l) {
        Var<double> y = layernorm_noscale(l[0], -1, 1e-6);
        return sum_all(mul(y, mul(y, y)));
    }, {{"x", randu({4, 6}, rng)}});

    check("affine_last", [](Tape<double>& t, std::vector<Var<double>>& l) {
        Var<double> y = add_last(mul_last(l[0], l[1]), l[2]);
        return sum_all(mul(y, y));
    }, {{"x", randu({3, 5}, rng)}, {"g", randu({5}, rng)}, {"b", randu({5}, rng)}});

    check("slice_concat_permute", [](Tape<double>& t, std::vector<Var<double>>& l) {
        Var<double> a = slice_axis(l[0], 1, 0, 2);
        Var<double> b = slice_axis(l[0], 1, 2, 5);
        Var<double> y = concat_axis<double>({b, a}, 1);
        y = permute(y, {1, 0, 2});
        y = reshape(y, {5, 8});
        return sum_all(mul(y, y));
    }, {{"x", randu({2, 5, 4}, rng)}});

    check("rope", [](Tape<double>& t, std::vector<Var<double>>& l) {
        Var<double> y = rope(l[0], 3, 0.5);
        return sum_all(mul(y, mul(y, y)));
    }, {{"x", randu({1, 2, 4, 8}, rng)}});

    check("add_mask", [](Tape<double>& t, std::vector<Var<double>>& l) {
        Tensor<double> m({3, 3});
        m(0, 2) = -1e9;
        Var<double> y = softmax(add_mask(l[0], m), -1);
        return sum_all(mul(y, mul(y, y)));
    }, {{"x", randu({1, 2, 3, 3}, rng)}});

    check("embedding", [](Tape<double>& t, std::vector<Var<double>>& l) {
        Var<double> e = embedding(l[0], {1, 0, 2, 1}, 2, 2);
        return sum_all(mul(e, e));
    }, {{"table", randu({3, 4}, rng)}});

    check("cross_entropy", [](Tape<double>& t, std::vector<Var<double>>& l) {
        return cross_entropy(l[0], {1, 3, 0, 2}, {1.0, 1.0, 0.0, 1.0});
    }, {{"logits", randu({2, 2, 4}, rng)}});
}

TEST_CASE("gradient of a branch sum equals the sum of branch gradients", "[autodiff]") {
    Rng rng(7);
    Tensor<double> xval = randu({2, 6}, rng), wval = randu({6, 6}, rng);
    auto grad_of = [&](int which) {
        Tape<double> tape;
        Var<double> x = tape.leaf(xval, true, "x");
        Var<double> w = tape.leaf(wval, false, "w");
        Var<double> b1 = gelu(contract(x, w, "bi,ij->bj"));
        Var<double> b2 = tanh(x);
        Var<double> y = which == 0 ? b1 : which == 1 ? b2 : add(b1, b2);
        tape.backward(sum_all(y));
        return x.grad();
    };
    Tensor<double> g_sum = grad_of(2);
    Tensor<double> g_parts = add(grad_of(0), grad_of(1));
    REQUIRE(max_abs_diff(g_sum, g_parts) < 1e-14);
}

TEST_CASE("full DCMHA forward passes the fd oracle", "[autodiff]") {
    // the spec's tiny configuration: B=1, T=S=4, H=2, D_h=3, R=2
    AttentionConfig cfg;
    cfg.d_model = 6;
    cfg.n_heads = 2;
    cfg.d_head = 3;
    cfg.rank = 2;
    cfg.causal = true;
    Rng rng(8);
    const int64_t B = 1, T = 4, I = cfg.inner_dim(), HD = cfg.n_heads * cfg.d_head;
    Tensor<double> mask = build_mask<double>(cfg, T, T);

    auto run_cfg = [&](AttentionConfig c, double tol) {
        auto build = [&](Tape<double>& tape, std::vector<Var<double>>& l) {
            ProjectionVars<double> pv{l[0], l[1], l[2], l[3]};
            ComposeVars<double> pre, post;
            pre.w_q1 = {l[4]};
            pre.w_q2 = {l[5]};
            pre.w_k1 = {l[6]};
            pre.w_k2 = {l[7]};
            pre.w_qg = l[8];
            pre.w_kg = l[9];
            post.w_q1 = {l[10]};
            post.w_q2 = {l[11]};
            post.w_k1 = {l[12]};
            post.w_k2 = {l[13]};
            post.w_qg = l[14];
            post.w_kg = l[15];
            Var<double> out = dcmha_graph(l[16], l[16], l[16], pv, &pre, &post, c, mask);
            Var<double> diff = sub(out, l[17]);
            return mean_all(mul(diff, diff));  // mean-square loss against a fixed target
        };
        Rng prng = rng.split(c.q_gate ? 17 : 31);
        auto xav = [&](Shape s) { return init<double>(s, InitSpec::xavier_normal(), prng); };
        std::vector<std::pair<std::string, Tensor<double>>> leaves = {
            {"W_Q", xav({cfg.d_model, HD})}, {"W_K", xav({cfg.d_model, HD})},
            {"W_V", xav({cfg.d_model, HD})}, {"W_O", xav({HD, cfg.d_model})},
            {"pre.W_q1", xav({cfg.d_model, I})}, {"pre.W_q2", xav({I, I})},
            {"pre.W_k1", xav({cfg.d_model, I})}, {"pre.W_k2", xav({I, I})},
            {"pre.W_qg", xav({cfg.d_model, cfg.n_heads})}, {"pre.W_kg", xav({cfg.d_model, cfg.n_heads})},
            {"post.W_q1", xav({cfg.d_model, I})}, {"post.W_q2", xav({I, I})},
            {"post.W_k1", xav({cfg.d_model, I})}, {"post.W_k2", xav({I, I})},
            {"post.W_qg", xav({cfg.d_model, cfg.n_heads})}, {"post.W_kg", xav({cfg.d_model, cfg.n_heads})},
            {"x", randn({B, T, cfg.d_model}, prng, 1.0 / std::sqrt(6.0))},
            {"target", randn({B, T, cfg.d_model}, prng, 0.3)}};
        auto rep = fd_check(build, std::move(leaves), 1e-5);
        INFO((c.q_lowrank ? "full" : "gate-only"));
        REQUIRE(rep.max_rel < tol);
    };

    run_cfg(cfg, 1e-5);

    AttentionConfig gate_only = cfg;
    gate_only.q_lowrank = gate_only.k_lowrank = false;
    run_cfg(gate_only, 1e-6);
}
