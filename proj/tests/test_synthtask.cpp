#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <set>

#include "dcmha/synthtask.hpp"

using namespace dcmha;

namespace {
TaskSpec single_task(QkPattern p, OvTransform t, int64_t n_pairs = 3, int64_t k = 1) {
    TaskSpec s;
    s.patterns = {p};
    s.transforms = {t};
    s.n_pairs = n_pairs;
    s.k_shots = {k};
    s.seed = 5;
    return s;
}

// locate the query segment of a row: tokens after the last SEP, up to the
// answer (the last non-PAD token, exclusive)
struct QueryView {
    std::vector<int32_t> segment;
    int32_t answer;
};
QueryView query_of(const TokenDataset& ds, int64_t row_ix) {
    const uint16_t* row = ds.row(row_ix);
    int64_t last = ds.seq_len - 1;
    while (last > 0 && row[last] == kPadToken) --last;
    int64_t start = last - 1;
    while (start > 0 && row[start] != TaskSpec::kSep) --start;
    if (row[start] == TaskSpec::kSep) ++start;
    QueryView qv;
    qv.answer = row[last];
    for (int64_t t = start; t < last; ++t) qv.segment.push_back(row[t]);
    return qv;
}
}  // namespace

TEST_CASE("degenerate copy task produces k v QRY k -> v", "[synthtask]") {
    TaskSpec spec = single_task(QkPattern::same_key, OvTransform::copy, 1, 1);
    DatasetSidecar side;
    TokenDataset ds = generate_dataset(spec, 50, &side);
    for (int64_t i = 0; i < ds.count; ++i) {
        const uint16_t* row = ds.row(i);
        // layout: demo(k v QRY k ans SEP) then query(k v QRY k) then answer
        REQUIRE(row[2] == TaskSpec::kQry);
        REQUIRE(row[3] == row[0]);  // demo queries its only key
        REQUIRE(row[4] == row[1]);  // and copies its value
        REQUIRE(row[5] == TaskSpec::kSep);
        REQUIRE(row[8] == TaskSpec::kQry);
        REQUIRE(row[9] == row[6]);
        REQUIRE(row[10] == row[7]);  // answer = value of the queried key
    }
}

TEST_CASE("class_lookup answers come from the fixed table", "[synthtask]") {
    TaskSpec spec = single_task(QkPattern::same_key, OvTransform::class_lookup, 2, 1);
    spec.n_values = 8;
    spec.n_classes = 4;
    DatasetSidecar side;
    TokenDataset ds = generate_dataset(spec, 200, &side);
    REQUIRE(side.class_table.size() == 8);
    for (int64_t i = 0; i < ds.count; ++i) {
        QueryView qv = query_of(ds, i);
        // query segment: k1 v1 k2 v2 QRY k*
        REQUIRE(qv.segment.size() == 6);
        int32_t kq = qv.segment[5];
        int32_t v = kq == qv.segment[0] ? qv.segment[1] : qv.segment[3];
        REQUIRE(kq == (kq == qv.segment[0] ? qv.segment[0] : qv.segment[2]));
        int64_t v_index = v - spec.value_token(0);
        REQUIRE(qv.answer == spec.class_token(side.class_table[v_index]));
    }
}

TEST_CASE("other_key answers use the next pair cyclically", "[synthtask]") {
    TaskSpec spec = single_task(QkPattern::other_key, OvTransform::copy, 2, 1);
    TokenDataset ds = generate_dataset(spec, 100, nullptr);
    for (int64_t i = 0; i < ds.count; ++i) {
        QueryView qv = query_of(ds, i);
        // k1 v1 k2 v2 QRY k*: answer is the *other* pair's value
        int32_t kq = qv.segment[5];
        int32_t other_v = kq == qv.segment[0] ? qv.segment[3] : qv.segment[1];
        REQUIRE(qv.answer == other_v);
    }
}

TEST_CASE("different_in_set has a unique odd value and answers from it", "[synthtask]") {
    TaskSpec spec = single_task(QkPattern::different_in_set, OvTransform::class_lookup, 3, 1);
    DatasetSidecar side;
    TokenDataset ds = generate_dataset(spec, 200, &side);
    for (int64_t i = 0; i < ds.count; ++i) {
        QueryView qv = query_of(ds, i);
        REQUIRE(qv.segment.size() == 4);  // v v v QRY
        std::vector<int64_t> classes;
        for (int64_t t = 0; t < 3; ++t)
            classes.push_back(side.class_table[qv.segment[t] - spec.value_token(0)]);
        // exactly one value has a class different from the other two
        int odd_count = 0;
        int64_t odd_value = -1;
        for (int64_t t = 0; t < 3; ++t) {
            bool differs = true;
            for (int64_t u = 0; u < 3; ++u)
                if (u != t && classes[u] == classes[t]) differs = false;
            if (differs) {
                odd_count++;
                odd_value = qv.segment[t] - spec.value_token(0);
            }
        }
        REQUIRE(odd_count == 1);
        REQUIRE(qv.answer == spec.class_token(side.class_table[odd_value]));
    }
}

TEST_CASE("generation is deterministic at the byte level", "[synthtask]") {
    namespace fs = std::filesystem;
    TaskSpec spec;  // full 3x3 mixture
    spec.seed = 99;
    fs::path p1 = fs::temp_directory_path() / "ds1.bin";
    fs::path p2 = fs::temp_directory_path() / "ds2.bin";
    generate_dataset(spec, 300, nullptr).save(p1.string());
    generate_dataset(spec, 300, nullptr).save(p2.string());
    auto read_file = [](const fs::path& p) {
        std::ifstream f(p, std::ios::binary);
        return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    };
    REQUIRE(read_file(p1) == read_file(p2));
}

TEST_CASE("non-copy answers never leak into the query segment", "[synthtask]") {
    TaskSpec spec;  // full mixture, all transforms
    spec.seed = 13;
    DatasetSidecar side;
    TokenDataset ds = generate_dataset(spec, 2000, &side);
    for (int64_t i = 0; i < ds.count; ++i) {
        if (side.task_ids[i].find("/copy") != std::string::npos) continue;
        QueryView qv = query_of(ds, i);
        for (int32_t t : qv.segment) REQUIRE(t != qv.answer);
    }
}

TEST_CASE("keys and values stay near-uniform", "[synthtask]") {
    TaskSpec spec = single_task(QkPattern::same_key, OvTransform::copy, 3, 1);
    spec.seed = 21;
    TokenDataset ds = generate_dataset(spec, 10000, nullptr);
    std::map<int32_t, int64_t> freq;
    for (int64_t i = 0; i < ds.count * ds.seq_len; ++i)
        if (ds.tokens[i] >= 3) freq[ds.tokens[i]]++;
    double key_expect = 0, val_expect = 0;
    for (auto& [tok, n] : freq) {
        if (tok < spec.value_token(0)) key_expect += n;
        else val_expect += n;
    }
    key_expect /= spec.n_keys;
    val_expect /= spec.n_values;
    for (auto& [tok, n] : freq) {
        double expect = tok < spec.value_token(0) ? key_expect : val_expect;
        REQUIRE(n < 2.0 * expect);
        REQUIRE(n > 0.5 * expect);
    }
}

TEST_CASE("infeasible specs are rejected", "[synthtask]") {
    TaskSpec bad = single_task(QkPattern::different_in_set, OvTransform::copy, 2, 1);
    REQUIRE_THROWS_AS(generate_dataset(bad, 10, nullptr), std::invalid_argument);
    TaskSpec bad2 = single_task(QkPattern::other_key, OvTransform::copy, 1, 1);
    REQUIRE_THROWS_AS(generate_dataset(bad2, 10, nullptr), std::invalid_argument);
    TaskSpec bad3 = single_task(QkPattern::same_key, OvTransform::copy, 20, 1);  // > n_keys
    REQUIRE_THROWS_AS(generate_dataset(bad3, 10, nullptr), std::invalid_argument);
}

TEST_CASE("an untrained model evaluates at chance level", "[synthtask]") {
    TaskSpec spec = single_task(QkPattern::same_key, OvTransform::copy, 3, 1);
    spec.seed = 31;
    TokenDataset ds = generate_dataset(spec, 2000, nullptr);

    ModelConfig mc;
    mc.n_layers = 2;
    mc.d_model = 32;
    mc.n_heads = 4;
    mc.d_head = 8;
    mc.vocab_size = spec.vocab_size();
    mc.max_seq_len = ds.seq_len;
    mc.local_global_pattern = "G";
    Model<float> model(mc, 77);
    EvalResult r = evaluate(model, ds);
    double v = static_cast<double>(spec.vocab_size());
    double p = 1.0 / v;
    double sigma = std::sqrt(p * (1 - p) / static_cast<double>(ds.count));
    REQUIRE(r.accuracy < p + 3 * sigma + 0.01);
    REQUIRE(r.perplexity > 0.4 * v);
    REQUIRE(r.perplexity < 2.5 * v);
}

TEST_CASE("a memorized example evaluates to accuracy 1", "[synthtask]") {
    TaskSpec spec = single_task(QkPattern::same_key, OvTransform::class_lookup, 2, 1);
    spec.seed = 41;
    TokenDataset ds = generate_dataset(spec, 4, nullptr);

    ModelConfig mc;
    mc.n_layers = 2;
    mc.d_model = 32;
    mc.n_heads = 4;
    mc.d_head = 8;
    mc.vocab_size = spec.vocab_size();
    mc.max_seq_len = ds.seq_len;
    mc.local_global_pattern = "G";
    Model<float> model(mc, 78);
    TrainConfig tc;
    tc.steps = 400;
    tc.batch_size = 4;
    tc.lr = 3e-3;
    train(model, tc, ds);
    EvalResult r = evaluate(model, ds);
    REQUIRE(r.accuracy == 1.0);
}
