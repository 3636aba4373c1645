#pragma once

// Token-level head-composition tasks: each example pairs an attention pattern
// (which source token to find) with a value transformation (what to emit), the
// two chosen independently. A model must combine the lookup circuit and the
// transformation circuit to answer. Examples carry k-shot in-context
// demonstrations; the final token of every sequence is the answer.
//
// Vocabulary layout: 0 PAD, 1 SEP, 2 QRY, then keys, values, classes.

#include <map>
#include <set>

#include <json.hpp>

#include "dcmha/data.hpp"
#include "dcmha/model.hpp"
#include "dcmha/tensor.hpp"

namespace dcmha {

enum class QkPattern { same_key, other_key, different_in_set };
enum class OvTransform { copy, successor, class_lookup };

inline const char* to_string(QkPattern p) {
    switch (p) {
        case QkPattern::same_key: return "same_key";
        case QkPattern::other_key: return "other_key";
        default: return "different_in_set";
    }
}
inline const char* to_string(OvTransform t) {
    switch (t) {
        case OvTransform::copy: return "copy";
        case OvTransform::successor: return "successor";
        default: return "class_lookup";
    }
}

inline QkPattern qk_pattern_from(const std::string& s) {
    if (s == "same_key") return QkPattern::same_key;
    if (s == "other_key") return QkPattern::other_key;
    if (s == "different_in_set") return QkPattern::different_in_set;
    throw std::invalid_argument("unknown qk pattern '" + s + "'");
}
inline OvTransform ov_transform_from(const std::string& s) {
    if (s == "copy") return OvTransform::copy;
    if (s == "successor") return OvTransform::successor;
    if (s == "class_lookup") return OvTransform::class_lookup;
    throw std::invalid_argument("unknown ov transform '" + s + "'");
}

struct TaskSpec {
    std::vector<QkPattern> patterns = {QkPattern::same_key, QkPattern::other_key,
                                       QkPattern::different_in_set};
    std::vector<OvTransform> transforms = {OvTransform::copy, OvTransform::successor,
                                           OvTransform::class_lookup};
    int64_t n_keys = 16;
    int64_t n_values = 16;
    int64_t n_classes = 8;
    int64_t n_pairs = 3;
    std::vector<int64_t> k_shots = {1, 2, 3};
    uint64_t seed = 0;

    static constexpr int32_t kSep = 1;
    static constexpr int32_t kQry = 2;
    int32_t key_token(int64_t i) const { return static_cast<int32_t>(3 + i); }
    int32_t value_token(int64_t i) const { return static_cast<int32_t>(3 + n_keys + i); }
    int32_t class_token(int64_t i) const { return static_cast<int32_t>(3 + n_keys + n_values + i); }
    int64_t vocab_size() const { return 3 + n_keys + n_values + n_classes; }

    void validate() const {
        if (patterns.empty() || transforms.empty()) throw std::invalid_argument("task spec: empty mixture");
        if (n_keys < n_pairs || n_values < n_pairs)
            throw std::invalid_argument("task spec: need at least n_pairs distinct keys and values");
        if (n_classes < 2) throw std::invalid_argument("task spec: need at least 2 classes");
        if (n_pairs < 1) throw std::invalid_argument("task spec: need n_pairs >= 1");
        for (QkPattern p : patterns) {
            if (p == QkPattern::other_key && n_pairs < 2)
                throw std::invalid_argument("task spec: other_key needs n_pairs >= 2");
            if (p == QkPattern::different_in_set && n_pairs < 3)
                throw std::invalid_argument(
                    "task spec: different_in_set needs n_pairs >= 3 for a unique odd element");
        }
        if (k_shots.empty()) throw std::invalid_argument("task spec: empty k_shot list");
    }

    // value index -> class index; balanced round-robin over a seeded shuffle
    std::vector<int64_t> class_table() const {
        std::vector<int64_t> perm(n_values);
        for (int64_t i = 0; i < n_values; ++i) perm[i] = i;
        Rng r = Rng(seed).split(0xC1A55);
        for (int64_t i = n_values - 1; i > 0; --i)
            std::swap(perm[i], perm[r.below(static_cast<uint64_t>(i + 1))]);
        std::vector<int64_t> table(n_values);
        for (int64_t i = 0; i < n_values; ++i) table[perm[i]] = i % n_classes;
        return table;
    }

    // longest example over the mixture, used as the dataset's fixed seq_len
    int64_t max_example_len() const {
        int64_t max_k = *std::max_element(k_shots.begin(), k_shots.end());
        int64_t pair_seg = 2 * n_pairs + 2;                       // pairs, QRY, key
        int64_t set_seg = n_pairs + 1;                            // values, QRY
        int64_t len = 0;
        for (QkPattern p : patterns) {
            int64_t seg = p == QkPattern::different_in_set ? set_seg : pair_seg;
            len = std::max(len, max_k * (seg + 2) + seg + 1);     // demos have answer+SEP
        }
        return len;
    }
};

inline void to_json(json& j, const TaskSpec& s) {
    std::vector<std::string> ps, ts;
    for (auto p : s.patterns) ps.push_back(to_string(p));
    for (auto t : s.transforms) ts.push_back(to_string(t));
    j = json{{"qk_patterns", ps},   {"ov_transforms", ts}, {"n_keys", s.n_keys},
             {"n_values", s.n_values}, {"n_classes", s.n_classes}, {"n_pairs", s.n_pairs},
             {"k_shots", s.k_shots},   {"seed", s.seed}};
}

inline void from_json(const json& j, TaskSpec& s) {
    s = TaskSpec{};
    if (j.contains("qk_patterns")) {
        s.patterns.clear();
        for (const auto& p : j.at("qk_patterns")) s.patterns.push_back(qk_pattern_from(p));
    }
    if (j.contains("ov_transforms")) {
        s.transforms.clear();
        for (const auto& t : j.at("ov_transforms")) s.transforms.push_back(ov_transform_from(t));
    }
    s.n_keys = j.value("n_keys", s.n_keys);
    s.n_values = j.value("n_values", s.n_values);
    s.n_classes = j.value("n_classes", s.n_classes);
    s.n_pairs = j.value("n_pairs", s.n_pairs);
    if (j.contains("k_shots")) s.k_shots = j.at("k_shots").get<std::vector<int64_t>>();
    s.seed = j.value("seed", s.seed);
}

struct DatasetSidecar {
    TaskSpec spec;
    std::vector<int64_t> class_table;
    std::vector<std::string> task_ids;  // per example, "pattern/transform"
    std::vector<int64_t> k_shots;       // per example
    std::vector<int64_t> answer_pos;    // per example, index of the answer token
};

inline void to_json(json& j, const DatasetSidecar& s) {
    j = json{{"spec", s.spec},
             {"class_table", s.class_table},
             {"task_ids", s.task_ids},
             {"k_shots", s.k_shots},
             {"answer_pos", s.answer_pos}};
}

namespace detail {

struct Segment {
    std::vector<int32_t> tokens;  // query segment, ends right before the answer
    int32_t answer = 0;
};

// one demonstration/query segment for a given task
inline Segment make_segment(const TaskSpec& spec, const std::vector<int64_t>& table, QkPattern pat,
                            OvTransform tr, Rng& rng) {
    auto sample_distinct = [&](int64_t n, int64_t upper) {
        std::vector<int64_t> pool(upper);
        for (int64_t i = 0; i < upper; ++i) pool[i] = i;
        for (int64_t i = 0; i < n; ++i)
            std::swap(pool[i], pool[i + static_cast<int64_t>(rng.below(static_cast<uint64_t>(upper - i)))]);
        pool.resize(n);
        return pool;
    };
    auto apply = [&](int64_t v) -> int32_t {
        switch (tr) {
            case OvTransform::copy: return spec.value_token(v);
            case OvTransform::successor: return spec.value_token((v + 1) % spec.n_values);
            default: return spec.class_token(table[v]);
        }
    };

    Segment seg;
    const int64_t p = spec.n_pairs;
    if (pat == QkPattern::different_in_set) {
        // p-1 values share a class, one value from another class; answer from the odd one
        std::vector<std::vector<int64_t>> by_class(spec.n_classes);
        for (int64_t v = 0; v < spec.n_values; ++v) by_class[table[v]].push_back(v);
        std::vector<int64_t> big, nonempty;
        for (int64_t c = 0; c < spec.n_classes; ++c) {
            if (static_cast<int64_t>(by_class[c].size()) >= p - 1) big.push_back(c);
            if (!by_class[c].empty()) nonempty.push_back(c);
        }
        if (big.empty() || nonempty.size() < 2)
            throw std::invalid_argument("task spec: class table cannot host different_in_set");
        int64_t cm = big[rng.below(big.size())];
        int64_t co;
        do {
            co = nonempty[rng.below(nonempty.size())];
        } while (co == cm);
        auto& pool = by_class[cm];
        std::vector<int64_t> majority;
        {
            std::vector<int64_t> idx(pool.size());
            for (size_t i = 0; i < pool.size(); ++i) idx[i] = static_cast<int64_t>(i);
            for (int64_t i = 0; i < p - 1; ++i)
                std::swap(idx[i], idx[i + static_cast<int64_t>(rng.below(idx.size() - i))]);
            for (int64_t i = 0; i < p - 1; ++i) majority.push_back(pool[idx[i]]);
        }
        int64_t odd = by_class[co][rng.below(by_class[co].size())];
        std::vector<int64_t> values = majority;
        values.insert(values.begin() + static_cast<int64_t>(rng.below(static_cast<uint64_t>(p))), odd);
        for (int64_t v : values) seg.tokens.push_back(spec.value_token(v));
        seg.tokens.push_back(TaskSpec::kQry);
        seg.answer = apply(odd);
        return seg;
    }

    std::vector<int64_t> keys = sample_distinct(p, spec.n_keys);
    std::vector<int64_t> values = sample_distinct(p, spec.n_values);
    int64_t qi = static_cast<int64_t>(rng.below(static_cast<uint64_t>(p)));
    for (int64_t i = 0; i < p; ++i) {
        seg.tokens.push_back(spec.key_token(keys[i]));
        seg.tokens.push_back(spec.value_token(values[i]));
    }
    seg.tokens.push_back(TaskSpec::kQry);
    seg.tokens.push_back(spec.key_token(keys[qi]));
    int64_t source = pat == QkPattern::same_key ? values[qi] : values[(qi + 1) % p];
    seg.answer = apply(source);
    return seg;
}

}  // namespace detail

// Emits n_examples sequences; `k_shot_override` >= 1 fixes the shot count,
// otherwise shots are drawn uniformly from the spec's list. Deterministic in
// (spec.seed, n_examples).
inline TokenDataset generate_dataset(const TaskSpec& spec, int64_t n_examples,
                                     DatasetSidecar* sidecar = nullptr, int64_t k_shot_override = -1) {
    spec.validate();
    if (k_shot_override == 0 || k_shot_override < -1)
        throw std::invalid_argument("generate_dataset: bad k_shot");
    std::vector<int64_t> table = spec.class_table();
    Rng rng(spec.seed);

    TokenDataset ds;
    ds.vocab_size = spec.vocab_size();
    ds.seq_len = spec.max_example_len();
    ds.count = n_examples;
    ds.tokens.assign(n_examples * ds.seq_len, static_cast<uint16_t>(kPadToken));
    if (sidecar) {
        sidecar->spec = spec;
        sidecar->class_table = table;
    }

    for (int64_t ex = 0; ex < n_examples; ++ex) {
        QkPattern pat = spec.patterns[rng.below(spec.patterns.size())];
        OvTransform tr = spec.transforms[rng.below(spec.transforms.size())];
        int64_t k = k_shot_override > 0 ? k_shot_override : spec.k_shots[rng.below(spec.k_shots.size())];

        std::vector<int32_t> tokens;
        detail::Segment query;
        for (int attempt = 0;; ++attempt) {
            if (attempt > 200)
                throw std::invalid_argument("task spec: cannot satisfy answer-leak constraint");
            tokens.clear();
            for (int64_t d = 0; d < k; ++d) {
                detail::Segment demo = detail::make_segment(spec, table, pat, tr, rng);
                tokens.insert(tokens.end(), demo.tokens.begin(), demo.tokens.end());
                tokens.push_back(demo.answer);
                tokens.push_back(TaskSpec::kSep);
            }
            query = detail::make_segment(spec, table, pat, tr, rng);
            // answer-leak check: for non-copy transforms the answer token must
            // not occur anywhere in the query segment
            if (tr != OvTransform::copy) {
                bool leak = false;
                for (int32_t t : query.tokens) leak = leak || t == query.answer;
                if (leak) continue;
            }
            break;
        }
        tokens.insert(tokens.end(), query.tokens.begin(), query.tokens.end());
        tokens.push_back(query.answer);
        if (static_cast<int64_t>(tokens.size()) > ds.seq_len)
            throw std::logic_error("generated example longer than seq_len");
        for (size_t t = 0; t < tokens.size(); ++t)
            ds.tokens[ex * ds.seq_len + static_cast<int64_t>(t)] = static_cast<uint16_t>(tokens[t]);
        if (sidecar) {
            sidecar->task_ids.push_back(std::string(to_string(pat)) + "/" + to_string(tr));
            sidecar->k_shots.push_back(k);
            sidecar->answer_pos.push_back(static_cast<int64_t>(tokens.size()) - 1);
        }
    }
    return ds;
}

// ---- evaluation ----

struct EvalResult {
    double accuracy = 0;
    double perplexity = 0;  // exp(mean NLL of the answer token)
    int64_t n = 0;
};

// Greedy prediction of each example's final (answer) token; the answer is the
// last non-PAD token of the row.
template <typename T>
EvalResult evaluate(Model<T>& model, const TokenDataset& ds, int64_t batch_size = 64) {
    if (ds.vocab_size > model.config().vocab_size)
        throw std::invalid_argument("evaluate: dataset vocab exceeds model vocab");
    if (ds.seq_len > model.config().max_seq_len + 1)
        throw std::invalid_argument("evaluate: dataset seq_len exceeds model context");
    EvalResult r;
    double nll_sum = 0;
    int64_t correct = 0;
    const int64_t Tlen = ds.seq_len - 1;
    for (int64_t start = 0; start < ds.count; start += batch_size) {
        int64_t B = std::min(batch_size, ds.count - start);
        std::vector<int32_t> inputs(B * Tlen);
        std::vector<int64_t> ans_pos(B);
        std::vector<int32_t> answers(B);
        for (int64_t b = 0; b < B; ++b) {
            const uint16_t* row = ds.row(start + b);
            int64_t last = ds.seq_len - 1;
            while (last > 0 && row[last] == kPadToken) --last;
            ans_pos[b] = last;
            answers[b] = row[last];
            for (int64_t t = 0; t < Tlen; ++t) inputs[b * Tlen + t] = row[t];
        }
        Tensor<T> logits = model.forward_logits(inputs, B, Tlen);
        const int64_t V = model.config().vocab_size;
        for (int64_t b = 0; b < B; ++b) {
            const T* lrow = logits.data() + (b * Tlen + ans_pos[b] - 1) * V;
            int64_t best = 0;
            double m = lrow[0];
            for (int64_t v = 1; v < V; ++v)
                if (lrow[v] > lrow[best]) best = v;
            m = lrow[best];
            double lse = 0;
            for (int64_t v = 0; v < V; ++v) lse += std::exp(static_cast<double>(lrow[v]) - m);
            nll_sum += -(static_cast<double>(lrow[answers[b]]) - m - std::log(lse));
            correct += best == answers[b] ? 1 : 0;
        }
    }
    r.n = ds.count;
    r.accuracy = static_cast<double>(correct) / static_cast<double>(ds.count);
    r.perplexity = std::exp(nll_sum / static_cast<double>(ds.count));
    return r;
}

}  // namespace dcmha
