#pragma once

// Domain-conditioned expert selection: score experts from validation
// routing behavior, retain the top-d per layer, and sweep subset sizes
// into a memory-accuracy curve.

#include <modmoe/checkpoint.hpp>
#include <modmoe/model.hpp>
#include <modmoe/trainer.hpp>

#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace modmoe {

struct SubsetError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ExpertScorecard {
    std::vector<std::vector<double>> scores;  // [layer][expert]
    std::string strategy;
    std::string validation_id;
    int64_t n_examples = 0;

    void validate() const {
        for (const auto& layer : scores)
            for (double s : layer)
                if (!std::isfinite(s)) throw SubsetError("non-finite expert score");
    }
};

// Per layer, the mean standard-routing probability p_t(i) over every
// document-covered validation token. Pre-mask probabilities: no pooling
// or subsetting is applied during the scoring pass.
inline ExpertScorecard score_router_average(Checkpoint& ckpt, const Corpus& validation) {
    if (validation.docs.empty()) throw SubsetError("validation set is empty");
    const int n_layers = ckpt.config.n_layers;
    const int n_r = ckpt.config.moe.n_routed;
    ExpertScorecard card;
    card.strategy = "router_average";
    card.n_examples = static_cast<int64_t>(validation.docs.size());
    card.scores.assign(n_layers, std::vector<double>(n_r, 0.0));
    std::vector<int64_t> tokens(n_layers, 0);
    // each document is scored in isolation so results do not depend on
    // corpus order or how documents happen to be packed together
    for (const auto& doc : validation.docs) {
        Corpus one;
        one.vocab_size = validation.vocab_size;
        one.docs.push_back(doc);
        auto batches = pack(one, ckpt.config.seq_len, /*batch_size=*/1, /*seed=*/0,
                            /*shuffle=*/false);
        for (const auto& batch : batches) {
            RoutingTrace trace;
            ForwardOptions opt;
            opt.trace = &trace;
            forward_logits(nullptr, ckpt, batch, opt);
            for (const auto& row : trace) {
                for (int i = 0; i < n_r; ++i) card.scores[row.layer][i] += row.probs[i];
                tokens[row.layer]++;
            }
        }
    }
    for (int l = 0; l < n_layers; ++l) {
        if (tokens[l] == 0) throw SubsetError("validation set has no scoreable tokens");
        for (double& s : card.scores[l]) s /= tokens[l];
    }
    card.validate();
    return card;
}

// I.i.d. uniform scores: the random-selection baseline.
inline ExpertScorecard score_random(int n_r, int n_layers, uint64_t seed) {
    ExpertScorecard card;
    card.strategy = "random";
    rng::Stream rs(seed, rng::fnv1a("score_random"));
    card.scores.assign(n_layers, {});
    for (auto& layer : card.scores)
        for (int i = 0; i < n_r; ++i) layer.push_back(rs.next_double());
    return card;
}

struct RetainedSets {
    std::vector<std::vector<int>> per_layer;  // sorted expert ids
    int d = 0;
};

// Top-d by score per layer, ties to the lowest index, sorted output.
inline RetainedSets select_top(const ExpertScorecard& card, int d, int k_active = 1) {
    RetainedSets out;
    out.d = d;
    for (const auto& scores : card.scores) {
        const int n_r = static_cast<int>(scores.size());
        if (d < k_active || d > n_r)
            throw SubsetError("subset size " + std::to_string(d) + " outside [k, n_r]");
        std::vector<int> idx(n_r);
        std::iota(idx.begin(), idx.end(), 0);
        std::partial_sort(idx.begin(), idx.begin() + d, idx.end(), [&](int a, int b) {
            if (scores[a] != scores[b]) return scores[a] > scores[b];
            return a < b;
        });
        std::vector<int> keep(idx.begin(), idx.begin() + d);
        std::sort(keep.begin(), keep.end());
        out.per_layer.push_back(std::move(keep));
    }
    return out;
}

struct SweepRow {
    std::string domain;
    std::string strategy;
    int d = 0;
    double retained_param_fraction = 0;
    double perplexity = 0;
    int64_t n_validation_docs = 0;
    uint64_t seed = 0;
};

struct SweepTable {
    std::vector<SweepRow> rows;

    std::string to_csv() const {
        std::ostringstream out;
        out.precision(12);
        out << "domain,strategy,d,retained_param_fraction,perplexity,n_validation_docs,seed\n";
        for (const auto& r : rows)
            out << r.domain << ',' << r.strategy << ',' << r.d << ','
                << r.retained_param_fraction << ',' << r.perplexity << ','
                << r.n_validation_docs << ',' << r.seed << '\n';
        return out.str();
    }

    void write_csv(const std::string& path) const {
        std::ofstream f(path, std::ios::trunc);
        if (!f) throw SubsetError("cannot open sweep file: " + path);
        f << to_csv();
    }
};

// For each domain and size d: pick that domain's top-d experts and measure
// its held-out perplexity in subset mode.
inline SweepTable sweep_subsets(Checkpoint& ckpt,
                                const std::map<std::string, ExpertScorecard>& cards,
                                const std::vector<int>& sizes,
                                const std::map<std::string, Corpus>& eval_corpora,
                                uint64_t seed = 0) {
    SweepTable table;
    const double full_params = static_cast<double>(ckpt.total_params());
    for (const auto& [domain, card] : cards) {
        auto it = eval_corpora.find(domain);
        if (it == eval_corpora.end())
            throw SubsetError("no evaluation corpus for domain " + domain);
        for (int d : sizes) {
            auto retained = select_top(card, d, ckpt.config.moe.k_active);
            EvalOptions eo;
            eo.mode = RoutingMode::subset;
            eo.retained = &retained.per_layer;
            auto rep = evaluate_perplexity(ckpt, it->second, eo);
            SweepRow row;
            row.domain = domain;
            row.strategy = card.strategy;
            row.d = d;
            row.retained_param_fraction =
                extract_subset(ckpt, retained.per_layer).total_params() / full_params;
            row.perplexity = rep.per_domain.count(domain) ? rep.per_domain.at(domain)
                                                          : rep.overall;
            row.n_validation_docs = card.n_examples;
            row.seed = seed;
            table.rows.push_back(std::move(row));
        }
    }
    return table;
}

}  // namespace modmoe
