#pragma once

// Paired reference experiment: train a document-pooled model ("emo") and a
// standard MoE from identical initialization on identical synthetic data,
// then compare full perplexity, subset degradation, selection strategies,
// and within-document routing consistency. All artifacts land under one
// output directory; everything except timing.csv is byte-reproducible.

#include <modmoe/analysis.hpp>
#include <modmoe/checkpoint.hpp>
#include <modmoe/subsetting.hpp>
#include <modmoe/trainer.hpp>

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace modmoe {

struct ReproConfig {
    uint64_t seed = 7;
    // desk-scale reference recipe
    int n_layers = 2;
    int hidden_dim = 128;
    int n_heads = 4;
    int n_routed = 16;
    int n_shared = 1;
    int k_active = 2;
    int expert_dim = 64;
    int vocab_size = 512;
    int seq_len = 256;
    int n_domains = 4;
    int batch_size = 8;
    int steps = 1000;  // ~2M training tokens at 8 x 256
    int train_docs = 2400;
    int eval_docs_per_domain = 40;
    int select_docs_per_domain = 10;
    int subset_d = 4;  // 25% retention of n_routed
    int trace_docs = 160;
    int trace_tokens_per_doc = 50;

    ModelConfig model_config() const {
        ModelConfig mc;
        mc.vocab_size = vocab_size;
        mc.seq_len = seq_len;
        mc.n_layers = n_layers;
        mc.n_heads = n_heads;
        mc.hidden_dim = hidden_dim;
        mc.moe.hidden_dim = hidden_dim;
        mc.moe.expert_dim = expert_dim;
        mc.moe.n_routed = n_routed;
        mc.moe.n_shared = n_shared;
        mc.moe.k_active = k_active;
        mc.moe.n_parallel_groups = 2;
        mc.moe.alpha = 0.1;
        mc.moe.beta = 1e-3;
        mc.moe.lb_mode = LbMode::global;
        return mc;
    }

    TrainConfig train_config() const {
        TrainConfig tc;
        tc.steps = steps;
        tc.batch_size = batch_size;
        tc.seed = seed;
        tc.log_interval = std::max(1, steps / 50);
        return tc;
    }
};

struct ReproRunStats {
    double full_ppl = 0;                            // overall held-out perplexity
    std::map<std::string, double> full_per_domain;  // per-domain full-model ppl
    std::map<std::string, double> subset_per_domain;  // router-average top-d ppl
    double mean_rel_increase = 0;  // mean over domains of (subset-full)/full
    double final_layer_jaccard = 0;
};

struct ReproResult {
    ReproRunStats emo, moe;
    double random_mean_ppl = 0;          // emo ckpt, random selection at subset_d
    double router_avg_mean_ppl = 0;      // emo ckpt, router-average at subset_d
    std::filesystem::path out_dir;
};

namespace detail {

inline std::map<std::string, Corpus> split_by_domain(const Corpus& c) {
    std::map<std::string, Corpus> out;
    for (const auto& d : c.docs) {
        auto& dst = out[d.domain];
        dst.vocab_size = c.vocab_size;
        dst.docs.push_back(d);
    }
    return out;
}

inline Corpus take_docs(const Corpus& c, size_t begin, size_t end) {
    Corpus out;
    out.vocab_size = c.vocab_size;
    for (size_t i = begin; i < end && i < c.docs.size(); ++i) out.docs.push_back(c.docs[i]);
    return out;
}

inline double mean_per_domain_ppl(Checkpoint& ckpt,
                                  const std::map<std::string, ExpertScorecard>& cards, int d,
                                  const std::map<std::string, Corpus>& eval_corpora) {
    double sum = 0;
    for (const auto& [dom, card] : cards) {
        auto retained = select_top(card, d, ckpt.config.moe.k_active);
        EvalOptions eo;
        eo.mode = RoutingMode::subset;
        eo.retained = &retained.per_layer;
        auto rep = evaluate_perplexity(ckpt, eval_corpora.at(dom), eo);
        sum += rep.per_domain.at(dom);
    }
    return sum / cards.size();
}

inline double final_layer_jaccard(Checkpoint& ckpt, const Corpus& docs, int tokens_per_doc,
                                  uint64_t seed) {
    auto trace =
        collect_traces(ckpt, docs, tokens_per_doc, static_cast<int>(docs.docs.size()), seed);
    auto rows = consistency_metrics(trace);
    return rows.back().within_doc_jaccard.value_or(0.0);
}

}  // namespace detail

// Runs the full paired experiment for one seed and writes:
//   corpus.jsonl, resolved_config.json, summary.json
//   <run>/checkpoint/, <run>/metrics.csv, <run>/sweep.csv,
//   <run>/similarity_l<i>.csv, <run>/consistency.csv  for run in {emo, moe}
//   timing.csv (wall-clock; the one artifact that varies between reruns)
inline ReproResult run_emo_vs_moe(const ReproConfig& rc, const std::string& out_dir) {
    namespace fs = std::filesystem;
    ReproResult result;
    result.out_dir = out_dir;
    fs::create_directories(out_dir);

    SyntheticSpec spec;
    spec.n_domains = rc.n_domains;
    spec.vocab_size = rc.vocab_size;
    const int held_out = rc.n_domains * (rc.eval_docs_per_domain + rc.select_docs_per_domain);
    auto corpus = generate_synthetic(spec, rc.train_docs + held_out, rc.seed);
    export_jsonl(corpus, out_dir + "/corpus.jsonl");

    auto train_corpus = detail::take_docs(corpus, 0, rc.train_docs);
    auto rest = detail::take_docs(corpus, rc.train_docs, corpus.docs.size());
    auto rest_by_domain = detail::split_by_domain(rest);
    Corpus eval_corpus, trace_corpus;
    eval_corpus.vocab_size = trace_corpus.vocab_size = corpus.vocab_size;
    std::map<std::string, Corpus> eval_by_domain, select_by_domain;
    for (auto& [dom, c] : rest_by_domain) {
        eval_by_domain[dom] = detail::take_docs(c, 0, rc.eval_docs_per_domain);
        select_by_domain[dom] =
            detail::take_docs(c, rc.eval_docs_per_domain,
                              rc.eval_docs_per_domain + rc.select_docs_per_domain);
        for (const auto& d : eval_by_domain[dom].docs) eval_corpus.docs.push_back(d);
    }
    for (size_t i = 0; i < eval_corpus.docs.size() && static_cast<int>(trace_corpus.docs.size())
         < rc.trace_docs; ++i)
        trace_corpus.docs.push_back(eval_corpus.docs[i]);

    auto mc = rc.model_config();
    auto tc = rc.train_config();
    {
        nlohmann::json resolved{{"seed", rc.seed},
                                {"model", to_json(mc)},
                                {"train", to_json(tc)},
                                {"steps", rc.steps},
                                {"subset_d", rc.subset_d},
                                {"train_docs", rc.train_docs},
                                {"eval_docs_per_domain", rc.eval_docs_per_domain},
                                {"select_docs_per_domain", rc.select_docs_per_domain}};
        std::ofstream f(out_dir + "/resolved_config.json");
        f << resolved.dump(2) << '\n';
    }

    std::ofstream timing(out_dir + "/timing.csv", std::ios::trunc);
    timing << "run,mean_tokens_per_sec\n";

    auto run_one = [&](const std::string& name, bool pooled) -> ReproRunStats {
        fs::create_directories(out_dir + "/" + name);
        auto cfg = mc;
        if (pooled) cfg.moe.pool_policy = PoolPolicy::uniform_random();
        TrainOptions topt;
        topt.initial_mode = pooled ? RoutingMode::pooled : RoutingMode::standard;
        auto res = train(cfg, tc, train_corpus, topt);
        res.metrics.write_csv(out_dir + "/" + name + "/metrics.csv",
                              /*include_timing=*/false);
        double tps = 0;
        for (const auto& r : res.metrics.rows) tps += r.tokens_per_sec;
        if (!res.metrics.rows.empty()) tps /= static_cast<double>(res.metrics.rows.size());
        timing << name << ',' << tps << '\n';
        save_checkpoint(res.checkpoint, out_dir + "/" + name + "/checkpoint");

        ReproRunStats stats;
        auto full = evaluate_perplexity(res.checkpoint, eval_corpus);
        stats.full_ppl = full.overall;
        // Baseline for the degradation comparison: the full model evaluated on
        // the same per-domain corpora the subsets are evaluated on, so packing
        // differences cancel out of (subset - full) / full.
        for (const auto& [dom, c] : eval_by_domain)
            stats.full_per_domain[dom] =
                evaluate_perplexity(res.checkpoint, c).per_domain.at(dom);

        std::map<std::string, ExpertScorecard> cards;
        for (auto& [dom, c] : select_by_domain)
            cards[dom] = score_router_average(res.checkpoint, c);
        std::vector<int> sizes{rc.k_active, rc.subset_d, rc.n_routed / 2, rc.n_routed};
        auto sweep = sweep_subsets(res.checkpoint, cards, sizes, eval_by_domain, rc.seed);
        sweep.write_csv(out_dir + "/" + name + "/sweep.csv");

        double rel_sum = 0;
        for (const auto& [dom, card] : cards) {
            auto retained = select_top(card, rc.subset_d, rc.k_active);
            EvalOptions eo;
            eo.mode = RoutingMode::subset;
            eo.retained = &retained.per_layer;
            auto rep = evaluate_perplexity(res.checkpoint, eval_by_domain.at(dom), eo);
            double sub = rep.per_domain.at(dom);
            stats.subset_per_domain[dom] = sub;
            rel_sum += (sub - stats.full_per_domain.at(dom)) / stats.full_per_domain.at(dom);
        }
        stats.mean_rel_increase = rel_sum / cards.size();

        auto trace = collect_traces(res.checkpoint, trace_corpus, rc.trace_tokens_per_doc,
                                    static_cast<int>(trace_corpus.docs.size()), rc.seed);
        write_trace_jsonl(trace, out_dir + "/" + name + "/trace.jsonl");
        auto sims = domain_similarity(trace);
        for (size_t l = 0; l < sims.size(); ++l) {
            std::ofstream f(out_dir + "/" + name + "/similarity_l" + std::to_string(l) +
                            ".csv");
            f << sims[l].to_csv();
        }
        auto consistency = consistency_metrics(trace);
        {
            std::ofstream f(out_dir + "/" + name + "/consistency.csv");
            f << consistency_csv(consistency);
        }
        stats.final_layer_jaccard = consistency.back().within_doc_jaccard.value_or(0.0);

        if (name == "emo") {
            std::map<std::string, ExpertScorecard> rnd;
            for (const auto& [dom, card] : cards)
                rnd[dom] = score_random(rc.n_routed, rc.n_layers,
                                        rng::mix(rc.seed, rng::fnv1a(dom)));
            result.random_mean_ppl =
                detail::mean_per_domain_ppl(res.checkpoint, rnd, rc.subset_d, eval_by_domain);
            result.router_avg_mean_ppl =
                detail::mean_per_domain_ppl(res.checkpoint, cards, rc.subset_d,
                                            eval_by_domain);
        }
        return stats;
    };

    result.emo = run_one("emo", /*pooled=*/true);
    result.moe = run_one("moe", /*pooled=*/false);

    nlohmann::json summary{
        {"seed", rc.seed},
        {"emo",
         {{"full_ppl", result.emo.full_ppl},
          {"full_per_domain", result.emo.full_per_domain},
          {"subset_per_domain", result.emo.subset_per_domain},
          {"mean_rel_increase", result.emo.mean_rel_increase},
          {"final_layer_jaccard", result.emo.final_layer_jaccard}}},
        {"moe",
         {{"full_ppl", result.moe.full_ppl},
          {"full_per_domain", result.moe.full_per_domain},
          {"subset_per_domain", result.moe.subset_per_domain},
          {"mean_rel_increase", result.moe.mean_rel_increase},
          {"final_layer_jaccard", result.moe.final_layer_jaccard}}},
        {"selection",
         {{"random_mean_ppl", result.random_mean_ppl},
          {"router_avg_mean_ppl", result.router_avg_mean_ppl}}},
        {"full_ppl_rel_gap",
         std::abs(result.emo.full_ppl - result.moe.full_ppl) / result.moe.full_ppl}};
    std::ofstream f(out_dir + "/summary.json");
    f << summary.dump(2) << '\n';
    return result;
}

}  // namespace modmoe
