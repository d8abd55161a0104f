// modmoe: operator-facing command surface for the document-pooled MoE
// pipeline. One binary, one command per process; artifacts land only under
// the chosen output directory. Exit codes: 0 success, 1 runtime failure,
// 2 invalid usage or configuration.

#include <modmoe/repro.hpp>

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace modmoe;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string default_out() {
    const char* env = std::getenv("MODMOE_OUT");
    return env && *env ? std::string(env) : std::string("out");
}

// Marks an output directory incomplete for the duration of a command; the
// marker survives any failure, so partially written artifacts are always
// identifiable.
class ArtifactGuard {
public:
    explicit ArtifactGuard(const std::string& out) : marker_(fs::path(out) / "_INCOMPLETE") {
        fs::create_directories(out);
        std::ofstream f(marker_);
        f << "command in progress or failed before completion\n";
    }
    void complete() {
        fs::remove(marker_);
        done_ = true;
    }
    ~ArtifactGuard() {
        if (!done_) std::cerr << "artifacts in " << marker_.parent_path().string()
                              << " are incomplete (see _INCOMPLETE marker)\n";
    }

private:
    fs::path marker_;
    bool done_ = false;
};

json read_json_file(const std::string& path, const char* what) {
    std::ifstream f(path);
    if (!f) throw ConfigError(std::string("cannot open ") + what + ": " + path);
    json j = json::parse(f, nullptr, false);
    if (j.is_discarded()) throw ConfigError(std::string("malformed JSON in ") + what + ": " + path);
    return j;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << text;
}

// ---- RunConfig: the config file accepted by `train` ----

struct RunConfig {
    uint64_t seed = 0;
    RoutingMode mode = RoutingMode::standard;
    ModelConfig model;
    TrainConfig train;
    // exactly one corpus source
    std::string corpus_path;        // ingest from JSONL when non-empty
    SyntheticSpec synthetic;        // else generate
    int synthetic_docs = 0;
};

SyntheticSpec synthetic_spec_from_json(const json& j) {
    detail::reject_unknown_keys(j,
                                {"n_domains", "vocab_size", "shared_tokens", "overlap",
                                 "func_frac", "min_len", "max_len", "min_tv"},
                                "synthetic corpus spec");
    SyntheticSpec s;
    detail::get_if(j, "n_domains", s.n_domains);
    detail::get_if(j, "vocab_size", s.vocab_size);
    detail::get_if(j, "shared_tokens", s.shared_tokens);
    detail::get_if(j, "overlap", s.overlap);
    detail::get_if(j, "func_frac", s.func_frac);
    detail::get_if(j, "min_len", s.min_len);
    detail::get_if(j, "max_len", s.max_len);
    detail::get_if(j, "min_tv", s.min_tv);
    return s;
}

json to_json(const SyntheticSpec& s) {
    return {{"n_domains", s.n_domains}, {"vocab_size", s.vocab_size},
            {"shared_tokens", s.shared_tokens}, {"overlap", s.overlap},
            {"func_frac", s.func_frac}, {"min_len", s.min_len},
            {"max_len", s.max_len}, {"min_tv", s.min_tv}};
}

RunConfig run_config_from_json(const json& j) {
    detail::reject_unknown_keys(j, {"seed", "mode", "model", "train", "corpus"}, "run config");
    RunConfig rc;
    detail::get_if(j, "seed", rc.seed);
    if (j.contains("mode")) {
        std::string m = j.at("mode").get<std::string>();
        if (m == "standard")
            rc.mode = RoutingMode::standard;
        else if (m == "pooled")
            rc.mode = RoutingMode::pooled;
        else
            throw ConfigError("unknown mode \"" + m + "\" (expected standard or pooled)");
    }
    if (j.contains("model")) rc.model = model_config_from_json(j.at("model"));
    if (j.contains("train")) rc.train = train_config_from_json(j.at("train"));
    rc.train.seed = rc.seed;
    if (!j.contains("corpus")) throw ConfigError("run config requires a \"corpus\" section");
    const json& c = j.at("corpus");
    detail::reject_unknown_keys(c, {"path", "synthetic", "docs"}, "corpus section");
    if (c.contains("path") == (c.contains("synthetic") || c.contains("docs")))
        throw ConfigError("corpus section needs either \"path\" or \"synthetic\"+\"docs\"");
    if (c.contains("path")) {
        rc.corpus_path = c.at("path").get<std::string>();
    } else {
        if (!c.contains("docs")) throw ConfigError("synthetic corpus requires \"docs\"");
        rc.synthetic = c.contains("synthetic") ? synthetic_spec_from_json(c.at("synthetic"))
                                               : SyntheticSpec{};
        rc.synthetic_docs = c.at("docs").get<int>();
        if (rc.synthetic_docs < 1) throw ConfigError("corpus docs must be >= 1");
    }
    return rc;
}

json resolved_run_config(const RunConfig& rc) {
    json corpus;
    if (!rc.corpus_path.empty())
        corpus = {{"path", rc.corpus_path}};
    else
        corpus = {{"synthetic", to_json(rc.synthetic)}, {"docs", rc.synthetic_docs}};
    return {{"seed", rc.seed},
            {"mode", to_string(rc.mode)},
            {"model", to_json(rc.model)},
            {"train", to_json(rc.train)},
            {"corpus", corpus}};
}

Corpus load_run_corpus(const RunConfig& rc) {
    if (!rc.corpus_path.empty()) return ingest_jsonl(rc.corpus_path, rc.model.vocab_size);
    if (rc.synthetic.vocab_size != rc.model.vocab_size)
        throw ConfigError("synthetic vocab_size must match model vocab_size");
    return generate_synthetic(rc.synthetic, rc.synthetic_docs, rc.seed);
}

// ---- scorecard / retained-set files ----

json scorecard_to_json(const ExpertScorecard& c) {
    return {{"scores", c.scores},
            {"strategy", c.strategy},
            {"validation_id", c.validation_id},
            {"n_examples", c.n_examples}};
}

ExpertScorecard scorecard_from_json(const json& j) {
    detail::reject_unknown_keys(j, {"scores", "strategy", "validation_id", "n_examples"},
                                "scorecard");
    ExpertScorecard c;
    c.scores = j.at("scores").get<std::vector<std::vector<double>>>();
    detail::get_if(j, "strategy", c.strategy);
    detail::get_if(j, "validation_id", c.validation_id);
    detail::get_if(j, "n_examples", c.n_examples);
    c.validate();
    return c;
}

std::vector<std::vector<int>> retained_from_json(const json& j) {
    detail::reject_unknown_keys(j, {"retained"}, "retained-set file");
    return j.at("retained").get<std::vector<std::vector<int>>>();
}

RoutingMode mode_from_string(const std::string& m) {
    if (m == "standard") return RoutingMode::standard;
    if (m == "pooled") return RoutingMode::pooled;
    if (m == "subset") return RoutingMode::subset;
    throw ConfigError("unknown mode \"" + m + "\"");
}

json perplexity_to_json(const PerplexityReport& rep) {
    return {{"overall", rep.overall}, {"per_domain", rep.per_domain}};
}

// ---- subcommand bodies ----

int cmd_gen_data(int domains, int docs, uint64_t seed, int vocab, const std::string& out) {
    ArtifactGuard guard(out);
    SyntheticSpec spec;
    spec.n_domains = domains;
    spec.vocab_size = vocab;
    auto corpus = generate_synthetic(spec, docs, seed);
    export_jsonl(corpus, (fs::path(out) / "corpus.jsonl").string());
    json manifest{{"spec", to_json(spec)}, {"docs", docs}, {"seed", seed},
                  {"vocab_size", corpus.vocab_size}};
    write_text(fs::path(out) / "manifest.json", manifest.dump(2) + "\n");
    guard.complete();
    std::cout << "wrote " << corpus.docs.size() << " documents over " << domains
              << " domains to " << out << "/corpus.jsonl\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& out) {
    auto rc = run_config_from_json(read_json_file(config_path, "run config"));
    ArtifactGuard guard(out);
    write_text(fs::path(out) / "resolved_config.json", resolved_run_config(rc).dump(2) + "\n");
    auto corpus = load_run_corpus(rc);
    TrainOptions opt;
    opt.initial_mode = rc.mode;
    if (rc.train.checkpoint_interval > 0) opt.checkpoint_dir = (fs::path(out) / "steps").string();
    auto res = train(rc.model, rc.train, corpus, opt);
    res.metrics.write_csv((fs::path(out) / "metrics.csv").string());
    save_checkpoint(res.checkpoint, (fs::path(out) / "checkpoint").string());
    guard.complete();
    if (!res.metrics.rows.empty()) {
        const auto& last = res.metrics.rows.back();
        std::cout << "trained " << rc.train.steps << " steps; final loss " << last.total
                  << " (ce " << last.ce << ")\n";
    }
    std::cout << "checkpoint written to " << out << "/checkpoint\n";
    return 0;
}

int cmd_eval(const std::string& ckpt_dir, const std::string& data, const std::string& mode,
             const std::string& retained_path, uint64_t seed, const std::string& out) {
    EvalOptions eo;
    eo.mode = mode_from_string(mode);
    eo.run_seed = seed;
    std::vector<std::vector<int>> retained;
    if (eo.mode == RoutingMode::subset) {
        if (retained_path.empty())
            throw ConfigError("--retained FILE is required for subset mode");
        retained = retained_from_json(read_json_file(retained_path, "retained-set file"));
        eo.retained = &retained;
    }
    auto ckpt = load_checkpoint(ckpt_dir);
    auto corpus = ingest_jsonl(data, ckpt.config.vocab_size);
    ArtifactGuard guard(out);
    auto rep = evaluate_perplexity(ckpt, corpus, eo);
    write_text(fs::path(out) / "perplexity.json", perplexity_to_json(rep).dump(2) + "\n");
    guard.complete();
    std::cout << "overall perplexity " << rep.overall << "\n";
    for (const auto& [dom, ppl] : rep.per_domain) std::cout << "  " << dom << ": " << ppl << "\n";
    return 0;
}

int cmd_select(const std::string& ckpt_dir, const std::string& data, const std::string& strategy,
               uint64_t seed, const std::string& out) {
    auto ckpt = load_checkpoint(ckpt_dir);
    ExpertScorecard card;
    if (strategy == "router-average") {
        auto corpus = ingest_jsonl(data, ckpt.config.vocab_size);
        card = score_router_average(ckpt, corpus);
    } else if (strategy == "random") {
        card = score_random(ckpt.config.moe.n_routed, ckpt.config.n_layers, seed);
    } else {
        throw ConfigError("unknown strategy \"" + strategy +
                          "\" (expected router-average or random)");
    }
    ArtifactGuard guard(out);
    write_text(fs::path(out) / "scorecard.json", scorecard_to_json(card).dump(2) + "\n");
    guard.complete();
    std::cout << "scorecard (" << card.strategy << ") written to " << out << "/scorecard.json\n";
    return 0;
}

int cmd_subset(const std::string& ckpt_dir, const std::string& scorecard_path, int d,
               const std::string& out) {
    auto ckpt = load_checkpoint(ckpt_dir);
    auto card = scorecard_from_json(read_json_file(scorecard_path, "scorecard"));
    auto retained = select_top(card, d, ckpt.config.moe.k_active);
    ArtifactGuard guard(out);
    auto sub = extract_subset(ckpt, retained.per_layer);
    save_checkpoint(sub, (fs::path(out) / "checkpoint").string());
    write_text(fs::path(out) / "retained.json", json{{"retained", retained.per_layer}}.dump(2) + "\n");
    guard.complete();
    std::cout << "subset checkpoint (" << sub.total_params() << " params, "
              << ckpt.total_params() << " full) written to " << out << "/checkpoint\n";
    return 0;
}

int cmd_finetune(const std::string& ckpt_dir, const std::string& data,
                 const std::string& retained_path, int steps, double lr, uint64_t seed,
                 const std::string& out) {
    auto full = load_checkpoint(ckpt_dir);
    auto retained = retained_from_json(read_json_file(retained_path, "retained-set file"));
    auto corpus = ingest_jsonl(data, full.config.vocab_size);
    TrainConfig tc;
    tc.steps = steps;
    tc.lr = lr;
    tc.seed = seed;
    ArtifactGuard guard(out);
    auto res = finetune_subset(full, retained, corpus, tc);
    res.metrics.write_csv((fs::path(out) / "metrics.csv").string());
    save_checkpoint(res.checkpoint, (fs::path(out) / "checkpoint").string());
    write_text(fs::path(out) / "retained.json", json{{"retained", retained}}.dump(2) + "\n");
    guard.complete();
    std::cout << "fine-tuned checkpoint written to " << out << "/checkpoint\n";
    return 0;
}

int cmd_reintegrate(const std::string& full_dir, const std::string& subset_dir,
                    const std::string& out) {
    auto full = load_checkpoint(full_dir);
    auto sub = load_checkpoint(subset_dir);
    ArtifactGuard guard(out);
    auto merged = reintegrate(full, sub);
    save_checkpoint(merged, (fs::path(out) / "checkpoint").string());
    guard.complete();
    std::cout << "reintegrated checkpoint written to " << out << "/checkpoint\n";
    return 0;
}

int cmd_analyze(const std::string& ckpt_dir, const std::string& data, int docs,
                int tokens_per_doc, int clusters, uint64_t seed, const std::string& out) {
    auto ckpt = load_checkpoint(ckpt_dir);
    auto corpus = ingest_jsonl(data, ckpt.config.vocab_size);
    if (docs <= 0) docs = static_cast<int>(corpus.docs.size());
    ArtifactGuard guard(out);
    auto trace = collect_traces(ckpt, corpus, tokens_per_doc, docs, seed);
    write_trace_jsonl(trace, (fs::path(out) / "trace.jsonl").string());

    auto sims = domain_similarity(trace);
    for (size_t l = 0; l < sims.size(); ++l)
        write_text(fs::path(out) / ("similarity_l" + std::to_string(l) + ".csv"),
                   sims[l].to_csv());

    std::map<int, ClusterModel> models;
    for (int l = 0; l < ckpt.config.n_layers; ++l) {
        models.emplace(l, cluster_tokens(trace, l, clusters, 0.95, seed));
        write_text(fs::path(out) / ("clusters_l" + std::to_string(l) + ".json"),
                   cluster_summary(trace, l, models.at(l)).dump(2) + "\n");
    }
    auto rows = consistency_metrics(trace, &models);
    write_text(fs::path(out) / "consistency.csv", consistency_csv(rows));
    guard.complete();
    std::cout << "analysis artifacts for " << docs << " documents written to " << out << "\n";
    for (const auto& r : rows) {
        std::cout << "  layer " << r.layer << ": jaccard ";
        if (r.within_doc_jaccard)
            std::cout << *r.within_doc_jaccard;
        else
            std::cout << "n/a";
        std::cout << ", modal-cluster fraction "
                  << (r.modal_cluster_fraction ? std::to_string(*r.modal_cluster_fraction)
                                               : std::string("n/a"))
                  << "\n";
    }
    return 0;
}

int cmd_repro(uint64_t seed, int steps_override, const std::string& config_path,
              const std::string& out) {
    ReproConfig rc;
    rc.seed = seed;
    if (!config_path.empty()) {
        json j = read_json_file(config_path, "repro config");
        detail::reject_unknown_keys(
            j, {"seed", "steps", "train_docs", "eval_docs_per_domain", "select_docs_per_domain",
                "subset_d", "trace_docs", "trace_tokens_per_doc", "batch_size"},
            "repro config");
        detail::get_if(j, "seed", rc.seed);
        detail::get_if(j, "steps", rc.steps);
        detail::get_if(j, "train_docs", rc.train_docs);
        detail::get_if(j, "eval_docs_per_domain", rc.eval_docs_per_domain);
        detail::get_if(j, "select_docs_per_domain", rc.select_docs_per_domain);
        detail::get_if(j, "subset_d", rc.subset_d);
        detail::get_if(j, "trace_docs", rc.trace_docs);
        detail::get_if(j, "trace_tokens_per_doc", rc.trace_tokens_per_doc);
        detail::get_if(j, "batch_size", rc.batch_size);
    }
    if (steps_override > 0) rc.steps = steps_override;
    ArtifactGuard guard(out);
    auto result = run_emo_vs_moe(rc, out);
    guard.complete();

    double gap = std::abs(result.emo.full_ppl - result.moe.full_ppl) / result.moe.full_ppl;
    auto line = [](bool ok, const std::string& what) {
        std::cout << (ok ? "PASS" : "FAIL") << "  " << what << "\n";
        return ok;
    };
    std::cout << "seed " << seed << " report (" << out << "/summary.json):\n"
              << "  full ppl: emo " << result.emo.full_ppl << ", moe " << result.moe.full_ppl
              << " (rel gap " << gap << ")\n"
              << "  mean rel ppl increase at 25% retention: emo "
              << result.emo.mean_rel_increase << ", moe " << result.moe.mean_rel_increase << "\n"
              << "  final-layer within-doc jaccard: emo " << result.emo.final_layer_jaccard
              << ", moe " << result.moe.final_layer_jaccard << "\n"
              << "  selection at 25%: router-average " << result.router_avg_mean_ppl
              << ", random " << result.random_mean_ppl << "\n";
    bool ok = true;
    ok &= line(gap <= 0.05, "full-model perplexity parity within 5%");
    ok &= line(result.emo.mean_rel_increase < result.moe.mean_rel_increase,
               "pooled model degrades less at 25% retention");
    ok &= line(result.emo.final_layer_jaccard > result.moe.final_layer_jaccard,
               "pooled model has higher within-document routing consistency");
    ok &= line(result.random_mean_ppl > result.router_avg_mean_ppl,
               "random selection is worse than router-average selection");
    return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"document-pooled mixture-of-experts training and analysis pipeline"};
    app.require_subcommand(1);
    int workers = 1;
    app.add_option("--workers", workers, "internal parallelism (does not change results)")
        ->check(CLI::PositiveNumber);

    std::string out = default_out();
    auto add_out = [&](CLI::App* cmd) {
        cmd->add_option("--out", out, "output directory (default: $MODMOE_OUT or ./out)");
    };

    // gen-data
    int gd_domains = 4, gd_docs = 2000, gd_vocab = 512;
    uint64_t gd_seed = 0;
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic multi-domain corpus");
    gen->add_option("--domains", gd_domains)->check(CLI::PositiveNumber);
    gen->add_option("--docs", gd_docs)->check(CLI::PositiveNumber);
    gen->add_option("--seed", gd_seed);
    gen->add_option("--vocab", gd_vocab)->check(CLI::PositiveNumber);
    add_out(gen);

    // train
    std::string tr_config;
    auto* tr = app.add_subcommand("train", "train a model from a run-config file");
    tr->add_option("--config", tr_config, "run config JSON")->required()
        ->check(CLI::ExistingFile);
    add_out(tr);

    // eval
    std::string ev_ckpt, ev_data, ev_mode = "standard", ev_retained;
    uint64_t ev_seed = 0;
    auto* ev = app.add_subcommand("eval", "evaluate held-out perplexity");
    ev->add_option("--checkpoint", ev_ckpt)->required()->check(CLI::ExistingDirectory);
    ev->add_option("--data", ev_data)->required()->check(CLI::ExistingFile);
    ev->add_option("--mode", ev_mode, "standard | pooled | subset");
    ev->add_option("--retained", ev_retained, "retained-set JSON (subset mode)");
    ev->add_option("--seed", ev_seed, "run seed (pooled mode pool draws)");
    add_out(ev);

    // select
    std::string se_ckpt, se_data, se_strategy = "router-average";
    uint64_t se_seed = 0;
    auto* se = app.add_subcommand("select", "score experts for subset selection");
    se->add_option("--checkpoint", se_ckpt)->required()->check(CLI::ExistingDirectory);
    se->add_option("--data", se_data, "validation corpus JSONL");
    se->add_option("--strategy", se_strategy, "router-average | random");
    se->add_option("--seed", se_seed);
    add_out(se);

    // subset
    std::string su_ckpt, su_card;
    int su_d = 0;
    auto* su = app.add_subcommand("subset", "materialize a pruned expert-subset checkpoint");
    su->add_option("--checkpoint", su_ckpt)->required()->check(CLI::ExistingDirectory);
    su->add_option("--scorecard", su_card)->required()->check(CLI::ExistingFile);
    su->add_option("--d", su_d, "experts retained per layer")->required()
        ->check(CLI::PositiveNumber);
    add_out(su);

    // finetune
    std::string ft_ckpt, ft_data, ft_retained;
    int ft_steps = 100;
    double ft_lr = 4e-4;
    uint64_t ft_seed = 0;
    auto* ft = app.add_subcommand("finetune", "fine-tune a retained expert subset");
    ft->add_option("--checkpoint", ft_ckpt)->required()->check(CLI::ExistingDirectory);
    ft->add_option("--data", ft_data)->required()->check(CLI::ExistingFile);
    ft->add_option("--retained", ft_retained, "retained-set JSON")->required()
        ->check(CLI::ExistingFile);
    ft->add_option("--steps", ft_steps)->check(CLI::PositiveNumber);
    ft->add_option("--lr", ft_lr);
    ft->add_option("--seed", ft_seed);
    add_out(ft);

    // reintegrate
    std::string ri_full, ri_subset;
    auto* ri = app.add_subcommand("reintegrate", "merge tuned subset experts into the full model");
    ri->add_option("--full", ri_full)->required()->check(CLI::ExistingDirectory);
    ri->add_option("--subset", ri_subset)->required()->check(CLI::ExistingDirectory);
    add_out(ri);

    // analyze
    std::string an_ckpt, an_data;
    int an_docs = 0, an_tokens = 50, an_clusters = 8;
    uint64_t an_seed = 0;
    auto* an = app.add_subcommand("analyze", "routing traces, clustering, similarity metrics");
    an->add_option("--checkpoint", an_ckpt)->required()->check(CLI::ExistingDirectory);
    an->add_option("--data", an_data)->required()->check(CLI::ExistingFile);
    an->add_option("--docs", an_docs, "documents to trace (default: all)");
    an->add_option("--tokens-per-doc", an_tokens)->check(CLI::PositiveNumber);
    an->add_option("--clusters", an_clusters)->check(CLI::PositiveNumber);
    an->add_option("--seed", an_seed);
    add_out(an);

    // repro
    auto* rp = app.add_subcommand("repro", "bundled reference experiments");
    rp->require_subcommand(1);
    uint64_t rp_seed = 7;
    int rp_steps = 0;
    std::string rp_config;
    auto* rp_evm = rp->add_subcommand("emo-vs-moe",
                                      "paired pooled-vs-standard reference experiment");
    rp_evm->add_option("--seed", rp_seed);
    rp_evm->add_option("--steps", rp_steps, "override training steps")
        ->check(CLI::PositiveNumber);
    rp_evm->add_option("--config", rp_config, "repro config JSON overrides")
        ->check(CLI::ExistingFile);
    add_out(rp_evm);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*gen) return cmd_gen_data(gd_domains, gd_docs, gd_seed, gd_vocab, out);
        if (*tr) return cmd_train(tr_config, out);
        if (*ev) return cmd_eval(ev_ckpt, ev_data, ev_mode, ev_retained, ev_seed, out);
        if (*se) return cmd_select(se_ckpt, se_data, se_strategy, se_seed, out);
        if (*su) return cmd_subset(su_ckpt, su_card, su_d, out);
        if (*ft) return cmd_finetune(ft_ckpt, ft_data, ft_retained, ft_steps, ft_lr, ft_seed, out);
        if (*ri) return cmd_reintegrate(ri_full, ri_subset, out);
        if (*an) return cmd_analyze(an_ckpt, an_data, an_docs, an_tokens, an_clusters, an_seed, out);
        if (*rp_evm) return cmd_repro(rp_seed, rp_steps, rp_config, out);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
