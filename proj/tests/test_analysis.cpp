#include <doctest.h>

#include "test_util.hpp"

#include <modmoe/analysis.hpp>

#include <filesystem>

using namespace modmoe;
using testutil::toy_config;

namespace {

Corpus make_corpus(int vocab, uint64_t seed, int n_docs, int min_len = 4, int max_len = 10) {
    rng::Stream rs(seed);
    Corpus c;
    c.vocab_size = vocab;
    for (int n = 0; n < n_docs; ++n) {
        Document d;
        d.id = "doc" + std::to_string(n);
        d.domain = n % 2 == 0 ? "even" : "odd";
        int len = static_cast<int>(rs.next_int(min_len, max_len));
        for (int i = 0; i < len; ++i)
            d.tokens.push_back(static_cast<int>(rs.next_int(1, vocab - 1)));
        c.docs.push_back(std::move(d));
    }
    return c;
}

TraceRow mk_row(const std::string& doc, const std::string& dom, int layer, int tok,
                std::vector<double> probs, std::vector<int> sel) {
    TraceRow r;
    r.doc_id = doc;
    r.domain = dom;
    r.layer = layer;
    r.token_index = tok;
    r.probs = std::move(probs);
    r.selected = std::move(sel);
    return r;
}

}  // namespace

TEST_CASE("collect_traces: row counts, determinism, too-small corpus") {
    auto cfg = toy_config();
    auto ckpt = init_model(cfg, 3);
    auto corpus = make_corpus(cfg.vocab_size, 4, 6);

    int tpd = 3;
    auto trace = collect_traces(ckpt, corpus, tpd, 5, /*seed=*/9);
    // count which docs were selected from the trace itself
    std::map<std::string, int> rows_per_doc;
    for (const auto& row : trace) rows_per_doc[row.doc_id]++;
    CHECK(rows_per_doc.size() == 5);
    int64_t expect = 0;
    for (const auto& [id, n] : rows_per_doc) {
        int len = 0;
        for (const auto& d : corpus.docs)
            if (d.id == id) len = static_cast<int>(d.tokens.size());
        expect += static_cast<int64_t>(std::min(tpd, len)) * cfg.n_layers;
    }
    CHECK(static_cast<int64_t>(trace.size()) == expect);
    for (const auto& row : trace) {
        CHECK(row.token_index < tpd);
        double s = 0;
        for (double p : row.probs) s += p;
        CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
    }

    SUBCASE("tokens_per_doc=1 gives one row per (doc, layer)") {
        auto t1 = collect_traces(ckpt, corpus, 1, 4, 9);
        CHECK(t1.size() == static_cast<size_t>(4 * cfg.n_layers));
    }

    SUBCASE("same seed reruns produce an identical trace file") {
        auto dir = std::filesystem::temp_directory_path();
        auto p1 = (dir / "trace1.jsonl").string(), p2 = (dir / "trace2.jsonl").string();
        write_trace_jsonl(collect_traces(ckpt, corpus, tpd, 5, 9), p1);
        write_trace_jsonl(collect_traces(ckpt, corpus, tpd, 5, 9), p2);
        std::ifstream f1(p1), f2(p2);
        std::string s1((std::istreambuf_iterator<char>(f1)), {});
        std::string s2((std::istreambuf_iterator<char>(f2)), {});
        CHECK(s1 == s2);
        CHECK(!s1.empty());

        auto back = read_trace_jsonl(p1);
        REQUIRE(back.size() == trace.size());
        for (size_t i = 0; i < back.size(); ++i) {
            CHECK(back[i].doc_id == trace[i].doc_id);
            CHECK(back[i].probs == trace[i].probs);
            CHECK(back[i].selected == trace[i].selected);
        }
        std::filesystem::remove(p1);
        std::filesystem::remove(p2);
    }

    SUBCASE("corpus too small names the required count") {
        CHECK_THROWS_WITH_AS(collect_traces(ckpt, corpus, tpd, 7), doctest::Contains("need 7"),
                             AnalysisError);
    }
}

TEST_CASE("PCA eigendecomposition satisfies A v = lambda v and variance accounting") {
    rng::Stream rs(17);
    const int dim = 6;
    std::vector<std::vector<double>> a(dim, std::vector<double>(dim, 0.0));
    for (int i = 0; i < dim; ++i)
        for (int j = i; j < dim; ++j) a[i][j] = a[j][i] = rs.next_normal();
    // make it positive semidefinite-ish by squaring: a = a*a^T
    std::vector<std::vector<double>> s(dim, std::vector<double>(dim, 0.0));
    for (int i = 0; i < dim; ++i)
        for (int j = 0; j < dim; ++j)
            for (int k = 0; k < dim; ++k) s[i][j] += a[i][k] * a[j][k];
    std::vector<double> evals;
    std::vector<std::vector<double>> evecs;
    modmoe::detail::symmetric_eig(s, evals, evecs);
    double trace_sum = 0, eval_sum = 0;
    for (int i = 0; i < dim; ++i) trace_sum += s[i][i];
    for (int r = 0; r < dim; ++r) {
        eval_sum += evals[r];
        if (r > 0) CHECK(evals[r] <= evals[r - 1] + 1e-12);  // descending
        CHECK(std::abs(modmoe::detail::l2norm(evecs[r]) - 1.0) <= 1e-9);
        for (int i = 0; i < dim; ++i) {
            double av = 0;
            for (int j = 0; j < dim; ++j) av += s[i][j] * evecs[r][j];
            CHECK(av == doctest::Approx(evals[r] * evecs[r][i]).epsilon(1e-8).scale(1.0));
        }
    }
    CHECK(eval_sum == doctest::Approx(trace_sum).epsilon(1e-10));  // trace preserved
}

TEST_CASE("clustering: separation, scale invariance, monotone objective") {
    rng::Stream rs(23);
    std::vector<std::vector<double>> points;
    for (int i = 0; i < 40; ++i) {
        double sign = i < 20 ? 1.0 : -1.0;
        points.push_back({sign * (2.0 + rs.next_double()), 0.05 * rs.next_normal(),
                          0.05 * rs.next_normal(), 0.05 * rs.next_normal()});
    }
    auto model = cluster_tokens(points, 2, 0.95, /*seed=*/1);
    CHECK(model.retained_variance >= 0.95);
    for (const auto& c : model.centroids)
        CHECK(std::abs(modmoe::detail::l2norm(c) - 1.0) <= 1e-9);
    // perfect separation of the two antipodal groups
    for (int i = 1; i < 20; ++i) CHECK(model.assignments[i] == model.assignments[0]);
    for (int i = 21; i < 40; ++i) CHECK(model.assignments[i] == model.assignments[20]);
    CHECK(model.assignments[0] != model.assignments[20]);
    for (size_t i = 1; i < model.objective_history.size(); ++i)
        CHECK(model.objective_history[i] >= model.objective_history[i - 1] - 1e-9);

    SUBCASE("uniform positive scaling leaves assignments unchanged") {
        auto scaled = points;
        for (auto& p : scaled)
            for (double& v : p) v *= 3.0;
        auto m2 = cluster_tokens(scaled, 2, 0.95, 1);
        CHECK(m2.assignments == model.assignments);
    }

    SUBCASE("fewer rows than clusters rejected") {
        points.resize(3);
        CHECK_THROWS_AS(cluster_tokens(points, 4), AnalysisError);
    }
}

TEST_CASE("clustering a real trace layer and summarizing it") {
    auto cfg = toy_config();
    auto ckpt = init_model(cfg, 29);
    auto corpus = make_corpus(cfg.vocab_size, 31, 10, 6, 12);
    auto trace = collect_traces(ckpt, corpus, 8, 10);
    auto model = cluster_tokens(trace, /*layer=*/1, /*n_clusters=*/4);
    int n_rows = 0;
    for (const auto& row : trace)
        if (row.layer == 1) ++n_rows;
    CHECK(static_cast<int>(model.assignments.size()) == n_rows);
    CHECK(model.retained_variance >= 0.95);

    auto summary = cluster_summary(trace, 1, model);
    CHECK(summary["layer"] == 1);
    int64_t total = 0;
    for (const auto& c : summary["clusters"]) total += c["size"].get<int64_t>();
    CHECK(total == n_rows);
}

TEST_CASE("domain similarity: hand cases and cosine oracle") {
    SUBCASE("single domain gives [[1.0]]") {
        RoutingTrace t{mk_row("d1", "solo", 0, 0, {0.5, 0.5}, {0}),
                       mk_row("d1", "solo", 0, 1, {0.2, 0.8}, {1})};
        auto sims = domain_similarity(t);
        REQUIRE(sims.size() == 1);
        CHECK(sims[0].domains == std::vector<std::string>{"solo"});
        CHECK(sims[0].matrix == std::vector<std::vector<double>>{{1.0}});
    }

    SUBCASE("identical activation vectors give off-diagonal 1.0") {
        RoutingTrace t{mk_row("d1", "a", 0, 0, {0.3, 0.7}, {1}),
                       mk_row("d2", "b", 0, 0, {0.3, 0.7}, {1})};
        auto sims = domain_similarity(t);
        CHECK(sims[0].matrix[0][1] == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(sims[0].matrix[1][0] == doctest::Approx(1.0).epsilon(1e-12));
    }

    SUBCASE("matches a direct double-loop oracle on a real trace") {
        auto cfg = toy_config();
        auto ckpt = init_model(cfg, 37);
        auto corpus = make_corpus(cfg.vocab_size, 38, 8);
        auto trace = collect_traces(ckpt, corpus, 6, 8);
        auto sims = domain_similarity(trace);
        REQUIRE(static_cast<int>(sims.size()) == cfg.n_layers);
        for (int l = 0; l < cfg.n_layers; ++l) {
            const auto& sim = sims[l];
            // oracle: recompute doc means then domain means by hand
            std::map<std::string, std::vector<std::vector<double>>> per_doc;  // domain->docs
            std::map<std::string, std::map<std::string, std::pair<std::vector<double>, int>>>
                acc;
            for (const auto& row : trace) {
                if (row.layer != l) continue;
                auto& [sum, n] = acc[row.domain][row.doc_id];
                if (sum.empty()) sum.assign(row.probs.size(), 0.0);
                for (size_t i = 0; i < row.probs.size(); ++i) sum[i] += row.probs[i];
                ++n;
            }
            std::map<std::string, std::vector<double>> dom_mean;
            for (auto& [dom, docs] : acc) {
                std::vector<double> m(cfg.moe.n_routed, 0.0);
                for (auto& [id, p] : docs)
                    for (int i = 0; i < cfg.moe.n_routed; ++i)
                        m[i] += p.first[i] / p.second / docs.size();
                dom_mean[dom] = m;
            }
            for (size_t i = 0; i < sim.domains.size(); ++i)
                for (size_t j = 0; j < sim.domains.size(); ++j) {
                    double expect =
                        i == j ? 1.0
                               : modmoe::detail::cosine(dom_mean.at(sim.domains[i]),
                                                        dom_mean.at(sim.domains[j]));
                    CHECK(std::abs(sim.matrix[i][j] - expect) <= 1e-12);
                    CHECK(sim.matrix[i][j] == sim.matrix[j][i]);
                    CHECK(sim.matrix[i][j] >= -1.0 - 1e-12);
                    CHECK(sim.matrix[i][j] <= 1.0 + 1e-12);
                }
        }
        auto csv = sims[0].to_csv();
        CHECK(csv.rfind("domain,", 0) == 0);
    }
}

TEST_CASE("consistency metrics: Jaccard hand cases and Monte-Carlo oracle") {
    SUBCASE("identical selections give Jaccard 1.0; single-token docs skipped") {
        RoutingTrace t;
        for (int tok = 0; tok < 4; ++tok)
            t.push_back(mk_row("d1", "a", 0, tok, {0.5, 0.3, 0.2}, {0, 2}));
        t.push_back(mk_row("d2", "a", 0, 0, {0.5, 0.3, 0.2}, {1, 2}));  // single token
        auto rows = consistency_metrics(t);
        REQUIRE(rows.size() == 1);
        REQUIRE(rows[0].within_doc_jaccard.has_value());
        CHECK(*rows[0].within_doc_jaccard == doctest::Approx(1.0));
        CHECK_FALSE(rows[0].modal_cluster_fraction.has_value());

        RoutingTrace only_single{mk_row("d2", "a", 0, 0, {1.0}, {0})};
        auto r2 = consistency_metrics(only_single);
        CHECK_FALSE(r2[0].within_doc_jaccard.has_value());
    }

    SUBCASE("random k-of-n selections match the hypergeometric expectation") {
        const int n = 8, k = 3;
        // exact E[J] and Var[J] where J = I/(2k-I), I ~ Hypergeom(n, k, k)
        auto comb = [](int a, int b) {
            double r = 1;
            for (int i = 0; i < b; ++i) r = r * (a - i) / (i + 1);
            return r;
        };
        double ej = 0, ej2 = 0;
        for (int i = 0; i <= k; ++i) {
            double p = comb(k, i) * comb(n - k, k - i) / comb(n, k);
            double jc = static_cast<double>(i) / (2 * k - i);
            ej += p * jc;
            ej2 += p * jc * jc;
        }
        double sd = std::sqrt(ej2 - ej * ej);

        // 10^4 independent uniform pairs: one two-token document per pair
        rng::Stream rs(41);
        RoutingTrace t;
        const int n_pairs = 10000;
        for (int pairi = 0; pairi < n_pairs; ++pairi) {
            for (int tok = 0; tok < 2; ++tok) {
                std::vector<int> idx(n);
                std::iota(idx.begin(), idx.end(), 0);
                for (int i = n - 1; i > 0; --i) std::swap(idx[i], idx[rs.next_int(0, i)]);
                std::vector<int> sel(idx.begin(), idx.begin() + k);
                std::sort(sel.begin(), sel.end());
                t.push_back(mk_row("p" + std::to_string(pairi), "a", 0, tok,
                                   std::vector<double>(n, 1.0 / n), std::move(sel)));
            }
        }
        auto rows = consistency_metrics(t);
        REQUIRE(rows[0].within_doc_jaccard.has_value());
        CHECK(std::abs(*rows[0].within_doc_jaccard - ej) <= 3.0 * sd / std::sqrt(n_pairs));
    }

    SUBCASE("cluster-based metrics on a real trace") {
        auto cfg = toy_config();
        auto ckpt = init_model(cfg, 43);
        auto corpus = make_corpus(cfg.vocab_size, 44, 10, 6, 12);
        auto trace = collect_traces(ckpt, corpus, 6, 10);
        std::map<int, ClusterModel> models;
        for (int l = 0; l < cfg.n_layers; ++l) models[l] = cluster_tokens(trace, l, 3);
        auto rows = consistency_metrics(trace, &models);
        REQUIRE(static_cast<int>(rows.size()) == cfg.n_layers);
        for (const auto& r : rows) {
            REQUIRE(r.modal_cluster_fraction.has_value());
            CHECK(*r.modal_cluster_fraction > 0.0);
            CHECK(*r.modal_cluster_fraction <= 1.0);
            REQUIRE(r.first_token_cluster_rate.has_value());
            CHECK(*r.first_token_cluster_rate > 0.0);
            CHECK(*r.first_token_cluster_rate <= 1.0);
        }
        auto csv = consistency_csv(rows);
        CHECK(csv.rfind("layer,within_doc_jaccard", 0) == 0);
        CHECK(std::count(csv.begin(), csv.end(), '\n') ==
              static_cast<long>(rows.size()) + 1);
    }
}
