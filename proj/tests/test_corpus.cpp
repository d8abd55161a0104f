#include <doctest.h>

#include <modmoe/corpus.hpp>

#include <cstdio>
#include <filesystem>
#include <map>
#include <set>

using namespace modmoe;

namespace {
std::filesystem::path temp_file(const std::string& name) {
    return std::filesystem::temp_directory_path() / name;
}
}  // namespace

TEST_CASE("generate_synthetic: labels, determinism, degenerate mixture") {
    SyntheticSpec spec;
    spec.n_domains = 1;
    spec.min_tv = 0;
    auto one = generate_synthetic(spec, 20, 3);
    for (const auto& d : one.docs) CHECK(d.domain == "domain0");

    spec.n_domains = 4;
    spec.min_tv = 0.25;
    auto a = generate_synthetic(spec, 100, 7);
    auto b = generate_synthetic(spec, 100, 7);
    REQUIRE(a.docs.size() == b.docs.size());
    for (size_t i = 0; i < a.docs.size(); ++i) {
        CHECK(a.docs[i].tokens == b.docs[i].tokens);
        CHECK(a.docs[i].id == b.docs[i].id);
    }
    // distinct seed changes content
    auto c = generate_synthetic(spec, 100, 8);
    bool any_diff = false;
    for (size_t i = 0; i < a.docs.size(); ++i) any_diff |= (a.docs[i].tokens != c.docs[i].tokens);
    CHECK(any_diff);

    // unique doc ids
    std::set<std::string> ids;
    for (const auto& d : a.docs) ids.insert(d.id);
    CHECK(ids.size() == a.docs.size());
}

TEST_CASE("generate_synthetic: zero overlap gives disjoint domain token sets") {
    SyntheticSpec spec;
    spec.n_domains = 4;
    spec.overlap = 0.0;
    spec.func_frac = 0.0;  // isolate the domain-specific sets
    spec.shared_tokens = 0;
    auto corpus = generate_synthetic(spec, 80, 11);
    std::map<std::string, std::set<int>> seen;
    for (const auto& d : corpus.docs)
        for (int t : d.tokens) seen[d.domain].insert(t);
    std::vector<std::string> doms;
    for (auto& [k, v] : seen) doms.push_back(k);
    for (size_t i = 0; i < doms.size(); ++i)
        for (size_t j = i + 1; j < doms.size(); ++j)
            for (int t : seen[doms[i]]) CHECK(seen[doms[j]].count(t) == 0);
}

TEST_CASE("generate_synthetic: vocab too small rejected") {
    SyntheticSpec spec;
    spec.n_domains = 8;
    spec.vocab_size = 40;
    CHECK_THROWS_AS(generate_synthetic(spec, 10, 1), CorpusError);
}

TEST_CASE("naive Bayes domain separability >= 95%") {
    SyntheticSpec spec;
    auto corpus = generate_synthetic(spec, 400, 21);
    // first half (round-robin domains) trains, second half evaluates
    size_t half = corpus.docs.size() / 2;
    std::map<std::string, std::vector<double>> counts;
    std::map<std::string, double> totals;
    for (size_t i = 0; i < half; ++i) {
        auto& c = counts[corpus.docs[i].domain];
        if (c.empty()) c.assign(corpus.vocab_size, 1.0);  // Laplace smoothing
        for (int t : corpus.docs[i].tokens) c[t] += 1;
    }
    for (auto& [dom, c] : counts)
        for (double v : c) totals[dom] += v;
    int correct = 0, total = 0;
    for (size_t i = half; i < corpus.docs.size(); ++i) {
        std::string best;
        double best_ll = -1e300;
        for (auto& [dom, c] : counts) {
            double ll = 0;
            for (int t : corpus.docs[i].tokens) ll += std::log(c[t] / totals[dom]);
            if (ll > best_ll) {
                best_ll = ll;
                best = dom;
            }
        }
        correct += (best == corpus.docs[i].domain);
        ++total;
    }
    CHECK(static_cast<double>(correct) / total >= 0.95);
}

TEST_CASE("ingest_jsonl: happy path, validation, round trip") {
    auto path = temp_file("modmoe_corpus_test.jsonl");
    {
        std::ofstream f(path);
        f << R"({"id":"a","domain":"x","text":"hello world hello"})" << "\n";
        f << R"({"id":"b","domain":null,"text":"world again"})" << "\n";
        f << R"({"id":"c","domain":"y","tokens":[5,6,7]})" << "\n";
    }
    auto corpus = ingest_jsonl(path.string());
    REQUIRE(corpus.docs.size() == 3);
    CHECK(corpus.docs[0].domain == "x");
    CHECK(corpus.docs[1].domain.empty());
    CHECK(corpus.docs[2].tokens == std::vector<int>{5, 6, 7});
    // same word maps to same id
    CHECK(corpus.docs[0].tokens[0] == corpus.docs[0].tokens[2]);
    CHECK(corpus.docs[0].tokens[1] == corpus.docs[1].tokens[0]);

    // record lacking text/tokens names the line
    {
        std::ofstream f(path);
        f << R"({"id":"a","text":"ok"})" << "\n";
        f << R"({"id":"bad"})" << "\n";
    }
    CHECK_THROWS_WITH_AS(ingest_jsonl(path.string()), doctest::Contains("line 2"), CorpusError);

    // empty file
    { std::ofstream f(path); }
    CHECK_THROWS_AS(ingest_jsonl(path.string()), CorpusError);

    // export -> ingest round trip preserves token sequences
    SyntheticSpec spec;
    auto syn = generate_synthetic(spec, 30, 5);
    export_jsonl(syn, path.string());
    auto back = ingest_jsonl(path.string(), syn.vocab_size);
    REQUIRE(back.docs.size() == syn.docs.size());
    for (size_t i = 0; i < syn.docs.size(); ++i) {
        CHECK(back.docs[i].tokens == syn.docs[i].tokens);
        CHECK(back.docs[i].id == syn.docs[i].id);
        CHECK(back.docs[i].domain == syn.docs[i].domain);
    }
    std::filesystem::remove(path);
}

TEST_CASE("pack: exact fit and hand-packed offsets") {
    Corpus c;
    c.vocab_size = 32;
    c.docs.push_back({"only", "d", std::vector<int>(8, 5)});
    auto batches = pack(c, 8, 1, 0);
    REQUIRE(batches.size() == 1);
    REQUIRE(batches[0].segmap.segments.size() == 1);
    CHECK(batches[0].segmap.segments[0].begin == 0);
    CHECK(batches[0].segmap.segments[0].end == 8);

    // docs of lengths 3,3,2 into seq_len 8: one sequence, segments at 0,3,6
    Corpus c2;
    c2.vocab_size = 32;
    c2.docs.push_back({"a", "", {1, 2, 3}});
    c2.docs.push_back({"b", "", {4, 5, 6}});
    c2.docs.push_back({"c", "", {7, 8}});
    auto b2 = pack(c2, 8, 1, 42, /*shuffle=*/false);
    REQUIRE(b2.size() == 1);
    std::vector<int> offsets;
    for (const auto& s : b2[0].segmap.segments) offsets.push_back(s.begin);
    std::sort(offsets.begin(), offsets.end());
    CHECK(offsets == std::vector<int>{0, 3, 6});
}

TEST_CASE("pack is lossless and partitions tokens by document") {
    SyntheticSpec spec;
    auto corpus = generate_synthetic(spec, 60, 13);
    auto batches = pack(corpus, 128, 4, 9);

    std::map<std::string, std::vector<int>> reassembled;
    for (const auto& b : batches)
        for (const auto& seg : b.segmap.segments) {
            auto& v = reassembled[seg.doc_id];
            for (int t = seg.begin; t < seg.end; ++t) v.push_back(b.tokens[t]);
        }
    REQUIRE(reassembled.size() == corpus.docs.size());
    for (const auto& d : corpus.docs) CHECK(reassembled.at(d.id) == d.tokens);

    // segments never overlap; every unmasked target is the next token of
    // the same segment
    for (const auto& b : batches) {
        std::vector<int> owner(b.tokens.size(), -1);
        for (size_t si = 0; si < b.segmap.segments.size(); ++si) {
            const auto& s = b.segmap.segments[si];
            for (int t = s.begin; t < s.end; ++t) {
                CHECK(owner[t] == -1);
                owner[t] = static_cast<int>(si);
            }
            for (int t = s.begin; t + 1 < s.end; ++t) {
                CHECK(b.loss_mask[t] == 1);
                CHECK(b.targets[t] == b.tokens[t + 1]);
            }
            CHECK(b.loss_mask[s.end - 1] == 0);
        }
        for (size_t t = 0; t < b.tokens.size(); ++t)
            if (owner[t] == -1) {
                CHECK(b.tokens[t] == kPadToken);
                CHECK(b.loss_mask[t] == 0);
            }
    }

    // seed determinism
    auto again = pack(corpus, 128, 4, 9);
    REQUIRE(again.size() == batches.size());
    for (size_t i = 0; i < batches.size(); ++i) CHECK(again[i].tokens == batches[i].tokens);

    CHECK_THROWS_AS(pack(corpus, 1, 1, 0), CorpusError);
}
