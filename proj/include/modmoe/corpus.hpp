#pragma once

// Synthetic multi-domain corpus generation, JSONL ingestion and
// document-preserving sequence packing.

#include <modmoe/doc_pool.hpp>
#include <modmoe/rng.hpp>

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace modmoe {

struct CorpusError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Document {
    std::string id;
    std::string domain;  // empty when unknown
    std::vector<int> tokens;
};

struct Corpus {
    int vocab_size = 0;
    std::vector<Document> docs;
};

// Token id 0 is padding; ids [byte_base, byte_base+256) are byte-fallback
// tokens for ingested text; synthetic domains use the space above.
inline constexpr int kPadToken = 0;
inline constexpr int kByteBase = 2;

struct SyntheticSpec {
    int n_domains = 4;
    int vocab_size = 512;
    int shared_tokens = 64;   // function-token pool common to all domains
    double overlap = 0.0;     // fraction of adjacent domain sub-vocabularies shared
    double func_frac = 0.2;   // probability of emitting a shared function token
    int min_len = 64;
    int max_len = 384;
    double min_tv = 0.25;     // required min pairwise total-variation distance

    void validate() const {
        if (n_domains < 1) throw CorpusError("need at least 1 domain");
        if (overlap < 0 || overlap >= 1) throw CorpusError("overlap must be in [0,1)");
        if (func_frac < 0 || func_frac >= 1) throw CorpusError("func_frac must be in [0,1)");
        if (min_len < 2 || max_len < min_len) throw CorpusError("bad document length range");
    }
};

namespace detail {
// Start offset and width of each domain's sub-vocabulary.
inline void domain_windows(const SyntheticSpec& spec, std::vector<int>& starts, int& width) {
    int base = 2 + spec.shared_tokens;
    int room = spec.vocab_size - base;
    double denom = 1.0 + (spec.n_domains - 1) * (1.0 - spec.overlap);
    width = static_cast<int>(std::floor(room / denom));
    if (width < 8)
        throw CorpusError("vocab_size " + std::to_string(spec.vocab_size) +
                          " too small for " + std::to_string(spec.n_domains) + " domains");
    int stride = static_cast<int>(std::round(width * (1.0 - spec.overlap)));
    starts.resize(spec.n_domains);
    for (int i = 0; i < spec.n_domains; ++i) starts[i] = base + i * stride;
}
}  // namespace detail

// Each domain is a first-order Markov source: the candidate successors of a
// token are a small hashed set inside the domain's sub-vocabulary, mixed
// with the shared function-token pool.
inline Corpus generate_synthetic(const SyntheticSpec& spec, int n_docs, uint64_t seed) {
    spec.validate();
    std::vector<int> starts;
    int width = 0;
    detail::domain_windows(spec, starts, width);

    Corpus corpus;
    corpus.vocab_size = spec.vocab_size;
    const double cand_w[4] = {0.5, 0.25, 0.15, 0.10};

    std::vector<std::vector<double>> unigram(spec.n_domains,
                                             std::vector<double>(spec.vocab_size, 0.0));
    for (int n = 0; n < n_docs; ++n) {
        int dom = n % spec.n_domains;
        Document doc;
        doc.id = "syn-" + std::to_string(seed) + "-" + std::to_string(n);
        doc.domain = "domain" + std::to_string(dom);
        rng::Stream rs(seed, rng::mix(0xd0c5ULL, n));
        int len = static_cast<int>(rs.next_int(spec.min_len, spec.max_len));
        int b = 0;
        for (int t = 0; t < len; ++t) {
            int tok;
            if (spec.shared_tokens > 0 && rs.next_double() < spec.func_frac) {
                uint64_t h = rng::mix(static_cast<uint64_t>(b), 0xf00dULL);
                tok = 2 + static_cast<int>(h % spec.shared_tokens);
            } else {
                // pick among 4 hashed candidate successors of token b
                double u = rs.next_double();
                int j = 0;
                double acc = cand_w[0];
                while (j < 3 && u > acc) acc += cand_w[++j];
                uint64_t h = rng::mix(rng::mix(dom, b), j);
                tok = starts[dom] + static_cast<int>(h % width);
            }
            doc.tokens.push_back(tok);
            unigram[dom][tok] += 1.0;
            b = tok;
        }
        corpus.docs.push_back(std::move(doc));
    }

    // enforce domain separability at the unigram level
    if (spec.n_domains > 1) {
        for (auto& u : unigram) {
            double s = 0;
            for (double v : u) s += v;
            if (s > 0)
                for (double& v : u) v /= s;
        }
        for (int i = 0; i < spec.n_domains; ++i)
            for (int j = i + 1; j < spec.n_domains; ++j) {
                double tv = 0;
                for (int v = 0; v < spec.vocab_size; ++v)
                    tv += std::abs(unigram[i][v] - unigram[j][v]);
                tv *= 0.5;
                if (tv < spec.min_tv)
                    throw CorpusError("generated domains not separable enough: TV(" +
                                      std::to_string(i) + "," + std::to_string(j) + ") = " +
                                      std::to_string(tv));
            }
    }
    return corpus;
}

// One document per line: {"id", "domain", "text"} or {"id", "domain",
// "tokens"}. Text is tokenized by whitespace into a frequency-capped word
// vocabulary with byte fallback.
inline Corpus ingest_jsonl(const std::string& path, int vocab_cap = 1024) {
    std::ifstream in(path);
    if (!in) throw CorpusError("cannot open corpus file: " + path);
    std::vector<nlohmann::json> records;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object())
            throw CorpusError("malformed JSON at line " + std::to_string(line_no));
        if (!j.contains("text") && !j.contains("tokens"))
            throw CorpusError("record at line " + std::to_string(line_no) +
                              " has neither \"text\" nor \"tokens\"");
        records.push_back(std::move(j));
    }
    if (records.empty()) throw CorpusError("empty corpus file: " + path);

    // first pass: word frequencies over all text records
    std::map<std::string, int64_t> freq;
    for (const auto& j : records)
        if (j.contains("text")) {
            std::istringstream ss(j["text"].get<std::string>());
            std::string w;
            while (ss >> w) freq[w]++;
        }
    std::vector<std::pair<std::string, int64_t>> by_count(freq.begin(), freq.end());
    std::sort(by_count.begin(), by_count.end(), [](const auto& a, const auto& b) {
        return a.second > b.second || (a.second == b.second && a.first < b.first);
    });
    std::map<std::string, int> word_id;
    int next_id = kByteBase + 256;
    for (const auto& [w, c] : by_count) {
        if (next_id >= vocab_cap) break;
        word_id[w] = next_id++;
    }

    Corpus corpus;
    corpus.vocab_size = vocab_cap;
    int idx = 0;
    for (const auto& j : records) {
        Document doc;
        doc.id = j.contains("id") ? j["id"].get<std::string>() : ("doc-" + std::to_string(idx));
        if (j.contains("domain") && j["domain"].is_string())
            doc.domain = j["domain"].get<std::string>();
        if (j.contains("tokens")) {
            for (int t : j["tokens"].get<std::vector<int>>()) {
                if (t < 0 || t >= vocab_cap)
                    throw CorpusError("token id out of range at line " +
                                      std::to_string(idx + 1));
                doc.tokens.push_back(t);
            }
        } else {
            std::istringstream ss(j["text"].get<std::string>());
            std::string w;
            while (ss >> w) {
                auto it = word_id.find(w);
                if (it != word_id.end()) {
                    doc.tokens.push_back(it->second);
                } else {
                    for (unsigned char c : w) doc.tokens.push_back(kByteBase + c);
                }
            }
        }
        if (doc.tokens.empty())
            throw CorpusError("document at line " + std::to_string(idx + 1) + " is empty");
        corpus.docs.push_back(std::move(doc));
        ++idx;
    }
    return corpus;
}

inline void export_jsonl(const Corpus& corpus, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw CorpusError("cannot write corpus file: " + path);
    for (const auto& doc : corpus.docs) {
        nlohmann::json j;
        j["id"] = doc.id;
        if (doc.domain.empty())
            j["domain"] = nullptr;
        else
            j["domain"] = doc.domain;
        j["tokens"] = doc.tokens;
        out << j.dump() << "\n";
    }
}

// Token batch: B sequences of seq_len with per-token document segments.
// Targets are next tokens within the same segment; padding and segment
// tails are loss-masked.
struct PackedBatch {
    int batch_size = 0;
    int seq_len = 0;
    std::vector<int> tokens;         // [B * seq_len]
    std::vector<int> targets;        // [B * seq_len]
    std::vector<uint8_t> loss_mask;  // [B * seq_len]
    DocumentSegmentMap segmap;       // spans over the flattened token index
};

// Documents are shuffled by seed, concatenated greedily, and split at
// sequence boundaries; each contiguous piece becomes its own segment.
inline std::vector<PackedBatch> pack(const Corpus& corpus, int seq_len, int batch_size,
                                     uint64_t seed, bool shuffle = true) {
    if (seq_len < 2) throw CorpusError("seq_len must be >= 2");
    std::vector<int> order(corpus.docs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    if (shuffle) {
        rng::Stream rs(seed, 0x7061636bULL);
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[rs.next_int(0, static_cast<int64_t>(i) - 1)]);
    }

    std::vector<PackedBatch> batches;
    auto new_batch = [&]() {
        PackedBatch b;
        b.batch_size = batch_size;
        b.seq_len = seq_len;
        b.tokens.assign(static_cast<size_t>(batch_size) * seq_len, kPadToken);
        b.targets.assign(static_cast<size_t>(batch_size) * seq_len, kPadToken);
        b.loss_mask.assign(static_cast<size_t>(batch_size) * seq_len, 0);
        return b;
    };
    PackedBatch cur = new_batch();
    int seq = 0;  // sequence index within the current batch
    int pos = 0;  // fill position within the current sequence

    auto flush_seq = [&]() {
        pos = 0;
        if (++seq == batch_size) {
            batches.push_back(std::move(cur));
            cur = new_batch();
            seq = 0;
        }
    };

    for (int di : order) {
        const Document& doc = corpus.docs[di];
        size_t off = 0;
        while (off < doc.tokens.size()) {
            if (pos == seq_len) flush_seq();
            int room = seq_len - pos;
            int take = static_cast<int>(std::min<size_t>(room, doc.tokens.size() - off));
            int base = seq * seq_len + pos;
            for (int t = 0; t < take; ++t) cur.tokens[base + t] = doc.tokens[off + t];
            for (int t = 0; t + 1 < take; ++t) {
                cur.targets[base + t] = doc.tokens[off + t + 1];
                cur.loss_mask[base + t] = 1;
            }
            cur.segmap.segments.push_back({base, base + take, doc.id, doc.domain});
            pos += take;
            off += take;
        }
    }
    if (!cur.segmap.segments.empty()) batches.push_back(std::move(cur));
    return batches;
}

}  // namespace modmoe
