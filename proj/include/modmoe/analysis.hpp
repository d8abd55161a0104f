#pragma once

// Routing-pattern analytics: trace collection, token clustering
// (PCA -> L2 normalize -> spherical k-means), per-layer domain-similarity
// matrices, and within-document consistency metrics.

#include <modmoe/model.hpp>
#include <modmoe/trainer.hpp>

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace modmoe {

struct AnalysisError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Trace collection

// Standard-routing forward passes over the first `tokens_per_doc` tokens of
// `n_docs` seed-selected documents. Each document is traced in isolation so
// the result does not depend on packing.
inline RoutingTrace collect_traces(Checkpoint& ckpt, const Corpus& corpus, int tokens_per_doc,
                                   int n_docs, uint64_t seed = 0) {
    if (tokens_per_doc < 1) throw AnalysisError("tokens_per_doc must be >= 1");
    if (static_cast<int>(corpus.docs.size()) < n_docs)
        throw AnalysisError("corpus has " + std::to_string(corpus.docs.size()) +
                            " documents, need " + std::to_string(n_docs));
    std::vector<int> order(corpus.docs.size());
    std::iota(order.begin(), order.end(), 0);
    rng::Stream rs(seed, rng::fnv1a("collect_traces"));
    for (int i = static_cast<int>(order.size()) - 1; i > 0; --i)
        std::swap(order[i], order[rs.next_int(0, i)]);
    order.resize(n_docs);
    std::sort(order.begin(), order.end());

    RoutingTrace trace;
    for (int di : order) {
        Document doc = corpus.docs[di];
        if (static_cast<int>(doc.tokens.size()) > tokens_per_doc)
            doc.tokens.resize(tokens_per_doc);
        Corpus one;
        one.vocab_size = corpus.vocab_size;
        one.docs.push_back(std::move(doc));
        for (const auto& batch : pack(one, ckpt.config.seq_len, 1, 0, /*shuffle=*/false)) {
            RoutingTrace part;
            ForwardOptions opt;
            opt.trace = &part;
            forward_logits(nullptr, ckpt, batch, opt);
            trace.insert(trace.end(), part.begin(), part.end());
        }
    }
    return trace;
}

inline void write_trace_jsonl(const RoutingTrace& trace, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw AnalysisError("cannot open trace file: " + path);
    for (const auto& row : trace) {
        nlohmann::json j{{"doc_id", row.doc_id},     {"domain", row.domain},
                         {"layer", row.layer},       {"token_index", row.token_index},
                         {"probs", row.probs},       {"selected", row.selected},
                         {"pool", row.pool}};
        f << j.dump() << '\n';
    }
}

inline RoutingTrace read_trace_jsonl(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw AnalysisError("cannot open trace file: " + path);
    RoutingTrace trace;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw AnalysisError("trace line " + std::to_string(lineno) + ": " + e.what());
        }
        TraceRow row;
        row.doc_id = j.at("doc_id").get<std::string>();
        row.domain = j.at("domain").get<std::string>();
        row.layer = j.at("layer").get<int>();
        row.token_index = j.at("token_index").get<int>();
        row.probs = j.at("probs").get<std::vector<double>>();
        row.selected = j.at("selected").get<std::vector<int>>();
        row.pool = j.at("pool").get<std::vector<int>>();
        trace.push_back(std::move(row));
    }
    return trace;
}

// ---------------------------------------------------------------------------
// PCA (covariance eigendecomposition; dimensions are at most n_r)

namespace detail {

// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
// eigenvalues (descending) and matching eigenvectors as rows of V.
inline void symmetric_eig(std::vector<std::vector<double>> a, std::vector<double>& evals,
                          std::vector<std::vector<double>>& evecs) {
    const int n = static_cast<int>(a.size());
    std::vector<std::vector<double>> v(n, std::vector<double>(n, 0.0));
    for (int i = 0; i < n; ++i) v[i][i] = 1.0;
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) off += a[p][q] * a[p][q];
        if (off < 1e-24) break;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) {
                if (std::abs(a[p][q]) < 1e-30) continue;
                double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                double t = (theta >= 0 ? 1.0 : -1.0) /
                           (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
                for (int i = 0; i < n; ++i) {
                    double aip = a[i][p], aiq = a[i][q];
                    a[i][p] = c * aip - s * aiq;
                    a[i][q] = s * aip + c * aiq;
                }
                for (int i = 0; i < n; ++i) {
                    double api = a[p][i], aqi = a[q][i];
                    a[p][i] = c * api - s * aqi;
                    a[q][i] = s * api + c * aqi;
                }
                for (int i = 0; i < n; ++i) {
                    double vip = v[i][p], viq = v[i][q];
                    v[i][p] = c * vip - s * viq;
                    v[i][q] = s * vip + c * viq;
                }
            }
    }
    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](int x, int y) {
        if (a[x][x] != a[y][y]) return a[x][x] > a[y][y];
        return x < y;
    });
    evals.clear();
    evecs.assign(n, std::vector<double>(n, 0.0));
    for (int r = 0; r < n; ++r) {
        evals.push_back(a[idx[r]][idx[r]]);
        for (int i = 0; i < n; ++i) evecs[r][i] = v[i][idx[r]];
    }
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double l2norm(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double na = l2norm(a), nb = l2norm(b);
    if (na == 0 || nb == 0) return 0.0;
    return dot(a, b) / (na * nb);
}

}  // namespace detail

struct ClusterModel {
    std::vector<double> mean;                     // input-space mean
    std::vector<std::vector<double>> components;  // m rows, each length n_r
    double retained_variance = 0;                 // fraction of total variance
    std::vector<std::vector<double>> centroids;   // unit norm, PCA space
    std::vector<int> assignments;                 // per input row
    std::vector<double> objective_history;        // sum of cosines, per iteration
};

// PCA retaining >= variance_threshold -> L2 normalize -> spherical k-means
// (k-means++ init, tie-break lowest index, empty clusters reseeded from the
// point farthest from its centroid, fixpoint or 200 iterations).
inline ClusterModel cluster_tokens(const std::vector<std::vector<double>>& points,
                                   int n_clusters, double variance_threshold = 0.95,
                                   uint64_t seed = 0) {
    const int n = static_cast<int>(points.size());
    if (n < n_clusters)
        throw AnalysisError("need at least " + std::to_string(n_clusters) + " rows, got " +
                            std::to_string(n));
    const int dim = static_cast<int>(points[0].size());

    ClusterModel model;
    model.mean.assign(dim, 0.0);
    for (const auto& p : points)
        for (int i = 0; i < dim; ++i) model.mean[i] += p[i];
    for (double& m : model.mean) m /= n;

    std::vector<std::vector<double>> cov(dim, std::vector<double>(dim, 0.0));
    for (const auto& p : points)
        for (int i = 0; i < dim; ++i)
            for (int j = 0; j < dim; ++j)
                cov[i][j] += (p[i] - model.mean[i]) * (p[j] - model.mean[j]);
    for (auto& row : cov)
        for (double& v : row) v /= n;

    std::vector<double> evals;
    std::vector<std::vector<double>> evecs;
    detail::symmetric_eig(cov, evals, evecs);
    double total = 0;
    for (double e : evals) total += std::max(e, 0.0);
    double acc = 0;
    for (int m = 0; m < dim; ++m) {
        model.components.push_back(evecs[m]);
        acc += std::max(evals[m], 0.0);
        if (total == 0 || acc / total >= variance_threshold) break;
    }
    model.retained_variance = total == 0 ? 1.0 : acc / total;
    const int m = static_cast<int>(model.components.size());

    // project and L2-normalize
    std::vector<std::vector<double>> z(n, std::vector<double>(m, 0.0));
    for (int r = 0; r < n; ++r) {
        for (int c = 0; c < m; ++c) {
            double s = 0;
            for (int i = 0; i < dim; ++i)
                s += (points[r][i] - model.mean[i]) * model.components[c][i];
            z[r][c] = s;
        }
        double nrm = detail::l2norm(z[r]);
        if (nrm > 1e-300)
            for (double& v : z[r]) v /= nrm;
    }

    // k-means++-style init on cosine distance
    rng::Stream rs(seed, rng::fnv1a("spherical_kmeans"));
    std::vector<int> centers;
    centers.push_back(static_cast<int>(rs.next_int(0, n - 1)));
    while (static_cast<int>(centers.size()) < n_clusters) {
        std::vector<double> d2(n, 0.0);
        double sum = 0;
        for (int r = 0; r < n; ++r) {
            double best = -1;
            for (int c : centers) best = std::max(best, detail::cosine(z[r], z[c]));
            d2[r] = std::max(0.0, 1.0 - best);
            d2[r] *= d2[r];
            sum += d2[r];
        }
        int pick;
        if (sum <= 0) {
            pick = static_cast<int>(rs.next_int(0, n - 1));
        } else {
            double u = rs.next_double() * sum, run = 0;
            pick = n - 1;
            for (int r = 0; r < n; ++r) {
                run += d2[r];
                if (run >= u) {
                    pick = r;
                    break;
                }
            }
        }
        centers.push_back(pick);
    }
    model.centroids.assign(n_clusters, std::vector<double>(m, 0.0));
    for (int c = 0; c < n_clusters; ++c) model.centroids[c] = z[centers[c]];

    model.assignments.assign(n, -1);
    for (int iter = 0; iter < 200; ++iter) {
        bool changed = false;
        double objective = 0;
        for (int r = 0; r < n; ++r) {
            int best = 0;
            double bc = detail::cosine(z[r], model.centroids[0]);
            for (int c = 1; c < n_clusters; ++c) {
                double cs = detail::cosine(z[r], model.centroids[c]);
                if (cs > bc) {
                    bc = cs;
                    best = c;
                }
            }
            objective += bc;
            if (model.assignments[r] != best) {
                model.assignments[r] = best;
                changed = true;
            }
        }
        if (!model.objective_history.empty() &&
            objective + 1e-9 < model.objective_history.back())
            throw AnalysisError("spherical k-means objective decreased");
        model.objective_history.push_back(objective);
        if (!changed) break;

        std::vector<std::vector<double>> sums(n_clusters, std::vector<double>(m, 0.0));
        std::vector<int> counts(n_clusters, 0);
        for (int r = 0; r < n; ++r) {
            counts[model.assignments[r]]++;
            for (int c = 0; c < m; ++c) sums[model.assignments[r]][c] += z[r][c];
        }
        for (int c = 0; c < n_clusters; ++c) {
            if (counts[c] == 0) {
                // reseed from the point farthest (lowest cosine) from its centroid
                int worst = 0;
                double wc = 2.0;
                for (int r = 0; r < n; ++r) {
                    double cs = detail::cosine(z[r], model.centroids[model.assignments[r]]);
                    if (cs < wc) {
                        wc = cs;
                        worst = r;
                    }
                }
                model.centroids[c] = z[worst];
                continue;
            }
            double nrm = detail::l2norm(sums[c]);
            if (nrm > 1e-300)
                for (double& v : sums[c]) v /= nrm;
            model.centroids[c] = sums[c];
        }
    }
    return model;
}

// Convenience: cluster the routing vectors of one layer of a trace.
inline ClusterModel cluster_tokens(const RoutingTrace& trace, int layer, int n_clusters,
                                   double variance_threshold = 0.95, uint64_t seed = 0) {
    std::vector<std::vector<double>> points;
    for (const auto& row : trace)
        if (row.layer == layer) points.push_back(row.probs);
    if (points.empty()) throw AnalysisError("trace has no rows for layer " + std::to_string(layer));
    return cluster_tokens(points, n_clusters, variance_threshold, seed);
}

// JSON summary of a fitted cluster model: sizes and top-weighted experts
// per cluster (from the mean routing vector of assigned rows).
inline nlohmann::json cluster_summary(const RoutingTrace& trace, int layer,
                                      const ClusterModel& model, int top_experts = 4) {
    std::vector<const TraceRow*> rows;
    for (const auto& row : trace)
        if (row.layer == layer) rows.push_back(&row);
    const int n_r = rows.empty() ? 0 : static_cast<int>(rows[0]->probs.size());
    const int k = static_cast<int>(model.centroids.size());
    std::vector<std::vector<double>> mean(k, std::vector<double>(n_r, 0.0));
    std::vector<int> counts(k, 0);
    for (size_t r = 0; r < rows.size(); ++r) {
        int c = model.assignments[r];
        counts[c]++;
        for (int i = 0; i < n_r; ++i) mean[c][i] += rows[r]->probs[i];
    }
    nlohmann::json clusters = nlohmann::json::array();
    for (int c = 0; c < k; ++c) {
        nlohmann::json jc{{"cluster", c}, {"size", counts[c]}};
        std::vector<int> idx(n_r);
        std::iota(idx.begin(), idx.end(), 0);
        std::sort(idx.begin(), idx.end(), [&](int a, int b) {
            if (mean[c][a] != mean[c][b]) return mean[c][a] > mean[c][b];
            return a < b;
        });
        nlohmann::json top = nlohmann::json::array();
        for (int i = 0; i < std::min(top_experts, n_r) && counts[c] > 0; ++i)
            top.push_back({{"expert", idx[i]}, {"mean_prob", mean[c][idx[i]] / counts[c]}});
        jc["top_experts"] = top;
        clusters.push_back(jc);
    }
    return nlohmann::json{{"layer", layer},
                          {"retained_variance", model.retained_variance},
                          {"n_components", model.components.size()},
                          {"iterations", model.objective_history.size()},
                          {"clusters", clusters}};
}

// ---------------------------------------------------------------------------
// Domain similarity

struct DomainSimilarity {
    std::vector<std::string> domains;            // sorted labels
    std::vector<std::vector<double>> matrix;     // cosine similarities

    std::string to_csv() const {
        std::ostringstream out;
        out.precision(12);
        out << "domain";
        for (const auto& d : domains) out << ',' << d;
        out << '\n';
        for (size_t i = 0; i < domains.size(); ++i) {
            out << domains[i];
            for (double v : matrix[i]) out << ',' << v;
            out << '\n';
        }
        return out.str();
    }
};

// Per layer: mean p_t per document, then per domain, then pairwise cosine.
inline std::vector<DomainSimilarity> domain_similarity(const RoutingTrace& trace) {
    if (trace.empty()) throw AnalysisError("empty trace");
    int n_layers = 0;
    for (const auto& row : trace) n_layers = std::max(n_layers, row.layer + 1);
    std::vector<DomainSimilarity> out;
    for (int l = 0; l < n_layers; ++l) {
        // document means
        std::map<std::string, std::pair<std::vector<double>, int64_t>> docs;
        std::map<std::string, std::string> doc_domain;
        for (const auto& row : trace) {
            if (row.layer != l) continue;
            auto& [sum, n] = docs[row.doc_id];
            if (sum.empty()) sum.assign(row.probs.size(), 0.0);
            for (size_t i = 0; i < row.probs.size(); ++i) sum[i] += row.probs[i];
            ++n;
            doc_domain[row.doc_id] = row.domain;
        }
        // domain means of document means
        std::map<std::string, std::pair<std::vector<double>, int64_t>> dom;
        for (const auto& [id, acc] : docs) {
            const auto& label = doc_domain.at(id);
            if (label.empty()) continue;  // unlabeled docs are excluded
            auto& [sum, n] = dom[label];
            if (sum.empty()) sum.assign(acc.first.size(), 0.0);
            for (size_t i = 0; i < acc.first.size(); ++i)
                sum[i] += acc.first[i] / acc.second;
            ++n;
        }
        DomainSimilarity sim;
        std::vector<std::vector<double>> vecs;
        for (auto& [label, acc] : dom) {
            sim.domains.push_back(label);
            auto v = acc.first;
            for (double& x : v) x /= acc.second;
            vecs.push_back(std::move(v));
        }
        const size_t nd = sim.domains.size();
        sim.matrix.assign(nd, std::vector<double>(nd, 0.0));
        for (size_t i = 0; i < nd; ++i)
            for (size_t j = 0; j < nd; ++j)
                sim.matrix[i][j] = i == j ? 1.0 : detail::cosine(vecs[i], vecs[j]);
        out.push_back(std::move(sim));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Consistency metrics

struct ConsistencyRow {
    int layer = 0;
    std::optional<double> within_doc_jaccard;  // unset if no doc has >= 2 tokens
    std::optional<double> modal_cluster_fraction;
    std::optional<double> first_token_cluster_rate;
};

namespace detail {

inline double jaccard(const std::vector<int>& a, const std::vector<int>& b) {
    // selected sets are sorted
    size_t i = 0, j = 0, inter = 0;
    while (i < a.size() && j < b.size()) {
        if (a[i] == b[j]) ++inter, ++i, ++j;
        else if (a[i] < b[j]) ++i;
        else ++j;
    }
    double uni = static_cast<double>(a.size() + b.size() - inter);
    return uni == 0 ? 0.0 : inter / uni;
}

}  // namespace detail

// Per layer: (a) mean within-document pairwise Jaccard of selected sets,
// (b) mean fraction of a document's tokens in its modal cluster,
// (c) fraction of documents whose first token lands in the globally
// most-common first-token cluster. (b)/(c) need fitted cluster models.
inline std::vector<ConsistencyRow> consistency_metrics(
    const RoutingTrace& trace, const std::map<int, ClusterModel>* clusters = nullptr) {
    if (trace.empty()) throw AnalysisError("empty trace");
    int n_layers = 0;
    for (const auto& row : trace) n_layers = std::max(n_layers, row.layer + 1);
    std::vector<ConsistencyRow> out;
    for (int l = 0; l < n_layers; ++l) {
        ConsistencyRow res;
        res.layer = l;
        std::map<std::string, std::vector<const TraceRow*>> by_doc;
        std::vector<const TraceRow*> rows;  // layer rows in trace order
        for (const auto& row : trace)
            if (row.layer == l) {
                by_doc[row.doc_id].push_back(&row);
                rows.push_back(&row);
            }

        double jac_sum = 0;
        int64_t jac_docs = 0;
        for (const auto& [id, docrows] : by_doc) {
            const size_t n = docrows.size();
            if (n < 2) continue;  // single-token documents have no pairs
            double s = 0;
            int64_t pairs = 0;
            for (size_t i = 0; i < n; ++i)
                for (size_t j = i + 1; j < n; ++j) {
                    s += detail::jaccard(docrows[i]->selected, docrows[j]->selected);
                    ++pairs;
                }
            jac_sum += s / pairs;
            ++jac_docs;
        }
        if (jac_docs > 0) res.within_doc_jaccard = jac_sum / jac_docs;

        if (clusters && clusters->count(l)) {
            const auto& model = clusters->at(l);
            if (model.assignments.size() != rows.size())
                throw AnalysisError("cluster model does not match trace layer " +
                                    std::to_string(l));
            std::map<std::string, std::map<int, int>> hist;  // doc -> cluster counts
            std::map<std::string, int> first_cluster;        // doc -> token-0 cluster
            for (size_t r = 0; r < rows.size(); ++r) {
                hist[rows[r]->doc_id][model.assignments[r]]++;
                if (rows[r]->token_index == 0) first_cluster[rows[r]->doc_id] =
                    model.assignments[r];
            }
            double modal_sum = 0;
            for (const auto& [id, h] : hist) {
                int64_t total = 0, best = 0;
                for (const auto& [c, n] : h) {
                    total += n;
                    best = std::max<int64_t>(best, n);
                }
                modal_sum += static_cast<double>(best) / total;
            }
            res.modal_cluster_fraction = modal_sum / hist.size();

            if (!first_cluster.empty()) {
                std::map<int, int> c0;
                for (const auto& [id, c] : first_cluster) c0[c]++;
                int best = 0;
                for (const auto& [c, n] : c0) best = std::max(best, n);
                res.first_token_cluster_rate =
                    static_cast<double>(best) / first_cluster.size();
            }
        }
        out.push_back(std::move(res));
    }
    return out;
}

inline std::string consistency_csv(const std::vector<ConsistencyRow>& rows) {
    std::ostringstream out;
    out.precision(12);
    out << "layer,within_doc_jaccard,modal_cluster_fraction,first_token_cluster_rate\n";
    auto cell = [](const std::optional<double>& v) {
        return v ? std::to_string(*v) : std::string("nan");
    };
    for (const auto& r : rows)
        out << r.layer << ',' << cell(r.within_doc_jaccard) << ','
            << cell(r.modal_cluster_fraction) << ',' << cell(r.first_token_cluster_rate)
            << '\n';
    return out.str();
}

}  // namespace modmoe
