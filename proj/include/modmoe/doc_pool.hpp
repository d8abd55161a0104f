#pragma once

// Document-level expert pooling: per-document expert pools from averaged
// routing probabilities, masked/renormalized routing within the pool, and
// per-document pool-size sampling.

#include <modmoe/moe.hpp>
#include <modmoe/rng.hpp>

#include <string>
#include <vector>

namespace modmoe {

struct PoolError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DocumentPool {
    uint64_t doc_key = 0;  // hash of the source document id
    int layer_index = 0;
    int d = 0;
    std::vector<int> members;  // sorted, |members| == d
};

// Contiguous token span of one document within a flattened packed batch.
struct DocSegment {
    int begin = 0;  // inclusive
    int end = 0;    // exclusive
    std::string doc_id;
    std::string domain;
    uint64_t doc_key() const { return rng::fnv1a(doc_id); }
};

struct DocumentSegmentMap {
    std::vector<DocSegment> segments;  // every token in exactly one segment
};

// Top-d experts of the token-averaged routing distribution over rows
// [begin, end) of probs. Ties break toward the lowest index.
inline DocumentPool compute_pool(const Tensor& probs, int begin, int end, int d, int k_active,
                                 int layer_index = 0, uint64_t doc_key = 0) {
    const int n_r = probs.dim(1);
    if (d < k_active || d > n_r)
        throw PoolError("pool size d=" + std::to_string(d) + " outside [k=" +
                        std::to_string(k_active) + ", n_r=" + std::to_string(n_r) + "]");
    if (end <= begin) throw PoolError("compute_pool: empty segment");
    std::vector<double> avg(n_r, 0.0);
    for (int t = begin; t < end; ++t)
        for (int i = 0; i < n_r; ++i) avg[i] += probs.data()[static_cast<int64_t>(t) * n_r + i];
    const double inv = 1.0 / static_cast<double>(end - begin);
    for (auto& v : avg) v *= inv;

    std::vector<int> order(n_r);
    for (int i = 0; i < n_r; ++i) order[i] = i;
    std::partial_sort(order.begin(), order.begin() + d, order.end(), [&](int a, int b) {
        return avg[a] > avg[b] || (avg[a] == avg[b] && a < b);
    });
    DocumentPool pool;
    pool.doc_key = doc_key;
    pool.layer_index = layer_index;
    pool.d = d;
    pool.members.assign(order.begin(), order.begin() + d);
    std::sort(pool.members.begin(), pool.members.end());
    return pool;
}

// p restricted to the pool members and renormalized, for every row of p.
inline Tensor mask_renormalize(Tape* tape, Tensor probs, const std::vector<int>& members) {
    const int T = probs.dim(0), n_r = probs.dim(1);
    std::vector<uint8_t> mask(static_cast<size_t>(T) * n_r, 0);
    for (int t = 0; t < T; ++t)
        for (int i : members) mask[static_cast<size_t>(t) * n_r + i] = 1;
    return mask_renorm(tape, probs, mask);
}

// Pool size for one document under the configured policy. uniform_random is
// a pure function of (run_seed, doc_key), so data order and packing layout
// do not change the draw, and all segments/layers of a document share d.
inline int sample_pool_size(const PoolPolicy& policy, uint64_t run_seed, uint64_t doc_key,
                            int k_active, int n_routed) {
    switch (policy.kind) {
        case PoolPolicy::Kind::fixed:
            if (policy.fixed_d < k_active || policy.fixed_d > n_routed)
                throw PoolError("fixed pool size out of range");
            return policy.fixed_d;
        case PoolPolicy::Kind::uniform_random:
            return static_cast<int>(
                rng::keyed_int(run_seed, rng::mix(0x706f6f6cULL, doc_key), k_active, n_routed));
        case PoolPolicy::Kind::none:
        default:
            return n_routed;
    }
}

struct PooledRouting {
    RoutingState state;
    std::vector<DocumentPool> pools;  // one per segment, in segment order
};

// Per document segment: sample d, compute the pool from the segment's
// token-averaged probabilities, mask+renormalize, re-select top-k within
// the pool. Selection weights are the renormalized probabilities.
inline PooledRouting pooled_route(Tape* tape, Tensor logits, Tensor probs,
                                  const DocumentSegmentMap& segmap, const PoolPolicy& policy,
                                  int k_active, uint64_t run_seed, int layer_index = 0) {
    const int T = probs.dim(0), n_r = probs.dim(1);
    std::vector<uint8_t> mask(static_cast<size_t>(T) * n_r, 0);
    std::vector<uint8_t> covered(T, 0);
    PooledRouting out;
    for (const auto& seg : segmap.segments) {
        if (seg.begin < 0 || seg.end > T || seg.end <= seg.begin)
            throw PoolError("pooled_route: segment out of range");
        uint64_t key = seg.doc_key();
        int d = sample_pool_size(policy, run_seed, key, k_active, n_r);
        auto pool = compute_pool(probs, seg.begin, seg.end, d, k_active, layer_index, key);
        for (int t = seg.begin; t < seg.end; ++t) {
            covered[t] = 1;
            for (int i : pool.members) mask[static_cast<size_t>(t) * n_r + i] = 1;
        }
        out.pools.push_back(std::move(pool));
    }
    // rows outside every segment (padding) route unconstrained
    for (int t = 0; t < T; ++t)
        if (!covered[t])
            for (int i = 0; i < n_r; ++i) mask[static_cast<size_t>(t) * n_r + i] = 1;
    out.state.logits = logits;
    out.state.probs = probs;
    out.state.masked_probs = mask_renorm(tape, probs, mask);
    out.state.selected = route_topk(*out.state.masked_probs, k_active);
    return out;
}

}  // namespace modmoe
