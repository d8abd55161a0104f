#pragma once

// Decoder-only transformer whose feedforward sublayers are MoE layers.
// Pre-norm with RMS norm, rotary attention, no QK-norm, every block's FFN
// is an MoE layer. Produces the LM loss plus all auxiliary-loss inputs.

#include <modmoe/checkpoint.hpp>
#include <modmoe/corpus.hpp>
#include <modmoe/doc_pool.hpp>

#include <cmath>
#include <optional>
#include <string>
#include <vector>

namespace modmoe {

enum class RoutingMode { standard, pooled, subset };

inline std::string to_string(RoutingMode m) {
    switch (m) {
        case RoutingMode::standard: return "standard";
        case RoutingMode::pooled: return "pooled";
        default: return "subset";
    }
}

struct LossBreakdown {
    double ce = 0, lb = 0, rz = 0, total = 0;
    std::vector<double> lb_per_layer;
    std::vector<double> rz_per_layer;
    Tensor total_tensor;  // taped scalar, for backward
};

struct TraceRow {
    std::string doc_id;
    std::string domain;
    int layer = 0;
    int token_index = 0;            // position within the document segment
    std::vector<double> probs;      // standard routing distribution p_t
    std::vector<int> selected;
    std::vector<int> pool;          // empty unless pooled routing was active
};
using RoutingTrace = std::vector<TraceRow>;

struct ForwardOptions {
    RoutingMode mode = RoutingMode::standard;
    // subset mode: per layer, sorted expert ids (local numbering) to retain
    const std::vector<std::vector<int>>* retained = nullptr;
    uint64_t run_seed = 0;  // keys pooled-mode pool-size draws
    RoutingTrace* trace = nullptr;
};

// Deterministic initialization: every parameter's stream is keyed by its
// name, so values do not depend on creation order.
inline Checkpoint init_model(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Checkpoint ckpt;
    ckpt.config = cfg;
    ckpt.reset_expert_map();
    auto make = [&](const std::string& name, std::vector<int> shape, double sd) {
        auto t = Tensor::zeros(shape);
        rng::Stream rs(seed, rng::fnv1a(name));
        for (auto& v : t.data()) v = rs.next_normal() * sd;
        ckpt.params.emplace(name, t);
    };
    auto ones = [&](const std::string& name, int n) {
        auto t = Tensor::zeros({n});
        for (auto& v : t.data()) v = 1.0;
        ckpt.params.emplace(name, t);
    };
    const int h = cfg.hidden_dim, e = cfg.moe.expert_dim, v = cfg.vocab_size;
    const double sd_h = 1.0 / std::sqrt(static_cast<double>(h));
    const double sd_e = 1.0 / std::sqrt(static_cast<double>(e));
    make("embed.weight", {v, h}, 0.02);
    make("lm_head.weight", {h, v}, 0.02);
    ones("final_norm.gain", h);
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string L = names::layer(l);
        ones(L + ".attn_norm.gain", h);
        ones(L + ".ffn_norm.gain", h);
        for (const char* w : {".attn.wq", ".attn.wk", ".attn.wv", ".attn.wo"})
            make(L + w, {h, h}, sd_h);
        make(names::router(l), {h, cfg.moe.n_routed}, 0.02);
        for (int i = 0; i < cfg.moe.n_routed; ++i) {
            make(names::expert(l, i, "w_gate"), {h, e}, sd_h);
            make(names::expert(l, i, "w_up"), {h, e}, sd_h);
            make(names::expert(l, i, "w_down"), {e, h}, sd_e);
        }
        for (int j = 0; j < cfg.moe.n_shared; ++j) {
            make(names::shared(l, j, "w_gate"), {h, e}, sd_h);
            make(names::shared(l, j, "w_up"), {h, e}, sd_h);
            make(names::shared(l, j, "w_down"), {e, h}, sd_e);
        }
    }
    return ckpt;
}

namespace detail {

inline ExpertWeights layer_experts(Checkpoint& ckpt, int l) {
    ExpertWeights w;
    w.router = ckpt.at(names::router(l));
    for (int i = 0; i < ckpt.config.moe.n_routed; ++i)
        w.routed.push_back({ckpt.at(names::expert(l, i, "w_gate")),
                            ckpt.at(names::expert(l, i, "w_up")),
                            ckpt.at(names::expert(l, i, "w_down"))});
    for (int j = 0; j < ckpt.config.moe.n_shared; ++j)
        w.shared.push_back({ckpt.at(names::shared(l, j, "w_gate")),
                            ckpt.at(names::shared(l, j, "w_up")),
                            ckpt.at(names::shared(l, j, "w_down"))});
    return w;
}

inline Tensor causal_mask(int T) {
    Tensor m = Tensor::zeros({T, T});
    for (int i = 0; i < T; ++i)
        for (int j = i + 1; j < T; ++j) m.data()[static_cast<int64_t>(i) * T + j] = -1e30;
    return m;
}

// Multi-head causal self-attention over one contiguous sequence span.
inline Tensor attention_seq(Tape* tape, Tensor q, Tensor k, Tensor v, const Tensor& mask,
                            int n_heads, const std::vector<int>& positions) {
    const int hd = q.dim(1) / n_heads;
    std::vector<Tensor> heads;
    for (int hh = 0; hh < n_heads; ++hh) {
        auto qh = rope(tape, slice_cols(tape, q, hh * hd, (hh + 1) * hd), positions);
        auto kh = rope(tape, slice_cols(tape, k, hh * hd, (hh + 1) * hd), positions);
        auto vh = slice_cols(tape, v, hh * hd, (hh + 1) * hd);
        auto scores = scale(tape, matmul_nt(tape, qh, kh), 1.0 / std::sqrt(double(hd)));
        auto attn = softmax_lastdim(tape, add(tape, scores, mask));
        heads.push_back(matmul(tape, attn, vh));
    }
    return concat_cols(tape, heads);
}

struct LayerAux {
    Tensor lb;  // scalar
    Tensor rz;  // scalar
};

}  // namespace detail

// Full forward pass over a packed batch. Returns LM-head logits for every
// position; per-layer auxiliary losses and the trace land in the out
// params when requested.
inline Tensor forward_logits(Tape* tape, Checkpoint& ckpt, const PackedBatch& batch,
                             const ForwardOptions& opt,
                             std::vector<detail::LayerAux>* aux = nullptr) {
    const ModelConfig& cfg = ckpt.config;
    const int B = batch.batch_size, T = batch.seq_len, N = B * T;
    const int n_r = cfg.moe.n_routed, k = cfg.moe.k_active;
    for (int t : batch.tokens)
        if (t < 0 || t >= cfg.vocab_size)
            throw ConfigError("token id " + std::to_string(t) + " out of vocab range");
    if (T > cfg.seq_len) throw ConfigError("batch seq_len exceeds model seq_len");
    if (opt.mode == RoutingMode::subset) {
        if (!opt.retained || static_cast<int>(opt.retained->size()) != cfg.n_layers)
            throw ConfigError("subset mode requires retained sets for every layer");
        for (const auto& r : *opt.retained) {
            if (static_cast<int>(r.size()) < k)
                throw ConfigError("retained set smaller than k_active");
            for (int i : r)
                if (i < 0 || i >= n_r) throw ConfigError("retained expert index out of range");
        }
    }

    Tensor x = embedding_lookup(tape, ckpt.at("embed.weight"), batch.tokens);
    Tensor mask = detail::causal_mask(T);
    std::vector<int> positions(T);
    for (int t = 0; t < T; ++t) positions[t] = t;

    // tokens covered by document segments, sharded into n_p groups of
    // contiguous sequences, for the load-balancing statistics
    std::vector<std::vector<int>> group_rows;
    if (aux) {
        const int n_p = cfg.moe.n_parallel_groups;
        if (n_p > B)
            throw ConfigError("n_parallel_groups exceeds batch size");
        std::vector<std::vector<int>> rows_by_seq(B);
        for (const auto& seg : batch.segmap.segments)
            for (int t = seg.begin; t < seg.end; ++t) rows_by_seq[t / T].push_back(t);
        group_rows.assign(n_p, {});
        for (int b = 0; b < B; ++b) {
            auto& dst = group_rows[b * n_p / B];
            dst.insert(dst.end(), rows_by_seq[b].begin(), rows_by_seq[b].end());
        }
        for (auto& g : group_rows) std::sort(g.begin(), g.end());
        // a shard of all-padding sequences contributes no statistics
        std::erase_if(group_rows, [](const auto& g) { return g.empty(); });
        if (group_rows.empty())
            throw ConfigError("batch has no document-covered tokens");
    }

    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string L = names::layer(l);
        // attention sublayer
        auto xn = rms_norm(tape, x, ckpt.at(L + ".attn_norm.gain"));
        auto q = matmul(tape, xn, ckpt.at(L + ".attn.wq"));
        auto kk = matmul(tape, xn, ckpt.at(L + ".attn.wk"));
        auto vv = matmul(tape, xn, ckpt.at(L + ".attn.wv"));
        Tensor attn_all;
        for (int b = 0; b < B; ++b) {
            std::vector<int> rows(T);
            for (int t = 0; t < T; ++t) rows[t] = b * T + t;
            auto ab = detail::attention_seq(tape, gather_rows(tape, q, rows),
                                            gather_rows(tape, kk, rows),
                                            gather_rows(tape, vv, rows), mask, cfg.n_heads,
                                            positions);
            auto sc = scatter_rows(tape, ab, rows, N);
            attn_all = (b == 0) ? sc : add(tape, attn_all, sc);
        }
        x = add(tape, x, matmul(tape, attn_all, ckpt.at(L + ".attn.wo")));

        // MoE sublayer
        auto fn = rms_norm(tape, x, ckpt.at(L + ".ffn_norm.gain"));
        auto w = detail::layer_experts(ckpt, l);
        RoutingState state;
        state.logits = matmul(tape, fn, w.router);
        state.probs = softmax_lastdim(tape, state.logits);
        std::vector<DocumentPool> pools;
        std::vector<int> pool_of_row;  // segment index per row, -1 outside
        switch (opt.mode) {
            case RoutingMode::standard:
                state.selected = route_topk(state.probs, k);
                break;
            case RoutingMode::pooled: {
                auto res = pooled_route(tape, state.logits, state.probs, batch.segmap,
                                        cfg.moe.pool_policy, k, opt.run_seed, l);
                pools = std::move(res.pools);
                state = std::move(res.state);
                break;
            }
            case RoutingMode::subset: {
                state.masked_probs = mask_renormalize(tape, state.probs, (*opt.retained)[l]);
                state.selected = route_topk(*state.masked_probs, k);
                break;
            }
        }
        x = add(tape, x, moe_forward(tape, fn, w, state));

        if (aux) {
            auto stats = compute_lb_stats_rows(tape, state.probs, state.selected, group_rows);
            auto lb = lb_loss(tape, stats, cfg.moe.lb_mode);
            // z-loss over segment-covered tokens only
            std::vector<int> covered;
            for (const auto& g : group_rows) covered.insert(covered.end(), g.begin(), g.end());
            std::sort(covered.begin(), covered.end());
            auto rz = router_z_loss(tape, gather_rows(tape, state.logits, covered));
            aux->push_back({lb, rz});
        }
        if (opt.trace) {
            for (size_t si = 0; si < batch.segmap.segments.size(); ++si) {
                const auto& seg = batch.segmap.segments[si];
                for (int t = seg.begin; t < seg.end; ++t) {
                    TraceRow row;
                    row.doc_id = seg.doc_id;
                    row.domain = seg.domain;
                    row.layer = l;
                    row.token_index = t - seg.begin;
                    row.probs.assign(state.probs.data().begin() + static_cast<int64_t>(t) * n_r,
                                     state.probs.data().begin() +
                                         static_cast<int64_t>(t + 1) * n_r);
                    row.selected = state.selected[t];
                    if (opt.mode == RoutingMode::pooled) row.pool = pools[si].members;
                    opt.trace->push_back(std::move(row));
                }
            }
        }
    }

    auto xf = rms_norm(tape, x, ckpt.at("final_norm.gain"));
    return matmul(tape, xf, ckpt.at("lm_head.weight"));
}

// Next-token loss with causal masking plus the full auxiliary objective.
// Per-layer LB/RZ terms are averaged across layers before weighting.
inline LossBreakdown forward_loss(Tape* tape, Checkpoint& ckpt, const PackedBatch& batch,
                                  const ForwardOptions& opt = {}) {
    std::vector<detail::LayerAux> aux;
    Tensor logits = forward_logits(tape, ckpt, batch, opt, &aux);
    Tensor ce = cross_entropy(tape, logits, batch.targets, batch.loss_mask);

    const double inv_l = 1.0 / static_cast<double>(aux.size());
    Tensor lb, rz;
    LossBreakdown out;
    for (size_t l = 0; l < aux.size(); ++l) {
        out.lb_per_layer.push_back(aux[l].lb.item());
        out.rz_per_layer.push_back(aux[l].rz.item());
        lb = (l == 0) ? aux[l].lb : add(tape, lb, aux[l].lb);
        rz = (l == 0) ? aux[l].rz : add(tape, rz, aux[l].rz);
    }
    lb = scale(tape, lb, inv_l);
    rz = scale(tape, rz, inv_l);
    out.total_tensor = total_loss(tape, ce, lb, rz, ckpt.config.moe);
    out.ce = ce.item();
    out.lb = lb.item();
    out.rz = rz.item();
    out.total = out.total_tensor.item();
    return out;
}

// Greedy decoding. subset mode restricts routing to the retained sets;
// pooled mode is a training-only construct and is rejected here.
inline std::vector<int> generate(Checkpoint& ckpt, const std::vector<int>& prompt,
                                 const ForwardOptions& opt, int max_new) {
    if (prompt.empty()) throw ConfigError("generate: prompt must be non-empty");
    if (opt.mode == RoutingMode::pooled)
        throw ConfigError("generate: pooled routing is train-time only");
    if (static_cast<int>(prompt.size()) + max_new > ckpt.config.seq_len)
        throw ConfigError("generate: prompt plus max_new exceeds seq_len");
    std::vector<int> tokens = prompt;
    for (int step = 0; step < max_new; ++step) {
        PackedBatch b;
        b.batch_size = 1;
        b.seq_len = static_cast<int>(tokens.size());
        b.tokens = tokens;
        b.targets.assign(tokens.size(), 0);
        b.loss_mask.assign(tokens.size(), 0);
        b.segmap.segments.push_back({0, b.seq_len, "gen", ""});
        Tensor logits = forward_logits(nullptr, ckpt, b, opt);
        const int V = ckpt.config.vocab_size;
        const double* last = logits.data().data() + static_cast<int64_t>(b.seq_len - 1) * V;
        int best = 0;
        for (int v = 1; v < V; ++v)
            if (last[v] > last[best]) best = v;
        tokens.push_back(best);
    }
    return tokens;
}

}  // namespace modmoe
