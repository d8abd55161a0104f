#pragma once

// Training loop: AdamW with decoupled weight decay, warmup+cosine schedule,
// global-norm gradient clipping, optional routing-mode switch mid-run
// (standard -> pooled), metrics logging, and deterministic execution.

#include <modmoe/checkpoint.hpp>
#include <modmoe/model.hpp>

#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace modmoe {

struct TrainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Peak lr after linear warmup, cosine decay to final_lr_frac * peak.
inline double lr_at_step(const TrainConfig& tc, int step) {
    int warmup = std::max(1, static_cast<int>(std::ceil(tc.warmup_frac * tc.steps)));
    if (step < warmup) return tc.lr * (step + 1) / warmup;
    double final_lr = tc.lr * tc.final_lr_frac;
    if (tc.steps <= warmup) return final_lr;
    double t = static_cast<double>(step - warmup) / (tc.steps - warmup);
    return final_lr + 0.5 * (tc.lr - final_lr) * (1.0 + std::cos(M_PI * t));
}

// Decoupled-weight-decay adaptive-moments optimizer. Parameters named in
// `frozen` are excluded from the update entirely (no decay, no moments),
// so their values stay bit-identical. Norm gains are never decayed.
class AdamW {
  public:
    AdamW(Checkpoint& ckpt, const TrainConfig& tc, std::set<std::string> frozen = {})
        : tc_(tc), frozen_(std::move(frozen)) {
        for (auto& [name, p] : ckpt.params) {
            if (frozen_.count(name)) continue;
            m_.emplace(name, std::vector<double>(p.size(), 0.0));
            v_.emplace(name, std::vector<double>(p.size(), 0.0));
        }
    }

    bool trainable(const std::string& name) const { return !frozen_.count(name); }

    // Global grad norm over trainable parameters, before clipping.
    double grad_norm(const Checkpoint& ckpt) const {
        double sq = 0;
        for (const auto& [name, p] : ckpt.params) {
            if (frozen_.count(name)) continue;
            for (double g : p.grad()) sq += g * g;
        }
        return std::sqrt(sq);
    }

    // Clips stored gradients in place to tc.grad_clip, then applies one
    // update with bias correction. Returns the pre-clip gradient norm.
    double step(Checkpoint& ckpt, double lr) {
        ++t_;
        double norm = grad_norm(ckpt);
        if (norm > tc_.grad_clip) {
            double scale = tc_.grad_clip / norm;
            for (auto& [name, p] : ckpt.params) {
                if (frozen_.count(name)) continue;
                for (auto& g : p.grad()) g *= scale;
            }
        }
        double bc1 = 1.0 - std::pow(tc_.adam_beta1, t_);
        double bc2 = 1.0 - std::pow(tc_.adam_beta2, t_);
        for (auto& [name, p] : ckpt.params) {
            if (frozen_.count(name)) continue;
            auto& m = m_.at(name);
            auto& v = v_.at(name);
            bool decay = tc_.weight_decay > 0 && name.find("norm") == std::string::npos &&
                         name.find(".gain") == std::string::npos;
            auto& w = p.data();
            const auto& g = p.grad();
            for (int64_t i = 0; i < p.size(); ++i) {
                double gi = g[i];
                m[i] = tc_.adam_beta1 * m[i] + (1 - tc_.adam_beta1) * gi;
                v[i] = tc_.adam_beta2 * v[i] + (1 - tc_.adam_beta2) * gi * gi;
                double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + tc_.adam_eps);
                if (decay) update += tc_.weight_decay * w[i];
                w[i] -= lr * update;
            }
        }
        return norm;
    }

  private:
    TrainConfig tc_;
    std::set<std::string> frozen_;
    std::map<std::string, std::vector<double>> m_, v_;
    int t_ = 0;
};

struct MetricsRow {
    int step = 0;
    std::string mode;  // routing mode active at this step
    double lr = 0;
    double ce = 0, lb = 0, rz = 0, total = 0;
    double grad_norm = 0;
    std::vector<double> util_entropy;  // per layer, nats
    double tokens_per_sec = 0;
};

struct TrainMetrics {
    std::vector<MetricsRow> rows;

    // include_timing=false drops the wall-clock column so the file is
    // byte-reproducible across reruns
    std::string to_csv(bool include_timing = true) const {
        std::ostringstream out;
        out.precision(12);
        int n_layers = rows.empty() ? 0 : static_cast<int>(rows[0].util_entropy.size());
        out << "step,mode,lr,loss_ce,loss_lb,loss_rz,loss_total,grad_norm";
        for (int l = 0; l < n_layers; ++l) out << ",util_entropy_l" << l;
        if (include_timing) out << ",tokens_per_sec";
        out << '\n';
        for (const auto& r : rows) {
            out << r.step << ',' << r.mode << ',' << r.lr << ',' << r.ce << ',' << r.lb << ','
                << r.rz << ',' << r.total << ',' << r.grad_norm;
            for (double e : r.util_entropy) out << ',' << e;
            if (include_timing) out << ',' << r.tokens_per_sec;
            out << '\n';
        }
        return out.str();
    }

    void write_csv(const std::string& path, bool include_timing = true) const {
        std::ofstream f(path, std::ios::trunc);
        if (!f) throw TrainError("cannot open metrics file: " + path);
        f << to_csv(include_timing);
    }
};

struct TrainOptions {
    RoutingMode initial_mode = RoutingMode::standard;
    // subset fine-tuning: retained local expert ids per layer (sorted)
    const std::vector<std::vector<int>>* retained = nullptr;
    std::set<std::string> frozen;  // parameter names excluded from updates
    std::string checkpoint_dir;    // periodic checkpoints when checkpoint_interval > 0
};

struct TrainResult {
    Checkpoint checkpoint;
    TrainMetrics metrics;
};

namespace detail {

// Shannon entropy (nats) of each layer's expert-utilization histogram,
// counted over the selections of segment-covered tokens.
inline std::vector<double> utilization_entropy(const RoutingTrace& trace, int n_layers,
                                               int n_routed) {
    std::vector<std::vector<int64_t>> counts(n_layers, std::vector<int64_t>(n_routed, 0));
    for (const auto& row : trace)
        for (int e : row.selected) counts[row.layer][e]++;
    std::vector<double> ent(n_layers, 0.0);
    for (int l = 0; l < n_layers; ++l) {
        int64_t total = 0;
        for (int64_t c : counts[l]) total += c;
        if (total == 0) continue;
        for (int64_t c : counts[l])
            if (c > 0) {
                double p = static_cast<double>(c) / total;
                ent[l] -= p * std::log(p);
            }
    }
    return ent;
}

inline void check_finite(const LossBreakdown& loss, int step) {
    auto bad = [](double x) { return !std::isfinite(x); };
    if (bad(loss.ce)) throw TrainError("non-finite ce loss at step " + std::to_string(step));
    if (bad(loss.lb))
        throw TrainError("non-finite load-balance loss at step " + std::to_string(step));
    if (bad(loss.rz)) throw TrainError("non-finite z-loss at step " + std::to_string(step));
    if (bad(loss.total)) throw TrainError("non-finite total loss at step " + std::to_string(step));
}

}  // namespace detail

// Runs the loop on a checkpoint in place and returns metrics. Each step's
// batch is split inside the forward pass into n_parallel_groups contiguous
// shards whose load-balance statistics are combined per lb_mode.
inline TrainMetrics train_loop(Checkpoint& ckpt, const TrainConfig& tc, const Corpus& corpus,
                               const TrainOptions& opt = {}) {
    tc.validate();
    if (corpus.docs.empty()) throw TrainError("training corpus is empty");
    auto batches = pack(corpus, ckpt.config.seq_len, tc.batch_size, tc.seed);
    if (batches.empty()) throw TrainError("corpus packs into zero batches");

    AdamW optim(ckpt, tc, opt.frozen);
    for (auto& [name, p] : ckpt.params) p.set_requires_grad(optim.trainable(name));

    TrainMetrics metrics;
    const int64_t tokens_per_step =
        static_cast<int64_t>(tc.batch_size) * ckpt.config.seq_len;
    for (int step = 0; step < tc.steps; ++step) {
        auto t0 = std::chrono::steady_clock::now();
        RoutingMode mode = opt.initial_mode;
        if (tc.anneal_switch_step >= 0 && step >= tc.anneal_switch_step)
            mode = RoutingMode::pooled;

        const PackedBatch& batch = batches[step % batches.size()];
        RoutingTrace trace;
        ForwardOptions fopt;
        fopt.mode = mode;
        fopt.retained = opt.retained;
        fopt.run_seed = tc.seed;
        bool log = tc.log_interval > 0 && (step % tc.log_interval == 0 || step == tc.steps - 1);
        if (log) fopt.trace = &trace;

        Tape tape;
        for (auto& [name, p] : ckpt.params)
            if (optim.trainable(name)) p.zero_grad();
        auto loss = forward_loss(&tape, ckpt, batch, fopt);
        detail::check_finite(loss, step);
        tape.backward(loss.total_tensor);

        double lr = lr_at_step(tc, step);
        double gnorm = optim.step(ckpt, lr);
        if (!std::isfinite(gnorm))
            throw TrainError("non-finite gradient norm at step " + std::to_string(step));

        if (log) {
            auto t1 = std::chrono::steady_clock::now();
            double secs = std::chrono::duration<double>(t1 - t0).count();
            MetricsRow row;
            row.step = step;
            row.mode = to_string(mode);
            row.lr = lr;
            row.ce = loss.ce;
            row.lb = loss.lb;
            row.rz = loss.rz;
            row.total = loss.total;
            row.grad_norm = gnorm;
            row.util_entropy = detail::utilization_entropy(trace, ckpt.config.n_layers,
                                                           ckpt.config.moe.n_routed);
            row.tokens_per_sec = secs > 0 ? tokens_per_step / secs : 0.0;
            metrics.rows.push_back(std::move(row));
        }
        if (tc.checkpoint_interval > 0 && !opt.checkpoint_dir.empty() &&
            (step + 1) % tc.checkpoint_interval == 0 && step + 1 < tc.steps)
            save_checkpoint(ckpt, opt.checkpoint_dir + "/step_" + std::to_string(step + 1));
    }
    for (auto& [name, p] : ckpt.params) p.set_requires_grad(false);
    return metrics;
}

// Initialize a fresh model and train it.
inline TrainResult train(const ModelConfig& mc, const TrainConfig& tc, const Corpus& corpus,
                         const TrainOptions& opt = {}) {
    TrainResult res;
    res.checkpoint = init_model(mc, tc.seed);
    res.checkpoint.provenance["train_config"] = to_json(tc);
    res.metrics = train_loop(res.checkpoint, tc, corpus, opt);
    return res;
}

struct PerplexityReport {
    double overall = 0;
    std::map<std::string, double> per_domain;
};

struct EvalOptions {
    RoutingMode mode = RoutingMode::standard;
    const std::vector<std::vector<int>>* retained = nullptr;
    uint64_t run_seed = 0;
    int batch_size = 8;
};

// exp(mean masked next-token CE), overall and per domain label.
inline PerplexityReport evaluate_perplexity(Checkpoint& ckpt, const Corpus& corpus,
                                            const EvalOptions& opt = {}) {
    if (corpus.docs.empty()) throw TrainError("evaluation corpus is empty");
    auto batches = pack(corpus, ckpt.config.seq_len, opt.batch_size, /*seed=*/0,
                        /*shuffle=*/false);
    const int V = ckpt.config.vocab_size;
    std::map<std::string, double> sum_ce;
    std::map<std::string, int64_t> count;
    double all_ce = 0;
    int64_t all_n = 0;
    ForwardOptions fopt;
    fopt.mode = opt.mode;
    fopt.retained = opt.retained;
    fopt.run_seed = opt.run_seed;
    for (const auto& batch : batches) {
        auto logits = forward_logits(nullptr, ckpt, batch, fopt);
        for (const auto& seg : batch.segmap.segments) {
            for (int t = seg.begin; t < seg.end; ++t) {
                if (batch.loss_mask[t] == 0) continue;
                const double* row = logits.data().data() + static_cast<int64_t>(t) * V;
                double mx = row[0];
                for (int v = 1; v < V; ++v) mx = std::max(mx, row[v]);
                double lse = 0;
                for (int v = 0; v < V; ++v) lse += std::exp(row[v] - mx);
                double ce = mx + std::log(lse) - row[batch.targets[t]];
                all_ce += ce;
                ++all_n;
                if (!seg.domain.empty()) {
                    sum_ce[seg.domain] += ce;
                    count[seg.domain]++;
                }
            }
        }
    }
    if (all_n == 0) throw TrainError("evaluation corpus has no scoreable tokens");
    PerplexityReport rep;
    rep.overall = std::exp(all_ce / all_n);
    for (const auto& [dom, s] : sum_ce) rep.per_domain[dom] = std::exp(s / count[dom]);
    return rep;
}

// Continue training a full checkpoint with routing masked to the retained
// experts. Pruned experts' arrays are excluded from the optimizer, so they
// stay bit-identical and the result can be reintegrated later.
inline TrainResult finetune_subset(const Checkpoint& full,
                                   const std::vector<std::vector<int>>& retained,
                                   const Corpus& corpus, const TrainConfig& tc) {
    const auto& cfg = full.config;
    if (static_cast<int>(retained.size()) != cfg.n_layers)
        throw ConfigError("retained sets must cover all layers");
    for (const auto& r : retained) {
        if (static_cast<int>(r.size()) < cfg.moe.k_active)
            throw ConfigError("retained set smaller than k_active");
        for (int i : r)
            if (i < 0 || i >= cfg.moe.n_routed)
                throw ConfigError("retained expert index out of range");
    }
    TrainResult res;
    res.checkpoint = full;
    for (auto& [name, p] : res.checkpoint.params)
        p = Tensor::from(p.shape(), p.data());
    TrainOptions opt;
    opt.initial_mode = RoutingMode::subset;
    opt.retained = &retained;
    for (int l = 0; l < cfg.n_layers; ++l) {
        std::set<int> keep(retained[l].begin(), retained[l].end());
        for (int i = 0; i < cfg.moe.n_routed; ++i)
            if (!keep.count(i))
                for (const char* part : {"w_gate", "w_up", "w_down"})
                    opt.frozen.insert(names::expert(l, i, part));
    }
    res.metrics = train_loop(res.checkpoint, tc, corpus, opt);
    return res;
}

}  // namespace modmoe
