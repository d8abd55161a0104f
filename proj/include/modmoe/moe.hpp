#pragma once

// MoE feedforward sublayer: router, routed + shared experts, top-k
// selection and the auxiliary losses (local and global load balancing,
// router z-loss).

#include <modmoe/tensor.hpp>

#include <algorithm>
#include <optional>
#include <set>
#include <vector>

namespace modmoe {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class LbMode { local, global };

struct PoolPolicy {
    enum class Kind { none, fixed, uniform_random };
    Kind kind = Kind::none;
    int fixed_d = 0;

    static PoolPolicy none() { return {Kind::none, 0}; }
    static PoolPolicy fixed(int d) { return {Kind::fixed, d}; }
    static PoolPolicy uniform_random() { return {Kind::uniform_random, 0}; }
};

struct MoEConfig {
    int n_routed = 16;
    int n_shared = 1;
    int k_active = 2;
    int hidden_dim = 128;
    int expert_dim = 64;
    double alpha = 0.1;    // load balancing weight
    double beta = 0.001;   // router z-loss weight
    LbMode lb_mode = LbMode::global;
    int n_parallel_groups = 1;
    PoolPolicy pool_policy = PoolPolicy::none();

    int n_total() const { return n_routed + n_shared; }

    void validate() const {
        if (n_routed < 1) throw ConfigError("n_routed must be >= 1");
        if (n_shared < 0) throw ConfigError("n_shared must be >= 0");
        if (k_active < 1 || k_active > n_routed)
            throw ConfigError("k_active must satisfy 1 <= k <= n_routed");
        if (alpha < 0 || beta < 0) throw ConfigError("loss weights must be >= 0");
        if (n_parallel_groups < 1) throw ConfigError("n_parallel_groups must be >= 1");
        if (hidden_dim < 1 || expert_dim < 1) throw ConfigError("dims must be positive");
        if (pool_policy.kind == PoolPolicy::Kind::fixed &&
            (pool_policy.fixed_d < k_active || pool_policy.fixed_d > n_routed))
            throw ConfigError("fixed pool size must satisfy k <= d <= n_routed");
    }
};

// Gated two-layer FFN: down( silu(gate(x)) * up(x) ).
struct FfnWeights {
    Tensor w_gate;  // [hidden x expert_dim]
    Tensor w_up;    // [hidden x expert_dim]
    Tensor w_down;  // [expert_dim x hidden]
};

struct ExpertWeights {
    Tensor router;                   // [hidden x n_routed]
    std::vector<FfnWeights> routed;  // size n_routed
    std::vector<FfnWeights> shared;  // size n_shared
};

inline Tensor ffn_forward(Tape* tape, Tensor x, const FfnWeights& w) {
    auto g = silu(tape, matmul(tape, x, w.w_gate));
    auto u = matmul(tape, x, w.w_up);
    return matmul(tape, mul(tape, g, u), w.w_down);
}

// Per-token router outcome. `weights_source()` is what moe_forward combines
// with: masked/renormalized probabilities when a pool or retained set is in
// force, plain probabilities otherwise.
struct RoutingState {
    Tensor logits;                      // [T x n_routed]
    Tensor probs;                       // [T x n_routed]
    std::optional<Tensor> masked_probs; // [T x n_routed]
    std::vector<std::vector<int>> selected;  // per token, sorted ascending, size k

    Tensor weights_source() const { return masked_probs ? *masked_probs : probs; }
};

// Top-k expert indices per row of a probability matrix. Ties break toward
// the lowest index; output sorted ascending.
inline std::vector<std::vector<int>> route_topk(const Tensor& probs, int k) {
    const int T = probs.dim(0), n = probs.dim(1);
    if (k > n) throw ConfigError("route_topk: k=" + std::to_string(k) + " exceeds n_routed=" +
                                 std::to_string(n));
    std::vector<std::vector<int>> out(T);
    std::vector<int> order(n);
    for (int t = 0; t < T; ++t) {
        const double* p = probs.data().data() + static_cast<int64_t>(t) * n;
        for (int i = 0; i < n; ++i) order[i] = i;
        std::partial_sort(order.begin(), order.begin() + k, order.end(),
                          [p](int a, int b) { return p[a] > p[b] || (p[a] == p[b] && a < b); });
        out[t].assign(order.begin(), order.begin() + k);
        std::sort(out[t].begin(), out[t].end());
    }
    return out;
}

// Combine selected routed experts (weighted by the routing distribution)
// plus all shared experts. Only selected experts are evaluated: tokens are
// grouped per expert, run through its FFN, and scattered back.
inline Tensor moe_forward(Tape* tape, Tensor x, const ExpertWeights& w,
                          const RoutingState& state) {
    const int T = x.dim(0);
    const int n_routed = static_cast<int>(w.routed.size());
    Tensor weights = state.weights_source();

    std::vector<std::vector<int>> tokens_of_expert(n_routed);
    for (int t = 0; t < T; ++t)
        for (int i : state.selected[t]) {
            if (i < 0 || i >= n_routed)
                throw TensorError("moe_forward: selected expert " + std::to_string(i) +
                                  " out of range (n_routed=" + std::to_string(n_routed) + ")");
            tokens_of_expert[i].push_back(t);
        }

    Tensor out = Tensor::zeros({T, x.dim(1)});
    bool first = true;
    for (int i = 0; i < n_routed; ++i) {
        const auto& toks = tokens_of_expert[i];
        if (toks.empty()) continue;
        auto xi = gather_rows(tape, x, toks);
        auto hi = ffn_forward(tape, xi, w.routed[i]);
        auto wi = gather_cells(tape, weights, toks, std::vector<int>(toks.size(), i));
        auto contrib = scatter_rows(tape, row_scale(tape, hi, wi), toks, T);
        out = first ? contrib : add(tape, out, contrib);
        first = false;
    }
    for (const auto& sw : w.shared) {
        auto hs = ffn_forward(tape, x, sw);
        out = first ? hs : add(tape, out, hs);
        first = false;
    }
    return out;
}

// Routing statistics for one batch, split into n_p simulated data-parallel
// groups. f is a plain statistic (no gradient); P entries are taped means
// of routing probabilities so the balancing losses differentiate through
// the router.
struct LoadBalanceStats {
    int n_routed = 0;
    int n_groups = 0;
    std::vector<std::vector<double>> f;  // [n_groups][n_routed], rows sum to 1
    std::vector<Tensor> P;               // per group, [n_routed]
};

// f_i^j = (1/(k*T_j)) * #assignments of expert i in group j;
// P_i^j = mean over group-j tokens of p_t(i).
inline LoadBalanceStats compute_lb_stats_rows(Tape* tape, Tensor probs,
                                              const std::vector<std::vector<int>>& selected,
                                              const std::vector<std::vector<int>>& group_rows) {
    LoadBalanceStats s;
    s.n_routed = probs.dim(1);
    s.n_groups = static_cast<int>(group_rows.size());
    for (const auto& rows : group_rows) {
        if (rows.empty()) throw TensorError("compute_lb_stats: empty group (degenerate batch)");
        std::vector<double> f(s.n_routed, 0.0);
        int64_t assignments = 0;
        for (int t : rows)
            for (int i : selected[t]) {
                f[i] += 1.0;
                ++assignments;
            }
        for (auto& v : f) v /= static_cast<double>(assignments);
        s.f.push_back(std::move(f));
        s.P.push_back(mean_rows(tape, gather_rows(tape, probs, rows)));
    }
    return s;
}

inline LoadBalanceStats compute_lb_stats(Tape* tape, Tensor probs,
                                         const std::vector<std::vector<int>>& selected,
                                         const std::vector<std::pair<int, int>>& group_ranges) {
    std::vector<std::vector<int>> group_rows;
    for (auto [lo, hi] : group_ranges) {
        if (hi <= lo) throw TensorError("compute_lb_stats: empty group (degenerate batch)");
        std::vector<int> rows;
        for (int t = lo; t < hi; ++t) rows.push_back(t);
        group_rows.push_back(std::move(rows));
    }
    return compute_lb_stats_rows(tape, probs, selected, group_rows);
}

// L = (1/n_p) * sum_j [ n_r * sum_i f_i^j * P_i^j ]
inline Tensor lb_loss_local(Tape* tape, const LoadBalanceStats& s) {
    if (s.n_groups == 0) throw TensorError("lb_loss_local: no groups (degenerate batch)");
    Tensor acc;
    for (int j = 0; j < s.n_groups; ++j) {
        auto fj = Tensor::from({s.n_routed}, s.f[j]);
        auto term = scale(tape, dot(tape, fj, s.P[j]), static_cast<double>(s.n_routed));
        acc = (j == 0) ? term : add(tape, acc, term);
    }
    return scale(tape, acc, 1.0 / static_cast<double>(s.n_groups));
}

// Same per-group form but with aggregated frequencies fbar_i = sum_j f_i^j
// (an all-reduce sum, not an average).
inline Tensor lb_loss_global(Tape* tape, const LoadBalanceStats& s) {
    if (s.n_groups == 0) throw TensorError("lb_loss_global: no groups (degenerate batch)");
    std::vector<double> fbar(s.n_routed, 0.0);
    for (int j = 0; j < s.n_groups; ++j)
        for (int i = 0; i < s.n_routed; ++i) fbar[i] += s.f[j][i];
    auto fb = Tensor::from({s.n_routed}, fbar);
    Tensor acc;
    for (int j = 0; j < s.n_groups; ++j) {
        auto term = scale(tape, dot(tape, fb, s.P[j]), static_cast<double>(s.n_routed));
        acc = (j == 0) ? term : add(tape, acc, term);
    }
    return scale(tape, acc, 1.0 / static_cast<double>(s.n_groups));
}

inline Tensor lb_loss(Tape* tape, const LoadBalanceStats& s, LbMode mode) {
    return mode == LbMode::global ? lb_loss_global(tape, s) : lb_loss_local(tape, s);
}

// Mean over tokens of (logsumexp of router logits)^2.
inline Tensor router_z_loss(Tape* tape, Tensor logits) {
    auto lse = logsumexp_lastdim(tape, logits);
    return mean(tape, mul(tape, lse, lse));
}

// L = L_CE + alpha * L_LB + beta * L_RZ. Callers average per-layer LB/RZ
// terms before passing them here.
inline Tensor total_loss(Tape* tape, Tensor ce, Tensor lb, Tensor rz, const MoEConfig& cfg) {
    return add(tape, ce, add(tape, scale(tape, lb, cfg.alpha), scale(tape, rz, cfg.beta)));
}

}  // namespace modmoe
