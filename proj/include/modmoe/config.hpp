#pragma once

// Config structs and their JSON (de)serialization. Parsing is strict:
// unknown keys are rejected so a typo cannot silently fall back to a
// default.

#include <modmoe/moe.hpp>

#include <json.hpp>

#include <set>
#include <string>

namespace modmoe {

namespace detail {
inline void reject_unknown_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                                const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key()))
            throw ConfigError("unknown key \"" + it.key() + "\" in " + where);
}
template <typename T>
void get_if(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}
}  // namespace detail

inline nlohmann::json to_json(const PoolPolicy& p) {
    switch (p.kind) {
        case PoolPolicy::Kind::fixed:
            return {{"kind", "fixed"}, {"d", p.fixed_d}};
        case PoolPolicy::Kind::uniform_random:
            return {{"kind", "uniform_random"}};
        default:
            return {{"kind", "none"}};
    }
}

inline PoolPolicy pool_policy_from_json(const nlohmann::json& j) {
    detail::reject_unknown_keys(j, {"kind", "d"}, "pool_policy");
    std::string kind = j.at("kind").get<std::string>();
    if (kind == "none") return PoolPolicy::none();
    if (kind == "uniform_random") return PoolPolicy::uniform_random();
    if (kind == "fixed") return PoolPolicy::fixed(j.at("d").get<int>());
    throw ConfigError("unknown pool policy kind \"" + kind + "\"");
}

inline nlohmann::json to_json(const MoEConfig& c) {
    return {{"n_routed", c.n_routed},
            {"n_shared", c.n_shared},
            {"k_active", c.k_active},
            {"hidden_dim", c.hidden_dim},
            {"expert_dim", c.expert_dim},
            {"alpha", c.alpha},
            {"beta", c.beta},
            {"lb_mode", c.lb_mode == LbMode::global ? "global" : "local"},
            {"n_parallel_groups", c.n_parallel_groups},
            {"pool_policy", to_json(c.pool_policy)}};
}

inline MoEConfig moe_config_from_json(const nlohmann::json& j) {
    detail::reject_unknown_keys(j,
                                {"n_routed", "n_shared", "k_active", "hidden_dim", "expert_dim",
                                 "alpha", "beta", "lb_mode", "n_parallel_groups", "pool_policy"},
                                "moe config");
    MoEConfig c;
    detail::get_if(j, "n_routed", c.n_routed);
    detail::get_if(j, "n_shared", c.n_shared);
    detail::get_if(j, "k_active", c.k_active);
    detail::get_if(j, "hidden_dim", c.hidden_dim);
    detail::get_if(j, "expert_dim", c.expert_dim);
    detail::get_if(j, "alpha", c.alpha);
    detail::get_if(j, "beta", c.beta);
    if (j.contains("lb_mode")) {
        std::string m = j.at("lb_mode").get<std::string>();
        if (m == "global")
            c.lb_mode = LbMode::global;
        else if (m == "local")
            c.lb_mode = LbMode::local;
        else
            throw ConfigError("unknown lb_mode \"" + m + "\"");
    }
    detail::get_if(j, "n_parallel_groups", c.n_parallel_groups);
    if (j.contains("pool_policy")) c.pool_policy = pool_policy_from_json(j.at("pool_policy"));
    c.validate();
    return c;
}

// Pre-norm decoder-only transformer, no QK-norm, every FFN an MoE layer.
struct ModelConfig {
    int vocab_size = 512;
    int seq_len = 256;
    int n_layers = 2;
    int n_heads = 4;
    int hidden_dim = 128;
    MoEConfig moe;

    int head_dim() const { return hidden_dim / n_heads; }

    void validate() const {
        if (vocab_size < 2) throw ConfigError("vocab_size must be >= 2");
        if (seq_len < 2) throw ConfigError("seq_len must be >= 2");
        if (n_layers < 1 || n_heads < 1) throw ConfigError("n_layers/n_heads must be >= 1");
        if (hidden_dim % n_heads != 0)
            throw ConfigError("hidden_dim must be divisible by n_heads");
        if (head_dim() % 2 != 0) throw ConfigError("head_dim must be even (rotary pairs)");
        if (moe.hidden_dim != hidden_dim)
            throw ConfigError("moe.hidden_dim must match model hidden_dim");
        moe.validate();
    }
};

inline nlohmann::json to_json(const ModelConfig& c) {
    return {{"vocab_size", c.vocab_size}, {"seq_len", c.seq_len},   {"n_layers", c.n_layers},
            {"n_heads", c.n_heads},       {"hidden_dim", c.hidden_dim}, {"moe", to_json(c.moe)}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    detail::reject_unknown_keys(
        j, {"vocab_size", "seq_len", "n_layers", "n_heads", "hidden_dim", "moe"}, "model config");
    ModelConfig c;
    detail::get_if(j, "vocab_size", c.vocab_size);
    detail::get_if(j, "seq_len", c.seq_len);
    detail::get_if(j, "n_layers", c.n_layers);
    detail::get_if(j, "n_heads", c.n_heads);
    detail::get_if(j, "hidden_dim", c.hidden_dim);
    if (j.contains("moe")) {
        auto m = j.at("moe");
        if (!m.contains("hidden_dim")) m["hidden_dim"] = c.hidden_dim;
        c.moe = moe_config_from_json(m);
    } else {
        c.moe.hidden_dim = c.hidden_dim;
    }
    c.validate();
    return c;
}

struct TrainConfig {
    int steps = 1000;
    int batch_size = 8;
    double lr = 4e-3;          // paper's selected peak learning rate
    double warmup_frac = 0.03;
    double final_lr_frac = 0.1;  // cosine decays to this fraction of peak
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.95;
    double adam_eps = 1e-8;
    double weight_decay = 0.1;
    double grad_clip = 1.0;
    int anneal_switch_step = -1;  // step at which routing flips standard -> pooled; -1 = off
    uint64_t seed = 0;
    int log_interval = 10;
    int checkpoint_interval = 0;  // 0 = final only

    void validate() const {
        if (steps < 0) throw ConfigError("steps must be >= 0");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (lr <= 0) throw ConfigError("lr must be positive");
        if (anneal_switch_step >= steps)
            throw ConfigError("anneal_switch_step must be < steps");
        if (grad_clip <= 0) throw ConfigError("grad_clip must be positive");
    }
};

inline nlohmann::json to_json(const TrainConfig& c) {
    return {{"steps", c.steps},
            {"batch_size", c.batch_size},
            {"lr", c.lr},
            {"warmup_frac", c.warmup_frac},
            {"final_lr_frac", c.final_lr_frac},
            {"adam_beta1", c.adam_beta1},
            {"adam_beta2", c.adam_beta2},
            {"adam_eps", c.adam_eps},
            {"weight_decay", c.weight_decay},
            {"grad_clip", c.grad_clip},
            {"anneal_switch_step", c.anneal_switch_step},
            {"seed", c.seed},
            {"log_interval", c.log_interval},
            {"checkpoint_interval", c.checkpoint_interval}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    detail::reject_unknown_keys(
        j,
        {"steps", "batch_size", "lr", "warmup_frac", "final_lr_frac", "adam_beta1", "adam_beta2",
         "adam_eps", "weight_decay", "grad_clip", "anneal_switch_step", "seed", "log_interval",
         "checkpoint_interval"},
        "train config");
    TrainConfig c;
    detail::get_if(j, "steps", c.steps);
    detail::get_if(j, "batch_size", c.batch_size);
    detail::get_if(j, "lr", c.lr);
    detail::get_if(j, "warmup_frac", c.warmup_frac);
    detail::get_if(j, "final_lr_frac", c.final_lr_frac);
    detail::get_if(j, "adam_beta1", c.adam_beta1);
    detail::get_if(j, "adam_beta2", c.adam_beta2);
    detail::get_if(j, "adam_eps", c.adam_eps);
    detail::get_if(j, "weight_decay", c.weight_decay);
    detail::get_if(j, "grad_clip", c.grad_clip);
    detail::get_if(j, "anneal_switch_step", c.anneal_switch_step);
    detail::get_if(j, "seed", c.seed);
    detail::get_if(j, "log_interval", c.log_interval);
    detail::get_if(j, "checkpoint_interval", c.checkpoint_interval);
    c.validate();
    return c;
}

}  // namespace modmoe
