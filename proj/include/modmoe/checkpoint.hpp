#pragma once

// Versioned on-disk parameter store: manifest.json + one raw little-endian
// float64 array per named parameter. Supports expert-subset extraction and
// reintegration via a per-layer expert index map.

#include <modmoe/config.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace modmoe {

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
    ModelConfig config;
    // per layer, the original ids of the routed experts present
    std::vector<std::vector<int>> expert_map;
    std::map<std::string, Tensor> params;  // ordered: deterministic iteration
    nlohmann::json provenance;             // free-form training metadata

    Tensor& at(const std::string& name) {
        auto it = params.find(name);
        if (it == params.end()) throw CheckpointError("missing parameter \"" + name + "\"");
        return it->second;
    }
    const Tensor& at(const std::string& name) const {
        auto it = params.find(name);
        if (it == params.end()) throw CheckpointError("missing parameter \"" + name + "\"");
        return it->second;
    }

    int64_t total_params() const {
        int64_t n = 0;
        for (const auto& [k, v] : params) n += v.size();
        return n;
    }

    // identity expert map for a freshly initialized full model
    void reset_expert_map() {
        expert_map.assign(config.n_layers, {});
        for (auto& m : expert_map)
            for (int i = 0; i < config.moe.n_routed; ++i) m.push_back(i);
    }
};

namespace detail {
// FNV-1a over the raw little-endian bytes of an array.
inline uint64_t array_hash(const dvec& v) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (double d : v) {
        uint64_t bits;
        std::memcpy(&bits, &d, 8);
        for (int i = 0; i < 8; ++i) {
            h ^= (bits >> (8 * i)) & 0xff;
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}
}  // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["format_version"] = kCheckpointFormatVersion;
    manifest["model"] = to_json(ckpt.config);
    manifest["expert_map"] = ckpt.expert_map;
    manifest["provenance"] = ckpt.provenance;
    nlohmann::json arrays = nlohmann::json::object();
    for (const auto& [name, t] : ckpt.params) {
        arrays[name] = {{"shape", t.shape()},
                        {"hash", detail::array_hash(t.data())}};
        std::ofstream f(std::filesystem::path(dir) / (name + ".f64"), std::ios::binary);
        if (!f) throw CheckpointError("cannot write array file for \"" + name + "\"");
        // assumes little-endian host, as declared by the format
        f.write(reinterpret_cast<const char*>(t.data().data()),
                static_cast<std::streamsize>(t.data().size() * sizeof(double)));
    }
    manifest["arrays"] = arrays;
    std::ofstream mf(std::filesystem::path(dir) / "manifest.json");
    if (!mf) throw CheckpointError("cannot write manifest in " + dir);
    mf << manifest.dump(2) << "\n";
}

inline Checkpoint load_checkpoint(const std::string& dir) {
    std::ifstream mf(std::filesystem::path(dir) / "manifest.json");
    if (!mf) throw CheckpointError("no manifest.json in " + dir);
    nlohmann::json manifest = nlohmann::json::parse(mf, nullptr, false);
    if (manifest.is_discarded()) throw CheckpointError("corrupt manifest.json in " + dir);
    if (!manifest.contains("format_version") ||
        manifest["format_version"].get<int>() != kCheckpointFormatVersion)
        throw CheckpointError("checkpoint format version mismatch in " + dir);

    Checkpoint ckpt;
    ckpt.config = model_config_from_json(manifest.at("model"));
    ckpt.expert_map = manifest.at("expert_map").get<std::vector<std::vector<int>>>();
    if (manifest.contains("provenance")) ckpt.provenance = manifest["provenance"];

    for (auto it = manifest.at("arrays").begin(); it != manifest.at("arrays").end(); ++it) {
        const std::string& name = it.key();
        auto shape = it.value().at("shape").get<std::vector<int>>();
        uint64_t expect_hash = it.value().at("hash").get<uint64_t>();
        int64_t n = Tensor::numel(shape);

        std::ifstream f(std::filesystem::path(dir) / (name + ".f64"), std::ios::binary);
        if (!f) throw CheckpointError("missing array file for \"" + name + "\"");
        f.seekg(0, std::ios::end);
        int64_t bytes = f.tellg();
        if (bytes != n * static_cast<int64_t>(sizeof(double)))
            throw CheckpointError("array \"" + name + "\" has " + std::to_string(bytes) +
                                  " bytes, expected " + std::to_string(n * sizeof(double)) +
                                  " for shape " + shape_str(shape));
        f.seekg(0);
        dvec data(n);
        f.read(reinterpret_cast<char*>(data.data()),
               static_cast<std::streamsize>(n * sizeof(double)));
        if (detail::array_hash(data) != expect_hash)
            throw CheckpointError("array \"" + name + "\" failed content-hash check");
        ckpt.params.emplace(name, Tensor::from(shape, std::move(data)));
    }
    return ckpt;
}

namespace names {
inline std::string layer(int l) { return "layers." + std::to_string(l); }
inline std::string router(int l) { return layer(l) + ".router.weight"; }
inline std::string expert(int l, int i, const char* part) {
    return layer(l) + ".expert" + std::to_string(i) + "." + part;
}
inline std::string shared(int l, int j, const char* part) {
    return layer(l) + ".shared" + std::to_string(j) + "." + part;
}
}  // namespace names

// Keep only the retained routed experts (renumbered densely) plus shared
// experts and all non-expert parameters. Router columns of pruned experts
// are removed; the expert map records original ids.
inline Checkpoint extract_subset(const Checkpoint& full,
                                 const std::vector<std::vector<int>>& retained) {
    const int n_layers = full.config.n_layers;
    const int n_routed = full.config.moe.n_routed;
    const int k = full.config.moe.k_active;
    if (static_cast<int>(retained.size()) != n_layers)
        throw CheckpointError("retained sets must cover all layers");
    int d = static_cast<int>(retained[0].size());
    for (const auto& r : retained) {
        if (static_cast<int>(r.size()) != d)
            throw CheckpointError("retained sets must be the same size per layer");
        if (d < k) throw CheckpointError("retained set smaller than k_active");
        std::set<int> uniq(r.begin(), r.end());
        if (static_cast<int>(uniq.size()) != d) throw CheckpointError("duplicate retained index");
        for (int i : r)
            if (i < 0 || i >= n_routed)
                throw CheckpointError("retained expert index " + std::to_string(i) +
                                      " out of range");
    }

    Checkpoint sub;
    sub.config = full.config;
    sub.config.moe.n_routed = d;
    if (sub.config.moe.pool_policy.kind == PoolPolicy::Kind::fixed &&
        sub.config.moe.pool_policy.fixed_d > d)
        sub.config.moe.pool_policy = PoolPolicy::none();
    sub.provenance = full.provenance;
    sub.provenance["extracted_from_experts"] = n_routed;

    std::set<std::string> expert_names;  // full-model expert params, handled specially
    for (int l = 0; l < n_layers; ++l) {
        expert_names.insert(names::router(l));
        for (int i = 0; i < n_routed; ++i)
            for (const char* part : {"w_gate", "w_up", "w_down"})
                expert_names.insert(names::expert(l, i, part));
    }
    // deep copies: a checkpoint owns its arrays, never aliasing another's
    for (const auto& [name, t] : full.params)
        if (!expert_names.count(name)) sub.params.emplace(name, Tensor::from(t.shape(), t.data()));

    const int h = full.config.hidden_dim;
    for (int l = 0; l < n_layers; ++l) {
        std::vector<int> sorted = retained[l];
        std::sort(sorted.begin(), sorted.end());
        // map layer-local retained ids back to the original full-model ids
        std::vector<int> orig_ids;
        for (int i : sorted) orig_ids.push_back(full.expert_map[l][i]);
        sub.expert_map.push_back(orig_ids);

        const Tensor& router = full.at(names::router(l));
        Tensor sub_router = Tensor::zeros({h, d});
        for (int r = 0; r < h; ++r)
            for (int c = 0; c < d; ++c)
                sub_router.data()[static_cast<int64_t>(r) * d + c] =
                    router.data()[static_cast<int64_t>(r) * n_routed + sorted[c]];
        sub.params.emplace(names::router(l), sub_router);

        for (int c = 0; c < d; ++c)
            for (const char* part : {"w_gate", "w_up", "w_down"}) {
                const Tensor& src = full.at(names::expert(l, sorted[c], part));
                sub.params.emplace(names::expert(l, c, part),
                                   Tensor::from(src.shape(), src.data()));
            }
    }
    return sub;
}

// Put a tuned subset's routed-expert FFN weights back into the full model
// at the positions its expert map names. Routers and everything else stay
// from `full` unless include_all_tuned is set, which also copies the
// non-expert parameters from the tuned checkpoint.
inline Checkpoint reintegrate(const Checkpoint& full, const Checkpoint& tuned_subset,
                              bool include_all_tuned = false) {
    const int n_layers = full.config.n_layers;
    if (tuned_subset.config.n_layers != n_layers ||
        tuned_subset.config.hidden_dim != full.config.hidden_dim ||
        tuned_subset.config.moe.expert_dim != full.config.moe.expert_dim)
        throw CheckpointError("reintegrate: incompatible configs");

    // original id -> position in the full checkpoint's own map
    Checkpoint out = full;
    for (auto& [name, t] : out.params) t = Tensor::from(t.shape(), t.data());
    for (int l = 0; l < n_layers; ++l) {
        std::map<int, int> full_pos;
        for (size_t i = 0; i < full.expert_map[l].size(); ++i)
            full_pos[full.expert_map[l][i]] = static_cast<int>(i);
        for (size_t si = 0; si < tuned_subset.expert_map[l].size(); ++si) {
            int orig = tuned_subset.expert_map[l][si];
            auto it = full_pos.find(orig);
            if (it == full_pos.end())
                throw CheckpointError("reintegrate: subset expert " + std::to_string(orig) +
                                      " not present in full checkpoint layer " +
                                      std::to_string(l));
            for (const char* part : {"w_gate", "w_up", "w_down"})
                out.at(names::expert(l, it->second, part)) = Tensor::from(
                    tuned_subset.at(names::expert(l, static_cast<int>(si), part)).shape(),
                    tuned_subset.at(names::expert(l, static_cast<int>(si), part)).data());
        }
    }
    if (include_all_tuned) {
        for (auto& [name, t] : out.params) {
            if (name.find(".expert") != std::string::npos ||
                name.find(".router.") != std::string::npos)
                continue;
            auto it = tuned_subset.params.find(name);
            if (it != tuned_subset.params.end())
                t = Tensor::from(it->second.shape(), it->second.data());
        }
    }
    return out;
}

}  // namespace modmoe
