#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "haltingvt/model_config.hpp"

namespace haltingvt {

// Closed-form operation counts. A multiply-add counts as two operations;
// softmax, layer norm, activations and bias additions are not counted.
//
//   attention(n, D)     = 2*(3 n D^2)            QKV projections
//                       + 2*(n^2 D) + 2*(n^2 D)  scores QK^T and weights x V
//                       + 2*(n D^2)              output projection
//   mlp(n, D)           = 2*(n D 4D) * 2         two linear layers, hidden 4D
//   halting head(n)     = 2 n                    gamma * x0 + beta per token
//   patch embed(K, p, D)= 2 K p D                p = P*P*C
//   head(D, c)          = 2 D c                  linear classifier
//
// A divided layer over T frames of S patches (n = 1 + T S rows) costs two
// attention sub-steps with their own projections: temporal groups of T rows
// at each of the S positions, and spatial groups of S + 1 rows (class token
// included) in each of the T frames.

class FlopError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline std::uint64_t attention_linear_flops(std::uint64_t n, std::uint64_t dim) {
    return 2 * (3 * n * dim * dim) + 2 * (n * dim * dim);
}

inline std::uint64_t attention_quadratic_flops(std::uint64_t n, std::uint64_t dim) {
    return 4 * n * n * dim;
}

inline std::uint64_t flops_attention(std::size_t n, std::size_t dim, std::size_t heads) {
    if (n == 0) {
        throw FlopError("flops_attention: n must be >= 1");
    }
    if (heads == 0 || dim % heads != 0) {
        throw FlopError("flops_attention: dim must be a multiple of heads");
    }
    return attention_linear_flops(n, dim) + attention_quadratic_flops(n, dim);
}

inline std::uint64_t flops_mlp(std::size_t n, std::size_t dim) {
    return 2 * (std::uint64_t{n} * dim * 4 * dim) * 2;
}

inline std::uint64_t flops_halting_head(std::size_t n) { return 2 * std::uint64_t{n}; }

struct DividedTrace {
    std::size_t frames = 0;
    std::size_t per_frame = 0;  // alive patches per frame
};

// Alive-token counts observed by one forward pass.
struct FlopTrace {
    std::size_t embedded_tokens = 0;          // K at patch embedding
    std::vector<DividedTrace> divided;        // Glimpser layers run
    std::vector<std::size_t> joint_tokens;    // rows entering each joint layer, class token included
    bool halting_head = true;
    std::size_t head_outputs = 0;             // classifier (+ motion head) outputs computed
};

struct FlopLayer {
    std::string id;
    std::string kind;
    std::size_t tokens = 0;
    std::uint64_t attention = 0;
    std::uint64_t attention_quadratic = 0;    // part of `attention` that scales with n^2
    std::uint64_t mlp = 0;
    std::uint64_t halting = 0;
    std::uint64_t other = 0;

    std::uint64_t total() const { return attention + mlp + halting + other; }
};

struct FlopReport {
    std::vector<FlopLayer> layers;
    std::uint64_t attention = 0;
    std::uint64_t mlp = 0;
    std::uint64_t halting = 0;
    std::uint64_t other = 0;
    std::uint64_t total = 0;

    double gflops() const { return static_cast<double>(total) / 1e9; }

    // Sum of the n^2 attention terms over joint layers.
    std::uint64_t joint_quadratic() const {
        std::uint64_t q = 0;
        for (const auto& l : layers) {
            if (l.kind == "joint") {
                q += l.attention_quadratic;
            }
        }
        return q;
    }

    void add(FlopLayer layer) {
        attention += layer.attention;
        mlp += layer.mlp;
        halting += layer.halting;
        other += layer.other;
        total += layer.total();
        layers.push_back(std::move(layer));
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["schema"] = "haltingvt.flop_report/1";
        j["layers"] = nlohmann::json::array();
        for (const auto& l : layers) {
            j["layers"].push_back({{"id", l.id},
                                   {"kind", l.kind},
                                   {"tokens", l.tokens},
                                   {"attention_flops", l.attention},
                                   {"attention_quadratic_flops", l.attention_quadratic},
                                   {"mlp_flops", l.mlp},
                                   {"halting_flops", l.halting},
                                   {"other_flops", l.other},
                                   {"total_flops", l.total()}});
        }
        j["totals"] = {{"attention_flops", attention},
                       {"mlp_flops", mlp},
                       {"halting_flops", halting},
                       {"other_flops", other},
                       {"total_flops", total}};
        j["gflops_per_clip"] = gflops();
        return j;
    }
};

inline FlopReport profile(const FlopTrace& trace, const ModelConfig& cfg) {
    const std::size_t k = cfg.tokens();
    const std::size_t dim = cfg.dim;
    if (trace.embedded_tokens != k) {
        throw FlopError("profile: trace embeds " + std::to_string(trace.embedded_tokens) +
                        " tokens, config implies " + std::to_string(k));
    }
    if (trace.joint_tokens.size() > cfg.layers) {
        throw FlopError("profile: trace has " + std::to_string(trace.joint_tokens.size()) +
                        " joint layers, config has " + std::to_string(cfg.layers));
    }
    if (trace.divided.size() > 2 || (!cfg.glimpser && !trace.divided.empty())) {
        throw FlopError("profile: divided layers in trace do not match the Glimpser config");
    }
    FlopReport report;
    report.add({"patch_embed", "embed", k, 0, 0, 0, 0, 2ULL * k * cfg.patch_dim() * dim});

    for (std::size_t i = 0; i < trace.divided.size(); ++i) {
        const auto& d = trace.divided[i];
        if (d.frames != cfg.frames || d.per_frame == 0 || d.per_frame > cfg.grid().per_frame()) {
            throw FlopError("profile: divided layer token counts do not match the config");
        }
        const std::uint64_t n = 1 + d.frames * d.per_frame;
        const std::uint64_t quad = std::uint64_t{d.per_frame} * 4 * d.frames * d.frames * dim +
                                   std::uint64_t{d.frames} * 4 * (d.per_frame + 1) * (d.per_frame + 1) * dim;
        report.add({"glimpser." + std::to_string(i), "divided", static_cast<std::size_t>(n),
                    2 * attention_linear_flops(n, dim) + quad, quad, flops_mlp(n, dim), 0, 0});
    }
    for (std::size_t l = 0; l < trace.joint_tokens.size(); ++l) {
        const std::size_t n = trace.joint_tokens[l];
        if (n == 0 || n > k + 1) {
            throw FlopError("profile: joint layer " + std::to_string(l + 1) + " has " + std::to_string(n) +
                            " tokens, outside [1, " + std::to_string(k + 1) + "]");
        }
        report.add({"joint." + std::to_string(l + 1), "joint", n, flops_attention(n, dim, cfg.heads),
                    attention_quadratic_flops(n, dim), flops_mlp(n, dim),
                    trace.halting_head ? flops_halting_head(n) : 0, 0});
    }
    if (trace.head_outputs > 0) {
        report.add({"head", "head", 1, 0, 0, 0, 0, 2ULL * dim * trace.head_outputs});
    }
    return report;
}

// Trace of a forward with no halting: every layer sees all post-Glimpser tokens.
inline FlopTrace static_trace(const ModelConfig& cfg) {
    FlopTrace trace;
    trace.embedded_tokens = cfg.tokens();
    std::size_t per_frame = cfg.grid().per_frame();
    if (cfg.glimpser) {
        trace.divided = {{cfg.frames, per_frame}, {cfg.frames, per_frame}};
        per_frame = keep_count(cfg.glimpse.keep_ratio, per_frame);
    }
    trace.joint_tokens.assign(cfg.layers, 1 + cfg.frames * per_frame);
    trace.halting_head = cfg.halting.enabled;
    trace.head_outputs = cfg.classes;
    return trace;
}

}  // namespace haltingvt
