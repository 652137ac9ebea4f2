#pragma once

#include <optional>
#include <string>
#include <vector>

#include "haltingvt/flops.hpp"

namespace haltingvt {

template <typename T>
struct ModelParams {
    PatchEmbedParams<T> embed;
    std::optional<GlimpserParams<T>> glimpser;
    std::vector<BlockParams<T>> blocks;
    LayerNormParams<T> head_norm;
    Linear<T> classifier;
    Linear<T> motion_head;

    static ModelParams init(const ModelConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        SeededRng rng(seed);
        ModelParams p;
        p.embed = PatchEmbedParams<T>::init(rng, cfg.patch_dim(), cfg.grid(), cfg.dim);
        if (cfg.glimpser) {
            p.glimpser = GlimpserParams<T>::init(rng, cfg.dim, cfg.heads);
        }
        for (std::size_t l = 0; l < cfg.layers; ++l) {
            p.blocks.push_back(BlockParams<T>::init(rng, cfg.dim, cfg.heads));
        }
        p.head_norm = LayerNormParams<T>::init(cfg.dim);
        p.classifier = Linear<T>::init(rng, cfg.dim, cfg.classes);
        p.motion_head = Linear<T>::init(rng, cfg.dim, 2);
        return p;
    }

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        embed.visit(prefix + "embed", f);
        if (glimpser) {
            glimpser->visit(prefix + "glimpser", f);
        }
        for (std::size_t l = 0; l < blocks.size(); ++l) {
            blocks[l].visit(prefix + "blocks." + std::to_string(l), f);
        }
        head_norm.visit(prefix + "head.norm", f);
        classifier.visit(prefix + "head.classifier", f);
        motion_head.visit(prefix + "head.motion", f);
    }

    NamedTensors<T> named() { return named_parameters<T>(*this); }

    // Same architecture in another precision, values converted.
    template <typename U>
    ModelParams<U> cast(const ModelConfig& cfg) {
        auto out = ModelParams<U>::init(cfg, 0);
        auto src = named();
        auto dst = out.named();
        for (std::size_t i = 0; i < src.size(); ++i) {
            auto to = dst[i].second.mutable_values();
            auto from = src[i].second.values();
            for (std::size_t j = 0; j < to.size(); ++j) {
                to[j] = static_cast<U>(from[j]);
            }
        }
        return out;
    }
};

// mask: halted tokens keep their rows and are masked out of attention.
// gather: halted tokens are physically removed after each layer.
enum class ForwardMode { mask, gather };

struct ForwardOptions {
    ForwardMode mode = ForwardMode::gather;
    bool motion_head = false;
};

// Per original patch token: 0 = removed by the Glimpser, 1..L = halting layer.
using HaltMap = std::vector<std::size_t>;

template <typename T>
struct ForwardResult {
    Tensor<T> logits;         // [1, classes]
    Tensor<T> motion_logits;  // [1, 2], only when requested
    HaltingState<T> halting;
    FlopTrace trace;
    HaltMap halt_map;
    std::optional<Attentiveness> attentiveness;
};

// Joint transformer with per-token halting over an embedded (and optionally
// glimpsed) batch. The class token's halt ends the whole pass; patch tokens
// still running at that point halt at the same layer.
template <typename T>
ForwardResult<T> forward(const TokenBatch<T>& input, const ModelParams<T>& params, const ModelConfig& cfg,
                         const ForwardOptions& opts = {}) {
    ForwardResult<T> out;
    out.trace.embedded_tokens = cfg.tokens();
    out.trace.halting_head = cfg.halting.enabled;
    out.halt_map.assign(cfg.tokens(), 0);

    TokenBatch<T> x = input;
    if (cfg.glimpser) {
        if (!params.glimpser) {
            throw std::invalid_argument("forward: Glimpser enabled but parameters missing");
        }
        auto g = glimpse(x, *params.glimpser, cfg.glimpse);
        out.trace.divided = {{cfg.frames, x.grid.per_frame()}, {cfg.frames, x.grid.per_frame()}};
        out.attentiveness = std::move(g.scores);
        x = std::move(g.tokens);
    }

    HaltingConfig hcfg = cfg.halting;
    hcfg.layers = cfg.layers;
    auto& state = out.halting;
    const std::size_t entering = x.patch_rows();
    state.patches = HaltingTracker(entering, hcfg.epsilon, cfg.layers);
    state.cls = HaltingTracker(1, hcfg.epsilon, cfg.layers);
    state.token_ids = x.ids;
    // tracker index of every patch row of x
    std::vector<std::size_t> entry(entering);
    for (std::size_t i = 0; i < entering; ++i) {
        entry[i] = i;
    }

    for (std::size_t layer = 1; layer <= cfg.layers; ++layer) {
        const std::size_t alive = x.alive_count();
        state.alive_per_layer.push_back(alive);
        out.trace.joint_tokens.push_back(alive + 1);

        x = joint_block(x, params.blocks[layer - 1]);

        const std::size_t rows = x.patch_rows() + 1;
        Tensor<T> h = hcfg.enabled ? halting_scores(x.tokens, hcfg) : Tensor<T>::zeros({rows, 1});

        state.class_snapshots.push_back({layer, element(h, 0), gather_rows(x.tokens, {0})});
        const double hc = static_cast<double>(h[0]);
        const bool class_halts = !state.cls.update(layer, std::vector<std::size_t>{0},
                                                   std::vector<double>{hc})
                                      .empty();

        std::vector<std::size_t> ids;
        std::vector<double> scores;
        std::vector<std::size_t> running_rows;
        for (std::size_t i = 0; i < x.patch_rows(); ++i) {
            if (x.alive[i]) {
                ids.push_back(entry[i]);
                scores.push_back(static_cast<double>(h[i + 1]));
                running_rows.push_back(i);
            }
        }
        if (class_halts) {
            for (std::size_t k : ids) {
                state.patches.force_halt(k, layer);
            }
        } else {
            state.patches.update(layer, ids, scores);
        }

        LayerScores<T> ls{h, std::vector<T>(rows, T(0))};
        for (std::size_t r : running_rows) {
            ls.continuing[r + 1] = state.patches.running(entry[r]) ? T(1) : T(0);
        }
        state.layer_scores.push_back(std::move(ls));

        if (class_halts) {
            break;
        }
        // Remove the tokens that halted at this layer.
        if (opts.mode == ForwardMode::gather) {
            std::vector<std::size_t> keep;
            for (std::size_t i = 0; i < x.patch_rows(); ++i) {
                if (state.patches.running(entry[i])) {
                    keep.push_back(i);
                }
            }
            if (keep.size() != x.patch_rows()) {
                std::vector<std::size_t> next_entry;
                for (std::size_t i : keep) {
                    next_entry.push_back(entry[i]);
                }
                entry = std::move(next_entry);
                x = keep_patch_rows(x, keep);
            }
        } else {
            for (std::size_t i = 0; i < x.patch_rows(); ++i) {
                if (!state.patches.running(entry[i])) {
                    x.alive[i] = 0;
                }
            }
        }
    }

    for (std::size_t k = 0; k < entering; ++k) {
        out.halt_map[state.token_ids[k]] = state.patches.halted_at()[k];
    }

    state.readout = class_readout(state.class_snapshots);
    auto features = params.head_norm(state.readout);
    out.logits = params.classifier(features);
    out.trace.head_outputs = cfg.classes;
    if (opts.motion_head) {
        out.motion_logits = params.motion_head(features);
        out.trace.head_outputs += 2;
    }
    return out;
}

// Patch embedding followed by forward().
template <typename T>
ForwardResult<T> run_clip(const VideoClip& clip, const ModelParams<T>& params, const ModelConfig& cfg,
                          const ForwardOptions& opts = {}) {
    return forward(patch_embed(clip, cfg.patch, params.embed), params, cfg, opts);
}

template <typename T>
std::size_t argmax(const Tensor<T>& logits) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i) {
        if (logits[i] > logits[best]) {
            best = i;
        }
    }
    return best;
}

}  // namespace haltingvt
