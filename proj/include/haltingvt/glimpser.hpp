#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "haltingvt/blocks.hpp"

namespace haltingvt {

// Class-token attention mass on each alive patch token, taken from the
// spatial sub-attention of a divided block and averaged over heads.
struct Attentiveness {
    std::vector<double> w;               // per patch row of the scored batch
    std::vector<std::size_t> frame_of;   // per patch row
    std::vector<double> class_self;      // per frame: class-token self weight
};

struct GlimpseConfig {
    double keep_ratio = 1.0;

    void validate() const {
        if (!(keep_ratio > 0.0 && keep_ratio <= 1.0)) {
            throw std::invalid_argument("glimpser.R must be in (0, 1]");
        }
    }
};

// max(1, round(R * n)), rounding half away from zero.
inline std::size_t keep_count(double keep_ratio, std::size_t patches_per_frame) {
    const auto k = static_cast<std::size_t>(std::round(keep_ratio * static_cast<double>(patches_per_frame)));
    return std::clamp<std::size_t>(k, 1, std::max<std::size_t>(patches_per_frame, 1));
}

template <typename T>
struct GlimpserParams {
    std::array<DividedBlockParams<T>, 2> layers;

    static GlimpserParams init(SeededRng& rng, std::size_t dim, std::size_t heads) {
        auto first = DividedBlockParams<T>::init(rng, dim, heads);
        auto second = DividedBlockParams<T>::init(rng, dim, heads);
        return {{std::move(first), std::move(second)}};
    }

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        layers[0].visit(prefix + ".0", f);
        layers[1].visit(prefix + ".1", f);
    }
};

// Converts the class-token probe of a divided block's spatial step into per-patch scores.
template <typename T>
Attentiveness attentiveness_from_probe(const TokenBatch<T>& batch, const AttentionProbe& probe) {
    const auto layout = make_layout(batch, AttentionScope::per_frame);
    Attentiveness a;
    a.w.assign(batch.patch_rows(), 0.0);
    a.frame_of.resize(batch.patch_rows());
    a.class_self.assign(batch.grid.frames, 0.0);
    for (std::size_t i = 0; i < batch.patch_rows(); ++i) {
        a.frame_of[i] = batch.position(i).frame;
    }
    for (std::size_t k = 0; k < probe.groups.size(); ++k) {
        const auto& members = layout.groups[probe.groups[k]].members;
        const auto& weights = probe.weights[k];
        for (std::size_t j = 0; j < members.size(); ++j) {
            if (members[j] == 0) {
                continue;
            }
            a.w[members[j] - 1] = weights[j];
        }
        // Every per-frame group starts with the class token.
        if (members.size() > 1) {
            a.class_self[batch.position(members[1] - 1).frame] = weights[0];
        }
    }
    return a;
}

// Runs a divided block and reports class-token attentiveness of its spatial step.
template <typename T>
std::pair<TokenBatch<T>, Attentiveness> attentiveness(const TokenBatch<T>& batch,
                                                      const DividedBlockParams<T>& second_layer) {
    AttentionProbe probe;
    auto out = divided_block(batch, second_layer, &probe);
    return {std::move(out), attentiveness_from_probe(batch, probe)};
}

// Per frame, the `keep` patch rows with highest score; ties go to the lower
// token index. Returned rows are sorted ascending.
inline std::vector<std::size_t> top_k_per_frame(const Attentiveness& a, const std::vector<std::size_t>& ids,
                                                std::size_t frames, std::size_t keep) {
    std::vector<std::vector<std::size_t>> by_frame(frames);
    for (std::size_t i = 0; i < a.w.size(); ++i) {
        by_frame[a.frame_of[i]].push_back(i);
    }
    std::vector<std::size_t> kept;
    for (auto& rows : by_frame) {
        std::stable_sort(rows.begin(), rows.end(), [&](std::size_t l, std::size_t r) {
            if (a.w[l] != a.w[r]) {
                return a.w[l] > a.w[r];
            }
            return ids[l] < ids[r];
        });
        rows.resize(std::min(keep, rows.size()));
        kept.insert(kept.end(), rows.begin(), rows.end());
    }
    std::sort(kept.begin(), kept.end());
    return kept;
}

template <typename T>
struct GlimpseResult {
    TokenBatch<T> tokens;
    Attentiveness scores;
    std::vector<std::size_t> kept_ids;
    std::size_t keep_per_frame = 0;
};

// Two divided layers, then keep the top keep_count patches per frame by
// attentiveness. Dropped tokens are physically removed.
template <typename T>
GlimpseResult<T> glimpse(const TokenBatch<T>& batch, const GlimpserParams<T>& params,
                         const GlimpseConfig& cfg) {
    cfg.validate();
    if (!batch.all_alive()) {
        throw std::invalid_argument("glimpse: expects a fresh token batch");
    }
    auto first = divided_block(batch, params.layers[0]);
    auto [second, scores] = attentiveness(first, params.layers[1]);
    GlimpseResult<T> result;
    result.keep_per_frame = keep_count(cfg.keep_ratio, batch.grid.per_frame());
    const auto kept_rows = top_k_per_frame(scores, second.ids, batch.grid.frames, result.keep_per_frame);
    result.tokens = kept_rows.size() == second.patch_rows() ? second : keep_patch_rows(second, kept_rows);
    result.kept_ids = result.tokens.ids;
    result.scores = std::move(scores);
    return result;
}

}  // namespace haltingvt
