#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "haltingvt/video.hpp"

namespace haltingvt {

template <typename T>
struct AttentionParams {
    LayerNormParams<T> norm;
    Linear<T> qkv;   // [D, 3D]
    Linear<T> proj;  // [D, D]
    std::size_t heads = 1;

    static AttentionParams init(SeededRng& rng, std::size_t dim, std::size_t heads) {
        if (heads == 0 || dim % heads != 0) {
            throw ShapeError("attention", "dim " + std::to_string(dim) + " not divisible by " +
                                              std::to_string(heads) + " heads");
        }
        return {LayerNormParams<T>::init(dim), Linear<T>::init(rng, dim, 3 * dim),
                Linear<T>::init(rng, dim, dim), heads};
    }

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        norm.visit(prefix + ".norm", f);
        qkv.visit(prefix + ".qkv", f);
        proj.visit(prefix + ".proj", f);
    }
};

template <typename T>
struct MlpParams {
    LayerNormParams<T> norm;
    Linear<T> fc1;  // [D, 4D]
    Linear<T> fc2;  // [4D, D]

    static MlpParams init(SeededRng& rng, std::size_t dim) {
        return {LayerNormParams<T>::init(dim), Linear<T>::init(rng, dim, 4 * dim),
                Linear<T>::init(rng, 4 * dim, dim)};
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return fc2(gelu(fc1(norm(x)))); }

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        norm.visit(prefix + ".norm", f);
        fc1.visit(prefix + ".fc1", f);
        fc2.visit(prefix + ".fc2", f);
    }
};

// Joint space-time block.
template <typename T>
struct BlockParams {
    AttentionParams<T> attn;
    MlpParams<T> mlp;

    static BlockParams init(SeededRng& rng, std::size_t dim, std::size_t heads) {
        auto attn = AttentionParams<T>::init(rng, dim, heads);
        return {std::move(attn), MlpParams<T>::init(rng, dim)};
    }

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        attn.visit(prefix + ".attn", f);
        mlp.visit(prefix + ".mlp", f);
    }
};

// Divided space-time block: temporal attention, spatial attention, MLP.
template <typename T>
struct DividedBlockParams {
    AttentionParams<T> temporal;
    AttentionParams<T> spatial;
    MlpParams<T> mlp;

    static DividedBlockParams init(SeededRng& rng, std::size_t dim, std::size_t heads) {
        auto temporal = AttentionParams<T>::init(rng, dim, heads);
        auto spatial = AttentionParams<T>::init(rng, dim, heads);
        return {std::move(temporal), std::move(spatial), MlpParams<T>::init(rng, dim)};
    }

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        temporal.visit(prefix + ".temporal", f);
        spatial.visit(prefix + ".spatial", f);
        mlp.visit(prefix + ".mlp", f);
    }
};

enum class AttentionScope { all_tokens, per_frame, per_spatial_position };

// Rows of the token matrix that are alive (class token included).
template <typename T>
std::vector<std::uint8_t> alive_rows(const TokenBatch<T>& batch) {
    std::vector<std::uint8_t> rows(batch.patch_rows() + 1, 1);
    for (std::size_t i = 0; i < batch.patch_rows(); ++i) {
        rows[i + 1] = batch.alive[i];
    }
    return rows;
}

// Groups for one attention scope. Non-alive rows stay in their group as
// (discarded) queries but are masked out as keys; groups without any alive
// member are skipped. The class token joins all-tokens and every per-frame
// group and is absent from the per-spatial-position scope.
template <typename T>
AttentionLayout make_layout(const TokenBatch<T>& batch, AttentionScope scope) {
    AttentionLayout layout;
    layout.rows = batch.patch_rows() + 1;
    const bool dense = batch.all_alive();
    auto add_group = [&](std::vector<std::size_t> members) {
        AttentionGroup g;
        bool live = false;
        if (!dense) {
            g.key_mask.resize(members.size());
        }
        for (std::size_t i = 0; i < members.size(); ++i) {
            const bool a = members[i] == 0 || batch.alive[members[i] - 1];
            live = live || a;
            if (!dense) {
                g.key_mask[i] = a ? 1 : 0;
            }
        }
        if (live) {
            g.members = std::move(members);
            layout.groups.push_back(std::move(g));
        }
    };
    switch (scope) {
        case AttentionScope::all_tokens: {
            std::vector<std::size_t> members(layout.rows);
            for (std::size_t i = 0; i < members.size(); ++i) {
                members[i] = i;
            }
            add_group(std::move(members));
            break;
        }
        case AttentionScope::per_frame: {
            std::vector<std::vector<std::size_t>> frames(batch.grid.frames, std::vector<std::size_t>{0});
            for (std::size_t i = 0; i < batch.patch_rows(); ++i) {
                frames[batch.position(i).frame].push_back(i + 1);
            }
            for (auto& f : frames) {
                if (f.size() > 1) {
                    add_group(std::move(f));
                }
            }
            break;
        }
        case AttentionScope::per_spatial_position: {
            std::vector<std::vector<std::size_t>> cells(batch.grid.per_frame());
            for (std::size_t i = 0; i < batch.patch_rows(); ++i) {
                const auto p = batch.position(i);
                cells[p.row * batch.grid.cols + p.col].push_back(i + 1);
            }
            for (auto& c : cells) {
                if (!c.empty()) {
                    add_group(std::move(c));
                }
            }
            break;
        }
    }
    return layout;
}

// Rows that receive an update from the given layout: alive rows that are a
// member of at least one group.
template <typename T>
std::vector<std::uint8_t> updated_rows(const TokenBatch<T>& batch, const AttentionLayout& layout) {
    const auto alive = alive_rows(batch);
    std::vector<std::uint8_t> rows(layout.rows, 0);
    for (const auto& g : layout.groups) {
        for (std::size_t r : g.members) {
            rows[r] = alive[r];
        }
    }
    return rows;
}

namespace detail {

inline bool all_set(const std::vector<std::uint8_t>& v) {
    for (auto x : v) {
        if (!x) {
            return false;
        }
    }
    return true;
}

// x + branch on the rows flagged in `rows`, x elsewhere.
template <typename T>
Tensor<T> residual(const Tensor<T>& x, const Tensor<T>& branch, const std::vector<std::uint8_t>& rows) {
    auto sum = add(x, branch);
    return all_set(rows) ? sum : where_rows(rows, sum, x);
}

}  // namespace detail

// proj(Attention(LN(x))) over the layout's groups.
template <typename T>
Tensor<T> attention_branch(const Tensor<T>& x, const AttentionParams<T>& params,
                           const AttentionLayout& layout, AttentionProbe* probe = nullptr) {
    auto qkv = params.qkv(params.norm(x));
    return params.proj(grouped_attention(qkv, params.heads, layout, probe));
}

// Each alive token is replaced by its attention output; non-alive tokens are untouched.
template <typename T>
TokenBatch<T> multihead_attention(const TokenBatch<T>& batch, const AttentionParams<T>& params,
                                  AttentionScope scope, AttentionProbe* probe = nullptr) {
    const auto layout = make_layout(batch, scope);
    const auto rows = updated_rows(batch, layout);
    auto out = attention_branch(batch.tokens, params, layout, probe);
    return batch.with_tokens(detail::all_set(rows) ? out : where_rows(rows, out, batch.tokens));
}

// Pre-norm joint space-time block: x + MHA(LN(x)), then + MLP(LN(.)), alive rows only.
template <typename T>
TokenBatch<T> joint_block(const TokenBatch<T>& batch, const BlockParams<T>& params) {
    const auto layout = make_layout(batch, AttentionScope::all_tokens);
    const auto rows = alive_rows(batch);
    auto x = detail::residual(batch.tokens, attention_branch(batch.tokens, params.attn, layout), rows);
    x = detail::residual(x, params.mlp(x), rows);
    return batch.with_tokens(std::move(x));
}

class AlignmentError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Temporal attention (per spatial position, class token passes through), then
// spatial attention (per frame, class token in every frame group with its
// outputs averaged over frames), then MLP; each pre-norm with residual.
// `class_probe`, when given, receives the class token's spatial attention rows.
template <typename T>
TokenBatch<T> divided_block(const TokenBatch<T>& batch, const DividedBlockParams<T>& params,
                            AttentionProbe* class_probe = nullptr) {
    const auto counts = batch.frame_token_counts();
    for (std::size_t c : counts) {
        if (c != counts.front()) {
            throw AlignmentError("divided_block: unequal per-frame alive token counts");
        }
    }
    const auto alive = alive_rows(batch);

    const auto temporal = make_layout(batch, AttentionScope::per_spatial_position);
    auto x = detail::residual(batch.tokens, attention_branch(batch.tokens, params.temporal, temporal),
                              updated_rows(batch, temporal));

    const auto spatial = make_layout(batch, AttentionScope::per_frame);
    if (class_probe != nullptr) {
        class_probe->query_row = 0;
    }
    x = detail::residual(x, attention_branch(x, params.spatial, spatial, class_probe),
                         updated_rows(batch, spatial));
    x = detail::residual(x, params.mlp(x), alive);
    return batch.with_tokens(std::move(x));
}

}  // namespace haltingvt
