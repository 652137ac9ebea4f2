#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "haltingvt/ops.hpp"

namespace haltingvt {

struct HaltingConfig {
    double gamma = 10.0;
    double beta = 10.0;
    double epsilon = 0.01;
    std::size_t layers = 4;
    bool enabled = true;

    void validate() const {
        if (!(epsilon > 0.0 && epsilon < 1.0)) {
            throw std::invalid_argument("halting.epsilon must be in (0, 1)");
        }
        if (layers < 1) {
            throw std::invalid_argument("model.layers must be >= 1");
        }
        if (!std::isfinite(gamma) || !std::isfinite(beta)) {
            throw std::invalid_argument("halting.gamma and halting.beta must be finite");
        }
    }
};

class HaltingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Cumulative halting rule for a fixed set of tokens. A token halts at the
// first layer where its running score sum reaches 1 - epsilon; at the last
// layer every running token's score is taken as 1. The remainder is one minus
// the sum of the scores of the layers before the halting layer.
class HaltingTracker {
public:
    HaltingTracker() = default;
    HaltingTracker(std::size_t tokens, double epsilon, std::size_t layers)
        : epsilon_(epsilon), layers_(layers), cumulative_(tokens, 0.0), halted_at_(tokens, 0),
          remainder_(tokens, 0.0) {}

    std::size_t size() const { return cumulative_.size(); }
    std::size_t layers() const { return layers_; }
    bool running(std::size_t k) const { return halted_at_[k] == 0; }

    // Scores of layer `layer` for the listed running tokens. Returns the
    // tokens that halt at this layer.
    std::vector<std::size_t> update(std::size_t layer, std::span<const std::size_t> tokens,
                                    std::span<const double> scores) {
        if (layer < 1 || layer > layers_) {
            throw HaltingError("update_halting: layer " + std::to_string(layer) + " outside [1, " +
                               std::to_string(layers_) + "]");
        }
        if (tokens.size() != scores.size()) {
            throw HaltingError("update_halting: token/score count mismatch");
        }
        std::vector<std::size_t> halted;
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            const std::size_t k = tokens[i];
            if (!running(k)) {
                throw HaltingError("update_halting: token " + std::to_string(k) + " already halted");
            }
            const double s = scores[i];
            // Exact zero is accepted: it is what sigmoid underflow produces.
            if (!(s >= 0.0 && s <= 1.0)) {
                throw HaltingError("update_halting: halting score " + std::to_string(s) +
                                   " outside (0, 1]");
            }
            const double h = layer == layers_ ? 1.0 : s;
            if (cumulative_[k] + h >= 1.0 - epsilon_) {
                halted_at_[k] = layer;
                remainder_[k] = 1.0 - cumulative_[k];
                halted.push_back(k);
            } else {
                cumulative_[k] += h;
            }
        }
        return halted;
    }

    // Stops a running token at `layer` without consuming that layer's score.
    void force_halt(std::size_t k, std::size_t layer) {
        if (!running(k)) {
            throw HaltingError("force_halt: token " + std::to_string(k) + " already halted");
        }
        halted_at_[k] = layer;
        remainder_[k] = 1.0 - cumulative_[k];
    }

    const std::vector<double>& cumulative() const { return cumulative_; }
    const std::vector<std::size_t>& halted_at() const { return halted_at_; }
    const std::vector<double>& remainder() const { return remainder_; }

    bool all_halted() const {
        for (std::size_t n : halted_at_) {
            if (n == 0) {
                return false;
            }
        }
        return true;
    }

    // (1/K) sum_k (N_k + r_k).
    double ponder() const {
        if (!all_halted()) {
            throw HaltingError("ponder_loss: a token has no halting layer");
        }
        if (size() == 0) {
            throw HaltingError("ponder_loss: no tokens");
        }
        double total = 0.0;
        for (std::size_t k = 0; k < size(); ++k) {
            total += static_cast<double>(halted_at_[k]) + remainder_[k];
        }
        return total / static_cast<double>(size());
    }

private:
    double epsilon_ = 0.01;
    std::size_t layers_ = 1;
    std::vector<double> cumulative_;
    std::vector<std::size_t> halted_at_;
    std::vector<double> remainder_;
};

// sigmoid(gamma * x[:, 0] + beta) for every row of a token matrix, as [n, 1].
template <typename T>
Tensor<T> halting_scores(const Tensor<T>& tokens, const HaltingConfig& cfg) {
    return sigmoid(affine(column(tokens, 0), static_cast<T>(cfg.gamma), static_cast<T>(cfg.beta)));
}

template <typename T>
struct ClassSnapshot {
    std::size_t layer = 0;
    Tensor<T> score;  // [1], h_c at this layer
    Tensor<T> token;  // [1, D], class token after this layer
};

// Scores of one joint layer, kept for the differentiable ponder term.
template <typename T>
struct LayerScores {
    Tensor<T> scores;                   // [rows, 1]; row 0 is the class token
    std::vector<T> continuing;          // 1 for patch rows still running after this layer
};

template <typename T>
struct HaltingState {
    HaltingTracker patches;             // indexed by entry order into the joint transformer
    HaltingTracker cls;                 // single entry: the class token
    std::vector<std::size_t> token_ids; // original grid index per tracker entry
    std::vector<ClassSnapshot<T>> class_snapshots;
    std::vector<LayerScores<T>> layer_scores;
    std::vector<std::size_t> alive_per_layer;  // patch tokens entering each executed layer
    Tensor<T> readout;

    std::size_t class_halt() const { return cls.halted_at().at(0); }
    double class_remainder() const { return cls.remainder().at(0); }
    std::size_t executed_layers() const { return alive_per_layer.size(); }

    double mean_depth() const {
        double total = 0.0;
        for (std::size_t n : patches.halted_at()) {
            total += static_cast<double>(n);
        }
        return patches.size() ? total / static_cast<double>(patches.size()) : 0.0;
    }
};

// L_ponder = (1/K) sum_k (N_k + r_k), differentiable through the remainders.
// With r_k = 1 - sum_{l < N_k} h_k^l this equals
// (sum_k N_k + K - sum_l sum_{k running after l} h_k^l) / K.
template <typename T>
Tensor<T> ponder_loss(const HaltingState<T>& state) {
    const HaltingTracker& tr = state.patches;
    if (!tr.all_halted() || tr.size() == 0) {
        throw HaltingError("ponder_loss: a token has no halting layer");
    }
    double constant = static_cast<double>(tr.size());
    for (std::size_t n : tr.halted_at()) {
        constant += static_cast<double>(n);
    }
    Tensor<T> consumed;
    for (const auto& ls : state.layer_scores) {
        auto mask = Tensor<T>::from(ls.scores.shape(), ls.continuing);
        auto part = sum(mul(ls.scores, mask));
        consumed = consumed.defined() ? add(consumed, part) : part;
    }
    const T inv_k = T(1) / static_cast<T>(tr.size());
    if (!consumed.defined()) {
        return Tensor<T>::scalar(static_cast<T>(constant) * inv_k);
    }
    return scale(shift(scale(consumed, T(-1)), static_cast<T>(constant)), inv_k);
}

// x_o = sum_{l < N_c} h_c^l x_c^l + r_c x_c^{N_c}, with r_c = 1 - sum_{l < N_c} h_c^l.
template <typename T>
Tensor<T> class_readout(const std::vector<ClassSnapshot<T>>& snapshots) {
    if (snapshots.empty()) {
        throw HaltingError("class_readout: no class-token snapshots");
    }
    if (snapshots.size() == 1) {
        return snapshots.front().token;
    }
    Tensor<T> acc, used;
    for (std::size_t i = 0; i + 1 < snapshots.size(); ++i) {
        auto term = mul_scalar(snapshots[i].token, snapshots[i].score);
        acc = acc.defined() ? add(acc, term) : term;
        used = used.defined() ? add(used, snapshots[i].score) : snapshots[i].score;
    }
    auto remainder = shift(scale(used, T(-1)), T(1));
    return add(acc, mul_scalar(snapshots.back().token, remainder));
}

}  // namespace haltingvt
