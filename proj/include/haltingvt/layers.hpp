#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "haltingvt/checkpoint.hpp"
#include "haltingvt/ops.hpp"
#include "haltingvt/rng.hpp"

namespace haltingvt {

template <typename T>
std::vector<T> normal_values(SeededRng& rng, std::size_t n, double stddev) {
    std::vector<T> v(n);
    for (T& x : v) {
        x = static_cast<T>(rng.normal(0.0, stddev));
    }
    return v;
}

// y = x W + b, W stored [in, out].
template <typename T>
struct Linear {
    Tensor<T> weight;
    Tensor<T> bias;

    static Linear init(SeededRng& rng, std::size_t in, std::size_t out) {
        const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
        std::vector<T> w(in * out);
        for (T& x : w) {
            x = static_cast<T>(rng.uniform(-limit, limit));
        }
        return {Tensor<T>::parameter({in, out}, std::move(w)),
                Tensor<T>::parameter({out}, std::vector<T>(out, T(0)))};
    }

    std::size_t in_features() const { return weight.rows(); }
    std::size_t out_features() const { return weight.cols(); }

    Tensor<T> operator()(const Tensor<T>& x) const { return add_row(matmul(x, weight), bias); }

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".weight", weight);
        f(prefix + ".bias", bias);
    }
};

template <typename T>
struct LayerNormParams {
    Tensor<T> gain;
    Tensor<T> bias;

    static LayerNormParams init(std::size_t dim) {
        return {Tensor<T>::parameter({dim}, std::vector<T>(dim, T(1))),
                Tensor<T>::parameter({dim}, std::vector<T>(dim, T(0)))};
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gain, bias); }

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".gain", gain);
        f(prefix + ".bias", bias);
    }
};

// Collects every parameter of a visitable params struct, in visit order.
template <typename T, typename Params>
NamedTensors<T> named_parameters(Params& params) {
    NamedTensors<T> out;
    params.visit("", [&out](const std::string& name, Tensor<T>& t) {
        out.emplace_back(name.starts_with(".") ? name.substr(1) : name, t);
    });
    return out;
}

}  // namespace haltingvt
