#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "haltingvt/training.hpp"

namespace hvt_test {

using haltingvt::SeededRng;
using haltingvt::Tape;
using haltingvt::Tensor;

inline Tensor<double> random_tensor(SeededRng& rng, haltingvt::Shape shape, double scale = 1.0,
                                    bool requires_grad = true) {
    std::vector<double> v(haltingvt::shape_size(shape));
    for (double& x : v) {
        x = rng.normal(0.0, scale);
    }
    return Tensor<double>::from(std::move(shape), std::move(v), requires_grad);
}

// Largest |analytic - fd| / (|fd| + |analytic| + floor) over every entry of every input.
inline double max_grad_error(std::vector<Tensor<double>> inputs,
                             const std::function<Tensor<double>()>& loss, double step = 1e-5,
                             double floor = 1e-6) {
    {
        Tape<double> tape;
        Tape<double>::Scope scope(tape);
        for (auto& t : inputs) {
            t.zero_grad();
        }
        tape.backward(loss());
    }
    double worst = 0.0;
    for (auto& t : inputs) {
        const std::vector<double> analytic(t.grad().begin(), t.grad().end());
        for (std::size_t i = 0; i < t.size(); ++i) {
            auto w = t.mutable_values();
            const double old = w[i];
            w[i] = old + step;
            const double up = loss().item();
            w[i] = old - step;
            const double down = loss().item();
            w[i] = old;
            const double fd = (up - down) / (2.0 * step);
            const double an = analytic.empty() ? 0.0 : analytic[i];
            worst = std::max(worst, std::abs(an - fd) / (std::abs(fd) + std::abs(an) + floor));
        }
    }
    return worst;
}

inline haltingvt::ModelConfig tiny_config() {
    haltingvt::ModelConfig cfg;
    cfg.layers = 2;
    cfg.dim = 16;
    cfg.heads = 2;
    cfg.patch = 4;
    cfg.frames = 2;
    cfg.height = 8;
    cfg.width = 8;
    cfg.classes = 3;
    cfg.halting.gamma = 1.0;
    cfg.halting.beta = -0.5;
    return cfg;
}

inline haltingvt::VideoClip random_clip(const haltingvt::ModelConfig& cfg, SeededRng& rng, std::size_t label = 0) {
    haltingvt::VideoClip clip{cfg.frames, cfg.height, cfg.width, cfg.channels, {}, label, "random"};
    clip.pixels.resize(cfg.frames * cfg.height * cfg.width * cfg.channels);
    for (float& p : clip.pixels) {
        p = static_cast<float>(rng.uniform());
    }
    return clip;
}

}  // namespace hvt_test
