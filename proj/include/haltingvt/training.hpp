#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <numbers>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "haltingvt/model.hpp"

namespace haltingvt {

// ---------------------------------------------------------------------------
// Losses

struct LossWeights {
    double alpha_p = 5e-4;
    double alpha_m = 0.01;
};

template <typename T>
struct LossBundle {
    Tensor<T> task;
    Tensor<T> ponder;
    Tensor<T> motion;
    Tensor<T> overall;
    double alpha_p = 0.0;
    double alpha_m = 0.0;
};

class NonFiniteLoss : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

template <typename T>
Tensor<T> task_loss(const Tensor<T>& logits, std::size_t label) {
    return cross_entropy(logits, label);
}

// Mean of the real clip's CE against "positive" and the fake clip's CE against "negative".
template <typename T>
Tensor<T> motion_loss(const Tensor<T>& real_logits, const Tensor<T>& fake_logits) {
    auto real = cross_entropy(real_logits, static_cast<std::size_t>(MotionLabel::positive));
    auto fake = cross_entropy(fake_logits, static_cast<std::size_t>(MotionLabel::negative));
    return scale(add(real, fake), T(0.5));
}

// overall = task + alpha_p * ponder + alpha_m * motion.
template <typename T>
LossBundle<T> overall_loss(const Tensor<T>& task, const Tensor<T>& ponder, const Tensor<T>& motion,
                           const LossWeights& w) {
    const std::pair<const char*, const Tensor<T>*> parts[] = {
        {"task", &task}, {"ponder", &ponder}, {"motion", &motion}};
    for (const auto& [name, t] : parts) {
        if (!std::isfinite(static_cast<double>(t->item()))) {
            throw NonFiniteLoss(std::string("overall_loss: non-finite ") + name + " loss");
        }
    }
    auto overall = add(add(task, scale(ponder, static_cast<T>(w.alpha_p))),
                       scale(motion, static_cast<T>(w.alpha_m)));
    return {task, ponder, motion, overall, w.alpha_p, w.alpha_m};
}

// ---------------------------------------------------------------------------
// Optimization

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <typename T>
class Adam {
public:
    Adam(NamedTensors<T> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
        for (auto& [name, p] : params_) {
            m_.emplace_back(p.size(), 0.0);
            v_.emplace_back(p.size(), 0.0);
        }
    }

    void step(double lr) {
        ++steps_;
        const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
        const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i].second;
            const auto g = p.grad();
            if (g.empty()) {
                continue;
            }
            auto w = p.mutable_values();
            for (std::size_t j = 0; j < w.size(); ++j) {
                const double gj = static_cast<double>(g[j]);
                m_[i][j] = cfg_.beta1 * m_[i][j] + (1.0 - cfg_.beta1) * gj;
                v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * gj * gj;
                const double update = lr * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + cfg_.eps);
                w[j] = static_cast<T>(static_cast<double>(w[j]) - update);
            }
        }
    }

    void zero_grad() {
        for (auto& [name, p] : params_) {
            p.zero_grad();
        }
    }

    std::size_t steps() const { return steps_; }

private:
    NamedTensors<T> params_;
    AdamConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t steps_ = 0;
};

// Rescales all gradients so their global L2 norm is at most max_norm; returns the pre-clip norm.
template <typename T>
double clip_grad_norm(NamedTensors<T>& params, double max_norm) {
    double sq = 0.0;
    for (auto& [name, p] : params) {
        for (T g : p.grad()) {
            sq += static_cast<double>(g) * static_cast<double>(g);
        }
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const T factor = static_cast<T>(max_norm / (norm + 1e-12));
        for (auto& [name, p] : params) {
            if (!p.grad().empty()) {
                for (T& g : p.mutable_grad()) {
                    g *= factor;
                }
            }
        }
    }
    return norm;
}

inline double cosine_lr(double base, double floor, std::size_t step, std::size_t total) {
    if (total == 0) {
        return base;
    }
    const double progress = static_cast<double>(step) / static_cast<double>(total);
    return floor + 0.5 * (base - floor) * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---------------------------------------------------------------------------
// Training loop

enum class Stage { base, halting };

inline const char* stage_name(Stage s) { return s == Stage::base ? "base" : "halting"; }

struct TrainConfig {
    double learning_rate = 1e-5;
    double min_learning_rate = 0.0;
    AdamConfig adam;
    std::size_t epochs = 1;
    std::size_t base_epochs = 0;  // base-stage epochs run before a halting stage
    std::size_t batch_size = 8;
    Stage stage = Stage::halting;
    std::uint64_t seed = 0;
    double clip_norm = 1.0;
    ForwardMode mode = ForwardMode::mask;

    void validate() const {
        if (!(learning_rate >= 0.0) || !(min_learning_rate >= 0.0) || min_learning_rate > learning_rate) {
            throw std::invalid_argument("training.learning_rate must be >= min_learning_rate >= 0");
        }
        if (batch_size == 0) {
            throw std::invalid_argument("training.batch_size must be >= 1");
        }
        if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
            throw std::invalid_argument("training.adam_beta1/2 must be in [0, 1)");
        }
    }
};

struct EpochMetrics {
    std::size_t epoch = 0;
    Stage stage = Stage::base;
    double task = 0.0;
    double ponder = 0.0;
    double motion = 0.0;
    double train_acc = 0.0;
    double mean_gflops = 0.0;
};

inline const char* metrics_csv_header() {
    return "epoch,stage,task_loss,ponder_loss,motion_loss,train_acc,mean_gflops";
}

inline std::string metrics_csv_row(const EpochMetrics& m) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%zu,%s,%.9g,%.9g,%.9g,%.9g,%.9g", m.epoch, stage_name(m.stage), m.task,
                  m.ponder, m.motion, m.train_acc, m.mean_gflops);
    return buf;
}

struct TrainHooks {
    std::function<void(const EpochMetrics&)> on_epoch;
};

struct TrainResult {
    std::vector<EpochMetrics> metrics;
    bool diverged = false;
    std::string divergence;
};

// Configuration used by the base stage: halting off, every token runs all layers.
inline ModelConfig without_halting(ModelConfig cfg) {
    cfg.halting.enabled = false;
    return cfg;
}

template <typename T>
TrainResult train(ModelParams<T>& params, const ModelConfig& model_cfg, const std::vector<VideoClip>& data,
                  const TrainConfig& cfg, const LossWeights& weights, const TrainHooks& hooks = {}) {
    cfg.validate();
    model_cfg.validate();
    if (data.empty()) {
        throw std::invalid_argument("train: empty dataset");
    }
    struct Phase {
        Stage stage;
        std::size_t epochs;
    };
    std::vector<Phase> phases;
    if (cfg.stage == Stage::base) {
        phases.push_back({Stage::base, cfg.epochs});
    } else {
        if (cfg.base_epochs > 0) {
            phases.push_back({Stage::base, cfg.base_epochs});
        }
        phases.push_back({Stage::halting, cfg.epochs});
    }

    SeededRng rng(cfg.seed);
    auto named = params.named();
    TrainResult result;
    std::size_t epoch_counter = 0;
    const std::size_t batches = (data.size() + cfg.batch_size - 1) / cfg.batch_size;

    for (const Phase& phase : phases) {
        Adam<T> opt(named, cfg.adam);
        opt.zero_grad();
        const ModelConfig run_cfg = phase.stage == Stage::base ? without_halting(model_cfg) : model_cfg;
        const std::size_t total_steps = phase.epochs * batches;
        std::size_t step = 0;
        for (std::size_t e = 0; e < phase.epochs; ++e) {
            std::vector<std::size_t> order(data.size());
            std::iota(order.begin(), order.end(), std::size_t{0});
            rng.shuffle(order.begin(), order.end());

            EpochMetrics m;
            m.epoch = ++epoch_counter;
            m.stage = phase.stage;
            std::size_t correct = 0;
            for (std::size_t b = 0; b < batches; ++b) {
                const std::size_t lo = b * cfg.batch_size;
                const std::size_t hi = std::min(data.size(), lo + cfg.batch_size);
                const T inv_batch = T(1) / static_cast<T>(hi - lo);
                for (std::size_t i = lo; i < hi; ++i) {
                    const VideoClip& clip = data[order[i]];
                    Tape<T> tape;
                    typename Tape<T>::Scope scope(tape);
                    Tensor<T> loss;
                    ForwardResult<T> real;
                    if (phase.stage == Stage::base) {
                        real = run_clip(clip, params, run_cfg, {cfg.mode, false});
                        loss = task_loss(real.logits, clip.label);
                        m.task += static_cast<double>(loss.item());
                        if (!std::isfinite(m.task)) {
                            result.diverged = true;
                            result.divergence = "non-finite task loss in epoch " + std::to_string(m.epoch);
                            return result;
                        }
                    } else {
                        const SamplePair pair = make_pair(clip, rng);
                        real = run_clip(pair.real, params, run_cfg, {cfg.mode, true});
                        auto fake = run_clip(pair.fake, params, run_cfg, {cfg.mode, true});
                        auto ponder = scale(add(ponder_loss(real.halting), ponder_loss(fake.halting)), T(0.5));
                        LossBundle<T> bundle;
                        try {
                            bundle = overall_loss(task_loss(real.logits, clip.label), ponder,
                                                  motion_loss(real.motion_logits, fake.motion_logits), weights);
                        } catch (const NonFiniteLoss& err) {
                            result.diverged = true;
                            result.divergence = err.what();
                            return result;
                        }
                        loss = bundle.overall;
                        m.task += static_cast<double>(bundle.task.item());
                        m.ponder += static_cast<double>(bundle.ponder.item());
                        m.motion += static_cast<double>(bundle.motion.item());
                    }
                    correct += argmax(real.logits) == clip.label ? 1 : 0;
                    m.mean_gflops += profile(real.trace, run_cfg).gflops();
                    tape.backward(scale(loss, inv_batch));
                }
                clip_grad_norm(named, cfg.clip_norm);
                opt.step(cosine_lr(cfg.learning_rate, cfg.min_learning_rate, step++, total_steps));
                opt.zero_grad();
            }
            const double n = static_cast<double>(data.size());
            m.task /= n;
            m.ponder /= n;
            m.motion /= n;
            m.mean_gflops /= n;
            m.train_acc = static_cast<double>(correct) / n;
            result.metrics.push_back(m);
            if (hooks.on_epoch) {
                hooks.on_epoch(m);
            }
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Evaluation

struct SampleResult {
    std::size_t index = 0;
    std::size_t label = 0;
    std::size_t prediction = 0;
    double depth = 0.0;       // mean halting layer of the patch tokens
    std::size_t class_halt = 0;
    double gflops = 0.0;
    HaltMap halt_map;
};

struct EvalResult {
    double accuracy = 0.0;
    double mean_gflops = 0.0;
    double mean_depth = 0.0;
    std::vector<SampleResult> samples;
};

// Inference over real clips in gather mode; the motion head is not run.
template <typename T>
EvalResult evaluate(const ModelParams<T>& params, const ModelConfig& cfg, const std::vector<VideoClip>& clips) {
    cfg.validate();
    EvalResult r;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < clips.size(); ++i) {
        auto out = run_clip(clips[i], params, cfg, {ForwardMode::gather, false});
        SampleResult s{i, clips[i].label, argmax(out.logits), out.halting.mean_depth(),
                       out.halting.class_halt(), profile(out.trace, cfg).gflops(), std::move(out.halt_map)};
        correct += s.prediction == s.label ? 1 : 0;
        r.mean_gflops += s.gflops;
        r.mean_depth += s.depth;
        r.samples.push_back(std::move(s));
    }
    if (!clips.empty()) {
        const double n = static_cast<double>(clips.size());
        r.accuracy = static_cast<double>(correct) / n;
        r.mean_gflops /= n;
        r.mean_depth /= n;
    }
    return r;
}

// Real-vs-fake accuracy of the motion head over every clip and one fake per clip.
template <typename T>
double motion_accuracy(const ModelParams<T>& params, const ModelConfig& cfg, const std::vector<VideoClip>& clips,
                       std::uint64_t seed) {
    SeededRng rng(seed);
    std::size_t correct = 0;
    for (const auto& clip : clips) {
        const SamplePair pair = make_pair(clip, rng);
        auto real = run_clip(pair.real, params, cfg, {ForwardMode::gather, true});
        auto fake = run_clip(pair.fake, params, cfg, {ForwardMode::gather, true});
        correct += argmax(real.motion_logits) == static_cast<std::size_t>(MotionLabel::positive) ? 1 : 0;
        correct += argmax(fake.motion_logits) == static_cast<std::size_t>(MotionLabel::negative) ? 1 : 0;
    }
    return clips.empty() ? 0.0 : static_cast<double>(correct) / (2.0 * static_cast<double>(clips.size()));
}

// Refits only the motion head on frozen features (normalized readout) of
// real/fake pairs; the rest of the model is untouched.
template <typename T>
void train_motion_probe(ModelParams<T>& params, const ModelConfig& cfg, const std::vector<VideoClip>& clips,
                        std::size_t epochs, double lr, std::uint64_t seed) {
    SeededRng rng(seed);
    std::vector<std::pair<Tensor<T>, std::size_t>> features;
    for (std::size_t e = 0; e < std::max<std::size_t>(epochs, 1) && e < 2; ++e) {
        for (const auto& clip : clips) {
            const SamplePair pair = make_pair(clip, rng);
            for (const auto* c : {&pair.real, &pair.fake}) {
                auto out = run_clip(*c, params, cfg, {ForwardMode::gather, false});
                features.emplace_back(params.head_norm(out.halting.readout).detach(),
                                      static_cast<std::size_t>(c == &pair.real ? MotionLabel::positive
                                                                              : MotionLabel::negative));
            }
        }
    }
    params.motion_head = Linear<T>::init(rng, cfg.dim, 2);
    NamedTensors<T> head;
    params.motion_head.visit("motion", [&head](const std::string& n, Tensor<T>& t) { head.emplace_back(n, t); });
    Adam<T> opt(head, {});
    opt.zero_grad();
    const std::size_t batch = 16;
    std::vector<std::size_t> order(features.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t e = 0; e < epochs; ++e) {
        rng.shuffle(order.begin(), order.end());
        for (std::size_t lo = 0; lo < order.size(); lo += batch) {
            const std::size_t hi = std::min(order.size(), lo + batch);
            for (std::size_t i = lo; i < hi; ++i) {
                Tape<T> tape;
                typename Tape<T>::Scope scope(tape);
                const auto& [x, y] = features[order[i]];
                tape.backward(scale(cross_entropy(params.motion_head(x), y), T(1) / static_cast<T>(hi - lo)));
            }
            opt.step(lr);
            opt.zero_grad();
        }
    }
}

}  // namespace haltingvt
