#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace haltingvt;

namespace {

struct Halt {
    std::size_t n = 0;
    double r = 0.0;
};

// Direct evaluation of the halting rule for one score sequence of length L.
Halt brute_force(const std::vector<double>& h, double epsilon) {
    const std::size_t layers = h.size();
    for (std::size_t n = 1; n <= layers; ++n) {
        double total = 0.0;
        for (std::size_t l = 1; l <= n; ++l) {
            total += l == layers ? 1.0 : h[l - 1];
        }
        if (total >= 1.0 - epsilon) {
            double before = 0.0;
            for (std::size_t l = 1; l < n; ++l) {
                before += h[l - 1];
            }
            return {n, 1.0 - before};
        }
    }
    return {};
}

Halt track(const std::vector<double>& h, double epsilon) {
    HaltingTracker tr(1, epsilon, h.size());
    for (std::size_t l = 1; l <= h.size() && tr.running(0); ++l) {
        tr.update(l, std::vector<std::size_t>{0}, std::vector<double>{h[l - 1]});
    }
    return {tr.halted_at()[0], tr.remainder()[0]};
}

std::vector<double> random_scores(SeededRng& rng, std::size_t layers) {
    std::vector<double> h(layers);
    for (double& x : h) {
        x = rng.uniform(1e-6, 0.7);
    }
    return h;
}

ModelConfig halting_config(double beta) {
    auto cfg = hvt_test::tiny_config();
    cfg.layers = 3;
    cfg.halting.beta = beta;
    return cfg;
}

Tensor<double> plain_transformer_logits(const TokenBatch<double>& batch, const ModelParams<double>& params) {
    auto x = batch;
    for (const auto& b : params.blocks) {
        x = joint_block(x, b);
    }
    return params.classifier(params.head_norm(x.class_token()));
}

}  // namespace

TEST(HaltingScore, Examples) {
    HaltingConfig cfg;
    cfg.gamma = 1.0;
    cfg.beta = 0.0;
    EXPECT_DOUBLE_EQ(halting_scores(Tensor<double>::zeros({1, 4}), cfg)[0], 0.5);
    cfg.gamma = 10.0;
    cfg.beta = 10.0;
    EXPECT_NEAR(halting_scores(Tensor<double>::zeros({1, 4}), cfg)[0], 0.9999546, 1e-7);
}

TEST(HaltingScore, UsesFirstChannelAndIncreasesWithBeta) {
    HaltingConfig cfg;
    cfg.gamma = 2.0;
    cfg.beta = -1.0;
    const auto x = Tensor<double>::from({2, 3}, {0.3, 9.0, -9.0, -0.4, 5.0, 5.0});
    const auto h = halting_scores(x, cfg);
    EXPECT_NEAR(h[0], 1.0 / (1.0 + std::exp(-(2.0 * 0.3 - 1.0))), 1e-15);
    EXPECT_NEAR(h[1], 1.0 / (1.0 + std::exp(-(2.0 * -0.4 - 1.0))), 1e-15);
    double prev = 0.0;
    for (double beta = -5.0; beta <= 5.0; beta += 0.5) {
        cfg.beta = beta;
        const double v = halting_scores(x, cfg)[0];
        EXPECT_GT(v, prev);
        prev = v;
    }
}

TEST(HaltingRule, HaltsWhenCumulativeReachesThreshold) {
    const auto h = track({0.3, 0.4, 0.4, 0.1}, 0.01);
    EXPECT_EQ(h.n, 3u);
    EXPECT_NEAR(h.r, 0.3, 1e-15);
}

TEST(HaltingRule, FirstLayerHaltHasFullRemainder) {
    const auto h = track({0.995, 0.1, 0.1}, 0.01);
    EXPECT_EQ(h.n, 1u);
    EXPECT_EQ(h.r, 1.0);
}

TEST(HaltingRule, LastLayerForcesHalt) {
    const auto h = track({1e-4, 2e-4, 3e-4, 1e-4}, 0.01);
    EXPECT_EQ(h.n, 4u);
    EXPECT_NEAR(h.r, 1.0 - 6e-4, 1e-15);
}

TEST(HaltingRule, RejectsBadInput) {
    HaltingTracker tr(2, 0.01, 3);
    EXPECT_THROW(tr.update(0, std::vector<std::size_t>{0}, std::vector<double>{0.1}), HaltingError);
    EXPECT_THROW(tr.update(4, std::vector<std::size_t>{0}, std::vector<double>{0.1}), HaltingError);
    EXPECT_THROW(tr.update(1, std::vector<std::size_t>{0}, std::vector<double>{1.5}), HaltingError);
    EXPECT_THROW(tr.update(1, std::vector<std::size_t>{0}, std::vector<double>{std::nan("")}), HaltingError);
    tr.update(1, std::vector<std::size_t>{0}, std::vector<double>{0.999});
    EXPECT_THROW(tr.update(2, std::vector<std::size_t>{0}, std::vector<double>{0.5}), HaltingError);
    EXPECT_THROW(tr.ponder(), HaltingError);
}

TEST(HaltingRule, MatchesBruteForce) {
    SeededRng rng(31);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t layers = 1 + rng.below(8);
        const auto h = random_scores(rng, layers);
        const auto expected = brute_force(h, 0.01);
        const auto got = track(h, 0.01);
        ASSERT_EQ(got.n, expected.n) << trial;
        ASSERT_NEAR(got.r, expected.r, 1e-12) << trial;
        ASSERT_GT(got.r, 0.0);
        ASSERT_LE(got.r, 1.0);
    }
}

TEST(HaltingRule, RaisingAScoreNeverDelaysHalting) {
    SeededRng rng(32);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t layers = 2 + rng.below(6);
        auto h = random_scores(rng, layers);
        const auto before = track(h, 0.01);
        h[rng.below(layers)] += rng.uniform(0.0, 0.29);
        const auto after = track(h, 0.01);
        ASSERT_LE(after.n, before.n);
        ASSERT_LE(after.n + after.r, before.n + before.r + 1e-12);
    }
}

TEST(Ponder, Examples) {
    HaltingTracker fast(5, 0.01, 4);
    fast.update(1, std::vector<std::size_t>{0, 1, 2, 3, 4}, std::vector<double>(5, 0.995));
    EXPECT_DOUBLE_EQ(fast.ponder(), 2.0);

    HaltingTracker slow(3, 0.01, 4);
    const std::vector<std::size_t> ids{0, 1, 2};
    slow.update(1, ids, std::vector<double>(3, 0.1));
    slow.update(2, ids, std::vector<double>(3, 0.2));
    slow.update(3, ids, std::vector<double>(3, 0.3));
    slow.update(4, ids, std::vector<double>(3, 0.05));
    EXPECT_NEAR(slow.ponder(), 4.4, 1e-12);
}

TEST(Ponder, StaysWithinBounds) {
    SeededRng rng(33);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t layers = 1 + rng.below(6);
        const auto h = track(random_scores(rng, layers), 0.01);
        ASSERT_GT(h.n + h.r, 1.0);
        ASSERT_LE(h.n + h.r, static_cast<double>(layers) + 1.0);
    }
}

TEST(Readout, Examples) {
    const auto e = [](std::size_t i) {
        std::vector<double> v(3, 0.0);
        v[i] = 1.0;
        return Tensor<double>::from({1, 3}, v);
    };
    const std::vector<ClassSnapshot<double>> one{{1, Tensor<double>::scalar(0.995), e(1)}};
    EXPECT_EQ(class_readout(one).at(0, 1), 1.0);

    const std::vector<ClassSnapshot<double>> three{{1, Tensor<double>::scalar(0.2), e(0)},
                                                   {2, Tensor<double>::scalar(0.5), e(1)},
                                                   {3, Tensor<double>::scalar(0.9), e(2)}};
    const auto x = class_readout(three);
    EXPECT_NEAR(x.at(0, 0), 0.2, 1e-15);
    EXPECT_NEAR(x.at(0, 1), 0.5, 1e-15);
    EXPECT_NEAR(x.at(0, 2), 0.3, 1e-15);

    const auto v = Tensor<double>::from({1, 3}, {0.7, -1.1, 2.5});
    const std::vector<ClassSnapshot<double>> same{{1, Tensor<double>::scalar(0.3), v},
                                                  {2, Tensor<double>::scalar(0.6), v},
                                                  {3, Tensor<double>::scalar(0.2), v}};
    const auto y = class_readout(same);
    for (std::size_t c = 0; c < 3; ++c) {
        EXPECT_NEAR(y.at(0, c), v.at(0, c), 1e-15);
    }
    EXPECT_THROW(class_readout(std::vector<ClassSnapshot<double>>{}), HaltingError);
}

TEST(Forward, LargeBetaHaltsEverythingAtLayerOne) {
    const auto cfg = halting_config(20.0);
    const auto params = ModelParams<double>::init(cfg, 1);
    SeededRng rng(34);
    const auto r = run_clip(hvt_test::random_clip(cfg, rng), params, cfg);
    EXPECT_EQ(r.halting.class_halt(), 1u);
    EXPECT_EQ(r.halting.executed_layers(), 1u);
    for (std::size_t n : r.halting.patches.halted_at()) {
        EXPECT_EQ(n, 1u);
    }
    const auto report = profile(r.trace, cfg);
    std::size_t joint = 0;
    for (const auto& l : report.layers) {
        joint += l.kind == "joint";
    }
    EXPECT_EQ(joint, 1u);
}

TEST(Forward, VeryNegativeBetaIsAPlainTransformer) {
    const auto cfg = halting_config(-40.0);
    const auto params = ModelParams<double>::init(cfg, 2);
    SeededRng rng(35);
    const auto clip = hvt_test::random_clip(cfg, rng);
    const auto r = run_clip(clip, params, cfg);
    EXPECT_EQ(r.halting.class_halt(), cfg.layers);
    for (std::size_t n : r.halting.patches.halted_at()) {
        EXPECT_EQ(n, cfg.layers);
    }
    const auto plain = plain_transformer_logits(patch_embed(clip, cfg.patch, params.embed), params);
    for (std::size_t i = 0; i < plain.size(); ++i) {
        EXPECT_NEAR(r.logits[i], plain[i], 1e-12);
    }
}

TEST(Forward, MaskAndGatherAgree) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        auto cfg = halting_config(-0.5);
        cfg.halting.gamma = 3.0;
        const auto params = ModelParams<double>::init(cfg, seed);
        SeededRng rng(seed + 100);
        const auto clip = hvt_test::random_clip(cfg, rng);
        const auto m = run_clip(clip, params, cfg, {ForwardMode::mask, true});
        const auto g = run_clip(clip, params, cfg, {ForwardMode::gather, true});
        EXPECT_EQ(m.halt_map, g.halt_map);
        for (std::size_t i = 0; i < m.logits.size(); ++i) {
            EXPECT_NEAR(m.logits[i], g.logits[i], 1e-10);
        }
        for (std::size_t i = 0; i < m.motion_logits.size(); ++i) {
            EXPECT_NEAR(m.motion_logits[i], g.motion_logits[i], 1e-10);
        }
    }
}

TEST(Forward, StateInvariantsHold) {
    auto cfg = halting_config(-0.5);
    cfg.layers = 4;
    cfg.halting.gamma = 4.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto params = ModelParams<double>::init(cfg, seed);
        SeededRng rng(seed + 200);
        const auto r = run_clip(hvt_test::random_clip(cfg, rng), params, cfg);
        const auto& s = r.halting;
        for (std::size_t l = 1; l < s.alive_per_layer.size(); ++l) {
            ASSERT_LE(s.alive_per_layer[l], s.alive_per_layer[l - 1]);
        }
        for (std::size_t k = 0; k < s.patches.size(); ++k) {
            ASSERT_GE(s.patches.halted_at()[k], 1u);
            ASSERT_LE(s.patches.halted_at()[k], s.class_halt());
            ASSERT_GT(s.patches.remainder()[k], 0.0);
            ASSERT_LE(s.patches.remainder()[k], 1.0);
        }
        double weights = s.class_remainder();
        for (std::size_t i = 0; i + 1 < s.class_snapshots.size(); ++i) {
            weights += s.class_snapshots[i].score[0];
        }
        ASSERT_NEAR(weights, 1.0, 1e-12);
        const double p = ponder_loss(s).item();
        ASSERT_NEAR(p, s.patches.ponder(), 1e-12);
    }
}

namespace {

// Halting state over leaf score tensors, one [K + 1, 1] tensor per layer.
HaltingState<double> leaf_state(const std::vector<Tensor<double>>& scores, std::size_t tokens) {
    HaltingState<double> s;
    const std::size_t layers = scores.size();
    s.patches = HaltingTracker(tokens, 0.01, layers);
    for (std::size_t l = 1; l <= layers; ++l) {
        std::vector<std::size_t> ids;
        std::vector<double> h;
        for (std::size_t k = 0; k < tokens; ++k) {
            if (s.patches.running(k)) {
                ids.push_back(k);
                h.push_back(scores[l - 1][k + 1]);
            }
        }
        s.patches.update(l, ids, h);
        LayerScores<double> ls{scores[l - 1], std::vector<double>(tokens + 1, 0.0)};
        for (std::size_t k : ids) {
            ls.continuing[k + 1] = s.patches.running(k) ? 1.0 : 0.0;
        }
        s.layer_scores.push_back(std::move(ls));
    }
    return s;
}

}  // namespace

// Raising any score a token consumes before halting lowers the ponder loss.
TEST(Ponder, GradientIsNonPositiveAndMatchesRemainderPath) {
    SeededRng rng(36);
    const std::size_t tokens = 6, layers = 4;
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<Tensor<double>> scores;
        for (std::size_t l = 0; l < layers; ++l) {
            std::vector<double> v(tokens + 1);
            for (double& x : v) {
                x = rng.uniform(0.05, 0.6);
            }
            scores.push_back(Tensor<double>::from({tokens + 1, 1}, v, true));
        }
        const auto base = leaf_state(scores, tokens);
        {
            Tape<double> tape;
            Tape<double>::Scope scope(tape);
            tape.backward(ponder_loss(base));
        }
        for (std::size_t l = 0; l < layers; ++l) {
            for (std::size_t k = 0; k < tokens; ++k) {
                const double an = scores[l].grad()[k + 1];
                ASSERT_LE(an, 0.0);
                const bool consumed = l + 1 < base.patches.halted_at()[k];
                ASSERT_EQ(an < 0.0, consumed) << "layer " << l + 1 << " token " << k;
                // Finite difference through r_k with the halting layers held fixed.
                auto w = scores[l].mutable_values();
                const double old = w[k + 1], step = 1e-7;
                w[k + 1] = old + step;
                const auto up = leaf_state(scores, tokens);
                w[k + 1] = old - step;
                const auto down = leaf_state(scores, tokens);
                w[k + 1] = old;
                if (up.patches.halted_at() != base.patches.halted_at() ||
                    down.patches.halted_at() != base.patches.halted_at()) {
                    continue;
                }
                const double fd = (up.patches.ponder() - down.patches.ponder()) / (2.0 * step);
                ASSERT_NEAR(an, fd, 1e-6);
            }
        }
    }
}

TEST(Forward, AllPathsMatchFiniteDifferences) {
    auto cfg = hvt_test::tiny_config();
    cfg.halting.gamma = 1.0;
    cfg.halting.beta = -0.3;
    auto params = ModelParams<double>::init(cfg, 4);
    SeededRng rng(37);
    const auto clip = hvt_test::random_clip(cfg, rng, 1);
    const auto first = run_clip(clip, params, cfg, {ForwardMode::mask, true});
    // The point must exercise readout weights and remainders over both layers.
    ASSERT_EQ(first.halting.class_halt(), 2u);
    std::vector<Tensor<double>> inputs;
    for (auto& [name, t] : params.named()) {
        inputs.push_back(t);
    }
    const auto loss = [&] {
        auto r = run_clip(clip, params, cfg, {ForwardMode::mask, true});
        auto l = add(cross_entropy(r.logits, 1), ponder_loss(r.halting));
        return add(l, cross_entropy(r.motion_logits, 1));
    };
    EXPECT_LT(hvt_test::max_grad_error(inputs, loss), 1e-4);
}
