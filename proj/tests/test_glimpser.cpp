#include <gtest/gtest.h>

#include <set>

#include "test_util.hpp"

using namespace haltingvt;

namespace {

Attentiveness scores(std::vector<double> w, std::vector<std::size_t> frame_of) {
    Attentiveness a;
    a.w = std::move(w);
    a.frame_of = std::move(frame_of);
    return a;
}

std::vector<std::size_t> iota_ids(std::size_t n) {
    std::vector<std::size_t> ids(n);
    std::iota(ids.begin(), ids.end(), 0);
    return ids;
}

class GlimpserTest : public ::testing::Test {
protected:
    ModelConfig cfg = [] {
        auto c = hvt_test::tiny_config();
        c.frames = 3;
        c.glimpser = true;
        return c;
    }();
    SeededRng rng{21};
    ModelParams<double> params = ModelParams<double>::init(cfg, 5);
    TokenBatch<double> batch = patch_embed(hvt_test::random_clip(cfg, rng), cfg.patch, params.embed);
};

}  // namespace

TEST(KeepCount, Examples) {
    EXPECT_EQ(keep_count(0.3, 196), 59u);
    EXPECT_EQ(keep_count(0.5, 196), 98u);
    EXPECT_EQ(keep_count(0.7, 196), 137u);
    EXPECT_EQ(keep_count(1.0, 196), 196u);
    EXPECT_EQ(keep_count(0.01, 4), 1u);
    EXPECT_EQ(keep_count(0.5, 4), 2u);
    EXPECT_EQ(keep_count(0.625, 4), 3u);  // 2.5 rounds up
}

TEST(GlimpseConfig, RejectsRatiosOutsideUnitInterval) {
    EXPECT_THROW(GlimpseConfig{0.0}.validate(), std::invalid_argument);
    EXPECT_THROW(GlimpseConfig{1.3}.validate(), std::invalid_argument);
    EXPECT_NO_THROW(GlimpseConfig{1.0}.validate());
}

TEST(TopK, KeepsHighestScores) {
    const auto a = scores({0.1, 0.2, 0.3, 0.4}, {0, 0, 0, 0});
    EXPECT_EQ(top_k_per_frame(a, iota_ids(4), 1, keep_count(0.5, 4)), (std::vector<std::size_t>{2, 3}));
}

TEST(TopK, TiesGoToLowerTokenIndex) {
    const auto a = scores({0.25, 0.25, 0.25, 0.25}, {0, 0, 0, 0});
    EXPECT_EQ(top_k_per_frame(a, iota_ids(4), 1, 2), (std::vector<std::size_t>{0, 1}));
    // Index order follows the original ids, not the row order.
    EXPECT_EQ(top_k_per_frame(a, {9, 3, 7, 1}, 1, 2), (std::vector<std::size_t>{1, 3}));
}

TEST(TopK, SelectsPerFrame) {
    const auto a = scores({0.9, 0.8, 0.1, 0.2, 0.05, 0.5}, {0, 0, 0, 1, 1, 1});
    EXPECT_EQ(top_k_per_frame(a, iota_ids(6), 2, 1), (std::vector<std::size_t>{0, 5}));
}

TEST_F(GlimpserTest, AttentivenessAndClassSelfWeightSumToOne) {
    auto [out, a] = attentiveness(batch, params.glimpser->layers[1]);
    ASSERT_EQ(a.w.size(), cfg.tokens());
    std::vector<double> per_frame = a.class_self;
    for (std::size_t i = 0; i < a.w.size(); ++i) {
        EXPECT_GT(a.w[i], 0.0);
        per_frame[a.frame_of[i]] += a.w[i];
    }
    for (double s : per_frame) {
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST_F(GlimpserTest, EqualTokensGetEqualAttentiveness) {
    auto values = std::vector<double>(batch.tokens.values().begin(), batch.tokens.values().end());
    for (std::size_t r = 2; r < batch.tokens.rows(); ++r) {
        std::copy_n(values.begin() + cfg.dim, cfg.dim, values.begin() + r * cfg.dim);
    }
    const auto same = batch.with_tokens(Tensor<double>::from(batch.tokens.shape(), values));
    const auto a = attentiveness(same, params.glimpser->layers[1]).second;
    for (double w : a.w) {
        EXPECT_NEAR(w, a.w[0], 1e-12);
    }
}

TEST_F(GlimpserTest, FullRatioKeepsEveryToken) {
    const auto g = glimpse(batch, *params.glimpser, GlimpseConfig{1.0});
    EXPECT_EQ(g.kept_ids, iota_ids(cfg.tokens()));
    EXPECT_EQ(g.tokens.tokens.rows(), cfg.tokens() + 1);
    // Output is the two divided layers applied in order.
    const auto direct = divided_block(divided_block(batch, params.glimpser->layers[0]), params.glimpser->layers[1]);
    for (std::size_t i = 0; i < direct.tokens.size(); ++i) {
        EXPECT_EQ(g.tokens.tokens[i], direct.tokens[i]);
    }
}

TEST_F(GlimpserTest, HalfRatioKeepsTopHalfOfEveryFrame) {
    const auto g = glimpse(batch, *params.glimpser, GlimpseConfig{0.5});
    EXPECT_EQ(g.keep_per_frame, 2u);
    ASSERT_EQ(g.tokens.patch_rows(), cfg.frames * 2);
    EXPECT_EQ(g.tokens.frame_token_counts(), std::vector<std::size_t>(cfg.frames, 2));
    EXPECT_TRUE(g.tokens.all_alive());
    const std::set<std::size_t> kept(g.kept_ids.begin(), g.kept_ids.end());
    for (std::size_t i = 0; i < cfg.tokens(); ++i) {
        const std::size_t frame = g.scores.frame_of[i];
        if (kept.count(i)) {
            continue;
        }
        // Every dropped token scores no higher than every kept token of its frame.
        for (std::size_t k : kept) {
            if (g.scores.frame_of[k] == frame) {
                EXPECT_LE(g.scores.w[i], g.scores.w[k]);
            }
        }
    }
}

TEST_F(GlimpserTest, RejectsPartiallyAliveBatch) {
    batch.alive[0] = 0;
    EXPECT_THROW(glimpse(batch, *params.glimpser, GlimpseConfig{0.5}), std::invalid_argument);
}
