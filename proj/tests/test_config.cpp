#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "haltingvt/config.hpp"

using namespace haltingvt;

namespace {

RunConfig parse(const std::string& text) {
    std::istringstream is(text);
    return parse_run_config(is, "test.ini");
}

std::string error_of(const std::string& text) {
    try {
        parse(text).validate();
    } catch (const ConfigError& e) {
        return e.what();
    }
    return {};
}

}  // namespace

TEST(Config, DefaultsWhenEmpty) {
    const auto rc = parse("");
    EXPECT_EQ(rc.model.layers, 4u);
    EXPECT_EQ(rc.model.halting.gamma, 10.0);
    EXPECT_EQ(rc.model.halting.epsilon, 0.01);
    EXPECT_EQ(rc.loss.alpha_p, 5e-4);
    EXPECT_EQ(rc.loss.alpha_m, 0.01);
    EXPECT_EQ(rc.training.learning_rate, 1e-5);
    EXPECT_EQ(rc.training.stage, Stage::halting);
    EXPECT_FALSE(rc.model.glimpser);
    EXPECT_NO_THROW(rc.validate());
}

TEST(Config, ReadsEverySection) {
    const auto rc = parse(
        "[model]\nlayers = 3\ndim = 32\nheads = 2\n"
        "[halting]\nenabled = false\nbeta = -2.5\n"
        "[glimpser]\nenabled = true\nR = 0.5\n"
        "[loss]\nalpha_m = 0\n"
        "[training]\nstage = base\nforward_mode = gather\nbatch_size = 3\n"
        "[dataset]\nnoise = 0.25\nseed = 11\n"
        "[run]\nseed = 5\nout = somewhere\n");
    EXPECT_EQ(rc.model.layers, 3u);
    EXPECT_EQ(rc.model.dim, 32u);
    EXPECT_FALSE(rc.model.halting.enabled);
    EXPECT_EQ(rc.model.halting.beta, -2.5);
    EXPECT_TRUE(rc.model.glimpser);
    EXPECT_EQ(rc.model.glimpse.keep_ratio, 0.5);
    EXPECT_EQ(rc.loss.alpha_m, 0.0);
    EXPECT_EQ(rc.training.stage, Stage::base);
    EXPECT_EQ(rc.training.mode, ForwardMode::gather);
    EXPECT_EQ(rc.training.batch_size, 3u);
    EXPECT_EQ(rc.training.seed, 5u);
    EXPECT_EQ(rc.dataset.noise, 0.25);
    EXPECT_EQ(rc.dataset.seed, 11u);
    EXPECT_EQ(rc.out, "somewhere");
}

TEST(Config, RejectsUnknownNamesAndBadValues) {
    EXPECT_NE(error_of("[modle]\nlayers = 2\n").find("unknown section [modle]"), std::string::npos);
    EXPECT_NE(error_of("[model]\nlayer = 2\n").find("unknown key model.layer"), std::string::npos);
    EXPECT_NE(error_of("[model]\nlayers = two\n").find("model.layers"), std::string::npos);
    EXPECT_NE(error_of("[model]\nlayers = -1\n").find("model.layers"), std::string::npos);
    EXPECT_NE(error_of("[halting]\nenabled = maybe\n").find("halting.enabled"), std::string::npos);
    EXPECT_NE(error_of("[training]\nstage = warmup\n").find("training.stage"), std::string::npos);
    EXPECT_NE(error_of("[model]\ndim = 30\nheads = 4\n").find("model.dim"), std::string::npos);
    EXPECT_NE(error_of("[halting]\nepsilon = 1.5\n").find("halting.epsilon"), std::string::npos);
    EXPECT_NE(error_of("[training]\nlearning_rate = 0\n").find("learning_rate"), std::string::npos);
}

TEST(Config, KeepRatioMessageNamesFieldAndRange) {
    const auto msg = error_of("[glimpser]\nenabled = true\nR = 1.3\n");
    EXPECT_NE(msg.find("glimpser.R"), std::string::npos);
    EXPECT_NE(msg.find("(0, 1]"), std::string::npos);
}

TEST(Config, SyntaxErrorsCarryTheLine) {
    const auto msg = error_of("[model]\nlayers = 2\nthis line is broken\n");
    EXPECT_EQ(msg.rfind("test.ini:3:", 0), 0u) << msg;
}

TEST(Config, MissingFileNamesThePath) {
    try {
        load_run_config("/nonexistent/dir/run.ini");
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("/nonexistent/dir/run.ini"), std::string::npos);
    }
}

TEST(Config, ResolvedSnapshotRoundTrips) {
    auto rc = parse("[halting]\nbeta = -0.1\n[training]\nlearning_rate = 0.0003\n[run]\nout = x/y\n");
    rc.model.halting.gamma = 1.0 / 3.0;
    const auto text = resolved_config(rc);
    const auto back = parse(text);
    EXPECT_EQ(resolved_config(back), text);
    EXPECT_EQ(back.model.halting.gamma, 1.0 / 3.0);
    EXPECT_EQ(back.model.halting.beta, -0.1);
    EXPECT_EQ(back.training.learning_rate, 0.0003);
}

TEST(Config, ShippedConfigsAreValid) {
    for (const char* name : {"toy.ini", "smoke.ini"}) {
        const auto rc = load_run_config(std::filesystem::path(HALTINGVT_SOURCE_DIR) / "configs" / name);
        EXPECT_NO_THROW(rc.validate()) << name;
    }
}

TEST(Config, SchemaListsExactlyTheAcceptedKeys) {
    std::ifstream is(std::filesystem::path(HALTINGVT_SOURCE_DIR) / "configs" / "run_config.schema.json");
    const auto schema = nlohmann::json::parse(is);
    const auto& sections = schema.at("properties");
    const auto& keys = detail::config_keys();
    ASSERT_EQ(sections.size(), keys.size());
    const auto defaults = parse(resolved_config(parse("")));
    for (const auto& [section, names] : keys) {
        ASSERT_TRUE(sections.contains(section)) << section;
        const auto& props = sections.at(section).at("properties");
        EXPECT_EQ(props.size(), names.size()) << section;
        for (const auto& name : names) {
            EXPECT_TRUE(props.contains(name)) << section << "." << name;
        }
    }
    EXPECT_EQ(sections.at("halting").at("properties").at("beta").at("default").get<double>(),
              defaults.model.halting.beta);
    EXPECT_EQ(sections.at("training").at("properties").at("learning_rate").at("default").get<double>(),
              defaults.training.learning_rate);
}
