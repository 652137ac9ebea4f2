#pragma once

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "haltingvt/training.hpp"

namespace haltingvt {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct DatasetConfig {
    std::size_t samples_per_class = 64;
    std::size_t heldout_per_class = 32;
    std::size_t square = 8;
    std::size_t min_speed = 2;
    std::size_t max_speed = 4;
    double noise = 0.1;
    std::uint64_t seed = 1;
};

struct RunConfig {
    ModelConfig model;
    LossWeights loss;
    TrainConfig training;
    DatasetConfig dataset;
    std::uint64_t seed = 0;
    std::string out = "runs/default";

    SynthSpec synth_spec(std::size_t per_class) const {
        SynthSpec s;
        s.frames = model.frames;
        s.height = model.height;
        s.width = model.width;
        s.channels = model.channels;
        s.classes = model.classes;
        s.samples_per_class = per_class;
        s.square = dataset.square;
        s.min_speed = dataset.min_speed;
        s.max_speed = dataset.max_speed;
        s.noise = dataset.noise;
        return s;
    }

    std::vector<VideoClip> train_clips() const {
        SeededRng rng(dataset.seed);
        return synth_dataset(synth_spec(dataset.samples_per_class), rng);
    }

    std::vector<VideoClip> heldout_clips() const {
        SeededRng rng = SeededRng(dataset.seed).fork(0x68656c64);
        return synth_dataset(synth_spec(dataset.heldout_per_class), rng);
    }

    // Every range rule, checked before any work starts.
    void validate() const {
        try {
            model.validate();
            training.validate();
            synth_spec(std::max<std::size_t>(dataset.samples_per_class, 1)).validate();
        } catch (const std::exception& e) {
            throw ConfigError(e.what());
        }
        if (!(loss.alpha_p >= 0.0) || !(loss.alpha_m >= 0.0) || !std::isfinite(loss.alpha_p) ||
            !std::isfinite(loss.alpha_m)) {
            throw ConfigError("loss.alpha_p and loss.alpha_m must be finite and >= 0");
        }
        if (dataset.samples_per_class == 0) {
            throw ConfigError("dataset.samples_per_class must be >= 1");
        }
        if (training.learning_rate <= 0.0) {
            throw ConfigError("training.learning_rate must be > 0");
        }
        if (out.empty()) {
            throw ConfigError("run.out must not be empty");
        }
    }
};

namespace detail {

inline const std::map<std::string, std::set<std::string>>& config_keys() {
    static const std::map<std::string, std::set<std::string>> keys = {
        {"model", {"layers", "dim", "heads", "patch", "frames", "height", "width", "channels", "classes"}},
        {"halting", {"enabled", "gamma", "beta", "epsilon"}},
        {"glimpser", {"enabled", "R"}},
        {"loss", {"alpha_p", "alpha_m"}},
        {"training",
         {"stage", "epochs", "base_epochs", "batch_size", "learning_rate", "min_learning_rate", "adam_beta1",
          "adam_beta2", "clip_norm", "forward_mode"}},
        {"dataset", {"samples_per_class", "heldout_per_class", "square", "min_speed", "max_speed", "noise", "seed"}},
        {"run", {"seed", "out"}},
    };
    return keys;
}

class ConfigReader {
public:
    explicit ConfigReader(const boost::property_tree::ptree& tree) : tree_(tree) {}

    template <typename V>
    void read(const std::string& section, const std::string& key, V& into) {
        auto s = tree_.get_child_optional(section);
        if (!s) {
            return;
        }
        auto v = s->get_optional<std::string>(key);
        if (!v) {
            return;
        }
        into = convert<V>(section + "." + key, *v);
    }

private:
    template <typename V>
    static V convert(const std::string& field, const std::string& text) {
        if constexpr (std::is_same_v<V, bool>) {
            if (text == "true" || text == "1" || text == "on") {
                return true;
            }
            if (text == "false" || text == "0" || text == "off") {
                return false;
            }
            throw ConfigError(field + ": expected true or false, got '" + text + "'");
        } else if constexpr (std::is_same_v<V, std::string>) {
            return text;
        } else {
            std::istringstream is(text);
            is.imbue(std::locale::classic());
            V value{};
            if constexpr (std::is_unsigned_v<V>) {
                if (!text.empty() && text.front() == '-') {
                    throw ConfigError(field + ": expected a non-negative integer, got '" + text + "'");
                }
            }
            is >> value;
            if (is.fail() || !(is >> std::ws).eof()) {
                throw ConfigError(field + ": cannot parse '" + text + "'");
            }
            return value;
        }
    }

    const boost::property_tree::ptree& tree_;
};

// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
    char buf[64];
    const auto end = std::to_chars(buf, buf + sizeof(buf), v).ptr;
    return std::string(buf, end);
}

}  // namespace detail

inline RunConfig parse_run_config(std::istream& is, const std::string& source) {
    boost::property_tree::ptree tree;
    try {
        boost::property_tree::ini_parser::read_ini(is, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigError(source + ":" + std::to_string(e.line()) + ": " + e.message());
    }
    const auto& keys = detail::config_keys();
    for (const auto& [section, body] : tree) {
        auto known = keys.find(section);
        if (known == keys.end()) {
            throw ConfigError(source + ": unknown section [" + section + "]");
        }
        if (!body.data().empty() && body.empty()) {
            throw ConfigError(source + ": key '" + section + "' outside a section");
        }
        for (const auto& [key, value] : body) {
            if (!known->second.count(key)) {
                throw ConfigError(source + ": unknown key " + section + "." + key);
            }
        }
    }

    RunConfig rc;
    detail::ConfigReader r(tree);
    auto& m = rc.model;
    r.read("model", "layers", m.layers);
    r.read("model", "dim", m.dim);
    r.read("model", "heads", m.heads);
    r.read("model", "patch", m.patch);
    r.read("model", "frames", m.frames);
    r.read("model", "height", m.height);
    r.read("model", "width", m.width);
    r.read("model", "channels", m.channels);
    r.read("model", "classes", m.classes);
    r.read("halting", "enabled", m.halting.enabled);
    r.read("halting", "gamma", m.halting.gamma);
    r.read("halting", "beta", m.halting.beta);
    r.read("halting", "epsilon", m.halting.epsilon);
    m.halting.layers = m.layers;
    r.read("glimpser", "enabled", m.glimpser);
    r.read("glimpser", "R", m.glimpse.keep_ratio);
    r.read("loss", "alpha_p", rc.loss.alpha_p);
    r.read("loss", "alpha_m", rc.loss.alpha_m);

    auto& t = rc.training;
    std::string stage = stage_name(t.stage);
    std::string mode = t.mode == ForwardMode::mask ? "mask" : "gather";
    r.read("training", "stage", stage);
    r.read("training", "epochs", t.epochs);
    r.read("training", "base_epochs", t.base_epochs);
    r.read("training", "batch_size", t.batch_size);
    r.read("training", "learning_rate", t.learning_rate);
    r.read("training", "min_learning_rate", t.min_learning_rate);
    r.read("training", "adam_beta1", t.adam.beta1);
    r.read("training", "adam_beta2", t.adam.beta2);
    r.read("training", "clip_norm", t.clip_norm);
    r.read("training", "forward_mode", mode);
    if (stage == "base") {
        t.stage = Stage::base;
    } else if (stage == "halting") {
        t.stage = Stage::halting;
    } else {
        throw ConfigError("training.stage must be base or halting, got '" + stage + "'");
    }
    if (mode == "mask") {
        t.mode = ForwardMode::mask;
    } else if (mode == "gather") {
        t.mode = ForwardMode::gather;
    } else {
        throw ConfigError("training.forward_mode must be mask or gather, got '" + mode + "'");
    }

    auto& d = rc.dataset;
    r.read("dataset", "samples_per_class", d.samples_per_class);
    r.read("dataset", "heldout_per_class", d.heldout_per_class);
    r.read("dataset", "square", d.square);
    r.read("dataset", "min_speed", d.min_speed);
    r.read("dataset", "max_speed", d.max_speed);
    r.read("dataset", "noise", d.noise);
    r.read("dataset", "seed", d.seed);
    r.read("run", "seed", rc.seed);
    r.read("run", "out", rc.out);
    rc.training.seed = rc.seed;
    return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) {
        throw ConfigError("cannot open config file " + path.string());
    }
    return parse_run_config(is, path.string());
}

// Every field written out, so the snapshot alone reproduces the run.
inline std::string resolved_config(const RunConfig& rc) {
    using detail::format_double;
    const auto& m = rc.model;
    const auto& t = rc.training;
    const auto& d = rc.dataset;
    std::ostringstream os;
    os << "[model]\n"
       << "layers = " << m.layers << "\n"
       << "dim = " << m.dim << "\n"
       << "heads = " << m.heads << "\n"
       << "patch = " << m.patch << "\n"
       << "frames = " << m.frames << "\n"
       << "height = " << m.height << "\n"
       << "width = " << m.width << "\n"
       << "channels = " << m.channels << "\n"
       << "classes = " << m.classes << "\n\n"
       << "[halting]\n"
       << "enabled = " << (m.halting.enabled ? "true" : "false") << "\n"
       << "gamma = " << format_double(m.halting.gamma) << "\n"
       << "beta = " << format_double(m.halting.beta) << "\n"
       << "epsilon = " << format_double(m.halting.epsilon) << "\n\n"
       << "[glimpser]\n"
       << "enabled = " << (m.glimpser ? "true" : "false") << "\n"
       << "R = " << format_double(m.glimpse.keep_ratio) << "\n\n"
       << "[loss]\n"
       << "alpha_p = " << format_double(rc.loss.alpha_p) << "\n"
       << "alpha_m = " << format_double(rc.loss.alpha_m) << "\n\n"
       << "[training]\n"
       << "stage = " << stage_name(t.stage) << "\n"
       << "epochs = " << t.epochs << "\n"
       << "base_epochs = " << t.base_epochs << "\n"
       << "batch_size = " << t.batch_size << "\n"
       << "learning_rate = " << format_double(t.learning_rate) << "\n"
       << "min_learning_rate = " << format_double(t.min_learning_rate) << "\n"
       << "adam_beta1 = " << format_double(t.adam.beta1) << "\n"
       << "adam_beta2 = " << format_double(t.adam.beta2) << "\n"
       << "clip_norm = " << format_double(t.clip_norm) << "\n"
       << "forward_mode = " << (t.mode == ForwardMode::mask ? "mask" : "gather") << "\n\n"
       << "[dataset]\n"
       << "samples_per_class = " << d.samples_per_class << "\n"
       << "heldout_per_class = " << d.heldout_per_class << "\n"
       << "square = " << d.square << "\n"
       << "min_speed = " << d.min_speed << "\n"
       << "max_speed = " << d.max_speed << "\n"
       << "noise = " << format_double(d.noise) << "\n"
       << "seed = " << d.seed << "\n\n"
       << "[run]\n"
       << "seed = " << rc.seed << "\n"
       << "out = " << rc.out << "\n";
    return os.str();
}

}  // namespace haltingvt
