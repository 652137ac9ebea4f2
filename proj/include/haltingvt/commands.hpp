#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "haltingvt/config.hpp"

namespace haltingvt {

enum ExitCode : int { exit_ok = 0, exit_config = 2, exit_runtime = 3 };

struct CommandArgs {
    std::string config;
    std::optional<std::string> checkpoint;
    std::optional<std::string> out;
    std::optional<std::uint64_t> seed;
    std::vector<std::string> sweep;
    std::vector<std::size_t> clips;
};

struct SweepPoint {
    std::optional<double> beta;  // empty: halting off
    double keep_ratio = 1.0;
};

// "BETA:R" where BETA is a number or "off".
inline SweepPoint parse_sweep_point(const std::string& text) {
    const auto colon = text.find(':');
    if (colon == std::string::npos) {
        throw ConfigError("--sweep: expected BETA:R, got '" + text + "'");
    }
    const std::string b = text.substr(0, colon), r = text.substr(colon + 1);
    SweepPoint p;
    try {
        std::size_t used = 0;
        if (b != "off") {
            p.beta = std::stod(b, &used);
            if (used != b.size()) {
                throw std::invalid_argument(b);
            }
        }
        p.keep_ratio = std::stod(r, &used);
        if (used != r.size()) {
            throw std::invalid_argument(r);
        }
    } catch (const std::logic_error&) {
        throw ConfigError("--sweep: cannot parse '" + text + "'");
    }
    try {
        GlimpseConfig{p.keep_ratio}.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("--sweep: ") + e.what());
    }
    return p;
}

namespace detail {

inline RunConfig resolve(const CommandArgs& args) {
    RunConfig rc = load_run_config(args.config);
    if (args.seed) {
        rc.seed = *args.seed;
        rc.training.seed = *args.seed;
    }
    if (args.out) {
        rc.out = *args.out;
    }
    rc.validate();
    return rc;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) {
        throw std::runtime_error("cannot write " + path.string());
    }
    os << text;
}

inline std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

inline ModelParams<float> load_model(const RunConfig& rc, const std::optional<std::string>& checkpoint) {
    auto params = ModelParams<float>::init(rc.model, rc.seed);
    if (checkpoint) {
        auto named = params.named();
        load_checkpoint(*checkpoint, named);
    }
    return params;
}

template <typename F>
int guarded(std::ostream& err, F&& body) {
    try {
        return body();
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return exit_config;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return exit_runtime;
    }
}

}  // namespace detail

// Writes config.resolved.ini, metrics.csv and checkpoint.bin into the output
// directory. The checkpoint is rewritten after every completed epoch.
inline int cmd_train(const CommandArgs& args, std::ostream& out, std::ostream& err) {
    return detail::guarded(err, [&] {
        const RunConfig rc = detail::resolve(args);
        const std::filesystem::path dir = rc.out;
        std::filesystem::create_directories(dir);
        detail::write_text(dir / "config.resolved.ini", resolved_config(rc));

        auto params = detail::load_model(rc, args.checkpoint);
        auto named = params.named();
        const auto data = rc.train_clips();
        std::ofstream metrics(dir / "metrics.csv", std::ios::binary | std::ios::trunc);
        metrics << metrics_csv_header() << "\n";
        save_checkpoint((dir / "checkpoint.bin").string(), named);

        TrainHooks hooks;
        hooks.on_epoch = [&](const EpochMetrics& m) {
            metrics << metrics_csv_row(m) << "\n" << std::flush;
            save_checkpoint((dir / "checkpoint.bin").string(), named);
            out << "epoch " << m.epoch << " [" << stage_name(m.stage) << "] task=" << detail::fmt(m.task)
                << " ponder=" << detail::fmt(m.ponder) << " motion=" << detail::fmt(m.motion)
                << " acc=" << detail::fmt(m.train_acc) << " gflops=" << detail::fmt(m.mean_gflops) << "\n";
        };
        const auto result = train(params, rc.model, data, rc.training, rc.loss, hooks);
        if (result.diverged) {
            err << "error: training diverged (" << result.divergence << "); last good checkpoint kept in "
                << (dir / "checkpoint.bin").string() << "\n";
            return static_cast<int>(exit_runtime);
        }
        out << "wrote " << (dir / "checkpoint.bin").string() << "\n";
        return static_cast<int>(exit_ok);
    });
}

inline const char* eval_csv_header() { return "index,label,prediction,correct,class_halt,mean_depth,gflops"; }

// Held-out split of the config's dataset; per-sample rows go to eval.csv.
inline int cmd_eval(const CommandArgs& args, std::ostream& out, std::ostream& err) {
    return detail::guarded(err, [&] {
        const RunConfig rc = detail::resolve(args);
        if (!args.checkpoint) {
            throw ConfigError("eval: --checkpoint is required");
        }
        const auto params = detail::load_model(rc, args.checkpoint);
        const auto result = evaluate(params, rc.model, rc.heldout_clips());

        const std::filesystem::path dir = rc.out;
        std::filesystem::create_directories(dir);
        std::ostringstream csv;
        csv << eval_csv_header() << "\n";
        for (const auto& s : result.samples) {
            csv << s.index << "," << s.label << "," << s.prediction << "," << (s.prediction == s.label ? 1 : 0)
                << "," << s.class_halt << "," << detail::fmt(s.depth) << "," << detail::fmt(s.gflops) << "\n";
        }
        detail::write_text(dir / "eval.csv", csv.str());
        out << "accuracy: " << detail::fmt(result.accuracy) << "\n"
            << "mean_gflops: " << detail::fmt(result.mean_gflops) << "\n"
            << "mean_depth: " << detail::fmt(result.mean_depth) << "\n";
        return static_cast<int>(exit_ok);
    });
}

inline const char* frontier_csv_header() { return "beta,R,accuracy,gflops,mean_depth"; }

// Evaluates fixed weights at every (beta, R) point. Without --checkpoint the
// seed's initial weights are used.
inline int cmd_profile(const CommandArgs& args, std::ostream& out, std::ostream& err) {
    return detail::guarded(err, [&] {
        const RunConfig rc = detail::resolve(args);
        if (args.sweep.empty()) {
            throw ConfigError("profile: empty sweep, pass --sweep BETA:R at least once");
        }
        std::vector<SweepPoint> points;
        for (const auto& s : args.sweep) {
            points.push_back(parse_sweep_point(s));
            if (!rc.model.glimpser && points.back().keep_ratio != 1.0) {
                throw ConfigError("--sweep: R < 1 needs glimpser.enabled = true");
            }
        }
        const auto params = detail::load_model(rc, args.checkpoint);
        const auto clips = rc.heldout_clips();
        const std::filesystem::path dir = rc.out;
        std::filesystem::create_directories(dir);

        std::ostringstream csv;
        csv << frontier_csv_header() << "\n";
        for (const auto& p : points) {
            ModelConfig cfg = rc.model;
            cfg.halting.enabled = p.beta.has_value();
            if (p.beta) {
                cfg.halting.beta = *p.beta;
            }
            cfg.glimpse.keep_ratio = p.keep_ratio;
            const auto r = evaluate(params, cfg, clips);
            const std::string beta = p.beta ? detail::fmt(*p.beta) : "off";
            csv << beta << "," << detail::fmt(p.keep_ratio) << "," << detail::fmt(r.accuracy) << ","
                << detail::fmt(r.mean_gflops) << "," << detail::fmt(r.mean_depth) << "\n";
            out << "beta=" << beta << " R=" << detail::fmt(p.keep_ratio) << " accuracy=" << detail::fmt(r.accuracy)
                << " gflops=" << detail::fmt(r.mean_gflops) << "\n";
        }
        detail::write_text(dir / "frontier.csv", csv.str());
        detail::write_text(dir / "flops_static.json", profile(static_trace(rc.model), rc.model).to_json().dump(2) + "\n");
        return static_cast<int>(exit_ok);
    });
}

// Binary PGM (P5), 8-bit: each patch is a P x P block, 255 when the token is
// still processed at `layer`, 48 otherwise. Layer 0 shows the Glimpser's
// selection.
inline std::string halting_pgm(const HaltMap& map, const GridShape& grid, std::size_t patch, std::size_t frame,
                               std::size_t layer) {
    const std::size_t h = grid.rows * patch, w = grid.cols * patch;
    std::ostringstream os;
    os << "P5\n# haltingvt frame " << frame << " layer " << layer << "\n" << w << " " << h << "\n255\n";
    std::string pixels(h * w, '\0');
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const std::size_t id = (frame * grid.rows + y / patch) * grid.cols + x / patch;
            const bool bright = map[id] >= std::max<std::size_t>(layer, 1);
            pixels[y * w + x] = static_cast<char>(bright ? 255 : 48);
        }
    }
    os << pixels;
    return os.str();
}

inline std::string halting_map_csv(const HaltMap& map, const GridShape& grid) {
    std::ostringstream os;
    os << "frame,row,col,halt_layer\n";
    for (std::size_t t = 0; t < grid.frames; ++t) {
        for (std::size_t r = 0; r < grid.rows; ++r) {
            for (std::size_t c = 0; c < grid.cols; ++c) {
                os << t << "," << r << "," << c << "," << map[(t * grid.rows + r) * grid.cols + c] << "\n";
            }
        }
    }
    return os.str();
}

// Per selected held-out clip: halting_map.csv and layer_<l>_frame_<t>.pgm for l = 0..L.
inline int cmd_viz_halting(const CommandArgs& args, std::ostream& out, std::ostream& err) {
    return detail::guarded(err, [&] {
        const RunConfig rc = detail::resolve(args);
        const auto params = detail::load_model(rc, args.checkpoint);
        const auto clips = rc.heldout_clips();
        const std::vector<std::size_t> selected = args.clips.empty() ? std::vector<std::size_t>{0} : args.clips;
        for (std::size_t i : selected) {
            if (i >= clips.size()) {
                throw std::out_of_range("viz-halting: clip " + std::to_string(i) + " outside [0, " +
                                        std::to_string(clips.size()) + ")");
            }
        }
        const GridShape grid = rc.model.grid();
        for (std::size_t i : selected) {
            const auto r = run_clip(clips[i], params, rc.model, {ForwardMode::gather, false});
            const std::filesystem::path dir = std::filesystem::path(rc.out) / ("clip_" + std::to_string(i));
            std::filesystem::create_directories(dir);
            detail::write_text(dir / "halting_map.csv", halting_map_csv(r.halt_map, grid));
            for (std::size_t layer = 0; layer <= rc.model.layers; ++layer) {
                for (std::size_t t = 0; t < grid.frames; ++t) {
                    const std::string name = "layer_" + std::to_string(layer) + "_frame_" + std::to_string(t) + ".pgm";
                    detail::write_text(dir / name, halting_pgm(r.halt_map, grid, rc.model.patch, t, layer));
                }
            }
            out << "clip " << i << ": label=" << clips[i].label << " prediction=" << argmax(r.logits)
                << " class_halt=" << r.halting.class_halt() << " -> " << dir.string() << "\n";
        }
        return static_cast<int>(exit_ok);
    });
}

}  // namespace haltingvt
