#include <iostream>

#include "CLI11.hpp"
#include "haltingvt/commands.hpp"

int main(int argc, char** argv) {
    using namespace haltingvt;
    CLI::App app{"HaltingVT: adaptive token halting for video transformers"};
    app.require_subcommand(1);

    CommandArgs args;
    std::uint64_t seed = 0;
    std::string checkpoint, out;

    auto common = [&](CLI::App* cmd, bool needs_checkpoint) {
        cmd->add_option("--config", args.config, "run config (INI)")->required();
        auto* ck = cmd->add_option("--checkpoint", checkpoint, "model checkpoint");
        if (needs_checkpoint) {
            ck->required();
        }
        cmd->add_option("--out", out, "output directory (overrides run.out)");
        cmd->add_option("--seed", seed, "seed (overrides run.seed)");
    };

    auto* train = app.add_subcommand("train", "train a model; writes checkpoint, metrics and resolved config");
    common(train, false);
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the held-out split");
    common(eval, true);
    auto* prof = app.add_subcommand("profile", "accuracy/GFLOPs frontier over (beta, R) points");
    common(prof, false);
    prof->add_option("--sweep", args.sweep, "sweep point BETA:R, BETA may be 'off'")->delimiter(',');
    auto* viz = app.add_subcommand("viz-halting", "export halting maps and per-layer images");
    common(viz, true);
    viz->add_option("--clip", args.clips, "held-out clip indices")->delimiter(',');

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? exit_ok : exit_config;
    }

    auto* cmd = app.get_subcommands().front();
    if (cmd->count("--checkpoint")) {
        args.checkpoint = checkpoint;
    }
    if (cmd->count("--out")) {
        args.out = out;
    }
    if (cmd->count("--seed")) {
        args.seed = seed;
    }
    if (cmd == train) {
        return cmd_train(args, std::cout, std::cerr);
    }
    if (cmd == eval) {
        return cmd_eval(args, std::cout, std::cerr);
    }
    if (cmd == prof) {
        return cmd_profile(args, std::cout, std::cerr);
    }
    return cmd_viz_halting(args, std::cout, std::cerr);
}
