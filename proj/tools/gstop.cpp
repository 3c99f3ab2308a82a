#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "experiment.hpp"

int main(int argc, char** argv)
{
    CLI::App app{"gstop: constrained nonlinear expectations and optimal stopping on binary trees"};
    app.require_subcommand(1);

    gstop::cli::RunRequest req;
    const std::pair<const char*, const char*> commands[] = {
        {"expectation", "constrained expectation of a terminal value"},
        {"stop", "value process, threshold rules and stopping-time checks"},
        {"oracle", "dynamic programming against exhaustive stopping-rule search (N <= 5)"},
        {"verify", "randomised property suite; exit 3 on any failure"},
        {"ladder", "penalized vs direct along a refinement ladder of trees"},
    };
    for (const auto& [name, help] : commands) {
        auto* sub = app.add_subcommand(name, help);
        sub->add_option("config", req.config_path, "JSON config file")->required()->check(CLI::ExistingFile);
        sub->add_option("--set", req.overrides, "dotted override, e.g. tree.steps=4 (repeatable)");
        sub->add_option("--output-dir", req.output_dir, "output directory (else output.dir, else $GSTOP_OUTPUT_DIR)");
        sub->callback([&req, n = std::string(name)] { req.command = gstop::cli::parse_command(n); });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }
    return gstop::cli::run(req, std::cout, std::cerr);
}
