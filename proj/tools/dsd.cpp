// Command-line entry point. Every subcommand resolves defaults + optional
// config file + dotted-path overrides, then dispatches into the library.
// Exit codes: 0 success, 1 domain error, 2 config error.

#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dsd/run.hpp"

int main(int argc, char** argv) {
    CLI::App app{"depth self-distillation toolkit"};
    app.require_subcommand(1);

    struct Args {
        std::string config;
        std::vector<std::string> overrides;
    };
    std::map<std::string, Args> args;
    for (const auto& mode : dsd::run_modes()) {
        auto* sub = app.add_subcommand(mode);
        auto& a = args[mode];
        sub->add_option("--config", a.config, "JSON config file");
        sub->add_option("--set", a.overrides, "dotted-path override, key.path=value");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    const std::string mode = app.get_subcommands().front()->get_name();
    try {
        nlohmann::json cfg = dsd::resolve_config(mode, args[mode].config, args[mode].overrides);
        return dsd::run_mode(mode, cfg);
    } catch (const dsd::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const nlohmann::json::exception& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const dsd::DomainError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
