#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "amflow/commands.hpp"

int main(int argc, char** argv) {
    CLI::App app{"amflow: windowed attention-motion-flow guidance on synthetic latents"};
    app.require_subcommand(1);

    std::string config_path, diag_kind = "windows";
    std::vector<std::string> sets;
    std::string seed, out;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("-c,--config", config_path, "flat key=value config file");
        sub->add_option("-s,--set", sets, "override, key=value (repeatable)");
        sub->add_option("--seed", seed, "shortcut for --set seed=N");
        sub->add_option("-o,--out", out, "shortcut for --set out_dir=DIR");
    };
    for (const char* name : {"synth", "transfer", "bench", "gradcheck"}) add_common(app.add_subcommand(name));
    CLI::App* diag = app.add_subcommand("diag", "inspection dumps");
    add_common(diag);
    diag->add_option("kind", diag_kind, "windows | flow | similarity")->check(CLI::IsMember({"windows", "flow", "similarity"}));
    CLI::App* echo = app.add_subcommand("config", "print the fully resolved config");
    add_common(echo);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return amflow::error_exit(nullptr, 2, "usage", e.what(), "", std::cerr);
    }

    const std::string name = app.get_subcommands().front()->get_name();
    std::vector<std::string> overrides = sets;
    if (!seed.empty()) overrides.push_back("seed=" + seed);
    if (!out.empty()) overrides.push_back("out_dir=" + out);

    amflow::RunConfig cfg;
    try {
        cfg = amflow::parse_config(config_path, overrides);
    } catch (const amflow::ConfigError& e) {
        return amflow::error_exit(nullptr, 2, "config", e.what(), e.key, std::cerr);
    }
    if (name == "config") {
        std::cout << amflow::echo_config(cfg);
        return 0;
    }
    return amflow::run_subcommand(name, cfg, diag_kind);
}
