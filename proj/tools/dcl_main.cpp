// Command-line front end: dcl <command> [--config PATH] [--set key=value]... [--out DIR] [--seed N]

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "dcl/config.hpp"
#include "dcl/error.hpp"
#include "dcl/runner.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Sobel-GAN features and multi-head auxiliary clustering"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> sets;
    std::optional<std::string> out;
    std::optional<std::uint64_t> seed;
    const std::vector<std::pair<std::string, std::string>> commands = {
        {"train-gan", "train the Sobel-augmented GAN; writes gan.ckpt and gan_log.jsonl"},
        {"extract", "discriminator features m (no dropout) and m' (feature_dropout)"},
        {"cluster", "train the cluster-head bank; writes cluster_log.jsonl and assignments"},
        {"evaluate", "Hungarian-matched accuracy of the assignments; writes report.json"},
        {"pipeline", "train-gan, extract, cluster, evaluate (synth-data replaces the first two for gauss-3)"},
        {"synth-data", "sample the gauss-3 mixture into feature and label files"},
        {"grad-check", "finite-difference gradient suite; writes gradcheck.json"},
    };
    for (const auto& [name, help] : commands) {
        auto* sub = app.add_subcommand(name, help);
        sub->add_option("--config", config_path, "key=value config file")->check(CLI::ExistingFile);
        sub->add_option("--set", sets, "override, key=value (repeatable)");
        sub->add_option("--out", out, "output directory");
        sub->add_option("--seed", seed, "master seed");
    }
    app.add_flag_callback("--list-keys", [] {
        for (const auto& k : dcl::config::keys())
            std::printf("%-24s %-12s %s\n", std::string(k.key).c_str(), std::string(k.default_value).c_str(),
                        std::string(k.help).c_str());
        std::exit(0);
    }, "print every config key with its default");

    std::string command = "dcl";
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        for (auto* sub : app.get_subcommands()) command = sub->get_name();
        std::cerr << dcl::runner::error_record(command, dcl::ConfigError(e.what())) << '\n';
        return 2;
    }
    command = app.get_subcommands().front()->get_name();

    try {
        auto cfg = dcl::config::RunConfig();
        if (!config_path.empty()) cfg.merge_file(config_path);
        for (const auto& s : sets) cfg.assign(s);
        if (out) cfg.set("out", *out);
        if (seed) cfg.set("seed", std::to_string(*seed));
        dcl::runner::run(command, cfg);
    } catch (const std::exception& e) {
        std::cerr << dcl::runner::error_record(command, e) << '\n';
        return dcl::runner::exit_code(e);
    }
    return 0;
}
