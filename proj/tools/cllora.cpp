#include <CLI11.hpp>
#include <cstdlib>
#include <fmt/format.h>
#include <iostream>

#include "cllora/cli/commands.hpp"
#include "cllora/errors.hpp"

using namespace cllora;
using namespace cllora::cli;

namespace {

struct Flags {
    std::string config_file;
    std::vector<std::string> sets;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<double> alpha;
    std::optional<std::string> mode;
};

// defaults < config file < environment < --set < dedicated flags
ExperimentConfig resolve(const Flags& flags) {
    ExperimentConfig config = default_config();
    if (!flags.config_file.empty()) {
        config = apply_overrides(config, read_config_file(flags.config_file));
    }
    config = apply_overrides(config, environment_overrides());
    KeyValues sets;
    for (const auto& s : flags.sets) {
        auto eq = s.find('=');
        if (eq == std::string::npos) {
            throw UsageError(fmt::format("--set expects key=value, got '{}'", s));
        }
        sets[s.substr(0, eq)] = s.substr(eq + 1);
    }
    config = apply_overrides(config, sets);
    KeyValues direct;
    if (flags.seed) direct["seed"] = std::to_string(*flags.seed);
    if (flags.out) direct["out"] = *flags.out;
    if (flags.alpha) direct["partition.alpha"] = fmt::format("{}", *flags.alpha);
    if (flags.mode) direct["partition.mode"] = *flags.mode;
    config = apply_overrides(config, direct);
    config.validate();
    return config;
}

void add_common(CLI::App* cmd, Flags& flags) {
    cmd->add_option("--config", flags.config_file, "key = value config file")->check(CLI::ExistingFile);
    cmd->add_option("--set", flags.sets, "override one key (repeatable), e.g. --set fed.rounds=10");
    cmd->add_option("--seed", flags.seed, "master seed");
    cmd->add_option("--out", flags.out, "output directory");
    cmd->add_option("--alpha", flags.alpha, "Dirichlet concentration");
    cmd->add_option("--mode", flags.mode, "partition mode: iid, label or quantity");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Federated LoRA fine-tuning simulator"};
    app.require_subcommand(1);
    Flags flags;
    auto* part = app.add_subcommand("partition", "split the corpus across simulated clients");
    auto* train = app.add_subcommand("train", "run federated rounds over an existing partition");
    auto* sweep = app.add_subcommand("sweep", "partition and train every (mode, alpha, seed) cell");
    auto* report = app.add_subcommand("report", "merge run directories into long-format series");
    auto* selfcheck = app.add_subcommand("selfcheck", "run quick invariant checks");
    auto* keys = app.add_subcommand("keys", "list configuration keys and defaults");
    for (auto* cmd : {part, train, sweep}) {
        add_common(cmd, flags);
    }
    std::vector<std::string> run_dirs;
    report->add_option("runs", run_dirs, "run directories")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        if (*selfcheck) {
            return cmd_selfcheck(std::cout) ? 0 : 3;
        }
        if (*keys) {
            std::cout << default_config().serialize();
            return 0;
        }
        if (*report) {
            std::vector<std::filesystem::path> dirs(run_dirs.begin(), run_dirs.end());
            cmd_report(dirs, std::cout);
            return 0;
        }
        ExperimentConfig config = resolve(flags);
        if (*part) {
            cmd_partition(config, std::cerr);
        } else if (*train) {
            cmd_train(config, std::cerr);
        } else if (*sweep) {
            auto outcome = cmd_sweep(config, std::cerr);
            std::cerr << fmt::format("{} cells ({} reused, {} failed); summary in {}\n", outcome.cells,
                                     outcome.skipped, outcome.failures.size(), outcome.summary.string());
            return outcome.failures.empty() ? 0 : 2;
        }
        return 0;
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return 1;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << '\n';
        return 3;
    }
}
