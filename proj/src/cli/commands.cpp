#include "cllora/cli/commands.hpp"

#include <algorithm>
#include <fmt/format.h>
#include <fstream>
#include <json.hpp>
#include <map>
#include <ostream>
#include <sstream>

#include "cllora/delta.hpp"
#include "cllora/errors.hpp"
#include "cllora/fedsim.hpp"
#include "cllora/metrics.hpp"
#include "cllora/partition.hpp"

namespace cllora::cli {

namespace fs = std::filesystem;

namespace {

std::ofstream open_out(const fs::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw DataError(fmt::format("cannot write '{}'", path.string()));
    }
    return out;
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) {
        throw DataError(fmt::format("cannot create output directory '{}': {}", dir.string(), ec.message()));
    }
}

fs::path write_config_copy(const ExperimentConfig& config) {
    auto path = config.out / "config.txt";
    auto out = open_out(path);
    out << config.serialize();
    return path;
}

std::string cell_name(PartitionMode mode, double alpha, std::uint64_t seed) {
    if (mode == PartitionMode::Iid) {
        return fmt::format("iid-s{}", seed);
    }
    return fmt::format("{}-a{}-s{}", to_string(mode), alpha, seed);
}

} // namespace

PreparedCorpus prepare_corpus(const ExperimentConfig& config) {
    PreparedCorpus p;
    if (config.corpus.source == "synthetic") {
        p.corpus = synth_corpus(config.corpus.synth_seed, config.corpus.synth_docs, config.corpus.synth_profile,
                                config.model.max_seq_len);
    } else {
        p.corpus = ingest(config.corpus.source, config.corpus.format, config.model.max_seq_len);
    }
    p.split = split_corpus(p.corpus, config.corpus.test_fraction, config.split_seed());
    return p;
}

PartitionOutputs cmd_partition(const ExperimentConfig& config, std::ostream& log) {
    config.validate();
    ensure_dir(config.out);
    auto prepared = prepare_corpus(config);
    for (const auto& w : prepared.split.warnings) {
        log << "warning: " << w << '\n';
    }
    PartitionSpec spec = config.partition;
    spec.seed = config.partition_seed();
    Shards shards = partition(prepared.corpus, prepared.split.train, spec);
    auto report = validate_partition(shards, prepared.split.train, prepared.corpus);
    require_valid(report);

    PartitionOutputs paths;
    paths.config = write_config_copy(config);
    paths.shards = config.out / "shards.jsonl";
    {
        auto out = open_out(paths.shards);
        write_shards(shards, prepared.corpus, out);
    }
    paths.histogram = config.out / "histogram.csv";
    {
        auto out = open_out(paths.histogram);
        write_histogram_csv(report, out);
    }
    paths.manifest = config.out / "manifest.jsonl";
    {
        auto out = open_out(paths.manifest);
        write_manifest(prepared.corpus, out);
    }
    paths.report = config.out / "partition_report.json";
    {
        nlohmann::ordered_json j;
        j["mode"] = std::string(to_string(spec.mode));
        j["alpha"] = spec.alpha;
        j["clients"] = spec.n_clients;
        j["train_documents"] = prepared.split.train.size();
        j["test_documents"] = prepared.split.test.size();
        if (prepared.corpus.boundaries) {
            j["boundaries"] = *prepared.corpus.boundaries;
        } else {
            j["boundaries"] = nullptr;
        }
        j["sizes"] = report.sizes;
        j["split_warnings"] = prepared.split.warnings;
        j["violations"] = nlohmann::json::array();
        auto out = open_out(paths.report);
        out << j.dump(2) << '\n';
    }
    log << fmt::format("partitioned {} training documents into {} {} shards (sizes {}..{})\n",
                       prepared.split.train.size(), shards.size(), to_string(spec.mode),
                       *std::min_element(report.sizes.begin(), report.sizes.end()),
                       *std::max_element(report.sizes.begin(), report.sizes.end()));
    return paths;
}

TrainOutputs cmd_train(const ExperimentConfig& config, std::ostream& log) {
    config.validate();
    const fs::path shard_path = config.shard_path();
    std::ifstream shard_in(shard_path);
    if (!shard_in) {
        throw DataError(fmt::format("shard file '{}' not found (run `partition` first or set partition.shards)",
                                    shard_path.string()));
    }
    Shards shards = read_shards(shard_in, shard_path.string());
    auto prepared = prepare_corpus(config);
    if (shards.size() != config.partition.n_clients) {
        throw DataError(fmt::format("shard file '{}' has {} clients but partition.clients is {}", shard_path.string(),
                                    shards.size(), config.partition.n_clients));
    }
    auto report = validate_partition(shards, prepared.split.train, prepared.corpus);
    if (!report.ok()) {
        throw DataError(fmt::format("shard file '{}' does not match the corpus split: {}", shard_path.string(),
                                    report.violations.front().message));
    }

    ensure_dir(config.out);
    FedConfig fed = config.fed;
    fed.n_clients = config.partition.n_clients;
    fed.seed = config.federation_seed();
    auto result = run_federated(fed, config.model, config.model_seed(), prepared.corpus, shards, prepared.split.test);

    TrainOutputs paths;
    paths.config = write_config_copy(config);
    paths.rounds = config.out / "rounds.csv";
    {
        auto out = open_out(paths.rounds);
        write_round_log(result.rounds, out);
    }
    if (fed.product_diagnostic) {
        auto out = open_out(config.out / "product_gap.csv");
        out << "round,product_gap\n";
        for (const auto& r : result.rounds) {
            out << fmt::format("{},{}\n", r.round, r.product_gap.value_or(0.0));
        }
    }
    paths.summary = config.out / "summary.csv";
    {
        SummaryRow row;
        if (config.partition.mode != PartitionMode::Iid) {
            row.alpha = config.partition.alpha;
        }
        row.mode = std::string(to_string(config.partition.mode));
        row.seed = config.seed;
        row.curve = summarize(result.rounds, config.overfit_patience);
        auto out = open_out(paths.summary);
        write_summary_header(out);
        write_summary_row(row, out);
    }
    paths.delta = config.out / "delta.cllr";
    write_delta_file(paths.delta, result.final_delta);
    log << fmt::format("trained {} rounds; global test loss {:.4f} -> {:.4f}; {} bytes exchanged\n",
                       result.rounds.size(), result.rounds.front().global_test_loss,
                       result.rounds.back().global_test_loss, result.cumulative_bytes);
    return paths;
}

SweepOutcome cmd_sweep(const ExperimentConfig& config, std::ostream& log) {
    config.validate();
    if (config.sweep.modes.empty() || config.sweep.seeds.empty()) {
        throw UsageError("sweep needs at least one mode and one seed");
    }
    struct Cell {
        PartitionMode mode;
        double alpha;
        std::uint64_t seed;
        std::string name;
    };
    std::vector<Cell> cells;
    for (auto mode : config.sweep.modes) {
        std::vector<double> alphas = config.sweep.alphas;
        if (mode == PartitionMode::Iid) {
            alphas = {config.partition.alpha};
        } else if (alphas.empty()) {
            throw UsageError("sweep over a skewed mode needs at least one alpha");
        }
        for (double a : alphas) {
            for (auto s : config.sweep.seeds) {
                cells.push_back({mode, a, s, cell_name(mode, a, s)});
            }
        }
    }
    std::sort(cells.begin(), cells.end(), [](const Cell& x, const Cell& y) {
        auto kx = std::make_tuple(std::string(to_string(x.mode)), x.alpha, x.seed);
        auto ky = std::make_tuple(std::string(to_string(y.mode)), y.alpha, y.seed);
        return kx < ky;
    });
    cells.erase(std::unique(cells.begin(), cells.end(), [](const Cell& a, const Cell& b) { return a.name == b.name; }),
                cells.end());

    ensure_dir(config.out / "cells");
    SweepOutcome outcome;
    outcome.cells = cells.size();
    std::vector<std::string> errors(cells.size());
    std::vector<char> skipped(cells.size(), 0);
    std::vector<std::string> logs(cells.size());
    const auto n = static_cast<std::ptrdiff_t>(cells.size());
#pragma omp parallel for schedule(dynamic, 1) if (config.sweep.parallel)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        const auto& cell = cells[static_cast<std::size_t>(i)];
        ExperimentConfig c = config;
        c.partition.mode = cell.mode;
        c.partition.alpha = cell.alpha;
        c.seed = cell.seed;
        c.out = config.out / "cells" / cell.name;
        c.shards.clear();
        std::ostringstream cell_log;
        try {
            if (fs::exists(c.out / "summary.csv")) {
                skipped[static_cast<std::size_t>(i)] = 1;
            } else {
                cmd_partition(c, cell_log);
                cmd_train(c, cell_log);
            }
        } catch (const std::exception& e) {
            errors[static_cast<std::size_t>(i)] = e.what();
        }
        logs[static_cast<std::size_t>(i)] = cell_log.str();
    }

    outcome.summary = config.out / "sweep_summary.csv";
    auto out = open_out(outcome.summary);
    write_summary_header(out);
    std::ofstream failures;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        const auto& cell = cells[i];
        if (skipped[i]) {
            ++outcome.skipped;
            log << cell.name << ": already complete, reused\n";
        } else {
            log << cell.name << ": " << logs[i];
        }
        if (!errors[i].empty()) {
            outcome.failures.push_back(cell.name + ": " + errors[i]);
            log << cell.name << ": FAILED " << errors[i] << '\n';
            continue;
        }
        std::ifstream in(config.out / "cells" / cell.name / "summary.csv");
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty() || line[0] == '#' || line.rfind("alpha,", 0) == 0) {
                continue;
            }
            out << line << '\n';
        }
    }
    if (!outcome.failures.empty()) {
        auto fout = open_out(config.out / "failures.txt");
        for (const auto& f : outcome.failures) {
            fout << f << '\n';
        }
    }
    return outcome;
}

void cmd_report(const std::vector<fs::path>& run_dirs, std::ostream& out) {
    if (run_dirs.empty()) {
        throw UsageError("report needs at least one run directory");
    }
    std::map<std::string, int> seen;
    out << "series,round,value\n";
    for (const auto& dir : run_dirs) {
        auto path = dir / "rounds.csv";
        std::ifstream in(path);
        if (!in) {
            throw DataError(fmt::format("run directory '{}' has no rounds.csv", dir.string()));
        }
        auto rounds = read_round_log(in, path.string());
        auto label = dir.filename().string();
        if (label.empty() || label == ".") {
            label = fs::absolute(dir).parent_path().filename().string();
        }
        if (int k = seen[label]++; k > 0) {
            label += fmt::format("#{}", k);
        }
        auto curve = summarize(rounds);
        for (std::size_t i = 0; i < rounds.size(); ++i) {
            out << fmt::format("{}/global_test_loss,{},{}\n", label, rounds[i].round, rounds[i].global_test_loss);
        }
        for (std::size_t i = 0; i < rounds.size(); ++i) {
            if (curve.fairness[i]) {
                out << fmt::format("{}/fairness,{},{}\n", label, rounds[i].round, *curve.fairness[i]);
            }
        }
        for (const auto& r : rounds) {
            for (const auto& c : r.clients) {
                out << fmt::format("{}/client_{}_test_loss,{},{}\n", label, c.client_id, r.round, c.local_test_loss);
            }
        }
    }
}

} // namespace cllora::cli
