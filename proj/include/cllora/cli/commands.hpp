#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "cllora/cli/config.hpp"
#include "cllora/corpus.hpp"

namespace cllora::cli {

// Corpus and train/test split exactly as every subcommand rebuilds them.
struct PreparedCorpus {
    Corpus corpus;
    CorpusSplit split;
};
PreparedCorpus prepare_corpus(const ExperimentConfig& config);

struct PartitionOutputs {
    std::filesystem::path shards;
    std::filesystem::path histogram;
    std::filesystem::path manifest;
    std::filesystem::path report;
    std::filesystem::path config;
};

// Writes shards.jsonl, histogram.csv, manifest.jsonl, partition_report.json and
// config.txt under config.out.
PartitionOutputs cmd_partition(const ExperimentConfig& config, std::ostream& log);

struct TrainOutputs {
    std::filesystem::path rounds;
    std::filesystem::path summary;
    std::filesystem::path delta;
    std::filesystem::path config;
};

// Reads the shard file, runs the federation and writes rounds.csv,
// summary.csv, delta.cllr and config.txt under config.out.
TrainOutputs cmd_train(const ExperimentConfig& config, std::ostream& log);

struct SweepOutcome {
    std::filesystem::path summary;
    std::size_t cells = 0;
    std::size_t skipped = 0; // already complete on disk
    std::vector<std::string> failures;
};

// Cross product of sweep.modes x sweep.alphas x sweep.seeds (iid ignores
// alpha). Each cell lives in <out>/cells/<name>; cells whose summary.csv
// already exists are reused.
SweepOutcome cmd_sweep(const ExperimentConfig& config, std::ostream& log);

// Long-format series,round,value from completed run directories.
void cmd_report(const std::vector<std::filesystem::path>& run_dirs, std::ostream& out);

// Runs the invariant checks; returns true if all passed.
bool cmd_selfcheck(std::ostream& out);

} // namespace cllora::cli
