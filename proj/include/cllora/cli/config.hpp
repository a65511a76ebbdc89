#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cllora/corpus.hpp"
#include "cllora/fedsim.hpp"
#include "cllora/model.hpp"
#include "cllora/partition.hpp"

namespace cllora::cli {

// Config file grammar, one entry per line:
//
//   line    := blank | comment | entry
//   comment := '#' any*
//   entry   := key ws* '=' ws* value
//   key     := [a-z_.]+      (must be a known key)
//
// Values are trimmed. Canonical serialization writes every key, sorted, as
// "key = value". Environment variables override file values: key
// "fed.rounds" is read from CLLORA_FED_ROUNDS.
struct CorpusSettings {
    std::string source = "synthetic"; // "synthetic" or a file path
    CorpusFormat format = CorpusFormat::PlainLines;
    std::size_t synth_docs = 2000;
    std::uint64_t synth_seed = 7;
    LengthProfile synth_profile;
    double test_fraction = 0.1;
};

struct SweepSettings {
    std::vector<double> alphas{0.1, 1.0, 100.0};
    std::vector<PartitionMode> modes{PartitionMode::Iid, PartitionMode::LabelSkew, PartitionMode::QuantitySkew};
    std::vector<std::uint64_t> seeds{1, 2, 3};
    bool parallel = false;
};

struct ExperimentConfig {
    std::uint64_t seed = 1;
    std::filesystem::path out = "out";
    CorpusSettings corpus;
    PartitionSpec partition{PartitionMode::Iid, 1.0, 20, 0};
    std::filesystem::path shards; // empty: <out>/shards.jsonl
    FedConfig fed;
    ModelConfig model;
    std::size_t overfit_patience = 3;
    SweepSettings sweep;

    // Seeds for the independent random streams of one run.
    std::uint64_t split_seed() const;
    std::uint64_t partition_seed() const;
    std::uint64_t model_seed() const;
    std::uint64_t federation_seed() const;

    std::filesystem::path shard_path() const;

    void validate() const;
    std::map<std::string, std::string> to_map() const;
    std::string serialize() const;
};

using KeyValues = std::map<std::string, std::string>;

ExperimentConfig default_config();
KeyValues parse_key_values(const std::string& text, const std::string& source_name);
KeyValues read_config_file(const std::filesystem::path& path);
// Applies entries over `base`; unknown keys or bad values throw UsageError.
ExperimentConfig apply_overrides(ExperimentConfig base, const KeyValues& entries);
// CLLORA_* variables for every known key that is set.
KeyValues environment_overrides();
std::vector<std::string> known_keys();

} // namespace cllora::cli
