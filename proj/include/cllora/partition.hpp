#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cllora/corpus.hpp"

namespace cllora {

enum class PartitionMode { Iid, LabelSkew, QuantitySkew };

PartitionMode parse_partition_mode(std::string_view name);
std::string_view to_string(PartitionMode mode);

struct PartitionSpec {
    PartitionMode mode = PartitionMode::Iid;
    double alpha = 1.0; // ignored for iid
    std::size_t n_clients = 10;
    std::uint64_t seed = 0;

    void validate() const;
};

struct ClientShard {
    std::uint32_t client_id = 0;
    std::vector<std::uint32_t> doc_ids; // ascending

    std::size_t size() const { return doc_ids.size(); }
};

using Shards = std::vector<ClientShard>;

Shards partition_iid(std::span<const std::uint32_t> train_ids, std::size_t n_clients, std::uint64_t seed);
Shards partition_label_skew(const Corpus& corpus, std::span<const std::uint32_t> train_ids, std::size_t n_clients,
                            double alpha, std::uint64_t seed);
Shards partition_quantity_skew(const Corpus& corpus, std::span<const std::uint32_t> train_ids,
                               std::size_t n_clients, double alpha, std::uint64_t seed);
Shards partition(const Corpus& corpus, std::span<const std::uint32_t> train_ids, const PartitionSpec& spec);

// Rounds weights * total to integers summing to `total`; leftover units go to
// the largest fractional parts, ties to the lowest index.
std::vector<std::size_t> largest_remainder(std::span<const double> weights, std::size_t total);

// KL(p || q) between normalized histograms; 0 log 0 = 0.
double kl_divergence(const ClassHistogram& p, const ClassHistogram& q);

struct PartitionViolation {
    enum class Kind { Duplicate, Missing, Foreign, Empty, BadClientId };
    Kind kind;
    std::uint32_t doc_id = 0;
    std::vector<std::uint32_t> clients;
    std::string message;
};

struct PartitionReport {
    std::vector<PartitionViolation> violations;
    std::vector<std::size_t> sizes;
    std::vector<ClassHistogram> histograms;

    bool ok() const { return violations.empty(); }
};

PartitionReport validate_partition(const Shards& shards, std::span<const std::uint32_t> train_ids,
                                   const Corpus& corpus);
// Throws DataError listing offending clients if the report has violations.
void require_valid(const PartitionReport& report);

// Shard file: one json record per client, {client_id, doc_ids, class_histogram}.
void write_shards(const Shards& shards, const Corpus& corpus, std::ostream& out);
Shards read_shards(std::istream& in, std::string_view source_name);

// CSV: client_id,n_k,class_0..class_4
void write_histogram_csv(const PartitionReport& report, std::ostream& out);

} // namespace cllora
