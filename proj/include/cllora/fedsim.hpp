#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "cllora/corpus.hpp"
#include "cllora/delta.hpp"
#include "cllora/model.hpp"
#include "cllora/numerics/rng.hpp"
#include "cllora/partition.hpp"

namespace cllora {

// Where a participating client's local test loss is measured.
enum class ClientTestMode {
    Global,  // the shared global test set
    Holdout, // a held-out slice of the client's own shard
};

ClientTestMode parse_client_test_mode(std::string_view name);
std::string_view to_string(ClientTestMode mode);

struct FedConfig {
    std::size_t n_clients = 20; // K
    double fraction = 0.1;      // C
    std::size_t rounds = 30;    // T
    std::size_t epochs = 3;     // E
    double learning_rate = 0.3;
    std::size_t batch_size = 8;
    std::uint64_t seed = 0;
    bool parallel_clients = true;
    bool product_diagnostic = false;
    ClientTestMode client_test = ClientTestMode::Global;
    double holdout_fraction = 0.1;

    void validate() const;
    // m = max(floor(C * K), 1)
    std::size_t clients_per_round() const;
};

// m distinct client ids drawn uniformly without replacement, ascending.
std::vector<std::uint32_t> select_clients(Rng& rng, std::size_t n_clients, double fraction);

struct ClientStats {
    std::uint32_t client_id = 0;
    std::size_t n_k = 0;
    double local_train_loss = 0.0; // token-weighted mean over the final epoch's batches
    std::size_t steps = 0;
};

struct ClientResult {
    LoraDelta delta;
    ClientStats stats;
};

// E passes over the shard in minibatches reshuffled every epoch; plain SGD on
// the adapter factors only. learning_rate == 0 leaves the delta untouched.
ClientResult client_update(const FrozenBase& base, std::uint32_t client_id, const LoraDelta& global,
                           const Corpus& corpus, std::span<const std::uint32_t> shard, std::size_t epochs,
                           double learning_rate, std::size_t batch_size, Rng rng);

struct WeightedDelta {
    std::size_t n_k = 0;
    const LoraDelta* delta = nullptr;
};

// n_k / n with n the sum over the given clients.
std::vector<double> aggregation_weights(std::span<const std::size_t> n_k);

// Weighted mean taken separately over every A and every B, folded in the
// order given.
LoraDelta aggregate(std::span<const WeightedDelta> deltas);

// || sum_k w_k A_k B_k - (sum_k w_k A_k)(sum_k w_k B_k) ||_F over all pairs:
// how far factor averaging is from averaging the products.
double product_averaging_gap(std::span<const WeightedDelta> deltas);

struct CommCost {
    std::size_t parameters = 0;
    std::size_t payload_bytes = 0; // parameters * 4
    std::size_t header_bytes = 0;  // magic, version, fingerprint, dims
    std::size_t total() const { return payload_bytes + header_bytes; }
};

// Bytes for one delta in one direction for one client.
CommCost comm_cost(const ModelConfig& model);

struct ClientRoundEntry {
    std::uint32_t client_id = 0;
    std::size_t n_k = 0;
    double local_train_loss = 0.0;
    double local_test_loss = 0.0;

    bool operator==(const ClientRoundEntry&) const = default;
};

struct RoundRecord {
    std::size_t round = 0;
    std::vector<ClientRoundEntry> clients; // ascending client id
    double global_test_loss = 0.0;
    std::size_t bytes_up = 0;
    std::size_t bytes_down = 0;
    std::vector<double> weights;
    std::optional<double> product_gap;

    bool operator==(const RoundRecord&) const = default;
};

struct ServerState {
    std::size_t round = 0;
    LoraDelta global;
    std::size_t cumulative_bytes = 0;
};

// Drives the protocol round by round. The base is held by reference and never
// written; the global model is always base + state().global.
class FederatedServer {
public:
    FederatedServer(const FederatedServer&) = delete;
    FederatedServer& operator=(const FederatedServer&) = delete;

    FederatedServer(const FrozenBase& base, LoraAdapter initial_adapter, const FedConfig& config,
                    const Corpus& corpus, const Shards& shards, std::span<const std::uint32_t> test_ids);

    RoundRecord step();
    std::vector<RoundRecord> run();

    const ServerState& state() const { return state_; }
    std::size_t delta_bytes() const { return delta_bytes_; }

private:
    const FrozenBase& base_;
    FedConfig config_;
    const Corpus& corpus_;
    std::vector<std::vector<std::uint32_t>> train_shards_;
    std::vector<std::vector<std::uint32_t>> holdout_shards_;
    std::vector<std::uint32_t> test_ids_;
    Rng rng_;
    ServerState state_;
    std::size_t delta_bytes_ = 0;
};

struct RunOutput {
    std::vector<RoundRecord> rounds;
    LoraDelta final_delta;
    std::size_t cumulative_bytes = 0;
};

// Initializes base and adapter from `model_seed` and runs all rounds.
RunOutput run_federated(const FedConfig& config, const ModelConfig& model, std::uint64_t model_seed,
                        const Corpus& corpus, const Shards& shards, std::span<const std::uint32_t> test_ids);

// Round log CSV, one row per selected client plus a client_id -1 summary row
// per round:
// round,client_id,n_k,local_train_loss,local_test_loss,global_test_loss,bytes_up,bytes_down
void write_round_log(std::span<const RoundRecord> rounds, std::ostream& out);
std::vector<RoundRecord> read_round_log(std::istream& in, std::string_view source_name);

} // namespace cllora
