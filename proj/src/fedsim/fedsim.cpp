#include "cllora/fedsim.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <exception>
#include <fmt/format.h>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>

#include "cllora/errors.hpp"
#include "cllora/numerics/kernels.hpp"
#include "cllora/numerics/ops.hpp"

namespace cllora {

ClientTestMode parse_client_test_mode(std::string_view name) {
    if (name == "global") {
        return ClientTestMode::Global;
    }
    if (name == "holdout") {
        return ClientTestMode::Holdout;
    }
    throw UsageError(fmt::format("unknown client test mode '{}' (expected global or holdout)", name));
}

std::string_view to_string(ClientTestMode mode) { return mode == ClientTestMode::Global ? "global" : "holdout"; }

void FedConfig::validate() const {
    if (n_clients < 1 || rounds < 1 || epochs < 1 || batch_size < 1) {
        throw UsageError("clients, rounds, epochs and batch size must all be at least 1");
    }
    if (!(fraction > 0.0 && fraction <= 1.0)) {
        throw UsageError(fmt::format("client fraction C must be in (0, 1], got {}", fraction));
    }
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
        throw UsageError(fmt::format("learning rate must be positive, got {}", learning_rate));
    }
    if (!(holdout_fraction > 0.0 && holdout_fraction < 0.5)) {
        throw UsageError(fmt::format("holdout fraction must be in (0, 0.5), got {}", holdout_fraction));
    }
}

std::size_t FedConfig::clients_per_round() const {
    auto m = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n_clients)));
    return std::max<std::size_t>(m, 1);
}

std::vector<std::uint32_t> select_clients(Rng& rng, std::size_t n_clients, double fraction) {
    FedConfig probe;
    probe.n_clients = n_clients;
    probe.fraction = fraction;
    const std::size_t m = probe.clients_per_round();
    std::vector<std::uint32_t> ids(n_clients);
    std::iota(ids.begin(), ids.end(), 0u);
    // Partial Fisher-Yates: the first m slots are a uniform m-subset.
    for (std::size_t i = 0; i < m; ++i) {
        std::size_t j = i + static_cast<std::size_t>(rng.below(n_clients - i));
        std::swap(ids[i], ids[j]);
    }
    ids.resize(m);
    std::sort(ids.begin(), ids.end());
    return ids;
}

ClientResult client_update(const FrozenBase& base, std::uint32_t client_id, const LoraDelta& global,
                           const Corpus& corpus, std::span<const std::uint32_t> shard, std::size_t epochs,
                           double learning_rate, std::size_t batch_size, Rng rng) {
    if (shard.empty()) {
        throw DataError(fmt::format("client {} has an empty shard", client_id));
    }
    if (epochs < 1 || batch_size < 1) {
        throw UsageError("client_update needs at least one epoch and a positive batch size");
    }
    LoraAdapter local = adapter_from_delta(global, base.config);

    std::vector<TrainingSequence> data;
    data.reserve(shard.size());
    for (auto id : shard) {
        data.push_back(make_training_sequence(corpus.at(id), base.config.max_seq_len));
    }

    ClientResult result;
    result.stats.client_id = client_id;
    result.stats.n_k = shard.size();
    std::vector<std::size_t> order(data.size());
    std::vector<TrainingSequence> batch;
    for (std::size_t e = 0; e < epochs; ++e) {
        std::iota(order.begin(), order.end(), 0);
        rng.split("epoch", e).shuffle(order.begin(), order.end());
        double epoch_nll = 0.0;
        std::size_t epoch_tokens = 0;
        for (std::size_t start = 0; start < order.size(); start += batch_size) {
            std::size_t stop = std::min(order.size(), start + batch_size);
            batch.clear();
            for (std::size_t i = start; i < stop; ++i) {
                batch.push_back(data[order[i]]);
            }
            LossAndGrads lg = loss_and_grads(base, local, batch);
            for (std::size_t f = 0; f < local.factors.size(); ++f) {
                sgd_step(local.factors[f].a, lg.grads.factors[f].a, learning_rate);
                sgd_step(local.factors[f].b, lg.grads.factors[f].b, learning_rate);
            }
            epoch_nll += lg.loss * static_cast<double>(lg.tokens);
            epoch_tokens += lg.tokens;
            ++result.stats.steps;
        }
        result.stats.local_train_loss = epoch_nll / static_cast<double>(epoch_tokens);
    }
    result.delta = extract_delta(local, base.config);
    return result;
}

std::vector<double> aggregation_weights(std::span<const std::size_t> n_k) {
    std::size_t n = std::accumulate(n_k.begin(), n_k.end(), std::size_t{0});
    if (n == 0) {
        throw DataError("aggregation: total sample count n is zero");
    }
    std::vector<double> w(n_k.size());
    for (std::size_t i = 0; i < n_k.size(); ++i) {
        w[i] = static_cast<double>(n_k[i]) / static_cast<double>(n);
    }
    return w;
}

namespace {

std::vector<double> weights_of(std::span<const WeightedDelta> deltas) {
    if (deltas.empty()) {
        throw DataError("aggregation: no client deltas");
    }
    std::vector<std::size_t> n_k;
    for (const auto& d : deltas) {
        if (d.delta == nullptr) {
            throw DataError("aggregation: null delta");
        }
        if (d.delta->fingerprint != deltas.front().delta->fingerprint) {
            throw DataError(fmt::format("aggregation: fingerprint {:016x} differs from {:016x}", d.delta->fingerprint,
                                        deltas.front().delta->fingerprint));
        }
        if (d.delta->factors.size() != deltas.front().delta->factors.size()) {
            throw DataError("aggregation: deltas carry different numbers of factor pairs");
        }
        n_k.push_back(d.n_k);
    }
    return aggregation_weights(n_k);
}

void accumulate(Matrix& acc, const Matrix& m, double w) {
    require_same_shape(acc, m, "aggregate");
    double* a = acc.data();
    const double* x = m.data();
    for (std::size_t i = 0; i < acc.size(); ++i) {
        a[i] += w * x[i];
    }
}

} // namespace

LoraDelta aggregate(std::span<const WeightedDelta> deltas) {
    const auto w = weights_of(deltas);
    const LoraDelta& first = *deltas.front().delta;
    LoraDelta out;
    out.fingerprint = first.fingerprint;
    for (const auto& f : first.factors) {
        out.factors.push_back({f.layer, f.target, Matrix(f.a.rows(), f.a.cols()), Matrix(f.b.rows(), f.b.cols())});
    }
    for (std::size_t k = 0; k < deltas.size(); ++k) {
        const auto& d = *deltas[k].delta;
        for (std::size_t f = 0; f < out.factors.size(); ++f) {
            accumulate(out.factors[f].a, d.factors[f].a, w[k]);
            accumulate(out.factors[f].b, d.factors[f].b, w[k]);
        }
    }
    return out;
}

double product_averaging_gap(std::span<const WeightedDelta> deltas) {
    const auto w = weights_of(deltas);
    LoraDelta mean = aggregate(deltas);
    double sq = 0.0;
    for (std::size_t f = 0; f < mean.factors.size(); ++f) {
        Matrix mean_product(mean.factors[f].a.rows(), mean.factors[f].b.cols());
        for (std::size_t k = 0; k < deltas.size(); ++k) {
            const auto& fk = deltas[k].delta->factors[f];
            accumulate(mean_product, matmul(fk.a, fk.b), w[k]);
        }
        Matrix diff = matmul(mean.factors[f].a, mean.factors[f].b);
        scale_inplace(diff, -1.0);
        add_inplace(diff, mean_product);
        double n = frobenius_norm(diff);
        sq += n * n;
    }
    return std::sqrt(sq);
}

CommCost comm_cost(const ModelConfig& model) {
    CommCost c;
    c.parameters = count_trainable(model);
    c.payload_bytes = 4 * c.parameters;
    c.header_bytes = kDeltaHeaderBytes + kDeltaPairHeaderBytes * model.n_layers * model.lora_targets.size();
    return c;
}

FederatedServer::FederatedServer(const FrozenBase& base, LoraAdapter initial_adapter, const FedConfig& config,
                                 const Corpus& corpus, const Shards& shards, std::span<const std::uint32_t> test_ids)
    : base_(base), config_(config), corpus_(corpus), test_ids_(test_ids.begin(), test_ids.end()),
      rng_(Rng(config.seed).split("federation")) {
    config_.validate();
    if (shards.size() != config_.n_clients) {
        throw DataError(fmt::format("{} shards supplied for {} clients", shards.size(), config_.n_clients));
    }
    if (test_ids_.empty()) {
        throw DataError("global test set is empty");
    }
    Rng holdout_rng = rng_.split("holdout");
    for (std::size_t k = 0; k < shards.size(); ++k) {
        if (shards[k].client_id != k) {
            throw DataError(fmt::format("shard at position {} carries client_id {}", k, shards[k].client_id));
        }
        if (shards[k].doc_ids.empty()) {
            throw DataError(fmt::format("client {} has an empty shard", k));
        }
        std::vector<std::uint32_t> ids = shards[k].doc_ids;
        std::vector<std::uint32_t> held;
        if (config_.client_test == ClientTestMode::Holdout && ids.size() >= 2) {
            holdout_rng.split("client", k).shuffle(ids.begin(), ids.end());
            auto n_held = static_cast<std::size_t>(
                std::ceil(config_.holdout_fraction * static_cast<double>(ids.size())));
            held.assign(ids.end() - static_cast<std::ptrdiff_t>(n_held), ids.end());
            ids.resize(ids.size() - n_held);
            std::sort(ids.begin(), ids.end());
            std::sort(held.begin(), held.end());
        }
        train_shards_.push_back(std::move(ids));
        holdout_shards_.push_back(std::move(held));
    }
    state_.global = extract_delta(initial_adapter, base_.config);
    delta_bytes_ = encoded_size(state_.global);
}

RoundRecord FederatedServer::step() {
    const std::size_t t = state_.round + 1;
    Rng select_rng = rng_.split("select", t);
    const auto selected = select_clients(select_rng, config_.n_clients, config_.fraction);
    const std::size_t m = selected.size();

    // Broadcast: every selected client decodes the same encoded global delta.
    const auto broadcast = encode_delta(state_.global);
    const LoraDelta received = decode_delta(broadcast, base_.config);

    std::vector<ClientResult> results(m);
    std::vector<double> local_test(m, 0.0);
    std::vector<std::exception_ptr> errors(m);
    const auto count = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(dynamic, 1) if (config_.parallel_clients)
    for (std::ptrdiff_t i = 0; i < count; ++i) {
        const auto slot = static_cast<std::size_t>(i);
        const std::uint32_t k = selected[slot];
        try {
            Rng client_rng = rng_.split("client", k).split(t);
            results[slot] = client_update(base_, k, received, corpus_, train_shards_[k], config_.epochs,
                                          config_.learning_rate, config_.batch_size, client_rng);
            LoraAdapter local = adapter_from_delta(results[slot].delta, base_.config);
            const auto& eval_ids = holdout_shards_[k].empty() ? test_ids_ : holdout_shards_[k];
            local_test[slot] = evaluate(base_, &local, corpus_, eval_ids).mean();
        } catch (...) {
            errors[slot] = std::current_exception();
        }
    }
    for (auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }

    // Upload: the server aggregates what it decodes, in ascending client id.
    std::vector<LoraDelta> uploaded;
    uploaded.reserve(m);
    for (const auto& r : results) {
        uploaded.push_back(decode_delta(encode_delta(r.delta), base_.config));
    }
    std::vector<WeightedDelta> weighted;
    for (std::size_t i = 0; i < m; ++i) {
        weighted.push_back({results[i].stats.n_k, &uploaded[i]});
    }

    RoundRecord rec;
    rec.round = t;
    std::vector<std::size_t> n_k;
    for (std::size_t i = 0; i < m; ++i) {
        rec.clients.push_back({selected[i], results[i].stats.n_k, results[i].stats.local_train_loss, local_test[i]});
        n_k.push_back(results[i].stats.n_k);
    }
    rec.weights = aggregation_weights(n_k);
    if (config_.product_diagnostic) {
        rec.product_gap = product_averaging_gap(weighted);
    }
    state_.global = aggregate(weighted);
    state_.round = t;

    LoraAdapter global_adapter = adapter_from_delta(state_.global, base_.config);
    rec.global_test_loss = evaluate(base_, &global_adapter, corpus_, test_ids_).mean();
    rec.bytes_down = m * delta_bytes_;
    rec.bytes_up = m * delta_bytes_;
    state_.cumulative_bytes += rec.bytes_down + rec.bytes_up;
    return rec;
}

std::vector<RoundRecord> FederatedServer::run() {
    std::vector<RoundRecord> out;
    out.reserve(config_.rounds);
    while (state_.round < config_.rounds) {
        out.push_back(step());
    }
    return out;
}

RunOutput run_federated(const FedConfig& config, const ModelConfig& model, std::uint64_t model_seed,
                        const Corpus& corpus, const Shards& shards, std::span<const std::uint32_t> test_ids) {
    auto init = init_model(model, model_seed);
    FederatedServer server(init.base, std::move(init.adapter), config, corpus, shards, test_ids);
    RunOutput out;
    out.rounds = server.run();
    out.final_delta = server.state().global;
    out.cumulative_bytes = server.state().cumulative_bytes;
    return out;
}

void write_round_log(std::span<const RoundRecord> rounds, std::ostream& out) {
    out << "round,client_id,n_k,local_train_loss,local_test_loss,global_test_loss,bytes_up,bytes_down\n";
    for (const auto& r : rounds) {
        const std::size_t m = r.clients.size();
        const std::size_t per_client_up = m == 0 ? 0 : r.bytes_up / m;
        const std::size_t per_client_down = m == 0 ? 0 : r.bytes_down / m;
        std::size_t n = 0;
        for (const auto& c : r.clients) {
            out << fmt::format("{},{},{},{},{},{},{},{}\n", r.round, c.client_id, c.n_k, c.local_train_loss,
                               c.local_test_loss, r.global_test_loss, per_client_up, per_client_down);
            n += c.n_k;
        }
        out << fmt::format("{},-1,{},,,{},{},{}\n", r.round, n, r.global_test_loss, r.bytes_up, r.bytes_down);
    }
}

namespace {

std::vector<std::string_view> split_csv(std::string_view line) {
    std::vector<std::string_view> fields;
    std::size_t start = 0;
    for (;;) {
        auto comma = line.find(',', start);
        if (comma == std::string_view::npos) {
            fields.push_back(line.substr(start));
            return fields;
        }
        fields.push_back(line.substr(start, comma - start));
        start = comma + 1;
    }
}

template <typename T>
T parse_number(std::string_view field, std::string_view source, std::size_t line_no, std::string_view column) {
    T value{};
    if constexpr (std::is_floating_point_v<T>) {
        std::string tmp(field);
        char* end = nullptr;
        value = std::strtod(tmp.c_str(), &end);
        if (tmp.empty() || end != tmp.c_str() + tmp.size()) {
            throw DataError(fmt::format("{}:{}: column {} is not a number: '{}'", source, line_no, column, field));
        }
    } else {
        auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
        if (ec != std::errc() || ptr != field.data() + field.size()) {
            throw DataError(fmt::format("{}:{}: column {} is not an integer: '{}'", source, line_no, column, field));
        }
    }
    return value;
}

} // namespace

std::vector<RoundRecord> read_round_log(std::istream& in, std::string_view source_name) {
    static constexpr std::string_view kHeader =
        "round,client_id,n_k,local_train_loss,local_test_loss,global_test_loss,bytes_up,bytes_down";
    std::string line;
    if (!std::getline(in, line) || line != kHeader) {
        throw DataError(fmt::format("{}: missing or unexpected round log header", source_name));
    }
    std::vector<RoundRecord> rounds;
    std::size_t line_no = 1;
    bool open = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        auto f = split_csv(line);
        if (f.size() != 8) {
            throw DataError(fmt::format("{}:{}: expected 8 fields, got {}", source_name, line_no, f.size()));
        }
        auto round = parse_number<std::size_t>(f[0], source_name, line_no, "round");
        auto client = parse_number<long long>(f[1], source_name, line_no, "client_id");
        if (!open) {
            rounds.emplace_back();
            rounds.back().round = round;
            open = true;
        } else if (rounds.back().round != round) {
            throw DataError(fmt::format("{}:{}: round {} starts before round {} has a summary row", source_name,
                                        line_no, round, rounds.back().round));
        }
        auto& r = rounds.back();
        r.global_test_loss = parse_number<double>(f[5], source_name, line_no, "global_test_loss");
        if (client < 0) {
            r.bytes_up = parse_number<std::size_t>(f[6], source_name, line_no, "bytes_up");
            r.bytes_down = parse_number<std::size_t>(f[7], source_name, line_no, "bytes_down");
            std::vector<std::size_t> n_k;
            for (const auto& c : r.clients) {
                n_k.push_back(c.n_k);
            }
            if (!n_k.empty()) {
                r.weights = aggregation_weights(n_k);
            }
            open = false;
            continue;
        }
        ClientRoundEntry c;
        c.client_id = static_cast<std::uint32_t>(client);
        c.n_k = parse_number<std::size_t>(f[2], source_name, line_no, "n_k");
        c.local_train_loss = parse_number<double>(f[3], source_name, line_no, "local_train_loss");
        c.local_test_loss = parse_number<double>(f[4], source_name, line_no, "local_test_loss");
        r.clients.push_back(c);
    }
    if (open) {
        throw DataError(fmt::format("{}: last round has no summary row (truncated log?)", source_name));
    }
    return rounds;
}

} // namespace cllora
