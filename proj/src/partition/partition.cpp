#include "cllora/partition.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>
#include <fmt/ranges.h>
#include <istream>
#include <json.hpp>
#include <map>
#include <numeric>
#include <ostream>
#include <set>

#include "cllora/errors.hpp"
#include "cllora/numerics/rng.hpp"
#include "cllora/numerics/sampling.hpp"

namespace cllora {

PartitionMode parse_partition_mode(std::string_view name) {
    if (name == "iid") {
        return PartitionMode::Iid;
    }
    if (name == "label" || name == "label_skew") {
        return PartitionMode::LabelSkew;
    }
    if (name == "quantity" || name == "quantity_skew") {
        return PartitionMode::QuantitySkew;
    }
    throw UsageError(fmt::format("unknown partition mode '{}' (expected iid, label or quantity)", name));
}

std::string_view to_string(PartitionMode mode) {
    switch (mode) {
    case PartitionMode::Iid:
        return "iid";
    case PartitionMode::LabelSkew:
        return "label";
    case PartitionMode::QuantitySkew:
        return "quantity";
    }
    return "?";
}

void PartitionSpec::validate() const {
    if (n_clients < 1) {
        throw UsageError("partition needs at least one client");
    }
    if (mode != PartitionMode::Iid && !(alpha > 0.0 && std::isfinite(alpha))) {
        throw UsageError(fmt::format("Dirichlet alpha must be positive, got {}", alpha));
    }
}

std::vector<std::size_t> largest_remainder(std::span<const double> weights, std::size_t total) {
    const double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);
    std::vector<std::size_t> out(weights.size(), 0);
    if (weights.empty()) {
        return out;
    }
    std::vector<double> frac(weights.size());
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        double exact = static_cast<double>(total) * weights[i] / wsum;
        double fl = std::floor(exact);
        out[i] = static_cast<std::size_t>(fl);
        frac[i] = exact - fl;
        assigned += out[i];
    }
    // Floating error can push the floor sum one past total.
    while (assigned > total) {
        auto it = std::max_element(out.begin(), out.end());
        --*it;
        --assigned;
    }
    std::vector<std::size_t> order(weights.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
    for (std::size_t i = 0; assigned < total; i = (i + 1) % order.size()) {
        ++out[order[i]];
        ++assigned;
    }
    return out;
}

double kl_divergence(const ClassHistogram& p, const ClassHistogram& q) {
    double np = 0.0;
    double nq = 0.0;
    for (std::size_t c = 0; c < kNumLengthClasses; ++c) {
        np += static_cast<double>(p[c]);
        nq += static_cast<double>(q[c]);
    }
    if (np == 0.0 || nq == 0.0) {
        return 0.0;
    }
    double kl = 0.0;
    for (std::size_t c = 0; c < kNumLengthClasses; ++c) {
        if (p[c] == 0) {
            continue;
        }
        double pc = static_cast<double>(p[c]) / np;
        double qc = static_cast<double>(q[c]) / nq;
        if (qc == 0.0) {
            return std::numeric_limits<double>::infinity();
        }
        kl += pc * std::log(pc / qc);
    }
    return kl;
}

namespace {

Shards empty_shards(std::size_t n_clients) {
    Shards shards(n_clients);
    for (std::size_t k = 0; k < n_clients; ++k) {
        shards[k].client_id = static_cast<std::uint32_t>(k);
    }
    return shards;
}

void sort_shards(Shards& shards) {
    for (auto& s : shards) {
        std::sort(s.doc_ids.begin(), s.doc_ids.end());
    }
}

std::array<std::vector<std::uint32_t>, kNumLengthClasses> class_pools(const Corpus& corpus,
                                                                      std::span<const std::uint32_t> train_ids) {
    std::array<std::vector<std::uint32_t>, kNumLengthClasses> pools;
    std::vector<std::uint32_t> sorted(train_ids.begin(), train_ids.end());
    std::sort(sorted.begin(), sorted.end());
    for (auto id : sorted) {
        pools[corpus.at(id).length_class].push_back(id);
    }
    return pools;
}

} // namespace

Shards partition_iid(std::span<const std::uint32_t> train_ids, std::size_t n_clients, std::uint64_t seed) {
    if (n_clients < 1) {
        throw UsageError("partition needs at least one client");
    }
    if (train_ids.size() < n_clients) {
        throw DataError(
            fmt::format("cannot give {} clients a document each from {} training documents", n_clients, train_ids.size()));
    }
    std::vector<std::uint32_t> ids(train_ids.begin(), train_ids.end());
    std::sort(ids.begin(), ids.end());
    Rng(seed).split("partition-iid").shuffle(ids.begin(), ids.end());
    Shards shards = empty_shards(n_clients);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        shards[i % n_clients].doc_ids.push_back(ids[i]);
    }
    sort_shards(shards);
    return shards;
}

Shards partition_label_skew(const Corpus& corpus, std::span<const std::uint32_t> train_ids, std::size_t n_clients,
                            double alpha, std::uint64_t seed) {
    PartitionSpec{PartitionMode::LabelSkew, alpha, n_clients, seed}.validate();
    corpus.require_length_classes();
    const std::size_t n = train_ids.size();
    if (n < kNumLengthClasses * n_clients) {
        throw DataError(fmt::format("label skew needs at least {} training documents for {} clients, got {}",
                                    kNumLengthClasses * n_clients, n_clients, n));
    }
    auto pools = class_pools(corpus, train_ids);
    ClassHistogram inventory{};
    for (std::size_t c = 0; c < kNumLengthClasses; ++c) {
        inventory[c] = pools[c].size();
        if (inventory[c] == 0) {
            throw DataError(fmt::format("length class {} has no training documents; label skew needs every class "
                                        "populated (use quantile length classing)",
                                        c));
        }
    }

    Rng root = Rng(seed).split("partition-label");
    Rng prop_rng = root.split("proportions");
    const std::size_t base = n / n_clients;
    const std::size_t extra = n % n_clients;

    std::vector<std::vector<double>> props(n_clients);
    std::vector<std::vector<std::size_t>> target(n_clients);
    ClassHistogram demand{};
    for (std::size_t k = 0; k < n_clients; ++k) {
        props[k] = sample_dirichlet_symmetric(prop_rng, alpha, kNumLengthClasses);
        target[k] = largest_remainder(props[k], base + (k < extra ? 1 : 0));
        for (std::size_t c = 0; c < kNumLengthClasses; ++c) {
            demand[c] += target[k][c];
        }
    }

    // Reconcile demand with inventory one unit at a time. The donor maximizes
    // count * (1 - p) for the oversubscribed class: the deficit is spread over
    // clients holding many units they do not strongly prefer, so no single
    // class gets emptied and dominant classes survive. The unit moves to the
    // donor's most-preferred class with spare inventory.
    for (;;) {
        std::size_t over = kNumLengthClasses;
        for (std::size_t c = 0; c < kNumLengthClasses; ++c) {
            if (demand[c] > inventory[c]) {
                over = c;
                break;
            }
        }
        if (over == kNumLengthClasses) {
            break;
        }
        std::size_t donor = n_clients;
        double best = -1.0;
        for (std::size_t k = 0; k < n_clients; ++k) {
            if (target[k][over] == 0) {
                continue;
            }
            const double score = static_cast<double>(target[k][over]) * (1.0 - props[k][over]);
            if (score > best) {
                best = score;
                donor = k;
            }
        }
        std::size_t dest = kNumLengthClasses;
        for (std::size_t c = 0; c < kNumLengthClasses; ++c) {
            if (c == over || demand[c] >= inventory[c]) {
                continue;
            }
            if (dest == kNumLengthClasses || props[donor][c] > props[donor][dest]) {
                dest = c;
            }
        }
        // Total demand equals total inventory, so a deficit class exists.
        --target[donor][over];
        --demand[over];
        ++target[donor][dest];
        ++demand[dest];
    }

    Rng fill_rng = root.split("fill");
    for (std::size_t c = 0; c < kNumLengthClasses; ++c) {
        fill_rng.split("class", c).shuffle(pools[c].begin(), pools[c].end());
    }
    Shards shards = empty_shards(n_clients);
    std::array<std::size_t, kNumLengthClasses> cursor{};
    for (std::size_t k = 0; k < n_clients; ++k) {
        for (std::size_t c = 0; c < kNumLengthClasses; ++c) {
            for (std::size_t i = 0; i < target[k][c]; ++i) {
                shards[k].doc_ids.push_back(pools[c][cursor[c]++]);
            }
        }
    }
    sort_shards(shards);
    return shards;
}

Shards partition_quantity_skew(const Corpus& corpus, std::span<const std::uint32_t> train_ids,
                               std::size_t n_clients, double alpha, std::uint64_t seed) {
    PartitionSpec{PartitionMode::QuantitySkew, alpha, n_clients, seed}.validate();
    corpus.require_length_classes();
    const std::size_t n = train_ids.size();
    if (n < 2 * n_clients) {
        throw DataError(fmt::format("quantity skew needs at least {} training documents for {} clients, got {}",
                                    2 * n_clients, n_clients, n));
    }
    Rng root = Rng(seed).split("partition-quantity");
    std::vector<double> q(n_clients, 1.0);
    if (n_clients >= 2) {
        Rng size_rng = root.split("sizes");
        q = sample_dirichlet_symmetric(size_rng, alpha, n_clients);
    }
    std::vector<std::size_t> sizes = largest_remainder(q, n);
    for (std::size_t k = 0; k < n_clients; ++k) {
        if (sizes[k] == 0) {
            auto largest = std::max_element(sizes.begin(), sizes.end());
            --*largest;
            sizes[k] = 1;
        }
    }

    // Systematic interleave: the r-th document of class c (after shuffling)
    // sits at position (r + 0.5) / |c|, so any contiguous run of the merged
    // order follows the global class mix to within one document per class.
    auto pools = class_pools(corpus, train_ids);
    Rng fill_rng = root.split("fill");
    struct Keyed {
        double key;
        std::uint32_t cls;
        std::uint32_t id;
    };
    std::vector<Keyed> order;
    order.reserve(n);
    for (std::size_t c = 0; c < kNumLengthClasses; ++c) {
        auto& pool = pools[c];
        fill_rng.split("class", c).shuffle(pool.begin(), pool.end());
        for (std::size_t r = 0; r < pool.size(); ++r) {
            double key = (static_cast<double>(r) + 0.5) / static_cast<double>(pool.size());
            order.push_back({key, static_cast<std::uint32_t>(c), pool[r]});
        }
    }
    std::sort(order.begin(), order.end(), [](const Keyed& a, const Keyed& b) {
        return a.key != b.key ? a.key < b.key : a.cls < b.cls;
    });

    Shards shards = empty_shards(n_clients);
    std::size_t pos = 0;
    for (std::size_t k = 0; k < n_clients; ++k) {
        for (std::size_t i = 0; i < sizes[k]; ++i) {
            shards[k].doc_ids.push_back(order[pos++].id);
        }
    }
    sort_shards(shards);
    return shards;
}

Shards partition(const Corpus& corpus, std::span<const std::uint32_t> train_ids, const PartitionSpec& spec) {
    spec.validate();
    switch (spec.mode) {
    case PartitionMode::Iid:
        return partition_iid(train_ids, spec.n_clients, spec.seed);
    case PartitionMode::LabelSkew:
        return partition_label_skew(corpus, train_ids, spec.n_clients, spec.alpha, spec.seed);
    case PartitionMode::QuantitySkew:
        return partition_quantity_skew(corpus, train_ids, spec.n_clients, spec.alpha, spec.seed);
    }
    throw UsageError("unknown partition mode");
}

PartitionReport validate_partition(const Shards& shards, std::span<const std::uint32_t> train_ids,
                                   const Corpus& corpus) {
    PartitionReport report;
    std::set<std::uint32_t> train(train_ids.begin(), train_ids.end());
    std::map<std::uint32_t, std::vector<std::uint32_t>> owners;
    for (std::size_t k = 0; k < shards.size(); ++k) {
        const auto& s = shards[k];
        if (s.client_id != k) {
            report.violations.push_back({PartitionViolation::Kind::BadClientId, 0, {s.client_id},
                                         fmt::format("shard at position {} has client_id {}", k, s.client_id)});
        }
        if (s.doc_ids.empty()) {
            report.violations.push_back(
                {PartitionViolation::Kind::Empty, 0, {s.client_id}, fmt::format("client {} has no documents", s.client_id)});
        }
        ClassHistogram h{};
        for (auto id : s.doc_ids) {
            owners[id].push_back(s.client_id);
            if (!train.contains(id)) {
                report.violations.push_back({PartitionViolation::Kind::Foreign, id, {s.client_id},
                                             fmt::format("client {} holds document {} which is not a training document",
                                                         s.client_id, id)});
                if (id >= corpus.size()) {
                    continue;
                }
            }
            ++h[corpus.at(id).length_class];
        }
        report.sizes.push_back(s.doc_ids.size());
        report.histograms.push_back(h);
    }
    for (const auto& [id, who] : owners) {
        if (who.size() > 1) {
            report.violations.push_back({PartitionViolation::Kind::Duplicate, id, who,
                                         fmt::format("document {} assigned {} times", id, who.size())});
        }
    }
    for (auto id : train) {
        if (!owners.contains(id)) {
            report.violations.push_back(
                {PartitionViolation::Kind::Missing, id, {}, fmt::format("training document {} is unassigned", id)});
        }
    }
    return report;
}

void require_valid(const PartitionReport& report) {
    if (report.ok()) {
        return;
    }
    std::set<std::uint32_t> clients;
    std::string detail;
    for (const auto& v : report.violations) {
        clients.insert(v.clients.begin(), v.clients.end());
        if (detail.size() < 400) {
            detail += "; " + v.message;
        }
    }
    throw DataError(fmt::format("invalid partition ({} violations, clients [{}]){}", report.violations.size(),
                                fmt::join(clients, ","), detail));
}

void write_shards(const Shards& shards, const Corpus& corpus, std::ostream& out) {
    for (const auto& s : shards) {
        nlohmann::ordered_json rec;
        rec["client_id"] = s.client_id;
        rec["doc_ids"] = s.doc_ids;
        auto h = corpus.class_histogram(s.doc_ids);
        rec["class_histogram"] = std::vector<std::size_t>(h.begin(), h.end());
        out << rec.dump() << '\n';
    }
}

Shards read_shards(std::istream& in, std::string_view source_name) {
    Shards shards;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        try {
            auto rec = nlohmann::json::parse(line);
            ClientShard s;
            s.client_id = rec.at("client_id").get<std::uint32_t>();
            s.doc_ids = rec.at("doc_ids").get<std::vector<std::uint32_t>>();
            shards.push_back(std::move(s));
        } catch (const nlohmann::json::exception& e) {
            throw DataError(fmt::format("{}:{}: malformed shard record: {}", source_name, line_no, e.what()));
        }
    }
    if (shards.empty()) {
        throw DataError(fmt::format("shard file '{}' has no records", source_name));
    }
    return shards;
}

void write_histogram_csv(const PartitionReport& report, std::ostream& out) {
    out << "client_id,n_k";
    for (std::size_t c = 0; c < kNumLengthClasses; ++c) {
        out << ",class_" << c;
    }
    out << '\n';
    for (std::size_t k = 0; k < report.histograms.size(); ++k) {
        out << k << ',' << report.sizes[k];
        for (auto v : report.histograms[k]) {
            out << ',' << v;
        }
        out << '\n';
    }
}

} // namespace cllora
