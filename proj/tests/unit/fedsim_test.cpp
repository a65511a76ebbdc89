#include <gtest/gtest.h>

#include <numeric>
#include <sstream>

#include "cllora/errors.hpp"
#include "cllora/fedsim.hpp"
#include "cllora/numerics/ops.hpp"
#include "cllora/numerics/sampling.hpp"
#include "test_support.hpp"

using namespace cllora;
using cllora::testing::bitwise_equal;

namespace {

ModelConfig small_model() {
    ModelConfig c;
    c.d_model = 16;
    c.n_heads = 2;
    c.d_ff = 32;
    c.max_seq_len = 64;
    return c;
}

LoraDelta random_delta(const ModelConfig& config, Rng& rng, double std = 1.0) {
    LoraDelta d = extract_delta(init_adapter(config, rng.next_u64()), config);
    for (auto& f : d.factors) {
        f.a = sample_normal(rng, f.a.rows(), f.a.cols(), std);
        f.b = sample_normal(rng, f.b.rows(), f.b.cols(), std);
    }
    return d;
}

struct Setup {
    Corpus corpus;
    CorpusSplit split;
    Shards shards;
};

Setup make_setup(std::size_t docs, std::size_t clients, std::uint64_t seed) {
    Setup s;
    s.corpus = synth_corpus(seed, docs, LengthProfile{}, 64);
    s.split = split_corpus(s.corpus, 0.1, seed);
    s.shards = partition_iid(s.split.train, clients, seed);
    return s;
}

double shard_loss(const FrozenBase& base, const LoraDelta& delta, const Corpus& corpus,
                  std::span<const std::uint32_t> shard) {
    LoraAdapter adapter = adapter_from_delta(delta, base.config);
    return evaluate(base, &adapter, corpus, shard).mean();
}

} // namespace

TEST(Selection, ClientsPerRound) {
    FedConfig c;
    c.n_clients = 20;
    c.fraction = 0.1;
    EXPECT_EQ(c.clients_per_round(), 2u);
    c.n_clients = 5;
    EXPECT_EQ(c.clients_per_round(), 1u);
    Rng rng(1);
    auto all = select_clients(rng, 10, 1.0);
    EXPECT_EQ(all, (std::vector<std::uint32_t>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9}));
}

TEST(Selection, DistinctSortedAndUniform) {
    Rng rng(2);
    std::vector<int> hits(20, 0);
    for (int t = 0; t < 20000; ++t) {
        auto s = select_clients(rng, 20, 0.1);
        ASSERT_EQ(s.size(), 2u);
        ASSERT_LT(s[0], s[1]);
        for (auto k : s) ++hits[k];
    }
    for (int h : hits) {
        EXPECT_NEAR(h, 2000, 200);
    }
}

TEST(ClientUpdate, ZeroRateReturnsGlobal) {
    auto config = small_model();
    auto model = init_model(config, 3);
    auto s = make_setup(100, 4, 3);
    Rng rng(3);
    auto global = random_delta(config, rng, 0.1);
    auto r = client_update(model.base, 0, global, s.corpus, s.shards[0].doc_ids, 2, 0.0, 4, Rng(5));
    EXPECT_EQ(r.delta, global);
}

TEST(ClientUpdate, SingleStep) {
    auto config = small_model();
    auto model = init_model(config, 4);
    auto s = make_setup(100, 4, 4);
    Rng rng(4);
    auto global = random_delta(config, rng, 0.1);
    std::vector<std::uint32_t> one_doc{s.shards[0].doc_ids.front()};
    auto r = client_update(model.base, 0, global, s.corpus, one_doc, 1, 0.1, 8, Rng(6));
    EXPECT_EQ(r.stats.steps, 1u);

    LoraAdapter expected = adapter_from_delta(global, config);
    std::vector<TrainingSequence> batch{make_training_sequence(s.corpus.at(one_doc[0]), config.max_seq_len)};
    auto lg = loss_and_grads(model.base, expected, batch);
    for (std::size_t f = 0; f < expected.factors.size(); ++f) {
        sgd_step(expected.factors[f].a, lg.grads.factors[f].a, 0.1);
        sgd_step(expected.factors[f].b, lg.grads.factors[f].b, 0.1);
    }
    EXPECT_EQ(r.delta, extract_delta(expected, config));
}

TEST(ClientUpdate, RejectsZeroEpochs) {
    auto config = small_model();
    auto model = init_model(config, 4);
    auto s = make_setup(100, 4, 4);
    EXPECT_THROW(client_update(model.base, 0, extract_delta(model.adapter, config), s.corpus, s.shards[0].doc_ids, 0,
                               0.1, 4, Rng(1)),
                 UsageError);
}

TEST(ClientUpdate, LocalLossDecreases) {
    ModelConfig config; // default desk-scale model
    int improved = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto model = init_model(config, seed);
        auto s = make_setup(600, 10, seed);
        const auto& shard = s.shards[0].doc_ids;
        auto global = extract_delta(model.adapter, config);
        auto r = client_update(model.base, 0, global, s.corpus, shard, 3, 0.1, 8, Rng(seed));
        improved += shard_loss(model.base, r.delta, s.corpus, shard) <= shard_loss(model.base, global, s.corpus, shard);
    }
    EXPECT_GE(improved, 9);
}

TEST(Aggregate, SingleClientIsIdentity) {
    auto config = small_model();
    Rng rng(7);
    auto d = random_delta(config, rng);
    std::vector<WeightedDelta> in{{17, &d}};
    EXPECT_EQ(aggregate(in), d);
}

TEST(Aggregate, OppositeDeltasCancel) {
    auto config = small_model();
    Rng rng(8);
    auto d = random_delta(config, rng);
    auto neg = d;
    for (auto& f : neg.factors) {
        scale_inplace(f.a, -1.0);
        scale_inplace(f.b, -1.0);
    }
    std::vector<WeightedDelta> in{{5, &d}, {5, &neg}};
    for (const auto& f : aggregate(in).factors) {
        EXPECT_EQ(frobenius_norm(f.a), 0.0);
        EXPECT_EQ(frobenius_norm(f.b), 0.0);
    }
}

TEST(Aggregate, ScalarProbe) {
    auto config = small_model();
    Rng rng(9);
    auto d1 = random_delta(config, rng);
    auto d2 = d1;
    for (auto& f : d1.factors) {
        f.a.fill(1.0);
        f.b.fill(1.0);
    }
    for (auto& f : d2.factors) {
        f.a.fill(5.0);
        f.b.fill(5.0);
    }
    std::vector<WeightedDelta> in{{1, &d1}, {3, &d2}};
    for (const auto& f : aggregate(in).factors) {
        for (double v : f.a.values()) EXPECT_DOUBLE_EQ(v, 4.0);
        for (double v : f.b.values()) EXPECT_DOUBLE_EQ(v, 4.0);
    }
}

TEST(Aggregate, MatchesBruteForce) {
    auto config = small_model();
    Rng rng(10);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t m = 1 + rng.below(6);
        std::vector<LoraDelta> deltas;
        std::vector<std::size_t> n;
        for (std::size_t i = 0; i < m; ++i) {
            deltas.push_back(random_delta(config, rng));
            n.push_back(1 + rng.below(500));
        }
        std::vector<WeightedDelta> in;
        for (std::size_t i = 0; i < m; ++i) in.push_back({n[i], &deltas[i]});
        auto weights = aggregation_weights(n);
        EXPECT_NEAR(std::accumulate(weights.begin(), weights.end(), 0.0), 1.0, 1e-15);
        auto got = aggregate(in);
        const double total = static_cast<double>(std::accumulate(n.begin(), n.end(), std::size_t{0}));
        for (std::size_t f = 0; f < got.factors.size(); ++f) {
            for (auto which : {0, 1}) {
                const Matrix& out = which ? got.factors[f].b : got.factors[f].a;
                for (std::size_t j = 0; j < out.size(); ++j) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < m; ++i) {
                        const Matrix& src = which ? deltas[i].factors[f].b : deltas[i].factors[f].a;
                        s += static_cast<double>(n[i]) * src.data()[j];
                    }
                    EXPECT_NEAR(out.data()[j], s / total, 1e-12);
                }
            }
        }
    }
}

TEST(Aggregate, ProductGapVanishesForOneClient) {
    auto config = small_model();
    Rng rng(11);
    auto d = random_delta(config, rng);
    auto e = random_delta(config, rng);
    std::vector<WeightedDelta> one{{3, &d}};
    std::vector<WeightedDelta> two{{3, &d}, {3, &e}};
    EXPECT_EQ(product_averaging_gap(one), 0.0);
    EXPECT_GT(product_averaging_gap(two), 0.0);
}

TEST(CommCost, PaperConfigurations) {
    ModelConfig opt125;
    opt125.n_layers = 12;
    opt125.d_model = 768;
    opt125.n_heads = 12;
    EXPECT_EQ(comm_cost(opt125).payload_bytes, 294912u);
    ModelConfig opt350;
    opt350.n_layers = 24;
    opt350.d_model = 1024;
    opt350.n_heads = 16;
    EXPECT_EQ(comm_cost(opt350).payload_bytes, 786432u);
    auto doubled = opt350;
    doubled.lora_rank = 4;
    EXPECT_EQ(comm_cost(doubled).payload_bytes, 2 * comm_cost(opt350).payload_bytes);
}

TEST(CommCost, MatchesEncodedSize) {
    ModelConfig config;
    auto delta = extract_delta(init_adapter(config, 1), config);
    EXPECT_EQ(comm_cost(config).total(), encode_delta(delta).size());
}

TEST(Federation, SingleClientSingleRound) {
    auto config = small_model();
    auto s = make_setup(60, 1, 12);
    FedConfig fed;
    fed.n_clients = 1;
    fed.fraction = 1.0;
    fed.rounds = 1;
    fed.epochs = 2;
    fed.seed = 12;
    auto model = init_model(config, 12);
    FederatedServer server(model.base, model.adapter, fed, s.corpus, s.shards, s.split.test);
    server.run();

    // Replay the client with the same derived stream.
    Rng client_rng = Rng(fed.seed).split("federation").split("client", 0).split(std::uint64_t{1});
    // The client trains from the broadcast, which crossed the wire as float32.
    auto local = client_update(model.base, 0, quantize(extract_delta(model.adapter, config)), s.corpus, s.shards[0].doc_ids,
                               fed.epochs, fed.learning_rate, fed.batch_size, client_rng);
    EXPECT_EQ(server.state().global, quantize(local.delta));
}

TEST(Federation, DeterministicAndThreadIndependent) {
    auto config = small_model();
    auto s = make_setup(200, 6, 13);
    FedConfig fed;
    fed.n_clients = 6;
    fed.fraction = 0.5;
    fed.rounds = 3;
    fed.epochs = 1;
    fed.seed = 13;
    auto a = run_federated(fed, config, 13, s.corpus, s.shards, s.split.test);
    auto b = run_federated(fed, config, 13, s.corpus, s.shards, s.split.test);
    fed.parallel_clients = false;
    auto c = run_federated(fed, config, 13, s.corpus, s.shards, s.split.test);
    EXPECT_EQ(a.rounds, b.rounds);
    EXPECT_EQ(a.rounds, c.rounds);
    EXPECT_EQ(a.final_delta, c.final_delta);
}

TEST(Federation, ByteAccounting) {
    auto config = small_model();
    auto s = make_setup(200, 8, 14);
    FedConfig fed;
    fed.n_clients = 8;
    fed.fraction = 0.25;
    fed.rounds = 2;
    fed.epochs = 1;
    auto out = run_federated(fed, config, 14, s.corpus, s.shards, s.split.test);
    const std::size_t per_delta = comm_cost(config).total();
    std::size_t total = 0;
    for (const auto& r : out.rounds) {
        EXPECT_EQ(r.clients.size(), 2u);
        EXPECT_EQ(r.bytes_up, 2 * per_delta);
        EXPECT_EQ(r.bytes_down, 2 * per_delta);
        EXPECT_NEAR(std::accumulate(r.weights.begin(), r.weights.end(), 0.0), 1.0, 1e-15);
        total += r.bytes_up + r.bytes_down;
    }
    EXPECT_EQ(out.cumulative_bytes, total);
}

TEST(Federation, HoldoutMode) {
    auto config = small_model();
    auto s = make_setup(300, 4, 15);
    FedConfig fed;
    fed.n_clients = 4;
    fed.fraction = 0.5;
    fed.rounds = 2;
    fed.epochs = 1;
    fed.client_test = ClientTestMode::Holdout;
    fed.holdout_fraction = 0.2;
    auto out = run_federated(fed, config, 15, s.corpus, s.shards, s.split.test);
    for (const auto& r : out.rounds) {
        for (const auto& c : r.clients) {
            EXPECT_LT(c.n_k, s.shards[c.client_id].size());
            EXPECT_GT(c.local_test_loss, 0.0);
        }
    }
}

TEST(RoundLog, RoundTrips) {
    auto config = small_model();
    auto s = make_setup(200, 5, 16);
    FedConfig fed;
    fed.n_clients = 5;
    fed.fraction = 0.4;
    fed.rounds = 3;
    fed.epochs = 1;
    auto out = run_federated(fed, config, 16, s.corpus, s.shards, s.split.test);
    std::stringstream io;
    write_round_log(out.rounds, io);
    auto back = read_round_log(io, "memory");
    ASSERT_EQ(back.size(), out.rounds.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        EXPECT_EQ(back[i].round, out.rounds[i].round);
        EXPECT_EQ(back[i].global_test_loss, out.rounds[i].global_test_loss);
        EXPECT_EQ(back[i].bytes_up, out.rounds[i].bytes_up);
        ASSERT_EQ(back[i].clients.size(), out.rounds[i].clients.size());
        for (std::size_t k = 0; k < back[i].clients.size(); ++k) {
            EXPECT_EQ(back[i].clients[k].client_id, out.rounds[i].clients[k].client_id);
            EXPECT_EQ(back[i].clients[k].local_test_loss, out.rounds[i].clients[k].local_test_loss);
        }
    }
}

TEST(RoundLog, RejectsTruncation) {
    std::stringstream io("round,client_id,n_k,local_train_loss,local_test_loss,global_test_loss,bytes_up,bytes_down\n"
                         "1,0,10,2.5\n");
    EXPECT_THROW(read_round_log(io, "memory"), DataError);
}
