#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <cstdio>
#include <numeric>

#include "cllora/numerics/ops.hpp"

#include "cllora/delta.hpp"
#include "cllora/errors.hpp"
#include "cllora/model.hpp"
#include "cllora/numerics/sampling.hpp"
#include "test_support.hpp"

using namespace cllora;
using cllora::testing::bitwise_equal;
using cllora::testing::max_relative_error;
using cllora::testing::numeric_gradient;

namespace {

ModelConfig small_config(std::vector<LoraTarget> targets = {LoraTarget::Query, LoraTarget::Value}) {
    ModelConfig c;
    c.d_model = 16;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_ff = 32;
    c.max_seq_len = 24;
    c.lora_rank = 2;
    c.lora_targets = std::move(targets);
    return c;
}

std::vector<std::uint32_t> random_tokens(Rng& rng, std::size_t n) {
    std::vector<std::uint32_t> t(n);
    for (auto& v : t) {
        v = static_cast<std::uint32_t>(rng.below(kVocabSize));
    }
    return t;
}

TrainingSequence random_sequence(Rng& rng, std::size_t n) {
    auto t = random_tokens(rng, n + 1);
    return {{t.begin(), t.end() - 1}, {t.begin() + 1, t.end()}};
}

// Adapter with both factors random so that every gradient is non-trivial.
LoraAdapter busy_adapter(const ModelConfig& config, std::uint64_t seed) {
    LoraAdapter adapter = init_adapter(config, seed);
    Rng rng(seed ^ 0xb);
    for (auto& f : adapter.factors) {
        f.a = sample_normal(rng, f.a.rows(), f.a.cols(), 0.3);
        f.b = sample_normal(rng, f.b.rows(), f.b.cols(), 0.3);
    }
    return adapter;
}

} // namespace

TEST(Init, BIsZeroAndDeterministic) {
    auto config = small_config();
    auto m1 = init_model(config, 3);
    auto m2 = init_model(config, 3);
    EXPECT_TRUE(m1.base.bitwise_equal(m2.base));
    EXPECT_EQ(m1.adapter, m2.adapter);
    for (const auto& f : m1.adapter.factors) {
        for (double v : f.b.values()) {
            EXPECT_EQ(v, 0.0);
        }
    }
}

TEST(Init, AStandardDeviation) {
    ModelConfig config; // default 64-wide model: 2 layers x 2 targets x 64 x 2 entries
    auto adapter = init_adapter(config, 4);
    double ss = 0.0;
    std::size_t n = 0;
    for (const auto& f : adapter.factors) {
        for (double v : f.a.values()) {
            ss += v * v;
            ++n;
        }
    }
    EXPECT_NEAR(std::sqrt(ss / static_cast<double>(n)), config.lora_init_std, 0.1 * config.lora_init_std);
}

TEST(Config, Validation) {
    auto c = small_config();
    c.n_heads = 3;
    EXPECT_THROW(c.validate(), UsageError);
    c = small_config();
    c.lora_rank = 5; // > d_model / 4
    EXPECT_THROW(c.validate(), UsageError);
    EXPECT_EQ(parse_lora_targets("v,q,v"), (std::vector<LoraTarget>{LoraTarget::Query, LoraTarget::Value}));
    EXPECT_THROW(parse_lora_targets("q,x"), UsageError);
}

TEST(Forward, FreshAdapterIsIdentity) {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        auto config = small_config(trial % 2 ? std::vector<LoraTarget>{LoraTarget::Query, LoraTarget::Value}
                                             : std::vector<LoraTarget>{LoraTarget::Key, LoraTarget::Output});
        auto model = init_model(config, rng.next_u64());
        auto tokens = random_tokens(rng, 1 + rng.below(config.max_seq_len));
        EXPECT_TRUE(bitwise_equal(forward(model.base, nullptr, tokens), forward(model.base, &model.adapter, tokens)));
    }
}

TEST(Forward, ZeroAWithNonzeroBIsIdentity) {
    auto config = small_config();
    auto model = init_model(config, 6);
    auto adapter = busy_adapter(config, 6);
    for (auto& f : adapter.factors) {
        f.a.fill(0.0);
    }
    Rng rng(6);
    auto tokens = random_tokens(rng, 10);
    EXPECT_TRUE(bitwise_equal(forward(model.base, nullptr, tokens), forward(model.base, &adapter, tokens)));
}

TEST(Forward, Causal) {
    auto config = small_config();
    auto model = init_model(config, 7);
    auto adapter = busy_adapter(config, 7);
    Rng rng(7);
    for (int trial = 0; trial < 10; ++trial) {
        auto tokens = random_tokens(rng, 12);
        const std::size_t t = rng.below(tokens.size());
        auto before = forward(model.base, &adapter, tokens);
        tokens[t] = (tokens[t] + 1) % kVocabSize;
        auto after = forward(model.base, &adapter, tokens);
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            bool same = std::equal(before.row(i).begin(), before.row(i).end(), after.row(i).begin());
            EXPECT_EQ(same, i < t) << "position " << i << " changed token " << t;
        }
    }
}

TEST(Forward, RejectsBadInput) {
    auto config = small_config();
    auto model = init_model(config, 8);
    std::vector<std::uint32_t> too_long(config.max_seq_len + 1, 1);
    std::vector<std::uint32_t> bad_token{kVocabSize};
    EXPECT_THROW(forward(model.base, nullptr, too_long), DataError);
    EXPECT_THROW(forward(model.base, nullptr, bad_token), DataError);
}

TEST(Gradients, MatchFiniteDifferences) {
    const std::vector<std::vector<LoraTarget>> target_sets = {
        {LoraTarget::Query, LoraTarget::Value},
        {LoraTarget::Query, LoraTarget::Key, LoraTarget::Value, LoraTarget::Output},
    };
    for (const auto& targets : target_sets) {
        auto config = small_config(targets);
        auto model = init_model(config, 9);
        auto adapter = busy_adapter(config, 9);
        Rng rng(9);
        std::vector<TrainingSequence> batch{random_sequence(rng, 7), random_sequence(rng, 12)};
        auto lg = loss_and_grads(model.base, adapter, batch);
        EXPECT_NEAR(lg.loss, batch_loss(model.base, &adapter, batch), 1e-12);
        for (std::size_t i = 0; i < adapter.factors.size(); ++i) {
            auto& f = adapter.factors[i];
            auto loss = [&] { return batch_loss(model.base, &adapter, batch); };
            EXPECT_LT(max_relative_error(lg.grads.factors[i].a, numeric_gradient(f.a, loss)), 1e-4)
                << "A of factor " << i;
            EXPECT_LT(max_relative_error(lg.grads.factors[i].b, numeric_gradient(f.b, loss)), 1e-4)
                << "B of factor " << i;
        }
    }
}

TEST(Gradients, DuplicatedSequenceKeepsLoss) {
    auto config = small_config();
    auto model = init_model(config, 10);
    Rng rng(10);
    auto seq = random_sequence(rng, 9);
    std::vector<TrainingSequence> one{seq}, two{seq, seq};
    EXPECT_NEAR(loss_and_grads(model.base, model.adapter, one).loss,
                loss_and_grads(model.base, model.adapter, two).loss, 1e-12);
}

TEST(Gradients, BaseIsUntouched) {
    auto config = small_config();
    auto model = init_model(config, 11);
    const FrozenBase copy = model.base;
    Rng rng(11);
    std::vector<TrainingSequence> batch{random_sequence(rng, 10)};
    loss_and_grads(model.base, busy_adapter(config, 11), batch);
    EXPECT_TRUE(model.base.bitwise_equal(copy));
}

TEST(Gradients, EmptyBatchThrows) {
    auto config = small_config();
    auto model = init_model(config, 12);
    EXPECT_THROW(loss_and_grads(model.base, model.adapter, {}), DataError);
}

TEST(CountTrainable, PaperConfigurations) {
    const std::vector<LoraTarget> qv{LoraTarget::Query, LoraTarget::Value};
    EXPECT_EQ(count_trainable(12, 768, 2, qv), 73728u);
    EXPECT_EQ(count_trainable(24, 1024, 2, qv), 196608u);
    EXPECT_EQ(count_trainable(24, 2048, 2, qv), 393216u);
}

TEST(CountTrainable, MatchesAdapter) {
    auto config = small_config({LoraTarget::Key, LoraTarget::Value, LoraTarget::Output});
    EXPECT_EQ(count_trainable(config), init_adapter(config, 1).parameter_count());
}

TEST(Delta, RoundTripWithinFloatPrecision) {
    auto config = small_config();
    auto adapter = busy_adapter(config, 13);
    auto delta = extract_delta(adapter, config);
    auto back = decode_delta(encode_delta(delta), config);
    ASSERT_EQ(back.factors.size(), delta.factors.size());
    EXPECT_EQ(back, quantize(delta));
    for (std::size_t i = 0; i < delta.factors.size(); ++i) {
        const auto& a = delta.factors[i].a.values();
        const auto& b = back.factors[i].a.values();
        for (std::size_t j = 0; j < a.size(); ++j) {
            const double v = a[j];
            const auto f = static_cast<float>(v);
            const double ulp = std::nextafter(f, std::numeric_limits<float>::infinity()) - f;
            EXPECT_LE(std::abs(b[j] - v), ulp);
        }
    }
    EXPECT_EQ(encode_delta(delta).size(), encoded_size(delta));
}

TEST(Delta, ZeroAdapterRoundTripsExactly) {
    auto config = small_config();
    auto delta = extract_delta(init_adapter(config, 1).zeros_like(), config);
    EXPECT_EQ(decode_delta(encode_delta(delta), config), delta);
}

TEST(Delta, FingerprintMismatch) {
    auto config = small_config();
    auto delta = extract_delta(init_adapter(config, 1), config);
    auto other = config;
    other.lora_rank = 3;
    auto bytes = encode_delta(delta);
    EXPECT_THROW(decode_delta(bytes, other), DataError);
    LoraAdapter adapter = init_adapter(other, 1);
    EXPECT_THROW(apply_delta(adapter, other, delta), DataError);
}

TEST(Delta, CorruptBytes) {
    auto config = small_config();
    auto bytes = encode_delta(extract_delta(init_adapter(config, 1), config));
    auto truncated = bytes;
    truncated.pop_back();
    EXPECT_THROW(decode_delta(truncated, config), DataError);
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    EXPECT_THROW(decode_delta(bad_magic, config), DataError);
    auto trailing = bytes;
    trailing.push_back(0);
    EXPECT_THROW(decode_delta(trailing, config), DataError);
}

TEST(Delta, ApplyThenExtract) {
    auto config = small_config();
    auto source = busy_adapter(config, 14);
    auto delta = extract_delta(source, config);
    auto target = init_adapter(config, 99);
    apply_delta(target, config, delta);
    EXPECT_EQ(target, source);
    EXPECT_EQ(adapter_from_delta(delta, config), source);
}

// 200 SGD steps on a 50-document corpus should take the training loss at
// least 20% below the uniform level ln(vocab).
TEST(Training, LossDecreases) {
    ModelConfig config;
    const double target = 0.8 * std::log(static_cast<double>(config.vocab_size));
    int reached = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto model = init_model(config, seed);
        auto corpus = synth_corpus(seed, 50, LengthProfile{});
        std::vector<TrainingSequence> data;
        for (const auto& d : corpus.documents) {
            data.push_back(make_training_sequence(d, config.max_seq_len));
        }
        Rng rng(seed);
        std::vector<std::size_t> order(data.size());
        std::iota(order.begin(), order.end(), 0);
        std::size_t cursor = order.size();
        for (int step = 0; step < 200; ++step) {
            std::vector<TrainingSequence> batch;
            while (batch.size() < 8) {
                if (cursor == order.size()) {
                    rng.shuffle(order.begin(), order.end());
                    cursor = 0;
                }
                batch.push_back(data[order[cursor++]]);
            }
            auto lg = loss_and_grads(model.base, model.adapter, batch);
            for (std::size_t f = 0; f < model.adapter.factors.size(); ++f) {
                sgd_step(model.adapter.factors[f].a, lg.grads.factors[f].a, 0.1);
                sgd_step(model.adapter.factors[f].b, lg.grads.factors[f].b, 0.1);
            }
        }
        const double final_loss = batch_loss(model.base, &model.adapter, data);
        reached += final_loss <= target;
        std::printf("seed %llu: initial %.3f final %.3f\n", static_cast<unsigned long long>(seed),
                    batch_loss(model.base, nullptr, data), final_loss);
    }
    EXPECT_GE(reached, 9);
}
