#include <bit>
#include <cstring>
#include <exception>
#include <fmt/format.h>
#include <functional>
#include <ostream>

#include "cllora/cli/commands.hpp"
#include "cllora/delta.hpp"
#include "cllora/model.hpp"
#include "cllora/numerics/kernels.hpp"
#include "cllora/numerics/sampling.hpp"
#include "cllora/partition.hpp"

namespace cllora::cli {

namespace {

bool same_bits(const Matrix& a, const Matrix& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() &&
           std::memcmp(a.data(), b.data(), a.values().size() * sizeof(double)) == 0;
}

bool matmul_variants_agree() {
    Rng rng(11);
    Matrix a = sample_normal(rng, 67, 129, 1.0);
    Matrix b = sample_normal(rng, 129, 41, 1.0);
    Matrix s(67, 41), p(67, 41);
    kernels::serial::matmul(a, b, s);
    kernels::parallel::matmul(a, b, p);
    return same_bits(s, p);
}

bool tokenizer_round_trips() {
    std::string text;
    for (int c = 1; c < 256; ++c) {
        text.push_back(static_cast<char>(c));
    }
    return detokenize(tokenize(text)) == text;
}

bool fresh_adapter_is_identity() {
    ModelConfig config;
    config.d_model = 16;
    config.n_heads = 2;
    config.d_ff = 32;
    config.max_seq_len = 16;
    auto model = init_model(config, 5);
    std::vector<std::uint32_t> tokens{kBosToken, 'a', 'b', 'c'};
    return same_bits(forward(model.base, nullptr, tokens), forward(model.base, &model.adapter, tokens));
}

bool delta_round_trips() {
    ModelConfig config;
    auto model = init_model(config, 9);
    auto delta = quantize(extract_delta(model.adapter, config));
    return decode_delta(encode_delta(delta), config) == delta;
}

bool partitions_are_exact() {
    auto corpus = synth_corpus(3, 400, LengthProfile{}, kDefaultMaxSeqLen);
    auto split = split_corpus(corpus, 0.1, 1);
    for (auto mode : {PartitionMode::Iid, PartitionMode::LabelSkew, PartitionMode::QuantitySkew}) {
        auto shards = partition(corpus, split.train, PartitionSpec{mode, 0.1, 10, 4});
        if (!validate_partition(shards, split.train, corpus).ok()) {
            return false;
        }
    }
    return true;
}

} // namespace

bool cmd_selfcheck(std::ostream& out) {
    const std::pair<const char*, std::function<bool()>> checks[] = {
        {"serial and parallel matmul are bit-identical", matmul_variants_agree},
        {"tokenizer round-trips every byte", tokenizer_round_trips},
        {"fresh adapter leaves the base output unchanged", fresh_adapter_is_identity},
        {"delta encoding round-trips", delta_round_trips},
        {"partitions cover the training set exactly once", partitions_are_exact},
    };
    bool all = true;
    for (const auto& [name, check] : checks) {
        bool ok = false;
        std::string detail;
        try {
            ok = check();
        } catch (const std::exception& e) {
            detail = fmt::format(" ({})", e.what());
        }
        out << (ok ? "ok   " : "FAIL ") << name << detail << '\n';
        all = all && ok;
    }
    return all;
}

} // namespace cllora::cli
