#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "cllora/corpus.hpp"
#include "cllora/errors.hpp"
#include "cllora/numerics/rng.hpp"

using namespace cllora;
namespace fs = std::filesystem;

namespace {

fs::path write_temp(const std::string& name, const std::string& contents) {
    auto path = fs::temp_directory_path() / ("cllora_corpus_" + name);
    std::ofstream(path, std::ios::binary) << contents;
    return path;
}

std::vector<std::string> texts_of_lengths(std::initializer_list<std::size_t> lengths) {
    std::vector<std::string> out;
    for (auto n : lengths) {
        out.emplace_back(n, 'x');
    }
    return out;
}

// Sort lengths and take sorted[ceil(q * n / 5) - 1] for q = 1..4.
LengthBoundaries nearest_rank_oracle(std::vector<std::size_t> lengths) {
    std::sort(lengths.begin(), lengths.end());
    LengthBoundaries b{};
    const double n = static_cast<double>(lengths.size());
    for (int q = 1; q <= 4; ++q) {
        auto rank = static_cast<std::size_t>(std::ceil(q * n / 5.0 - 1e-9));
        b[q - 1] = lengths[rank - 1];
    }
    return b;
}

} // namespace

TEST(Tokenize, Basics) {
    EXPECT_TRUE(tokenize("").empty());
    EXPECT_EQ(tokenize("AB"), (std::vector<std::uint32_t>{65, 66}));
    EXPECT_EQ(detokenize(std::vector<std::uint32_t>{kBosToken, 65, kEosToken, kPadToken}), "A");
}

TEST(Tokenize, RoundTripsRandomUtf8) {
    Rng rng(1);
    for (int trial = 0; trial < 200; ++trial) {
        std::string s;
        const auto n = rng.below(40);
        for (std::uint64_t i = 0; i < n; ++i) {
            switch (rng.below(3)) {
            case 0: s += static_cast<char>(0x20 + rng.below(95)); break;
            case 1: s += "\xc3\xa9"; break;          // U+00E9
            default: s += "\xe2\x82\xac"; break;     // U+20AC
            }
        }
        EXPECT_EQ(detokenize(tokenize(s)), s);
    }
}

TEST(LengthClasses, TenDistinctLengths) {
    auto corpus = build_corpus(texts_of_lengths({1, 2, 3, 4, 5, 6, 7, 8, 9, 10}));
    ASSERT_TRUE(corpus.boundaries);
    EXPECT_EQ(*corpus.boundaries, (LengthBoundaries{2, 4, 6, 8}));
    std::vector<std::uint32_t> ids(10);
    std::iota(ids.begin(), ids.end(), 0u);
    EXPECT_EQ(corpus.class_histogram(ids), (ClassHistogram{2, 2, 2, 2, 2}));
}

TEST(LengthClasses, FiveDocumentsOnePerClass) {
    auto corpus = build_corpus(texts_of_lengths({1, 2, 3, 4, 5}));
    for (std::uint32_t i = 0; i < 5; ++i) {
        EXPECT_EQ(corpus.at(i).length_class, i);
    }
}

TEST(LengthClasses, AllEqualLengthsHaveNoClasses) {
    std::vector<std::size_t> lengths(8, 7);
    EXPECT_THROW(compute_length_classes(lengths), DataError);
    auto corpus = build_corpus(texts_of_lengths({7, 7, 7, 7, 7, 7}));
    EXPECT_FALSE(corpus.boundaries);
    EXPECT_THROW(corpus.require_length_classes(), DataError);
}

TEST(LengthClasses, MatchNearestRankOracle) {
    Rng rng(2);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<std::size_t> lengths(5 + rng.below(200));
        for (auto& l : lengths) {
            l = 1 + rng.below(60);
        }
        if (std::all_of(lengths.begin(), lengths.end(), [&](auto l) { return l == lengths[0]; })) {
            continue;
        }
        auto b = compute_length_classes(lengths);
        EXPECT_EQ(b, nearest_rank_oracle(lengths));
        EXPECT_TRUE(std::is_sorted(b.begin(), b.end()));
        for (auto l : lengths) {
            auto c = length_class_of(l, b);
            if (c > 0) {
                EXPECT_GT(l, b[c - 1]);
            }
            if (c < 4) {
                EXPECT_LE(l, b[c]);
            }
        }
    }
}

TEST(Ingest, PlainLines) {
    auto path = write_temp("three.txt", "alpha\nbe\ngamma ray\n");
    auto corpus = ingest(path, CorpusFormat::PlainLines);
    ASSERT_EQ(corpus.size(), 3u);
    for (std::uint32_t i = 0; i < 3; ++i) {
        EXPECT_EQ(corpus.documents[i].id, i);
    }
    EXPECT_EQ(detokenize(corpus.at(1).token_ids), "be");
}

TEST(Ingest, SkipsBlankLines) {
    auto path = write_temp("blank.txt", "one\n\ntwo\nthree\n");
    EXPECT_EQ(ingest(path, CorpusFormat::PlainLines).size(), 3u);
}

TEST(Ingest, JsonLinesMissingTextNamesLine) {
    std::string contents;
    for (int i = 1; i <= 6; ++i) {
        contents += R"({"text": "doc number )" + std::to_string(i) + "\"}\n";
    }
    contents += R"({"body": "no text here"})" "\n";
    auto path = write_temp("bad.jsonl", contents);
    try {
        ingest(path, CorpusFormat::JsonLines);
        FAIL() << "expected DataError";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find(":7:"), std::string::npos) << e.what();
    }
}

TEST(Ingest, TruncatesToMaxSeqLen) {
    auto corpus = build_corpus(texts_of_lengths({3, 300, 5, 6, 7}), 128);
    EXPECT_EQ(corpus.at(1).raw_length, 300u);
    EXPECT_EQ(corpus.at(1).token_ids.size(), 128u);
    EXPECT_EQ(corpus.at(1).length_class, 4u);
}

TEST(Split, BalancedHundred) {
    std::vector<std::string> texts;
    for (std::size_t c = 0; c < 5; ++c) {
        for (int i = 0; i < 20; ++i) {
            texts.emplace_back(10 * (c + 1), 'a');
        }
    }
    auto corpus = build_corpus(texts);
    auto split = split_corpus(corpus, 0.1, 3);
    EXPECT_EQ(split.test.size(), 10u);
    EXPECT_EQ(corpus.class_histogram(split.test), (ClassHistogram{2, 2, 2, 2, 2}));
    EXPECT_TRUE(split.warnings.empty());
}

TEST(Split, Deterministic) {
    auto corpus = synth_corpus(4, 300, LengthProfile{});
    auto a = split_corpus(corpus, 0.1, 9);
    auto b = split_corpus(corpus, 0.1, 9);
    EXPECT_EQ(a.train, b.train);
    EXPECT_EQ(a.test, b.test);
}

TEST(Split, UnionAndDisjointness) {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        auto corpus = synth_corpus(rng.next_u64(), 5 + rng.below(300), LengthProfile{});
        auto split = split_corpus(corpus, 0.05 + 0.4 * rng.uniform(), rng.next_u64());
        std::set<std::uint32_t> all(split.train.begin(), split.train.end());
        for (auto id : split.test) {
            EXPECT_TRUE(all.insert(id).second) << "doc " << id << " in both halves";
        }
        EXPECT_EQ(all.size(), corpus.size());
    }
}

TEST(Split, SingletonClassFallsBackWithWarning) {
    auto corpus = build_corpus(texts_of_lengths({1, 2, 3, 4, 5}));
    auto split = split_corpus(corpus, 0.2, 1);
    EXPECT_FALSE(split.warnings.empty());
    EXPECT_EQ(split.test.size(), 1u);
}

TEST(Split, RejectsBadFraction) {
    auto corpus = synth_corpus(1, 20, LengthProfile{});
    EXPECT_THROW(split_corpus(corpus, 0.0, 1), UsageError);
    EXPECT_THROW(split_corpus(corpus, 0.5, 1), UsageError);
}

TEST(TrainingSequence, ShiftsAndTruncates) {
    Document d;
    d.token_ids = {10, 11, 12};
    auto seq = make_training_sequence(d, 8);
    EXPECT_EQ(seq.inputs, (std::vector<std::uint32_t>{kBosToken, 10, 11, 12}));
    EXPECT_EQ(seq.targets, (std::vector<std::uint32_t>{10, 11, 12, kEosToken}));
    auto cut = make_training_sequence(d, 2);
    EXPECT_EQ(cut.inputs, (std::vector<std::uint32_t>{kBosToken, 10}));
    EXPECT_EQ(cut.targets, (std::vector<std::uint32_t>{10, 11}));
}

TEST(Synth, UniformProfileBalancesClasses) {
    auto corpus = synth_corpus(7, 2000, LengthProfile{});
    std::vector<std::uint32_t> ids(corpus.size());
    std::iota(ids.begin(), ids.end(), 0u);
    auto h = corpus.class_histogram(ids);
    // Evenly spaced integer lengths tie at the boundaries, so classes are
    // near-equal rather than exact.
    for (auto c : h) {
        EXPECT_NEAR(static_cast<double>(c), 400.0, 60.0);
    }
}

TEST(Synth, ByteIdenticalPerSeed) {
    EXPECT_EQ(synth_texts(3, 50, LengthProfile{}), synth_texts(3, 50, LengthProfile{}));
    EXPECT_NE(synth_texts(3, 50, LengthProfile{}), synth_texts(4, 50, LengthProfile{}));
}

TEST(Synth, TooFewDocuments) {
    EXPECT_THROW(synth_texts(1, 4, LengthProfile{}), DataError);
}
