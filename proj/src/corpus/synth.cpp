#include <algorithm>
#include <array>
#include <cmath>
#include <fmt/format.h>

#include "cllora/corpus.hpp"
#include "cllora/errors.hpp"
#include "cllora/numerics/rng.hpp"

namespace cllora {

namespace {

// Registers use disjoint letters, so they share no byte statistics beyond
// the space.
constexpr std::array<std::string_view, kNumLengthClasses> kOnsets = {"bdg", "ptk", "lmn", "sfv", "cjz"};
constexpr std::array<std::string_view, kNumLengthClasses> kNuclei = {"ae", "io", "uy", "rw", "hx"};
constexpr std::size_t kWordsPerRegister = 40;

using Lexicon = std::array<std::vector<std::string>, kNumLengthClasses>;

Lexicon make_lexicon() {
    Lexicon lex;
    Rng rng(0x5EED1E71C0FFEEULL);
    for (std::size_t r = 0; r < kNumLengthClasses; ++r) {
        auto onsets = kOnsets[r];
        auto nuclei = kNuclei[r];
        while (lex[r].size() < kWordsPerRegister) {
            std::size_t syllables = 1 + rng.below(3);
            std::string w;
            for (std::size_t s = 0; s < syllables; ++s) {
                w.push_back(onsets[rng.below(onsets.size())]);
                w.push_back(nuclei[rng.below(nuclei.size())]);
            }
            if (std::find(lex[r].begin(), lex[r].end(), w) == lex[r].end()) {
                lex[r].push_back(std::move(w));
            }
        }
    }
    return lex;
}

const Lexicon& lexicon() {
    static const Lexicon lex = make_lexicon();
    return lex;
}

// Zipf-like pick: index i with weight 1/(i+1).
std::size_t zipf_index(Rng& rng, std::size_t n) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        total += 1.0 / static_cast<double>(i + 1);
    }
    double u = rng.uniform() * total;
    for (std::size_t i = 0; i < n; ++i) {
        u -= 1.0 / static_cast<double>(i + 1);
        if (u < 0.0) {
            return i;
        }
    }
    return n - 1;
}

std::string make_text(Rng& rng, std::size_t length, std::size_t reg) {
    const auto& words = lexicon()[reg];
    std::string text;
    text.reserve(length + 8);
    while (text.size() < length) {
        if (!text.empty()) {
            text.push_back(' ');
        }
        text += words[zipf_index(rng, words.size())];
    }
    text.resize(length);
    // A trailing space would make the line shorter after stripping in some
    // tools; end on a letter instead.
    if (text.back() == ' ') {
        text.back() = '.';
    }
    return text;
}

} // namespace

LengthProfileKind parse_length_profile(std::string_view name) {
    if (name == "uniform") {
        return LengthProfileKind::Uniform;
    }
    if (name == "skewed") {
        return LengthProfileKind::Skewed;
    }
    throw UsageError(fmt::format("unknown length profile '{}' (expected uniform or skewed)", name));
}

std::string_view to_string(LengthProfileKind kind) {
    return kind == LengthProfileKind::Uniform ? "uniform" : "skewed";
}

std::vector<std::string> synth_texts(std::uint64_t seed, std::size_t n_docs, const LengthProfile& profile) {
    if (n_docs < kNumLengthClasses) {
        throw DataError(fmt::format("synthetic corpus needs at least {} documents, got {}", kNumLengthClasses, n_docs));
    }
    if (profile.min_length < 1 || profile.max_length <= profile.min_length) {
        throw UsageError(fmt::format("length profile needs 1 <= min < max, got [{}, {}]", profile.min_length,
                                     profile.max_length));
    }
    Rng root(seed);
    Rng length_rng = root.split("synth-lengths");
    const std::size_t span = profile.max_length - profile.min_length + 1;

    std::vector<std::size_t> lengths(n_docs);
    if (profile.kind == LengthProfileKind::Uniform) {
        for (std::size_t i = 0; i < n_docs; ++i) {
            lengths[i] = profile.min_length + (i * span) / n_docs;
        }
        length_rng.shuffle(lengths.begin(), lengths.end());
    } else {
        const double lo = std::log(static_cast<double>(profile.min_length));
        const double hi = std::log(static_cast<double>(profile.max_length) + 1.0);
        for (auto& len : lengths) {
            auto v = static_cast<std::size_t>(std::exp(lo + (hi - lo) * length_rng.uniform()));
            len = std::clamp(v, profile.min_length, profile.max_length);
        }
    }

    std::vector<std::string> texts;
    texts.reserve(n_docs);
    for (std::size_t i = 0; i < n_docs; ++i) {
        std::size_t reg = ((lengths[i] - profile.min_length) * kNumLengthClasses) / span;
        Rng doc_rng = root.split("synth-doc", i);
        texts.push_back(make_text(doc_rng, lengths[i], reg));
    }
    return texts;
}

Corpus synth_corpus(std::uint64_t seed, std::size_t n_docs, const LengthProfile& profile, std::size_t max_seq_len) {
    return build_corpus(synth_texts(seed, n_docs, profile), max_seq_len);
}

} // namespace cllora
