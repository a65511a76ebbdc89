#include "cllora/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>
#include <fstream>
#include <json.hpp>
#include <ostream>

#include "cllora/errors.hpp"
#include "cllora/numerics/rng.hpp"

namespace cllora {

const Document& Corpus::at(std::uint32_t id) const {
    if (id >= documents.size()) {
        throw DataError(fmt::format("document id {} outside corpus of {} documents", id, documents.size()));
    }
    return documents[id];
}

ClassHistogram Corpus::class_histogram(std::span<const std::uint32_t> ids) const {
    ClassHistogram h{};
    for (auto id : ids) {
        ++h[at(id).length_class];
    }
    return h;
}

CorpusFormat parse_corpus_format(std::string_view name) {
    if (name == "plain" || name == "plain-lines") {
        return CorpusFormat::PlainLines;
    }
    if (name == "jsonl" || name == "json-lines") {
        return CorpusFormat::JsonLines;
    }
    throw UsageError(fmt::format("unknown corpus format '{}' (expected plain-lines or json-lines)", name));
}

std::string_view to_string(CorpusFormat format) {
    return format == CorpusFormat::PlainLines ? "plain-lines" : "json-lines";
}

std::vector<std::uint32_t> tokenize(std::string_view text) {
    std::vector<std::uint32_t> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) {
        ids.push_back(c);
    }
    return ids;
}

std::string detokenize(std::span<const std::uint32_t> tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (auto t : tokens) {
        if (t < 256) {
            out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
        }
    }
    return out;
}

void Corpus::require_length_classes() const {
    if (!boundaries) {
        throw DataError(unclassed_reason);
    }
}

LengthBoundaries compute_length_classes(std::span<const std::size_t> raw_lengths) {
    const std::size_t n = raw_lengths.size();
    if (n < kNumLengthClasses) {
        throw DataError(fmt::format("length classing needs at least {} documents, got {}", kNumLengthClasses, n));
    }
    std::vector<std::size_t> sorted(raw_lengths.begin(), raw_lengths.end());
    std::sort(sorted.begin(), sorted.end());
    if (sorted.front() == sorted.back()) {
        throw DataError(fmt::format("all {} documents have length {}; length classes are undefined, use iid "
                                    "partitioning only",
                                    n, sorted.front()));
    }
    LengthBoundaries b{};
    for (std::size_t q = 1; q < kNumLengthClasses; ++q) {
        // nearest rank: ceil(p * n) with p = q / 5, computed in integers
        std::size_t rank = (q * n + kNumLengthClasses - 1) / kNumLengthClasses;
        b[q - 1] = sorted[rank - 1];
    }
    return b;
}

std::uint32_t length_class_of(std::size_t raw_length, const LengthBoundaries& boundaries) {
    std::uint32_t c = 0;
    while (c < boundaries.size() && raw_length > boundaries[c]) {
        ++c;
    }
    return c;
}

Corpus build_corpus(const std::vector<std::string>& texts, std::size_t max_seq_len) {
    if (texts.empty()) {
        throw DataError("corpus is empty");
    }
    if (max_seq_len == 0) {
        throw UsageError("max_seq_len must be positive");
    }
    Corpus corpus;
    corpus.max_seq_len = max_seq_len;
    corpus.documents.reserve(texts.size());
    std::vector<std::size_t> lengths;
    lengths.reserve(texts.size());
    for (std::size_t i = 0; i < texts.size(); ++i) {
        Document d;
        d.id = static_cast<std::uint32_t>(i);
        d.token_ids = tokenize(texts[i]);
        d.raw_length = d.token_ids.size();
        if (d.token_ids.size() > max_seq_len) {
            d.token_ids.resize(max_seq_len);
        }
        lengths.push_back(d.raw_length);
        corpus.documents.push_back(std::move(d));
    }
    try {
        corpus.boundaries = compute_length_classes(lengths);
    } catch (const DataError& e) {
        corpus.unclassed_reason = e.what();
    }
    if (corpus.boundaries) {
        for (auto& d : corpus.documents) {
            d.length_class = length_class_of(d.raw_length, *corpus.boundaries);
        }
    }
    return corpus;
}

Corpus ingest(const std::filesystem::path& path, CorpusFormat format, std::size_t max_seq_len) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError(fmt::format("cannot read corpus file '{}'", path.string()));
    }
    std::vector<std::string> texts;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            continue;
        }
        if (format == CorpusFormat::PlainLines) {
            texts.push_back(std::move(line));
            continue;
        }
        nlohmann::json record;
        try {
            record = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw DataError(fmt::format("{}:{}: malformed json record: {}", path.string(), line_no, e.what()));
        }
        if (!record.is_object() || !record.contains("text") || !record["text"].is_string()) {
            throw DataError(fmt::format("{}:{}: record has no string field \"text\"", path.string(), line_no));
        }
        auto text = record["text"].get<std::string>();
        if (!text.empty()) {
            texts.push_back(std::move(text));
        }
    }
    if (texts.empty()) {
        throw DataError(fmt::format("corpus file '{}' contains no documents", path.string()));
    }
    return build_corpus(texts, max_seq_len);
}

CorpusSplit split_corpus(const Corpus& corpus, double test_fraction, std::uint64_t seed) {
    if (!(test_fraction > 0.0 && test_fraction < 0.5)) {
        throw UsageError(fmt::format("test fraction must be in (0, 0.5), got {}", test_fraction));
    }
    CorpusSplit out;
    Rng rng = Rng(seed).split("corpus-split");

    std::array<std::vector<std::uint32_t>, kNumLengthClasses> by_class;
    for (const auto& d : corpus.documents) {
        by_class[d.length_class].push_back(d.id);
    }
    bool stratify = true;
    for (std::size_t c = 0; c < kNumLengthClasses; ++c) {
        if (by_class[c].size() == 1) {
            stratify = false;
            out.warnings.push_back(
                fmt::format("length class {} has a single document; falling back to a global split", c));
        }
    }

    auto take = [&](std::vector<std::uint32_t>& pool, Rng stream) {
        stream.shuffle(pool.begin(), pool.end());
        auto n_test = static_cast<std::size_t>(std::ceil(test_fraction * static_cast<double>(pool.size())));
        std::size_t cut = pool.size() - n_test;
        out.train.insert(out.train.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(cut));
        out.test.insert(out.test.end(), pool.begin() + static_cast<std::ptrdiff_t>(cut), pool.end());
    };

    if (stratify) {
        for (std::size_t c = 0; c < kNumLengthClasses; ++c) {
            take(by_class[c], rng.split("class", c));
        }
    } else {
        std::vector<std::uint32_t> all;
        for (const auto& d : corpus.documents) {
            all.push_back(d.id);
        }
        take(all, rng.split("global"));
    }
    std::sort(out.train.begin(), out.train.end());
    std::sort(out.test.begin(), out.test.end());
    return out;
}

TrainingSequence make_training_sequence(const Document& doc, std::size_t max_seq_len) {
    std::vector<std::uint32_t> seq;
    seq.reserve(doc.token_ids.size() + 2);
    seq.push_back(kBosToken);
    seq.insert(seq.end(), doc.token_ids.begin(), doc.token_ids.end());
    seq.push_back(kEosToken);
    if (seq.size() > max_seq_len + 1) {
        seq.resize(max_seq_len + 1);
    }
    TrainingSequence out;
    out.inputs.assign(seq.begin(), seq.end() - 1);
    out.targets.assign(seq.begin() + 1, seq.end());
    return out;
}

void write_manifest(const Corpus& corpus, std::ostream& out) {
    for (const auto& d : corpus.documents) {
        nlohmann::ordered_json rec;
        rec["id"] = d.id;
        rec["raw_length"] = d.raw_length;
        rec["length_class"] = d.length_class;
        out << rec.dump() << '\n';
    }
}

} // namespace cllora
