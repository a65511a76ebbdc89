#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cllora {

// Byte-level vocabulary: ids 0..255 are raw bytes, followed by three specials.
inline constexpr std::uint32_t kBosToken = 256;
inline constexpr std::uint32_t kEosToken = 257;
inline constexpr std::uint32_t kPadToken = 258;
inline constexpr std::size_t kVocabSize = 259;

inline constexpr std::size_t kNumLengthClasses = 5;
inline constexpr std::size_t kDefaultMaxSeqLen = 128;

using LengthBoundaries = std::array<std::size_t, kNumLengthClasses - 1>;
using ClassHistogram = std::array<std::size_t, kNumLengthClasses>;

struct Document {
    std::uint32_t id = 0;
    std::vector<std::uint32_t> token_ids; // truncated to max_seq_len
    std::size_t raw_length = 0;           // token count before truncation
    std::uint32_t length_class = 0;
};

struct Corpus {
    std::vector<Document> documents;
    // Absent when lengths cannot be classed (fewer than 5 documents or a
    // single distinct length); every document is then in class 0.
    std::optional<LengthBoundaries> boundaries;
    std::string unclassed_reason;
    std::size_t vocab_size = kVocabSize;
    std::size_t max_seq_len = kDefaultMaxSeqLen;

    std::size_t size() const { return documents.size(); }
    // Throws DataError explaining why the corpus has no length classes.
    void require_length_classes() const;
    const Document& at(std::uint32_t id) const;
    ClassHistogram class_histogram(std::span<const std::uint32_t> ids) const;
};

enum class CorpusFormat { PlainLines, JsonLines };

CorpusFormat parse_corpus_format(std::string_view name);
std::string_view to_string(CorpusFormat format);

std::vector<std::uint32_t> tokenize(std::string_view text);
// Inverse of tokenize; special tokens are dropped.
std::string detokenize(std::span<const std::uint32_t> tokens);

// Nearest-rank 20/40/60/80th percentiles. Requires >= 5 lengths with at least
// two distinct values.
LengthBoundaries compute_length_classes(std::span<const std::size_t> raw_lengths);
// A length equal to a boundary lands in the lower class.
std::uint32_t length_class_of(std::size_t raw_length, const LengthBoundaries& boundaries);

// Tokenizes, truncates and classes `texts` in order; ids are 0..N-1.
Corpus build_corpus(const std::vector<std::string>& texts, std::size_t max_seq_len = kDefaultMaxSeqLen);

// One document per non-empty line (plain) or per record with a non-empty
// "text" field (json-lines).
Corpus ingest(const std::filesystem::path& path, CorpusFormat format, std::size_t max_seq_len = kDefaultMaxSeqLen);

struct CorpusSplit {
    std::vector<std::uint32_t> train;
    std::vector<std::uint32_t> test;
    std::vector<std::string> warnings;
};

// Stratified by length class: within each class the documents are shuffled by
// seed and the last ceil(fraction * class size) go to test. Falls back to a
// global split (with a warning) when a non-empty class has fewer than 2 docs.
CorpusSplit split_corpus(const Corpus& corpus, double test_fraction, std::uint64_t seed);

// Next-token training pair: inputs = [BOS, t0..], targets = [t0.., EOS], both
// cut to max_seq_len positions.
struct TrainingSequence {
    std::vector<std::uint32_t> inputs;
    std::vector<std::uint32_t> targets;
};
TrainingSequence make_training_sequence(const Document& doc, std::size_t max_seq_len);

enum class LengthProfileKind {
    Uniform, // evenly spaced lengths over [min, max], shuffled
    Skewed,  // log-uniform: many short documents, a long tail
};

struct LengthProfile {
    LengthProfileKind kind = LengthProfileKind::Uniform;
    std::size_t min_length = 6;
    std::size_t max_length = 48;
};

LengthProfileKind parse_length_profile(std::string_view name);
std::string_view to_string(LengthProfileKind kind);

// Pseudo-text whose raw lengths follow `profile`. Vocabulary register depends
// on the document's position in the length range, so length classes also
// differ in content.
std::vector<std::string> synth_texts(std::uint64_t seed, std::size_t n_docs, const LengthProfile& profile);
Corpus synth_corpus(std::uint64_t seed, std::size_t n_docs, const LengthProfile& profile,
                    std::size_t max_seq_len = kDefaultMaxSeqLen);

// json-lines: {"id":..,"raw_length":..,"length_class":..}
void write_manifest(const Corpus& corpus, std::ostream& out);

} // namespace cllora
