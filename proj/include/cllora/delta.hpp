#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "cllora/model.hpp"

namespace cllora {

// The trainable state that travels between server and clients.
struct LoraDelta {
    std::uint64_t fingerprint = 0;
    std::vector<LoraFactors> factors; // canonical (layer, target) order

    std::size_t parameter_count() const;
    bool operator==(const LoraDelta&) const = default;
};

LoraDelta extract_delta(const LoraAdapter& adapter, const ModelConfig& config);
// Overwrites the adapter's factors. Throws on fingerprint or shape mismatch.
void apply_delta(LoraAdapter& adapter, const ModelConfig& config, const LoraDelta& delta);
LoraAdapter adapter_from_delta(const LoraDelta& delta, const ModelConfig& config);

// Every value rounded to the nearest 32-bit float.
LoraDelta quantize(const LoraDelta& delta);

// Wire format, little-endian:
//   "CLLR" | u32 version | u64 fingerprint | u32 pair count |
//   per pair: u32 a_rows, a_cols, b_rows, b_cols | A as f32 | B as f32
inline constexpr std::uint32_t kDeltaFormatVersion = 1;
inline constexpr std::size_t kDeltaHeaderBytes = 4 + 4 + 8 + 4;
inline constexpr std::size_t kDeltaPairHeaderBytes = 4 * 4;

std::vector<std::uint8_t> encode_delta(const LoraDelta& delta);
// Factors come back unlabelled (layer 0, query) since the wire carries none.
LoraDelta decode_delta_raw(std::span<const std::uint8_t> bytes);
// Checks the fingerprint against `config` and restores canonical labels.
LoraDelta decode_delta(std::span<const std::uint8_t> bytes, const ModelConfig& config);
std::size_t encoded_size(const LoraDelta& delta);

void write_delta_file(const std::filesystem::path& path, const LoraDelta& delta);
LoraDelta read_delta_file(const std::filesystem::path& path, const ModelConfig& config);

} // namespace cllora
