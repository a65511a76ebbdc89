#include "cllora/delta.hpp"

#include <bit>
#include <string_view>
#include <cstring>
#include <fmt/format.h>
#include <fstream>
#include <iterator>

#include "cllora/errors.hpp"

namespace cllora {

std::size_t LoraDelta::parameter_count() const {
    std::size_t n = 0;
    for (const auto& f : factors) {
        n += f.a.size() + f.b.size();
    }
    return n;
}

LoraDelta extract_delta(const LoraAdapter& adapter, const ModelConfig& config) {
    return LoraDelta{config.fingerprint(), adapter.factors};
}

void apply_delta(LoraAdapter& adapter, const ModelConfig& config, const LoraDelta& delta) {
    if (delta.fingerprint != config.fingerprint()) {
        throw DataError(fmt::format("delta fingerprint {:016x} does not match model config {:016x}", delta.fingerprint,
                                    config.fingerprint()));
    }
    if (delta.factors.size() != adapter.factors.size()) {
        throw DataError(fmt::format("delta carries {} factor pairs, adapter has {}", delta.factors.size(),
                                    adapter.factors.size()));
    }
    // Pairs are matched by canonical position; labels on `delta` are ignored.
    for (std::size_t i = 0; i < delta.factors.size(); ++i) {
        const auto& src = delta.factors[i];
        auto& dst = adapter.factors[i];
        require_same_shape(dst.a, src.a, "apply_delta A");
        require_same_shape(dst.b, src.b, "apply_delta B");
        dst.a = src.a;
        dst.b = src.b;
    }
}

LoraAdapter adapter_from_delta(const LoraDelta& delta, const ModelConfig& config) {
    LoraAdapter adapter = init_adapter(config, 0).zeros_like();
    apply_delta(adapter, config, delta);
    return adapter;
}

LoraDelta quantize(const LoraDelta& delta) {
    LoraDelta q = delta;
    for (auto& f : q.factors) {
        for (double& x : f.a.values()) {
            x = static_cast<double>(static_cast<float>(x));
        }
        for (double& x : f.b.values()) {
            x = static_cast<double>(static_cast<float>(x));
        }
    }
    return q;
}

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
}

void put_matrix(std::vector<std::uint8_t>& out, const Matrix& m) {
    for (double x : m.values()) {
        put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(x)));
    }
}

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
        }
        return v;
    }

    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<std::uint64_t>(bytes_[pos_++]) << (8 * i);
        }
        return v;
    }

    Matrix matrix(std::size_t rows, std::size_t cols) {
        need(rows * cols * 4);
        Matrix m(rows, cols);
        for (double& x : m.values()) {
            x = static_cast<double>(std::bit_cast<float>(u32()));
        }
        return m;
    }

    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) {
            throw DataError(fmt::format("delta truncated at byte {} (needs {} more, {} total)", pos_, n, bytes_.size()));
        }
    }

    bool done() const { return pos_ == bytes_.size(); }
    std::size_t pos() const { return pos_; }

private:
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

} // namespace

std::size_t encoded_size(const LoraDelta& delta) {
    return kDeltaHeaderBytes + delta.factors.size() * kDeltaPairHeaderBytes + 4 * delta.parameter_count();
}

std::vector<std::uint8_t> encode_delta(const LoraDelta& delta) {
    std::vector<std::uint8_t> out;
    out.reserve(encoded_size(delta));
    for (char c : std::string_view("CLLR")) {
        out.push_back(static_cast<std::uint8_t>(c));
    }
    put_u32(out, kDeltaFormatVersion);
    put_u64(out, delta.fingerprint);
    put_u32(out, static_cast<std::uint32_t>(delta.factors.size()));
    for (const auto& f : delta.factors) {
        put_u32(out, static_cast<std::uint32_t>(f.a.rows()));
        put_u32(out, static_cast<std::uint32_t>(f.a.cols()));
        put_u32(out, static_cast<std::uint32_t>(f.b.rows()));
        put_u32(out, static_cast<std::uint32_t>(f.b.cols()));
        put_matrix(out, f.a);
        put_matrix(out, f.b);
    }
    return out;
}

LoraDelta decode_delta_raw(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), "CLLR", 4) != 0) {
        throw DataError("delta does not start with magic \"CLLR\"");
    }
    Reader r(bytes.subspan(4));
    std::uint32_t version = r.u32();
    if (version != kDeltaFormatVersion) {
        throw DataError(fmt::format("unsupported delta format version {}", version));
    }
    LoraDelta delta;
    delta.fingerprint = r.u64();
    std::uint32_t pairs = r.u32();
    delta.factors.reserve(pairs);
    for (std::uint32_t i = 0; i < pairs; ++i) {
        std::uint32_t ar = r.u32();
        std::uint32_t ac = r.u32();
        std::uint32_t br = r.u32();
        std::uint32_t bc = r.u32();
        if (ac != br) {
            throw DataError(fmt::format("delta pair {}: A is {}x{} but B is {}x{}", i, ar, ac, br, bc));
        }
        LoraFactors f;
        f.a = r.matrix(ar, ac);
        f.b = r.matrix(br, bc);
        delta.factors.push_back(std::move(f));
    }
    if (!r.done()) {
        throw DataError(fmt::format("delta has {} trailing bytes", bytes.size() - 4 - r.pos()));
    }
    return delta;
}

LoraDelta decode_delta(std::span<const std::uint8_t> bytes, const ModelConfig& config) {
    LoraDelta delta = decode_delta_raw(bytes);
    LoraAdapter layout = init_adapter(config, 0).zeros_like();
    apply_delta(layout, config, delta);
    delta.factors = std::move(layout.factors);
    return delta;
}

void write_delta_file(const std::filesystem::path& path, const LoraDelta& delta) {
    auto bytes = encode_delta(delta);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw DataError(fmt::format("cannot write delta file '{}'", path.string()));
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

LoraDelta read_delta_file(const std::filesystem::path& path, const ModelConfig& config) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError(fmt::format("cannot read delta file '{}'", path.string()));
    }
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_delta(bytes, config);
}

} // namespace cllora
