#include "fdt/payload.hpp"

#include <bit>
#include <string>

#include "fdt/errors.hpp"

namespace fdt {

namespace {
constexpr std::uint8_t kMagic[4] = {'F', 'D', 'T', 'W'};
}

std::size_t TensorRecord::numel() const {
    std::size_t n = 1;
    for (auto d : dims) {
        n *= d;
    }
    return n;
}

void ByteWriter::u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
}

void ByteWriter::u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
}

void ByteWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void ByteReader::need(std::size_t n) const {
    if (remaining() < n) {
        throw FormatError(std::string(what_) + ": truncated at byte " + std::to_string(pos_) + " (need " +
                          std::to_string(n) + ", have " + std::to_string(remaining()) + ")");
    }
}

std::uint8_t ByteReader::u8() {
    need(1);
    return bytes_[pos_++];
}

std::uint32_t ByteReader::u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
        v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
    }
    return v;
}

std::uint64_t ByteReader::u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        v |= static_cast<std::uint64_t>(bytes_[pos_++]) << (8 * i);
    }
    return v;
}

double ByteReader::f64() { return std::bit_cast<double>(u64()); }

std::span<const std::uint8_t> ByteReader::take(std::size_t n) {
    need(n);
    auto out = bytes_.subspan(pos_, n);
    pos_ += n;
    return out;
}

std::size_t payload_header_size(std::span<const TensorRecord> table) {
    std::size_t size = 4 + 4 + 4 + 1 + 4;
    for (const auto& t : table) {
        size += 8 + 1 + 4 * t.dims.size();
    }
    return size;
}

Bytes encode_payload(const WeightPayload& payload) {
    std::size_t numel = 0;
    for (const auto& t : payload.table) {
        numel += t.numel();
    }
    if (payload.weights.size() != numel) {
        throw FormatError("payload: table declares " + std::to_string(numel) + " weights, buffer holds " +
                          std::to_string(payload.weights.size()));
    }
    const bool weights_only = payload.weights_only();
    if (!weights_only && (payload.first_moments.size() != numel || payload.second_moments.size() != numel)) {
        throw FormatError("payload: moment buffers do not match the tensor table");
    }
    Bytes out;
    out.reserve(payload_header_size(payload.table) + 8 * numel * (weights_only ? 1 : 3));
    ByteWriter w(out);
    w.raw(kMagic);
    w.u32(kPayloadVersion);
    w.u32(payload.layers);
    w.u8(weights_only ? 1 : 0);
    w.u32(static_cast<std::uint32_t>(payload.table.size()));
    for (const auto& t : payload.table) {
        w.u64(t.name_hash);
        w.u8(static_cast<std::uint8_t>(t.dims.size()));
        for (auto d : t.dims) {
            w.u32(d);
        }
    }
    for (double x : payload.weights) {
        w.f64(x);
    }
    if (!weights_only) {
        for (double x : payload.first_moments) {
            w.f64(x);
        }
        for (double x : payload.second_moments) {
            w.f64(x);
        }
    }
    return out;
}

WeightPayload decode_payload(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes, "weight payload");
    auto magic = r.take(4);
    if (!std::equal(magic.begin(), magic.end(), kMagic)) {
        throw FormatError("weight payload: bad magic (expected \"FDTW\")");
    }
    const auto version = r.u32();
    if (version != kPayloadVersion) {
        throw FormatError("weight payload: version expected " + std::to_string(kPayloadVersion) + ", found " +
                          std::to_string(version));
    }
    WeightPayload p;
    p.layers = r.u32();
    const auto flag = r.u8();
    if (flag > 1) {
        throw FormatError("weight payload: weights-only flag must be 0 or 1, found " + std::to_string(flag));
    }
    const auto count = r.u32();
    std::size_t numel = 0;
    p.table.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        TensorRecord t;
        t.name_hash = r.u64();
        const auto rank = r.u8();
        for (std::uint8_t d = 0; d < rank; ++d) {
            t.dims.push_back(r.u32());
        }
        numel += t.numel();
        p.table.push_back(std::move(t));
    }
    const std::size_t blocks = flag == 1 ? 1 : 3;
    if (r.remaining() != 8 * numel * blocks) {
        throw FormatError("weight payload: data section expected " + std::to_string(8 * numel * blocks) +
                          " bytes, found " + std::to_string(r.remaining()));
    }
    auto read_block = [&](std::vector<double>& dst) {
        dst.resize(numel);
        for (auto& x : dst) {
            x = r.f64();
        }
    };
    read_block(p.weights);
    if (flag == 0) {
        read_block(p.first_moments);
        read_block(p.second_moments);
    }
    return p;
}

}  // namespace fdt
