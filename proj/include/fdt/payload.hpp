#pragma once

// Weight payload wire format (all integers and floats little-endian):
//
//   "FDTW"            4 bytes magic
//   version           u32
//   layers            u32   blocks per stack
//   weights_only      u8    1 = raw weights only, 0 = raw + Adam m + Adam v
//   tensor_count      u32
//   per tensor:       name_hash u64, rank u8, dims u32 x rank
//   raw weights       f64 x sum(numel), in table order
//   [m, v]            f64 x sum(numel) each, only when weights_only == 0

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace fdt {

using Bytes = std::vector<std::uint8_t>;

inline constexpr std::uint32_t kPayloadVersion = 1;

struct TensorRecord {
    std::uint64_t name_hash = 0;
    std::vector<std::uint32_t> dims;

    std::size_t numel() const;
    bool operator==(const TensorRecord&) const = default;
};

struct WeightPayload {
    std::uint32_t layers = 0;
    std::vector<TensorRecord> table;
    std::vector<double> weights;
    std::vector<double> first_moments;
    std::vector<double> second_moments;

    bool weights_only() const { return first_moments.empty() && second_moments.empty(); }
};

std::size_t payload_header_size(std::span<const TensorRecord> table);

Bytes encode_payload(const WeightPayload& payload);
// Throws FormatError on bad magic/version, truncation or trailing bytes.
WeightPayload decode_payload(std::span<const std::uint8_t> bytes);

// Little-endian primitive writer/reader shared by the binary formats.
class ByteWriter {
public:
    explicit ByteWriter(Bytes& out) : out_(out) {}
    void u8(std::uint8_t v) { out_.push_back(v); }
    void u32(std::uint32_t v);
    void u64(std::uint64_t v);
    void f64(double v);
    void raw(std::span<const std::uint8_t> bytes) { out_.insert(out_.end(), bytes.begin(), bytes.end()); }

private:
    Bytes& out_;
};

class ByteReader {
public:
    ByteReader(std::span<const std::uint8_t> bytes, const char* what) : bytes_(bytes), what_(what) {}
    std::uint8_t u8();
    std::uint32_t u32();
    std::uint64_t u64();
    double f64();
    std::span<const std::uint8_t> take(std::size_t n);
    std::size_t remaining() const { return bytes_.size() - pos_; }

private:
    void need(std::size_t n) const;

    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
    const char* what_;
};

}  // namespace fdt
