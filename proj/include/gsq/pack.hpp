#pragma once

// Bit-exact packed storage.
//
// GSQP layout (integers little-endian):
//   magic      4 bytes "GSQP"
//   version    u16  (1)
//   bit_mode   u8   (0 = ternary, else b in [2, 8])
//   rows       u64
//   cols       u64
//   group_size u32
//   scale_dtype u8  (1 = binary16)
//   scales     rows * ceil(cols/group_size) * u16, row-major group order
//   payload    packed codes, rows independently decodable
//
// Code payload per row:
//   ternary: codes offset +1 to {0,1,2}, 5 trits per byte, first code in
//            the least-significant base-3 digit; padding digits are 0,
//            so every byte is <= 242
//   b-bit:   codes offset +2^(b-1) to [0, 2^b), packed LSB-first into a
//            bitstream, row padded to a byte boundary with zero bits
//
// Decoding validates everything it touches: magic, version, modes,
// lengths, trit range, and that padding is zero. Corrupt input raises
// an error; it never crashes or decodes silently wrong.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "half.hpp"
#include "io.hpp"
#include "quantize.hpp"
#include "tensor.hpp"

namespace gsq {

constexpr uint16_t kGsqpVersion = 1;
constexpr uint8_t kScaleDtypeF16 = 1;
constexpr int kTritsPerByte = 5;

struct PackedTensor {
    uint8_t bit_mode = 0;  // 0 = ternary, else b
    uint64_t rows = 0;
    uint64_t cols = 0;
    uint32_t group_size = 128;
    std::vector<uint16_t> scales;   // binary16 bits
    std::vector<uint8_t> payload;

    uint64_t groups_per_row() const {
        return group_size == 0 ? 0 : (cols + group_size - 1) / group_size;
    }
    uint64_t row_bytes() const {
        if (bit_mode == 0) return (cols + kTritsPerByte - 1) / kTritsPerByte;
        return (cols * bit_mode + 7) / 8;
    }
};

namespace detail {

inline void check_mode(uint8_t bit_mode, const std::string& what) {
    if (bit_mode == 1 || bit_mode > 8)
        throw std::runtime_error(what + ": invalid bit mode " + std::to_string(bit_mode));
}

}  // namespace detail

// codes hold level values of the default grid for the mode: {-1,0,1}
// for ternary, [-2^(b-1), 2^(b-1)) otherwise.
inline PackedTensor pack(const IntMatrix& codes, const GroupScales& scales, uint8_t bit_mode) {
    detail::check_mode(bit_mode, "pack");
    if (codes.rows != scales.rows || codes.cols != scales.cols)
        throw std::invalid_argument("pack: codes/scales shape mismatch");
    PackedTensor pt;
    pt.bit_mode = bit_mode;
    pt.rows = static_cast<uint64_t>(codes.rows);
    pt.cols = static_cast<uint64_t>(codes.cols);
    pt.group_size = static_cast<uint32_t>(scales.group_size);

    pt.scales.reserve(static_cast<size_t>(pt.rows * pt.groups_per_row()));
    for (int r = 0; r < scales.s.rows; ++r)
        for (int g = 0; g < scales.s.cols; ++g) {
            float s = scales.s.at(r, g);
            if (!std::isfinite(s))
                throw std::invalid_argument("pack: non-finite scale at row " + std::to_string(r) +
                                            " group " + std::to_string(g));
            if (std::abs(s) > kF16Max)
                throw std::invalid_argument("pack: scale magnitude exceeds binary16 range at row " +
                                            std::to_string(r) + " group " + std::to_string(g));
            pt.scales.push_back(f32_to_f16(s));
        }

    auto bad_code = [&](int r, int c) {
        throw std::invalid_argument("pack: code out of range at (" + std::to_string(r) + ", " +
                                    std::to_string(c) + ")");
    };
    pt.payload.reserve(static_cast<size_t>(pt.rows * pt.row_bytes()));
    if (bit_mode == 0) {
        for (int r = 0; r < codes.rows; ++r) {
            uint32_t byte = 0, pow3 = 1;
            int filled = 0;
            for (int c = 0; c < codes.cols; ++c) {
                int32_t v = codes.at(r, c);
                if (v < -1 || v > 1) bad_code(r, c);
                byte += static_cast<uint32_t>(v + 1) * pow3;
                pow3 *= 3;
                if (++filled == kTritsPerByte) {
                    pt.payload.push_back(static_cast<uint8_t>(byte));
                    byte = 0;
                    pow3 = 1;
                    filled = 0;
                }
            }
            if (filled > 0) pt.payload.push_back(static_cast<uint8_t>(byte));
        }
    } else {
        int b = bit_mode;
        int32_t lo = -(1 << (b - 1)), hi = (1 << (b - 1)) - 1;
        for (int r = 0; r < codes.rows; ++r) {
            uint32_t acc = 0;
            int nbits = 0;
            for (int c = 0; c < codes.cols; ++c) {
                int32_t v = codes.at(r, c);
                if (v < lo || v > hi) bad_code(r, c);
                acc |= static_cast<uint32_t>(v - lo) << nbits;
                nbits += b;
                while (nbits >= 8) {
                    pt.payload.push_back(static_cast<uint8_t>(acc & 0xFF));
                    acc >>= 8;
                    nbits -= 8;
                }
            }
            if (nbits > 0) pt.payload.push_back(static_cast<uint8_t>(acc & 0xFF));
        }
    }
    return pt;
}

struct UnpackedTensor {
    IntMatrix codes;
    GroupScales scales;  // binary16-rounded values
};

inline UnpackedTensor unpack(const PackedTensor& pt) {
    detail::check_mode(pt.bit_mode, "unpack");
    const uint64_t kMaxElems = 1ull << 31;
    if (pt.rows > kMaxElems || pt.cols > kMaxElems || pt.rows * pt.cols > kMaxElems ||
        pt.group_size == 0)
        throw std::runtime_error("unpack: implausible dimensions");
    if (pt.scales.size() != pt.rows * pt.groups_per_row())
        throw std::runtime_error("unpack: scale count mismatch");
    if (pt.payload.size() != pt.rows * pt.row_bytes())
        throw std::runtime_error("unpack: payload length mismatch");

    UnpackedTensor out;
    int rows = static_cast<int>(pt.rows), cols = static_cast<int>(pt.cols);
    out.codes = IntMatrix(rows, cols);
    out.scales = GroupScales(rows, cols, static_cast<int>(pt.group_size));
    for (int r = 0; r < out.scales.s.rows; ++r)
        for (int g = 0; g < out.scales.s.cols; ++g)
            out.scales.s.at(r, g) =
                f16_to_f32(pt.scales[static_cast<size_t>(r) * out.scales.s.cols + g]);
    out.scales.s.require_finite("unpack: scales");

    size_t rb = static_cast<size_t>(pt.row_bytes());
    if (pt.bit_mode == 0) {
        for (int r = 0; r < rows; ++r) {
            const uint8_t* row = pt.payload.data() + static_cast<size_t>(r) * rb;
            for (size_t byte_i = 0; byte_i < rb; ++byte_i) {
                uint32_t byte = row[byte_i];
                if (byte > 242)
                    throw std::runtime_error("unpack: ternary byte value " + std::to_string(byte) +
                                             " out of range");
                for (int k = 0; k < kTritsPerByte; ++k) {
                    uint32_t trit = byte % 3;
                    byte /= 3;
                    int c = static_cast<int>(byte_i) * kTritsPerByte + k;
                    if (c < cols) {
                        out.codes.at(r, c) = static_cast<int32_t>(trit) - 1;
                    } else if (trit != 0) {
                        throw std::runtime_error("unpack: nonzero ternary padding in row " +
                                                 std::to_string(r));
                    }
                }
            }
        }
    } else {
        int b = pt.bit_mode;
        int32_t lo = -(1 << (b - 1));
        uint32_t mask = (1u << b) - 1;
        for (int r = 0; r < rows; ++r) {
            const uint8_t* row = pt.payload.data() + static_cast<size_t>(r) * rb;
            uint64_t acc = 0;
            int nbits = 0;
            size_t next = 0;
            for (int c = 0; c < cols; ++c) {
                while (nbits < b) {
                    acc |= static_cast<uint64_t>(row[next++]) << nbits;
                    nbits += 8;
                }
                out.codes.at(r, c) = static_cast<int32_t>(acc & mask) + lo;
                acc >>= b;
                nbits -= b;
            }
            if (acc != 0)
                throw std::runtime_error("unpack: nonzero bit padding in row " + std::to_string(r));
        }
    }
    return out;
}

inline DenseMatrix dequantize(const PackedTensor& pt) {
    UnpackedTensor u = unpack(pt);
    return hard_weights(u.codes, u.scales);
}

struct BppReport {
    double stored = 0.0;   // actual bits on disk per weight
    double entropy = 0.0;  // log2(3) per ternary weight instead of 1.6
};

inline BppReport report_bpp(const PackedTensor& pt) {
    BppReport r;
    double count = static_cast<double>(pt.rows) * static_cast<double>(pt.cols);
    if (count == 0.0) return r;
    double scale_bits = 16.0 * static_cast<double>(pt.scales.size());
    r.stored = (8.0 * static_cast<double>(pt.payload.size()) + scale_bits) / count;
    double code_bits = pt.bit_mode == 0 ? kTernaryEntropyBits() : static_cast<double>(pt.bit_mode);
    r.entropy = code_bits + scale_bits / count;
    return r;
}

// Rates are quoted at two decimals (2.125 -> "2.13").
inline std::string bpp_2dp(double bpp) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", bpp);
    return buf;
}

inline std::string encode_gsqp(const PackedTensor& pt) {
    detail::check_mode(pt.bit_mode, "encode_gsqp");
    std::string out;
    out.reserve(32 + pt.scales.size() * 2 + pt.payload.size());
    out.append("GSQP", 4);
    detail::put_u16(out, kGsqpVersion);
    out.push_back(static_cast<char>(pt.bit_mode));
    detail::put_u64(out, pt.rows);
    detail::put_u64(out, pt.cols);
    detail::put_u32(out, pt.group_size);
    out.push_back(static_cast<char>(kScaleDtypeF16));
    for (uint16_t s : pt.scales) detail::put_u16(out, s);
    out.append(reinterpret_cast<const char*>(pt.payload.data()), pt.payload.size());
    return out;
}

inline PackedTensor decode_gsqp(const std::string& bytes, const std::string& label) {
    detail::ByteReader r(bytes, label);
    r.expect_magic("GSQP");
    uint16_t version = r.u16();
    if (version != kGsqpVersion)
        throw std::runtime_error(label + ": unsupported version " + std::to_string(version));
    PackedTensor pt;
    pt.bit_mode = r.u8();
    detail::check_mode(pt.bit_mode, label);
    pt.rows = r.u64();
    pt.cols = r.u64();
    pt.group_size = r.u32();
    uint8_t sdtype = r.u8();
    if (sdtype != kScaleDtypeF16)
        throw std::runtime_error(label + ": unsupported scale dtype " + std::to_string(sdtype));
    const uint64_t kMaxElems = 1ull << 31;
    if (pt.rows > kMaxElems || pt.cols > kMaxElems || pt.rows * pt.cols > kMaxElems ||
        pt.group_size == 0)
        throw std::runtime_error(label + ": implausible dimensions");
    uint64_t nscales = pt.rows * pt.groups_per_row();
    pt.scales.resize(static_cast<size_t>(nscales));
    for (auto& s : pt.scales) s = r.u16();
    uint64_t nbytes = pt.rows * pt.row_bytes();
    pt.payload.resize(static_cast<size_t>(nbytes));
    if (nbytes > 0) r.raw(pt.payload.data(), static_cast<size_t>(nbytes));
    r.expect_end();
    return pt;
}

inline void write_gsqp(const std::string& path, const PackedTensor& pt) {
    atomic_write_file(path, encode_gsqp(pt));
}

inline PackedTensor read_gsqp(const std::string& path) {
    return decode_gsqp(read_file_bytes(path), path);
}

}  // namespace gsq
