#pragma once

// GSQT tensor container and atomic file writing.
//
// GSQT layout (all integers little-endian):
//   magic   4 bytes "GSQT"
//   version u16   (1)
//   dtype   u8    (0 = binary32)
//   rank    u8
//   dims    rank * u64
//   payload raw little-endian element bytes, C order
//
// Readers must reject malformed input with an error, never UB: every
// length is validated before use and payloads are checked finite.

#include <unistd.h>

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace gsq {

namespace detail {

inline void put_u16(std::string& out, uint16_t v) {
    out.push_back(static_cast<char>(v & 0xFF));
    out.push_back(static_cast<char>((v >> 8) & 0xFF));
}
inline void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

struct ByteReader {
    const uint8_t* p;
    size_t n;
    size_t pos = 0;
    std::string what;

    ByteReader(const std::string& buf, std::string label)
        : p(reinterpret_cast<const uint8_t*>(buf.data())), n(buf.size()), what(std::move(label)) {}

    void need(size_t k) const {
        if (pos + k > n) throw std::runtime_error(what + ": truncated (need " + std::to_string(k) +
                                                  " bytes at offset " + std::to_string(pos) + ")");
    }
    uint8_t u8() {
        need(1);
        return p[pos++];
    }
    uint16_t u16() {
        need(2);
        uint16_t v = static_cast<uint16_t>(p[pos]) | static_cast<uint16_t>(p[pos + 1]) << 8;
        pos += 2;
        return v;
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[pos + i]) << (8 * i);
        pos += 8;
        return v;
    }
    void raw(void* dst, size_t k) {
        need(k);
        std::memcpy(dst, p + pos, k);
        pos += k;
    }
    void expect_magic(const char m[4]) {
        need(4);
        if (std::memcmp(p + pos, m, 4) != 0)
            throw std::runtime_error(what + ": bad magic (expected " + std::string(m, 4) + ")");
        pos += 4;
    }
    void expect_end() const {
        if (pos != n)
            throw std::runtime_error(what + ": " + std::to_string(n - pos) + " trailing bytes");
    }
};

}  // namespace detail

inline std::string read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw std::runtime_error("read error on " + path);
    return buf;
}

// Write via temp-file-then-rename in the destination directory, so a
// crash mid-write never leaves a torn file at the target path.
inline void atomic_write_file(const std::string& path, const std::string& bytes) {
    namespace fs = std::filesystem;
    fs::path target(path);
    fs::path dir = target.parent_path();
    if (dir.empty()) dir = ".";
    fs::path tmp = dir / (target.filename().string() + ".tmp." + std::to_string(::getpid()));
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) {
            std::error_code ec;
            fs::remove(tmp, ec);
            throw std::runtime_error("write error on " + tmp.string());
        }
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) {
        fs::remove(tmp, ec);
        throw std::runtime_error("cannot rename temp file onto " + path + ": " + ec.message());
    }
}

constexpr uint16_t kGsqtVersion = 1;

inline std::string encode_gsqt(const DenseMatrix& m) {
    std::string out;
    out.reserve(16 + 16 + m.numel() * 4);
    out.append("GSQT", 4);
    detail::put_u16(out, kGsqtVersion);
    out.push_back(0);  // dtype 0 = binary32
    out.push_back(2);  // rank
    detail::put_u64(out, static_cast<uint64_t>(m.rows));
    detail::put_u64(out, static_cast<uint64_t>(m.cols));
    for (float v : m.data) {
        uint32_t bits;
        std::memcpy(&bits, &v, 4);
        detail::put_u32(out, bits);
    }
    return out;
}

inline DenseMatrix decode_gsqt(const std::string& bytes, const std::string& label) {
    detail::ByteReader r(bytes, label);
    r.expect_magic("GSQT");
    uint16_t version = r.u16();
    if (version != kGsqtVersion)
        throw std::runtime_error(label + ": unsupported version " + std::to_string(version));
    uint8_t dtype = r.u8();
    if (dtype != 0) throw std::runtime_error(label + ": unsupported dtype " + std::to_string(dtype));
    uint8_t rank = r.u8();
    if (rank != 2) throw std::runtime_error(label + ": unsupported rank " + std::to_string(rank));
    uint64_t rows = r.u64();
    uint64_t cols = r.u64();
    const uint64_t kMaxElems = 1ull << 31;
    if (rows == 0 || cols == 0 || rows > kMaxElems || cols > kMaxElems || rows * cols > kMaxElems)
        throw std::runtime_error(label + ": implausible dims " + std::to_string(rows) + "x" +
                                 std::to_string(cols));
    DenseMatrix m(static_cast<int>(rows), static_cast<int>(cols));
    for (size_t i = 0; i < m.data.size(); ++i) {
        uint32_t bits = r.u32();
        std::memcpy(&m.data[i], &bits, 4);
    }
    r.expect_end();
    m.require_finite(label.c_str());
    return m;
}

inline void write_gsqt(const std::string& path, const DenseMatrix& m) {
    atomic_write_file(path, encode_gsqt(m));
}

inline DenseMatrix read_gsqt(const std::string& path) {
    return decode_gsqt(read_file_bytes(path), path);
}

}  // namespace gsq
