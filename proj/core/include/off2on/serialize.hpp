#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "off2on/errors.hpp"

// Little-endian binary IO helpers shared by the dataset and checkpoint
// formats. Doubles are written as raw IEEE-754 bytes so round-trips are
// bit-exact.

namespace off2on::io {

static_assert(sizeof(double) == 8, "IEEE-754 binary64 expected");

namespace detail {

template <typename T>
inline T byteswap_if_big(T value) {
    if constexpr (std::endian::native == std::endian::little) {
        return value;
    } else {
        T out;
        auto* src = reinterpret_cast<const unsigned char*>(&value);
        auto* dst = reinterpret_cast<unsigned char*>(&out);
        for (std::size_t i = 0; i < sizeof(T); ++i) dst[i] = src[sizeof(T) - 1 - i];
        return out;
    }
}

}  // namespace detail

template <typename T>
inline void write_pod(std::ostream& os, T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    value = detail::byteswap_if_big(value);
    os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
inline T read_pod(std::istream& is) {
    static_assert(std::is_trivially_copyable_v<T>);
    T value{};
    is.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!is) throw DataFormatError(DataFormatError::Kind::Truncated, "unexpected end of file");
    return detail::byteswap_if_big(value);
}

inline void write_f64(std::ostream& os, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    write_pod(os, bits);
}

inline double read_f64(std::istream& is) {
    const std::uint64_t bits = read_pod<std::uint64_t>(is);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

inline void write_f64_span(std::ostream& os, const double* data, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) write_f64(os, data[i]);
}

inline void read_f64_span(std::istream& is, double* data, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) data[i] = read_f64(is);
}

inline void write_string(std::ostream& os, const std::string& s) {
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is, std::size_t max_len = 1u << 20) {
    const auto n = read_pod<std::uint32_t>(is);
    if (n > max_len)
        throw DataFormatError(DataFormatError::Kind::CorruptHeader, "string length out of range");
    std::string s(n, '\0');
    is.read(s.data(), n);
    if (!is) throw DataFormatError(DataFormatError::Kind::Truncated, "unexpected end of file");
    return s;
}

/// Reads a 4-byte magic tag and compares against the expected one.
inline void expect_magic(std::istream& is, const char expected[4], const std::string& what) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, expected, 4) != 0)
        throw DataFormatError(DataFormatError::Kind::CorruptHeader, what + ": bad magic bytes");
}

/// FNV-1a over a byte buffer; used for checkpoint/config fingerprints.
inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull) {
    auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace off2on::io
