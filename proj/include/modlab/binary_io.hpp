#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>

#include "modlab/error.hpp"

namespace modlab::io {

/// Appends v to out as little-endian bytes.
template <class T>
void put_le(std::string& out, T v) {
    static_assert(std::is_arithmetic_v<T>);
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    static_assert(sizeof(T) == sizeof(U));
    const U bits = std::bit_cast<U>(v);
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

template <class T>
T get_le(const char* p) {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) bits |= static_cast<U>(static_cast<unsigned char>(p[i])) << (8 * i);
    return std::bit_cast<T>(bits);
}

inline void read_exact(std::istream& in, char* dst, std::size_t n, const std::string& what) {
    in.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n) throw FormatError(what + ": unexpected end of file");
}

/// First line of a file (without the newline); throws on EOF.
inline std::string read_header_line(std::istream& in, const std::string& what) {
    std::string line;
    if (!std::getline(in, line)) throw FormatError(what + ": missing JSON header line");
    return line;
}

}  // namespace modlab::io
