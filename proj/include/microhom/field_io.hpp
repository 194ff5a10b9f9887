#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "microhom/field.hpp"

namespace microhom {

static_assert(std::endian::native == std::endian::little,
              "serialized field formats are little-endian; big-endian hosts unsupported");

namespace io_detail {

inline void put_bytes(std::ostream& os, const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), std::streamsize(n));
}

inline void get_bytes(std::istream& is, void* p, std::size_t n, const char* what) {
    is.read(static_cast<char*>(p), std::streamsize(n));
    if (std::size_t(is.gcount()) != n) throw FormatError(std::string("truncated input while reading ") + what);
}

inline constexpr std::uint64_t kMaxElements = (std::uint64_t(1) << 34); // 16 Gi doubles

} // namespace io_detail

/**
 * TSF1 sampled-field container.
 * Layout: magic "TSF1" | u8 ncomp | u8 periodic bitmask (bit i = axis i) |
 * 3x u32 n | 3x f64 origin | 3x f64 extent | payload f64[n0*n1*n2*ncomp],
 * all little-endian, z index fastest, component innermost.
 */
inline void write_tsf1(std::ostream& os, const VectorField& f) {
    io_detail::put_bytes(os, "TSF1", 4);
    const std::uint8_t nc = std::uint8_t(f.ncomp);
    std::uint8_t flags = 0;
    for (int a = 0; a < 3; ++a)
        if (f.grid.periodic[a]) flags |= std::uint8_t(1u << a);
    io_detail::put_bytes(os, &nc, 1);
    io_detail::put_bytes(os, &flags, 1);
    for (int a = 0; a < 3; ++a) {
        const std::uint32_t n = std::uint32_t(f.grid.n[a]);
        io_detail::put_bytes(os, &n, 4);
    }
    io_detail::put_bytes(os, f.grid.origin.data(), 3 * sizeof(double));
    io_detail::put_bytes(os, f.grid.extent.data(), 3 * sizeof(double));
    io_detail::put_bytes(os, f.data.data(), f.data.size() * sizeof(double));
    if (!os) throw FormatError("write failed");
}

inline VectorField read_tsf1(std::istream& is) {
    char magic[4];
    io_detail::get_bytes(is, magic, 4, "magic");
    if (std::memcmp(magic, "TSF1", 4) != 0)
        throw FormatError("bad magic at offset 0: expected TSF1");
    std::uint8_t nc = 0, flags = 0;
    io_detail::get_bytes(is, &nc, 1, "ncomp");
    io_detail::get_bytes(is, &flags, 1, "flags");
    if (!(nc == 1 || nc == 3 || nc == 9)) throw FormatError("unsupported component count");
    Grid g;
    std::uint64_t total = nc;
    for (int a = 0; a < 3; ++a) {
        std::uint32_t n = 0;
        io_detail::get_bytes(is, &n, 4, "dims");
        if (n == 0) throw FormatError("zero dimension");
        total *= n;
        if (total > io_detail::kMaxElements) throw FormatError("dimension overflow");
        g.n[a] = int(n);
        g.periodic[a] = (flags >> a) & 1u;
    }
    io_detail::get_bytes(is, g.origin.data(), 3 * sizeof(double), "origin");
    io_detail::get_bytes(is, g.extent.data(), 3 * sizeof(double), "extent");
    VectorField f(g, int(nc));
    io_detail::get_bytes(is, f.data.data(), f.data.size() * sizeof(double), "payload");
    return f;
}

inline void save_tsf1(const std::string& path, const VectorField& f) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open for writing: " + path);
    write_tsf1(os, f);
}

inline VectorField load_tsf1(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open for reading: " + path);
    return read_tsf1(is);
}

} // namespace microhom
