#pragma once

// Little-endian scalar i/o shared by the binary surface and path formats.

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <stdexcept>

namespace qbsde::detail {

inline void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline void put_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
inline void put_f64(std::ostream& os, double v) { os.write(reinterpret_cast<const char*>(&v), 8); }

inline std::uint32_t get_u32(std::istream& is) { std::uint32_t v; is.read(reinterpret_cast<char*>(&v), 4); return v; }
inline std::uint64_t get_u64(std::istream& is) { std::uint64_t v; is.read(reinterpret_cast<char*>(&v), 8); return v; }
inline double get_f64(std::istream& is) { double v; is.read(reinterpret_cast<char*>(&v), 8); return v; }

inline void require_little_endian() {
    if constexpr (std::endian::native != std::endian::little)
        throw std::runtime_error("binary i/o requires a little-endian host");
}

} // namespace qbsde::detail
