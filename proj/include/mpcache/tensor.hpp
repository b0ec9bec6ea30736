#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "mpcache/ring.hpp"

// Dense row-major host tensors plus the MPCT on-disk container.
//
// MPCT layout, all little-endian:
//   bytes 0..3   magic "MPCT"
//   byte  4      format version (1)
//   byte  5      dtype: 0 = 64-bit real, 1 = raw ring element
//   byte  6      rank (>= 1)
//   byte  7      reserved (0)
//   then rank u32 extents, then the row-major payload of 8-byte elements.

namespace mpcache {

enum class DType : std::uint8_t { Real64 = 0, Raw = 1 };

struct PlainTensor {
    std::vector<std::uint32_t> dims;
    DType dtype = DType::Real64;
    std::vector<double> reals;   // active when dtype == Real64
    std::vector<ring_t> raws;    // active when dtype == Raw

    static PlainTensor zeros(std::vector<std::uint32_t> dims);
    static PlainTensor from_reals(std::vector<std::uint32_t> dims, std::vector<double> data);
    static PlainTensor from_raws(std::vector<std::uint32_t> dims, std::vector<ring_t> data);

    std::size_t numel() const;
    double& at(std::size_t i) { return reals[i]; }
    double at(std::size_t i) const { return reals[i]; }

    // Element-wise fixed-point conversion between the two payload modes.
    PlainTensor encoded(int frac_bits = fx::kFracBits) const;
    PlainTensor decoded(int frac_bits = fx::kFracBits) const;
};

// Throws std::runtime_error with the failing byte offset in the message.
PlainTensor mpct_read(const std::string& path);
PlainTensor mpct_read_stream(std::istream& in, const std::string& name);
void mpct_write(const std::string& path, const PlainTensor& t);
void mpct_write_stream(std::ostream& out, const PlainTensor& t);

}  // namespace mpcache
