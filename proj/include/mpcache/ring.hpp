#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <stdexcept>

// Arithmetic over Z_{2^64} with a two's-complement signed view and a
// fixed-point encoding layered on top.  All wraparound is defined behavior:
// unsigned overflow is the ring reduction.

namespace mpcache {

using ring_t = std::uint64_t;

inline constexpr int kRingBits = 64;

inline constexpr ring_t ring_add(ring_t a, ring_t b) { return a + b; }
inline constexpr ring_t ring_sub(ring_t a, ring_t b) { return a - b; }
inline constexpr ring_t ring_mul(ring_t a, ring_t b) { return a * b; }
inline constexpr ring_t ring_neg(ring_t a) { return ~a + 1; }

inline std::int64_t to_signed(ring_t a) { return std::bit_cast<std::int64_t>(a); }
inline ring_t from_signed(std::int64_t a) { return std::bit_cast<ring_t>(a); }

namespace fx {

inline constexpr int kFracBits = 18;

// Sentinel used by top-k masking as "minus infinity".  encode() never returns
// it: the one real number that would map here is rejected.
inline constexpr ring_t kNegInf = 0xC000000000000000ull;  // signed -2^62

// Round-to-nearest, ties away from zero.  Accepts |x| < 2^(64-f-1).
inline ring_t encode(double x, int f = kFracBits) {
    if (!std::isfinite(x)) throw std::domain_error("fx::encode: non-finite input");
    const double bound = std::ldexp(1.0, kRingBits - f - 1);
    if (!(std::fabs(x) < bound)) throw std::domain_error("fx::encode: out of representable range");
    // ldexp scales by a power of two exactly, so |scaled| < 2^63 and llround is safe.
    const double scaled = std::ldexp(x, f);
    const ring_t raw = from_signed(static_cast<std::int64_t>(std::llround(scaled)));
    if (raw == kNegInf) throw std::domain_error("fx::encode: reserved sentinel value");
    return raw;
}

inline double decode(ring_t a, int f = kFracBits) {
    return std::ldexp(static_cast<double>(to_signed(a)), -f);
}

// Arithmetic right shift by f in the signed view: the fixed-point rescale
// applied after a product of two encoded values.
inline ring_t truncate(ring_t a, int f = kFracBits) {
    return from_signed(to_signed(a) >> f);
}

}  // namespace fx

}  // namespace mpcache
