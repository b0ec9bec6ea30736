#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "mpcache/net.hpp"
#include "mpcache/rss.hpp"

// Replicated XOR sharing of w-bit words, one packed word per element.  The
// same 2-out-of-3 layout as the arithmetic engine, over GF(2): each AND layer
// is local cross terms, an XOR zero mask, and a one-round ring exchange whose
// messages are counted at one bit per shared bit.

namespace mpcache {

struct BoolTensor {
    std::size_t n = 0;
    int width = 1;
    std::array<std::vector<ring_t>, 3> comp;

    static BoolTensor zeros(std::size_t n, int width);
    ring_t mask() const { return width >= 64 ? ~ring_t{0} : ((ring_t{1} << width) - 1); }
};

BoolTensor bool_xor(const BoolTensor& a, const BoolTensor& b);
BoolTensor bool_not(const BoolTensor& a);
BoolTensor bool_shl(const BoolTensor& a, int k);
BoolTensor bool_and(PartyNet& net, const BoolTensor& a, const BoolTensor& b);
// Two independent AND batches fused into a single round.
std::array<BoolTensor, 2> bool_and2(PartyNet& net, const BoolTensor& a1, const BoolTensor& b1, const BoolTensor& a2,
                                    const BoolTensor& b2);

// The three arithmetic summands of x, each viewed as a locally known packed
// bit vector: summand j lives in boolean component j.
std::array<BoolTensor, 3> arith_summands_as_bits(const ShareTensor& x, int width);

// Bits of x0+x1+x2 mod 2^width via a full adder and a Kogge-Stone carry
// circuit.  Rounds: 0 when width == 1, else 2 + ceil(log2 width).
BoolTensor add3_bits(PartyNet& net, const BoolTensor& x, const BoolTensor& y, const BoolTensor& z);

// Top bit of the signed difference view, i.e. the sign of the value held by
// the arithmetic sharing, as a width-1 boolean sharing.
BoolTensor msb_bits(PartyNet& net, const ShareTensor& x, int width);

// [x == 0 mod 2^width] via NOR over the sum bits (adds ceil(log2 width)
// AND-tree rounds on top of add3_bits).
BoolTensor is_zero_bits(PartyNet& net, const ShareTensor& x, int width);

// AND-fold of all width bits of each element down to one bit.
BoolTensor fold_and(PartyNet& net, const BoolTensor& a);

// Boolean bit -> arithmetic 0/1 sharing (two multiplication rounds).
ShareTensor bool_to_arith(PartyNet& net, const BoolTensor& bit);

int ceil_log2(std::uint64_t n);
// Round counts mirrored by the Ideal backend so both backends report the
// same protocol structure.
std::uint64_t add3_round_cost(int width);
std::uint64_t compare_round_cost(int width);
std::uint64_t equal_round_cost(int width);

}  // namespace mpcache
