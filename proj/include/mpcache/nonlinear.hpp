#pragma once

#include <cstdint>
#include <vector>

#include "mpcache/boolshare.hpp"
#include "mpcache/net.hpp"
#include "mpcache/rss.hpp"

// Nonlinear protocol layer.  Comparison and equality results come back as
// arithmetic 0/1 sharings ready for oblivious selection.  Under the Boolean
// backend they run real shared GF(2) circuits (sign extraction through a
// carry-save adder plus Kogge-Stone propagation); the Ideal backend computes
// the same outputs inside the simulator with identical invocation, round and
// multiplication counts but no bytes on the wire.

namespace mpcache {

// [a < b] in the signed view, element-wise.  Callers keep |a - b| < 2^63;
// every fixed-point producer in this codebase stays far inside that.
ShareTensor sec_less(PartyNet& net, const ShareTensor& a, const ShareTensor& b);

// [vals[i] == consts[i]] at the given operand bit width.
ShareTensor sec_equal_consts(PartyNet& net, const ShareTensor& vals, const std::vector<std::uint64_t>& consts,
                             int width);
ShareTensor sec_equal_index(PartyNet& net, const SecretIndex& a, std::uint64_t b);

// Oblivious mux y + c*(x - y); c is an arithmetic 0/1 sharing.
ShareTensor sec_select(PartyNet& net, const ShareTensor& c, const ShareTensor& x, const ShareTensor& y);

// One-hot row over n slots for a shared index (n equality tests at the
// index's width).
ShareTensor onehot_row(PartyNet& net, const SecretIndex& id, std::size_t n);

struct MaxResult {
    ShareTensor value;   // scalar [1]
    SecretIndex index;   // position of the first maximum
    std::uint64_t levels = 0;
};

// Binary tournament: n-1 comparisons in ceil(log2 n) comparison levels.
// Ties resolve to the lowest index.
MaxResult sec_max(PartyNet& net, const ShareTensor& v);
ShareTensor sec_max_value(PartyNet& net, const ShareTensor& v);

struct TopkResult {
    std::vector<SecretIndex> indices;  // ranked by descending value, ties by position
    ShareTensor onehot;                // [k, n] arithmetic 0/1 rows aligned with indices
};

// k passes of sec_max, masking each winner to the reserved minus-infinity
// sentinel.  Ledger: exactly k*(n-1) comparisons and k*n equality tests in
// phase "topk".
TopkResult sec_topk(PartyNet& net, const ShareTensor& v, std::uint32_t k);

// exp(x) for x in [-16, 0] via the limit form (1 + x/2^t)^(2^t), t = 14,
// squared at 30 fraction bits internally.
ShareTensor sec_exp(PartyNet& net, const ShareTensor& x, int frac_bits = fx::kFracBits);

// 1/x for x in [2^-8, 2^12]: oblivious power-of-two normalization to
// [0.5, 1), a linear initial estimate there, and 13 Newton iterations at 24
// fraction bits.
ShareTensor sec_recip(PartyNet& net, const ShareTensor& x, int frac_bits = fx::kFracBits);

// Numerically-safe softmax over a length-n vector: max-subtract, exp, sum,
// reciprocal, scale.  Charged to ledger phase "softmax".
ShareTensor sec_softmax(PartyNet& net, const ShareTensor& x, int frac_bits = fx::kFracBits);

}  // namespace mpcache
