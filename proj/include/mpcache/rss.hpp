#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "mpcache/net.hpp"
#include "mpcache/tensor.hpp"

// 2-out-of-3 replicated sharing over Z_{2^64}: x = comp[0]+comp[1]+comp[2],
// party i holds the pair (comp[i], comp[i+1]).  Components are stored once;
// the per-party replicated pairs are views by construction, so pair
// consistency is structural rather than checked.

namespace mpcache {

struct ShareTensor {
    std::vector<std::uint32_t> dims;
    std::array<std::vector<ring_t>, 3> comp;

    static ShareTensor zeros(std::vector<std::uint32_t> dims);
    std::size_t numel() const;
    std::uint32_t rows() const { return dims.empty() ? 0 : dims[0]; }
    std::uint32_t cols() const { return dims.size() < 2 ? 1 : dims[1]; }
};

// A shared index bounded by 2^width; width drives the cost of equality tests.
struct SecretIndex {
    std::array<ring_t, 3> comp{0, 0, 0};
    int width = 1;
};

inline int index_width(std::size_t n) {
    int w = 0;
    while ((std::size_t{1} << w) < n) ++w;
    return w < 1 ? 1 : w;
}

// Input sharing and opening.  share() encodes Real64 tensors with the given
// fraction bits and deals fresh uniform components (one round, the dealt
// bytes).  reconstruct() opens to all parties (one round, revealed bytes).
ShareTensor share(PartyNet& net, const PlainTensor& t, int frac_bits = fx::kFracBits);
ShareTensor share_raws(PartyNet& net, std::vector<std::uint32_t> dims, const std::vector<ring_t>& raws);
ShareTensor share_constant(std::vector<std::uint32_t> dims, const std::vector<ring_t>& raws);
std::vector<ring_t> reconstruct_raws(PartyNet& net, const ShareTensor& x);
PlainTensor reconstruct(PartyNet& net, const ShareTensor& x, int frac_bits = fx::kFracBits);

SecretIndex share_index(PartyNet& net, std::uint64_t value, int width);
std::uint64_t reconstruct_index(PartyNet& net, const SecretIndex& id);

// Linear layer: local, zero rounds, zero bytes.
ShareTensor sec_add(const ShareTensor& a, const ShareTensor& b);
ShareTensor sec_sub(const ShareTensor& a, const ShareTensor& b);
ShareTensor sec_neg(const ShareTensor& a);
ShareTensor add_plain(const ShareTensor& a, const std::vector<ring_t>& p);
ShareTensor add_plain_scalar(const ShareTensor& a, ring_t p);
// Multiply by a public integer (exact) or a public fixed-point raw (with the
// rescaling truncation, which re-randomizes via the dealer).
ShareTensor mul_plain_int(const ShareTensor& a, std::int64_t c);
ShareTensor mul_plain_fx(PartyNet& net, const ShareTensor& a, ring_t c_raw, int frac_bits = fx::kFracBits);

// Multiplication: local cross terms, zero-masked re-share (one message per
// party, one round).  FxMode::Truncate rescales fixed-point products;
// FxMode::Raw keeps the exact ring product (used for 0/1 masks and indices).
enum class FxMode { Truncate, Raw };
ShareTensor sec_mul(PartyNet& net, const ShareTensor& a, const ShareTensor& b, FxMode mode = FxMode::Truncate,
                    int frac_bits = fx::kFracBits);
// A [m,k] x B [k,n] (or x B^T [n,k] when transpose_b): one re-share round for
// the whole output batch, truncation once per output element.
ShareTensor sec_matmul(PartyNet& net, const ShareTensor& a, const ShareTensor& b, bool transpose_b = false,
                       FxMode mode = FxMode::Truncate, int frac_bits = fx::kFracBits);

// Truncation of an existing sharing (arithmetic shift by f in the signed
// view).  Modeled as an ideal local functionality: the error is at most one
// ulp, deterministic given the seed, and it costs no rounds or bytes.
void truncate_shares(PartyNet& net, ShareTensor& x, int frac_bits = fx::kFracBits);

// Structural helpers (local, no ledger effect).
ShareTensor slice_rows(const ShareTensor& a, std::uint32_t row_begin, std::uint32_t row_end);
ShareTensor concat_rows(const ShareTensor& a, const ShareTensor& b);
ShareTensor get_row(const ShareTensor& a, std::uint32_t r);
void set_row(ShareTensor& a, std::uint32_t r, const ShareTensor& row);
std::array<ring_t, 3> element_at(const ShareTensor& a, std::size_t i);
ShareTensor from_elements(std::vector<std::uint32_t> dims, const std::vector<std::array<ring_t, 3>>& elems);

}  // namespace mpcache
