#include "mpcache/boolshare.hpp"

#include <stdexcept>

namespace mpcache {

namespace {

void check_compatible(const BoolTensor& a, const BoolTensor& b, const char* op) {
    if (a.n != b.n || a.width != b.width) throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

// Local cross terms + zero mask; returns the staged components, caller flushes.
std::array<std::vector<ring_t>, 3> and_cross_terms(PartyNet& net, const BoolTensor& a, const BoolTensor& b) {
    std::array<std::vector<ring_t>, 3> z;
    for (auto& c : z) c.resize(a.n);
    for (std::size_t i = 0; i < a.n; ++i) {
        const auto alpha = net.zero_triple_xor();
        for (int p = 0; p < 3; ++p) {
            const int q = (p + 1) % 3;
            z[p][i] = ((a.comp[p][i] & b.comp[p][i]) ^ (a.comp[q][i] & b.comp[p][i]) ^
                       (a.comp[p][i] & b.comp[q][i]) ^ alpha[p]) &
                      a.mask();
        }
    }
    return z;
}

}  // namespace

BoolTensor BoolTensor::zeros(std::size_t n, int width) {
    BoolTensor t;
    t.n = n;
    t.width = width;
    for (auto& c : t.comp) c.assign(n, 0);
    return t;
}

BoolTensor bool_xor(const BoolTensor& a, const BoolTensor& b) {
    check_compatible(a, b, "bool_xor");
    BoolTensor out = a;
    for (int c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < a.n; ++i) out.comp[c][i] ^= b.comp[c][i];
    return out;
}

BoolTensor bool_not(const BoolTensor& a) {
    BoolTensor out = a;
    const ring_t m = a.mask();
    for (std::size_t i = 0; i < a.n; ++i) out.comp[0][i] ^= m;
    return out;
}

BoolTensor bool_shl(const BoolTensor& a, int k) {
    BoolTensor out = a;
    const ring_t m = a.mask();
    for (int c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < a.n; ++i) out.comp[c][i] = (out.comp[c][i] << k) & m;
    return out;
}

BoolTensor bool_and(PartyNet& net, const BoolTensor& a, const BoolTensor& b) {
    check_compatible(a, b, "bool_and");
    BoolTensor out = BoolTensor::zeros(a.n, a.width);
    if (a.n == 0) return out;
    out.comp = and_cross_terms(net, a, b);
    for (int p = 0; p < 3; ++p) net.send(p, (p + 2) % 3, a.n * static_cast<std::uint64_t>(a.width));
    net.flush();
    return out;
}

std::array<BoolTensor, 2> bool_and2(PartyNet& net, const BoolTensor& a1, const BoolTensor& b1, const BoolTensor& a2,
                                    const BoolTensor& b2) {
    check_compatible(a1, b1, "bool_and2");
    check_compatible(a2, b2, "bool_and2");
    BoolTensor o1 = BoolTensor::zeros(a1.n, a1.width);
    BoolTensor o2 = BoolTensor::zeros(a2.n, a2.width);
    if (a1.n + a2.n == 0) return {o1, o2};
    o1.comp = and_cross_terms(net, a1, b1);
    o2.comp = and_cross_terms(net, a2, b2);
    const std::uint64_t bits = a1.n * static_cast<std::uint64_t>(a1.width) + a2.n * static_cast<std::uint64_t>(a2.width);
    for (int p = 0; p < 3; ++p) net.send(p, (p + 2) % 3, bits);
    net.flush();
    return {o1, o2};
}

std::array<BoolTensor, 3> arith_summands_as_bits(const ShareTensor& x, int width) {
    const std::size_t n = x.numel();
    std::array<BoolTensor, 3> out = {BoolTensor::zeros(n, width), BoolTensor::zeros(n, width),
                                     BoolTensor::zeros(n, width)};
    const ring_t m = out[0].mask();
    for (int j = 0; j < 3; ++j)
        for (std::size_t i = 0; i < n; ++i) out[j].comp[j][i] = x.comp[j][i] & m;
    return out;
}

BoolTensor add3_bits(PartyNet& net, const BoolTensor& x, const BoolTensor& y, const BoolTensor& z) {
    check_compatible(x, y, "add3_bits");
    check_compatible(x, z, "add3_bits");
    const int w = x.width;
    BoolTensor s = bool_xor(bool_xor(x, y), z);
    if (w == 1 || x.n == 0) return s;  // carries cannot affect a single bit
    // Carry-save step: c = MAJ(x,y,z) = ((x^z)&(y^z))^z, shifted up one.
    BoolTensor c = bool_shl(bool_xor(bool_and(net, bool_xor(x, z), bool_xor(y, z)), z), 1);
    // Kogge-Stone addition of s + c.
    BoolTensor p = bool_xor(s, c);
    BoolTensor g = bool_and(net, s, c);
    BoolTensor pk = p;
    for (int k = 1; k < w; k <<= 1) {
        auto [gp, pp] = bool_and2(net, pk, bool_shl(g, k), pk, bool_shl(pk, k));
        g = bool_xor(g, gp);
        pk = pp;
    }
    return bool_xor(p, bool_shl(g, 1));
}

BoolTensor msb_bits(PartyNet& net, const ShareTensor& x, int width) {
    const auto s = arith_summands_as_bits(x, width);
    BoolTensor sum = add3_bits(net, s[0], s[1], s[2]);
    BoolTensor out = BoolTensor::zeros(sum.n, 1);
    for (int c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < sum.n; ++i) out.comp[c][i] = (sum.comp[c][i] >> (width - 1)) & 1;
    return out;
}

BoolTensor fold_and(PartyNet& net, const BoolTensor& a) {
    BoolTensor x = a;
    int bits = x.width;
    // Pad the word up to a power of two with public ones so folding is an AND.
    int p2 = 1;
    while (p2 < bits) p2 <<= 1;
    if (p2 != bits) {
        const ring_t pad = ((p2 >= 64 ? ~ring_t{0} : ((ring_t{1} << p2) - 1)) & ~x.mask());
        for (std::size_t i = 0; i < x.n; ++i) x.comp[0][i] |= pad;
        x.width = p2;
        bits = p2;
    }
    while (bits > 1) {
        const int half = bits / 2;
        BoolTensor lo = x, hi = x;
        const ring_t m = (half >= 64 ? ~ring_t{0} : ((ring_t{1} << half) - 1));
        for (int c = 0; c < 3; ++c)
            for (std::size_t i = 0; i < x.n; ++i) {
                lo.comp[c][i] &= m;
                hi.comp[c][i] = (hi.comp[c][i] >> half) & m;
            }
        lo.width = hi.width = half;
        x = bool_and(net, lo, hi);
        bits = half;
    }
    return x;
}

BoolTensor is_zero_bits(PartyNet& net, const ShareTensor& x, int width) {
    const auto s = arith_summands_as_bits(x, width);
    BoolTensor sum = add3_bits(net, s[0], s[1], s[2]);
    return fold_and(net, bool_not(sum));
}

ShareTensor bool_to_arith(PartyNet& net, const BoolTensor& bit) {
    if (bit.width != 1) throw std::invalid_argument("bool_to_arith: width-1 input required");
    const std::size_t n = bit.n;
    const std::uint32_t n32 = static_cast<std::uint32_t>(n);
    // Each boolean component is locally a 0/1 value; lift the XOR with
    // b0 (+) b1 = b0 + b1 - 2*b0*b1 twice.
    ShareTensor b0 = ShareTensor::zeros({n32}), b1 = ShareTensor::zeros({n32}), b2 = ShareTensor::zeros({n32});
    for (std::size_t i = 0; i < n; ++i) {
        b0.comp[0][i] = bit.comp[0][i] & 1;
        b1.comp[1][i] = bit.comp[1][i] & 1;
        b2.comp[2][i] = bit.comp[2][i] & 1;
    }
    if (n == 0) return b0;
    ShareTensor u = sec_sub(sec_add(b0, b1), mul_plain_int(sec_mul(net, b0, b1, FxMode::Raw), 2));
    return sec_sub(sec_add(u, b2), mul_plain_int(sec_mul(net, u, b2, FxMode::Raw), 2));
}

int ceil_log2(std::uint64_t n) {
    int w = 0;
    while ((std::uint64_t{1} << w) < n) ++w;
    return w;
}

std::uint64_t add3_round_cost(int width) { return width == 1 ? 0 : 2 + static_cast<std::uint64_t>(ceil_log2(width)); }

std::uint64_t compare_round_cost(int width) { return add3_round_cost(width) + 2; }

std::uint64_t equal_round_cost(int width) {
    return add3_round_cost(width) + static_cast<std::uint64_t>(ceil_log2(width)) + 2;
}

}  // namespace mpcache
