#include "mpcache/rss.hpp"

#include <stdexcept>

namespace mpcache {

namespace {

std::size_t product(const std::vector<std::uint32_t>& dims) {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
}

void check_same_shape(const ShareTensor& a, const ShareTensor& b, const char* op) {
    if (a.dims != b.dims) throw std::invalid_argument(std::string(op) + ": dimension mismatch");
}

}  // namespace

ShareTensor ShareTensor::zeros(std::vector<std::uint32_t> dims) {
    ShareTensor t;
    t.dims = std::move(dims);
    const std::size_t n = product(t.dims);
    for (auto& c : t.comp) c.assign(n, 0);
    return t;
}

std::size_t ShareTensor::numel() const { return product(dims); }

ShareTensor share_raws(PartyNet& net, std::vector<std::uint32_t> dims, const std::vector<ring_t>& raws) {
    if (product(dims) != raws.size()) throw std::invalid_argument("share_raws: extent/payload mismatch");
    ShareTensor t;
    t.dims = std::move(dims);
    const std::size_t n = raws.size();
    for (auto& c : t.comp) c.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const ring_t x0 = net.dealer_draw();
        const ring_t x1 = net.dealer_draw();
        t.comp[0][i] = x0;
        t.comp[1][i] = x1;
        t.comp[2][i] = raws[i] - x0 - x1;
    }
    if (n > 0) {
        // The dealer hands each party its replicated pair.
        for (int p = 0; p < 3; ++p) net.send((p + 1) % 3, p, 2 * 64 * n);
        net.flush();
    }
    return t;
}

ShareTensor share(PartyNet& net, const PlainTensor& t, int frac_bits) {
    const PlainTensor raw = t.encoded(frac_bits);
    std::vector<std::uint32_t> dims = raw.dims;
    return share_raws(net, std::move(dims), raw.raws);
}

ShareTensor share_constant(std::vector<std::uint32_t> dims, const std::vector<ring_t>& raws) {
    if (product(dims) != raws.size()) throw std::invalid_argument("share_constant: extent/payload mismatch");
    ShareTensor t;
    t.dims = std::move(dims);
    t.comp[0] = raws;
    t.comp[1].assign(raws.size(), 0);
    t.comp[2].assign(raws.size(), 0);
    return t;
}

std::vector<ring_t> reconstruct_raws(PartyNet& net, const ShareTensor& x) {
    const std::size_t n = x.numel();
    std::vector<ring_t> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = x.comp[0][i] + x.comp[1][i] + x.comp[2][i];
    if (n > 0) {
        // Party i forwards comp[i] to party i+1, completing every pair.
        for (int p = 0; p < 3; ++p) net.send(p, (p + 1) % 3, 64 * n);
        net.flush();
    }
    return out;
}

PlainTensor reconstruct(PartyNet& net, const ShareTensor& x, int frac_bits) {
    PlainTensor t = PlainTensor::from_raws(x.dims, reconstruct_raws(net, x));
    return t.decoded(frac_bits);
}

SecretIndex share_index(PartyNet& net, std::uint64_t value, int width) {
    SecretIndex id;
    id.width = width;
    const ring_t x0 = net.dealer_draw();
    const ring_t x1 = net.dealer_draw();
    id.comp = {x0, x1, value - x0 - x1};
    for (int p = 0; p < 3; ++p) net.send((p + 1) % 3, p, 2 * 64);
    net.flush();
    return id;
}

std::uint64_t reconstruct_index(PartyNet& net, const SecretIndex& id) {
    for (int p = 0; p < 3; ++p) net.send(p, (p + 1) % 3, 64);
    net.flush();
    return id.comp[0] + id.comp[1] + id.comp[2];
}

ShareTensor sec_add(const ShareTensor& a, const ShareTensor& b) {
    check_same_shape(a, b, "sec_add");
    ShareTensor out = a;
    for (int c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < out.comp[c].size(); ++i) out.comp[c][i] += b.comp[c][i];
    return out;
}

ShareTensor sec_sub(const ShareTensor& a, const ShareTensor& b) {
    check_same_shape(a, b, "sec_sub");
    ShareTensor out = a;
    for (int c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < out.comp[c].size(); ++i) out.comp[c][i] -= b.comp[c][i];
    return out;
}

ShareTensor sec_neg(const ShareTensor& a) {
    ShareTensor out = a;
    for (int c = 0; c < 3; ++c)
        for (auto& v : out.comp[c]) v = ring_neg(v);
    return out;
}

ShareTensor add_plain(const ShareTensor& a, const std::vector<ring_t>& p) {
    if (p.size() != a.numel()) throw std::invalid_argument("add_plain: size mismatch");
    ShareTensor out = a;
    for (std::size_t i = 0; i < p.size(); ++i) out.comp[0][i] += p[i];
    return out;
}

ShareTensor add_plain_scalar(const ShareTensor& a, ring_t p) {
    ShareTensor out = a;
    for (auto& v : out.comp[0]) v += p;
    return out;
}

ShareTensor mul_plain_int(const ShareTensor& a, std::int64_t c) {
    ShareTensor out = a;
    const ring_t cr = from_signed(c);
    for (int k = 0; k < 3; ++k)
        for (auto& v : out.comp[k]) v *= cr;
    return out;
}

ShareTensor mul_plain_fx(PartyNet& net, const ShareTensor& a, ring_t c_raw, int frac_bits) {
    ShareTensor out = a;
    for (int k = 0; k < 3; ++k)
        for (auto& v : out.comp[k]) v *= c_raw;
    truncate_shares(net, out, frac_bits);
    return out;
}

void truncate_shares(PartyNet& net, ShareTensor& x, int frac_bits) {
    // Ideal local truncation: reconstruct internally, shift, re-randomize
    // from the dealer stream.  Error <= 1 ulp, no rounds, no bytes.
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) {
        const ring_t v = x.comp[0][i] + x.comp[1][i] + x.comp[2][i];
        const ring_t t = fx::truncate(v, frac_bits) + from_signed(net.trunc_fault);
        const ring_t r0 = net.dealer_draw();
        const ring_t r1 = net.dealer_draw();
        x.comp[0][i] = r0;
        x.comp[1][i] = r1;
        x.comp[2][i] = t - r0 - r1;
    }
}

namespace {

// Shared core of sec_mul/sec_matmul: given each party's local additive result
// z_i for a batch, zero-mask, exchange along the ring, rebuild the replicated
// components, optionally truncate.
ShareTensor reshare_batch(PartyNet& net, std::vector<std::uint32_t> dims, std::array<std::vector<ring_t>, 3> z,
                          FxMode mode, int frac_bits) {
    const std::size_t n = z[0].size();
    for (std::size_t i = 0; i < n; ++i) {
        const auto alpha = net.zero_triple();
        for (int p = 0; p < 3; ++p) z[p][i] += alpha[p];
    }
    // Party i sends masked z_i to party i-1; afterwards party i holds
    // (z_i, z_{i+1}), which is exactly the replicated layout of components.
    for (int p = 0; p < 3; ++p) net.send(p, (p + 2) % 3, 64 * n);
    net.flush();
    ShareTensor out;
    out.dims = std::move(dims);
    out.comp = std::move(z);
    if (mode == FxMode::Truncate) truncate_shares(net, out, frac_bits);
    return out;
}

}  // namespace

ShareTensor sec_mul(PartyNet& net, const ShareTensor& a, const ShareTensor& b, FxMode mode, int frac_bits) {
    const bool broadcast_b = b.numel() == 1 && a.numel() != 1;
    if (!broadcast_b) check_same_shape(a, b, "sec_mul");
    const std::size_t n = a.numel();
    if (n == 0) return ShareTensor::zeros(a.dims);
    std::array<std::vector<ring_t>, 3> z;
    for (auto& c : z) c.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = broadcast_b ? 0 : i;
        for (int p = 0; p < 3; ++p) {
            const int q = (p + 1) % 3;
            z[p][i] = a.comp[p][i] * b.comp[p][j] + a.comp[q][i] * b.comp[p][j] + a.comp[p][i] * b.comp[q][j];
        }
    }
    net.cost().mul_invocations += n;
    return reshare_batch(net, a.dims, std::move(z), mode, frac_bits);
}

ShareTensor sec_matmul(PartyNet& net, const ShareTensor& a, const ShareTensor& b, bool transpose_b, FxMode mode,
                       int frac_bits) {
    if (a.dims.size() != 2 || b.dims.size() != 2) throw std::invalid_argument("sec_matmul: rank-2 operands required");
    const std::uint32_t m = a.dims[0], k = a.dims[1];
    const std::uint32_t bk = transpose_b ? b.dims[1] : b.dims[0];
    const std::uint32_t bn = transpose_b ? b.dims[0] : b.dims[1];
    if (bk != k) throw std::invalid_argument("sec_matmul: inner dimension mismatch");
    const std::size_t n_out = static_cast<std::size_t>(m) * bn;
    std::array<std::vector<ring_t>, 3> z;
    for (auto& c : z) c.assign(n_out, 0);
    for (std::uint32_t i = 0; i < m; ++i) {
        for (std::uint32_t j = 0; j < bn; ++j) {
            ring_t acc0 = 0, acc1 = 0, acc2 = 0;
            for (std::uint32_t t = 0; t < k; ++t) {
                const std::size_t ai = static_cast<std::size_t>(i) * k + t;
                const std::size_t bi = transpose_b ? static_cast<std::size_t>(j) * k + t
                                                   : static_cast<std::size_t>(t) * bn + j;
                const ring_t a0 = a.comp[0][ai], a1 = a.comp[1][ai], a2 = a.comp[2][ai];
                const ring_t b0 = b.comp[0][bi], b1 = b.comp[1][bi], b2 = b.comp[2][bi];
                acc0 += a0 * b0 + a1 * b0 + a0 * b1;
                acc1 += a1 * b1 + a2 * b1 + a1 * b2;
                acc2 += a2 * b2 + a0 * b2 + a2 * b0;
            }
            const std::size_t oi = static_cast<std::size_t>(i) * bn + j;
            z[0][oi] = acc0;
            z[1][oi] = acc1;
            z[2][oi] = acc2;
        }
    }
    net.cost().mul_invocations += static_cast<std::uint64_t>(m) * k * bn;
    if (n_out == 0) {
        ShareTensor out;
        out.dims = {m, bn};
        for (auto& c : out.comp) c.clear();
        return out;
    }
    return reshare_batch(net, {m, bn}, std::move(z), mode, frac_bits);
}

ShareTensor slice_rows(const ShareTensor& a, std::uint32_t row_begin, std::uint32_t row_end) {
    if (a.dims.size() != 2) throw std::invalid_argument("slice_rows: rank-2 required");
    if (row_begin > row_end || row_end > a.dims[0]) throw std::invalid_argument("slice_rows: bad range");
    const std::uint32_t c = a.dims[1];
    ShareTensor out;
    out.dims = {row_end - row_begin, c};
    for (int k = 0; k < 3; ++k)
        out.comp[k].assign(a.comp[k].begin() + static_cast<std::ptrdiff_t>(row_begin) * c,
                           a.comp[k].begin() + static_cast<std::ptrdiff_t>(row_end) * c);
    return out;
}

ShareTensor concat_rows(const ShareTensor& a, const ShareTensor& b) {
    if (a.dims.size() != 2 || b.dims.size() != 2 || a.dims[1] != b.dims[1])
        throw std::invalid_argument("concat_rows: column mismatch");
    ShareTensor out;
    out.dims = {a.dims[0] + b.dims[0], a.dims[1]};
    for (int k = 0; k < 3; ++k) {
        out.comp[k] = a.comp[k];
        out.comp[k].insert(out.comp[k].end(), b.comp[k].begin(), b.comp[k].end());
    }
    return out;
}

ShareTensor get_row(const ShareTensor& a, std::uint32_t r) { return slice_rows(a, r, r + 1); }

void set_row(ShareTensor& a, std::uint32_t r, const ShareTensor& row) {
    if (a.dims.size() != 2 || row.numel() != a.dims[1]) throw std::invalid_argument("set_row: shape mismatch");
    const std::uint32_t c = a.dims[1];
    for (int k = 0; k < 3; ++k)
        std::copy(row.comp[k].begin(), row.comp[k].end(), a.comp[k].begin() + static_cast<std::ptrdiff_t>(r) * c);
}

std::array<ring_t, 3> element_at(const ShareTensor& a, std::size_t i) {
    return {a.comp[0][i], a.comp[1][i], a.comp[2][i]};
}

ShareTensor from_elements(std::vector<std::uint32_t> dims, const std::vector<std::array<ring_t, 3>>& elems) {
    ShareTensor out;
    out.dims = std::move(dims);
    for (auto& c : out.comp) c.resize(elems.size());
    for (std::size_t i = 0; i < elems.size(); ++i)
        for (int k = 0; k < 3; ++k) out.comp[k][i] = elems[i][k];
    return out;
}

}  // namespace mpcache
