#include "mpcache/nonlinear.hpp"

#include <stdexcept>
#include <string>

namespace mpcache {

namespace {

// Ops that have a dedicated report phase adopt it only when the caller has
// not scoped a more specific one.
class DefaultPhase {
  public:
    DefaultPhase(PartyNet& net, const char* name) : net_(net), pushed_(net.current_phase() == "default") {
        if (pushed_) net_.push_phase(name);
    }
    ~DefaultPhase() {
        if (pushed_) net_.pop_phase();
    }
    DefaultPhase(const DefaultPhase&) = delete;
    DefaultPhase& operator=(const DefaultPhase&) = delete;

  private:
    PartyNet& net_;
    bool pushed_;
};

ShareTensor fresh_bit_sharing(PartyNet& net, const std::vector<std::uint32_t>& dims,
                              const std::vector<ring_t>& bits) {
    ShareTensor out;
    out.dims = dims;
    for (auto& c : out.comp) c.resize(bits.size());
    for (std::size_t i = 0; i < bits.size(); ++i) {
        const ring_t r0 = net.dealer_draw();
        const ring_t r1 = net.dealer_draw();
        out.comp[0][i] = r0;
        out.comp[1][i] = r1;
        out.comp[2][i] = bits[i] - r0 - r1;
    }
    return out;
}

ShareTensor broadcast_scalar(const ShareTensor& s, std::uint32_t n) {
    ShareTensor out;
    out.dims = {n};
    for (int c = 0; c < 3; ++c) out.comp[c].assign(n, s.comp[c][0]);
    return out;
}

}  // namespace

ShareTensor sec_less(PartyNet& net, const ShareTensor& a, const ShareTensor& b) {
    if (a.dims != b.dims) throw std::invalid_argument("sec_less: dimension mismatch");
    DefaultPhase scope(net, "compare");
    const std::size_t n = a.numel();
    PhaseCost& c = net.cost();
    c.comparison_invocations += n;
    c.comparison_levels += 1;  // one batched call is one sequential step
    c.bit_width_hist[kRingBits] += n;
    const ShareTensor d = sec_sub(a, b);
    if (net.backend() == Backend::Ideal) {
        std::vector<ring_t> bits(n);
        for (std::size_t i = 0; i < n; ++i)
            bits[i] = (d.comp[0][i] + d.comp[1][i] + d.comp[2][i]) >> (kRingBits - 1);
        net.charge_rounds(compare_round_cost(kRingBits));
        net.cost().mul_invocations += 2 * n;
        return fresh_bit_sharing(net, a.dims, bits);
    }
    BoolTensor sign = msb_bits(net, d, kRingBits);
    ShareTensor out = bool_to_arith(net, sign);
    out.dims = a.dims;
    return out;
}

ShareTensor sec_equal_consts(PartyNet& net, const ShareTensor& vals, const std::vector<std::uint64_t>& consts,
                             int width) {
    if (vals.numel() != consts.size()) throw std::invalid_argument("sec_equal_consts: size mismatch");
    if (width < 1 || width > 64) throw std::invalid_argument("sec_equal_consts: bad width");
    DefaultPhase scope(net, "equal");
    const std::size_t n = consts.size();
    PhaseCost& c = net.cost();
    c.equality_invocations += n;
    c.bit_width_hist[width] += n;
    std::vector<ring_t> neg(n);
    for (std::size_t i = 0; i < n; ++i) neg[i] = ring_neg(consts[i]);
    const ShareTensor d = add_plain(vals, neg);
    if (net.backend() == Backend::Ideal) {
        const ring_t m = width >= 64 ? ~ring_t{0} : ((ring_t{1} << width) - 1);
        std::vector<ring_t> bits(n);
        for (std::size_t i = 0; i < n; ++i)
            bits[i] = ((d.comp[0][i] + d.comp[1][i] + d.comp[2][i]) & m) == 0 ? 1 : 0;
        net.charge_rounds(equal_round_cost(width));
        net.cost().mul_invocations += 2 * n;
        return fresh_bit_sharing(net, vals.dims, bits);
    }
    BoolTensor z = is_zero_bits(net, d, width);
    ShareTensor out = bool_to_arith(net, z);
    out.dims = vals.dims;
    return out;
}

ShareTensor sec_equal_index(PartyNet& net, const SecretIndex& a, std::uint64_t b) {
    ShareTensor v = from_elements({1}, {a.comp});
    return sec_equal_consts(net, v, {b}, a.width);
}

ShareTensor sec_select(PartyNet& net, const ShareTensor& c, const ShareTensor& x, const ShareTensor& y) {
    if (x.dims != y.dims) throw std::invalid_argument("sec_select: dimension mismatch");
    return sec_add(y, sec_mul(net, sec_sub(x, y), c, FxMode::Raw));
}

ShareTensor onehot_row(PartyNet& net, const SecretIndex& id, std::size_t n) {
    ShareTensor bcast;
    bcast.dims = {static_cast<std::uint32_t>(n)};
    for (int c = 0; c < 3; ++c) bcast.comp[c].assign(n, id.comp[c]);
    std::vector<std::uint64_t> consts(n);
    for (std::size_t i = 0; i < n; ++i) consts[i] = i;
    return sec_equal_consts(net, bcast, consts, id.width);
}

namespace {

struct TournamentLane {
    std::vector<std::array<ring_t, 3>> values;
    std::vector<std::array<ring_t, 3>> indices;  // empty when index tracking is off
};

// One tournament over the lane vectors; mutates them down to a single entry.
std::uint64_t run_tournament(PartyNet& net, TournamentLane& lane) {
    const bool track = !lane.indices.empty();
    std::uint64_t levels = 0;
    while (lane.values.size() > 1) {
        ++levels;
        const std::size_t pairs = lane.values.size() / 2;
        ShareTensor left, right, ileft, iright;
        left.dims = right.dims = {static_cast<std::uint32_t>(pairs)};
        for (int c = 0; c < 3; ++c) {
            left.comp[c].resize(pairs);
            right.comp[c].resize(pairs);
        }
        if (track) {
            ileft.dims = iright.dims = left.dims;
            for (int c = 0; c < 3; ++c) {
                ileft.comp[c].resize(pairs);
                iright.comp[c].resize(pairs);
            }
        }
        for (std::size_t p = 0; p < pairs; ++p) {
            for (int c = 0; c < 3; ++c) {
                left.comp[c][p] = lane.values[2 * p][c];
                right.comp[c][p] = lane.values[2 * p + 1][c];
                if (track) {
                    ileft.comp[c][p] = lane.indices[2 * p][c];
                    iright.comp[c][p] = lane.indices[2 * p + 1][c];
                }
            }
        }
        // c = [left < right]; winners are right where c, left otherwise, so
        // equal values keep the earlier (lower-index) entry.
        const ShareTensor c = sec_less(net, left, right);
        const ShareTensor wv = sec_select(net, c, right, left);
        ShareTensor wi;
        if (track) wi = sec_select(net, c, iright, ileft);
        TournamentLane next;
        next.values.reserve(pairs + 1);
        if (track) next.indices.reserve(pairs + 1);
        for (std::size_t p = 0; p < pairs; ++p) {
            next.values.push_back({wv.comp[0][p], wv.comp[1][p], wv.comp[2][p]});
            if (track) next.indices.push_back({wi.comp[0][p], wi.comp[1][p], wi.comp[2][p]});
        }
        if (lane.values.size() % 2 == 1) {
            next.values.push_back(lane.values.back());
            if (track) next.indices.push_back(lane.indices.back());
        }
        lane = std::move(next);
    }
    return levels;
}

}  // namespace

MaxResult sec_max(PartyNet& net, const ShareTensor& v) {
    const std::size_t n = v.numel();
    if (n == 0) throw std::invalid_argument("sec_max: empty input");
    TournamentLane lane;
    lane.values.resize(n);
    lane.indices.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        lane.values[i] = element_at(v, i);
        lane.indices[i] = {static_cast<ring_t>(i), 0, 0};
    }
    MaxResult r;
    r.levels = run_tournament(net, lane);
    r.value = from_elements({1}, {lane.values[0]});
    r.index.comp = lane.indices[0];
    r.index.width = index_width(n);
    return r;
}

ShareTensor sec_max_value(PartyNet& net, const ShareTensor& v) {
    const std::size_t n = v.numel();
    if (n == 0) throw std::invalid_argument("sec_max_value: empty input");
    TournamentLane lane;
    lane.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) lane.values[i] = element_at(v, i);
    (void)run_tournament(net, lane);
    return from_elements({1}, {lane.values[0]});
}

TopkResult sec_topk(PartyNet& net, const ShareTensor& v, std::uint32_t k) {
    const std::size_t n = v.numel();
    if (k > n) throw std::invalid_argument("sec_topk: k exceeds input length");
    PhaseScope scope(net, "topk");
    TopkResult out;
    out.onehot = ShareTensor::zeros({k, static_cast<std::uint32_t>(n)});
    if (k == 0) return out;
    ShareTensor cur = v;
    const std::vector<ring_t> neg_inf(n, fx::kNegInf);
    for (std::uint32_t it = 0; it < k; ++it) {
        MaxResult m = sec_max(net, cur);
        ShareTensor row = onehot_row(net, m.index, n);
        out.indices.push_back(m.index);
        for (int c = 0; c < 3; ++c)
            std::copy(row.comp[c].begin(), row.comp[c].end(),
                      out.onehot.comp[c].begin() + static_cast<std::ptrdiff_t>(it) * n);
        if (it + 1 < k) {
            // Mask the winner to the sentinel so the next pass finds the runner-up.
            ShareTensor gap = sec_sub(share_constant(cur.dims, neg_inf), cur);
            cur = sec_add(cur, sec_mul(net, gap, row, FxMode::Raw));
        }
    }
    return out;
}

ShareTensor sec_exp(PartyNet& net, const ShareTensor& x, int frac_bits) {
    DefaultPhase scope(net, "exp");
    constexpr int kInnerFrac = 30;
    constexpr int kT = 14;
    if (frac_bits > kInnerFrac) throw std::invalid_argument("sec_exp: frac_bits too large");
    // Rescale to 30 fraction bits (exact), form u = 1 + x/2^t, square t times.
    ShareTensor u = mul_plain_int(x, std::int64_t{1} << (kInnerFrac - frac_bits));
    truncate_shares(net, u, kT);
    u = add_plain_scalar(u, fx::encode(1.0, kInnerFrac));
    for (int i = 0; i < kT; ++i) u = sec_mul(net, u, u, FxMode::Truncate, kInnerFrac);
    truncate_shares(net, u, kInnerFrac - frac_bits);
    u.dims = x.dims;
    return u;
}

ShareTensor sec_recip(PartyNet& net, const ShareTensor& x, int frac_bits) {
    DefaultPhase scope(net, "recip");
    constexpr int kInnerFrac = 24;
    constexpr int kNewtonIters = 13;
    if (frac_bits > kInnerFrac) throw std::invalid_argument("sec_recip: frac_bits too large");
    const std::size_t n = x.numel();
    if (n == 0) return x;
    // z = x * 2^8 at 24 fraction bits; domain [2^-8, 2^12] maps to [1, 2^20].
    ShareTensor z = mul_plain_int(x, std::int64_t{1} << (kInnerFrac - frac_bits + 8));
    // Oblivious binary normalization to [1, 2), recording the shift choices.
    static constexpr int kLadder[5] = {16, 8, 4, 2, 1};
    std::vector<ShareTensor> taken;
    taken.reserve(5);
    for (int j : kLadder) {
        const std::vector<ring_t> thr(n, fx::encode(static_cast<double>(std::uint64_t{1} << j), kInnerFrac));
        // c = [z >= 2^j] = 1 - [z < 2^j]
        ShareTensor below = sec_less(net, z, share_constant(z.dims, thr));
        ShareTensor c = sec_sub(share_constant(z.dims, std::vector<ring_t>(n, 1)), below);
        ShareTensor zs = z;
        truncate_shares(net, zs, j);
        z = sec_select(net, c, zs, z);
        taken.push_back(std::move(c));
    }
    // One more exact halving puts z in [0.5, 1), where the classic linear
    // estimate y0 = 48/17 - (32/17) z starts Newton within |1 - z*y| <= 1/17.
    truncate_shares(net, z, 1);
    ShareTensor y = mul_plain_fx(net, z, fx::encode(-32.0 / 17.0, kInnerFrac), kInnerFrac);
    y = add_plain_scalar(y, fx::encode(48.0 / 17.0, kInnerFrac));
    const ring_t two = fx::encode(2.0, kInnerFrac);
    for (int i = 0; i < kNewtonIters; ++i) {
        ShareTensor e = sec_mul(net, z, y, FxMode::Truncate, kInnerFrac);
        e = sec_add(sec_neg(e), share_constant(e.dims, std::vector<ring_t>(n, two)));
        y = sec_mul(net, y, e, FxMode::Truncate, kInnerFrac);
    }
    // Undo the normalization: 1/x = y * 2^8 / 2 / prod(2^j taken).
    y = mul_plain_int(y, 256);
    truncate_shares(net, y, 1);
    for (std::size_t s = 0; s < taken.size(); ++s) {
        ShareTensor ys = y;
        truncate_shares(net, ys, kLadder[s]);
        y = sec_select(net, taken[s], ys, y);
    }
    truncate_shares(net, y, kInnerFrac - frac_bits);
    y.dims = x.dims;
    return y;
}

ShareTensor sec_softmax(PartyNet& net, const ShareTensor& x, int frac_bits) {
    const std::size_t n = x.numel();
    if (n == 0) throw std::invalid_argument("sec_softmax: empty input");
    PhaseScope scope(net, "softmax");
    const ShareTensor m = sec_max_value(net, x);
    ShareTensor d = sec_sub(x, broadcast_scalar(m, static_cast<std::uint32_t>(n)));
    // clamp to the exp domain floor so buried entries (score sentinels far
    // below any real value) flow through as weight ~e^-16 instead of
    // overflowing the squaring chain; in-range values pass bit-identically
    ShareTensor fl = share_constant(d.dims, std::vector<ring_t>(n, fx::encode(-16.0, frac_bits)));
    ShareTensor below = sec_less(net, d, fl);
    d = sec_select(net, below, fl, d);
    const ShareTensor e = sec_exp(net, d, frac_bits);
    ShareTensor s = ShareTensor::zeros({1});
    for (int c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < n; ++i) s.comp[c][0] += e.comp[c][i];
    const ShareTensor r = sec_recip(net, s, frac_bits);
    ShareTensor p = sec_mul(net, e, r, FxMode::Truncate, frac_bits);
    p.dims = x.dims;
    return p;
}

}  // namespace mpcache
