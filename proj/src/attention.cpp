#include "mpcache/attention.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>
#include <stdexcept>

#include "mpcache/gather.hpp"
#include "mpcache/nonlinear.hpp"

namespace mpcache {

namespace {

std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

void fill_normal(std::vector<double>& out, std::size_t n, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> g(0.0, stddev);
    out.resize(n);
    for (auto& x : out) x = g(rng);
}

// out[j] = sum_i x[i] * w[i*dout + j], w row-major [din, dout]
void matvec(const double* x, const std::vector<double>& w, std::uint32_t din, std::uint32_t dout, double* out) {
    std::fill(out, out + dout, 0.0);
    for (std::uint32_t i = 0; i < din; ++i) {
        const double xi = x[i];
        const double* wr = w.data() + std::size_t{i} * dout;
        for (std::uint32_t j = 0; j < dout; ++j) out[j] += xi * wr[j];
    }
}

// max-subtract with the same -16 floor the secure softmax applies
std::vector<double> softmax_clamped(const std::vector<double>& s) {
    double m = s[0];
    for (double v : s) m = std::max(m, v);
    std::vector<double> p(s.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        double d = s[i] - m;
        if (d < -16.0) d = -16.0;
        p[i] = std::exp(d);
        sum += p[i];
    }
    for (auto& x : p) x /= sum;
    return p;
}

// shared-tensor column slice [rows, cols] -> [rows, width]
ShareTensor slice_cols(const ShareTensor& a, std::uint32_t col_begin, std::uint32_t width) {
    const std::uint32_t rows = a.dims[0], cols = a.dims[1];
    ShareTensor out = ShareTensor::zeros({rows, width});
    for (int c = 0; c < 3; ++c) {
        for (std::uint32_t r = 0; r < rows; ++r) {
            std::memcpy(out.comp[c].data() + std::size_t{r} * width,
                        a.comp[c].data() + std::size_t{r} * cols + col_begin, width * sizeof(ring_t));
        }
    }
    return out;
}

void set_cols(ShareTensor& a, std::uint32_t col_begin, const ShareTensor& block) {
    const std::uint32_t rows = a.dims[0], cols = a.dims[1], width = block.dims[1];
    for (int c = 0; c < 3; ++c) {
        for (std::uint32_t r = 0; r < rows; ++r) {
            std::memcpy(a.comp[c].data() + std::size_t{r} * cols + col_begin,
                        block.comp[c].data() + std::size_t{r} * width, width * sizeof(ring_t));
        }
    }
}

ShareTensor concat_flat(const ShareTensor& a, const ShareTensor& b) {
    const std::size_t na = a.numel(), nb = b.numel();
    ShareTensor out = ShareTensor::zeros({static_cast<std::uint32_t>(na + nb)});
    for (int c = 0; c < 3; ++c) {
        std::copy(a.comp[c].begin(), a.comp[c].end(), out.comp[c].begin());
        std::copy(b.comp[c].begin(), b.comp[c].end(), out.comp[c].begin() + na);
    }
    return out;
}

// [rows, cols] -> [rows, cols+1] with an all-zero trailing bias column
ShareTensor append_zero_bias(const ShareTensor& a) {
    const std::uint32_t rows = a.dims[0], cols = a.dims[1];
    ShareTensor out = ShareTensor::zeros({rows, cols + 1});
    for (int c = 0; c < 3; ++c) {
        for (std::uint32_t r = 0; r < rows; ++r) {
            std::memcpy(out.comp[c].data() + std::size_t{r} * (cols + 1),
                        a.comp[c].data() + std::size_t{r} * cols, cols * sizeof(ring_t));
        }
    }
    return out;
}

// causal per-row softmax over a [T, T] score matrix; row i uses entries
// j <= i and everything above the diagonal stays an exact zero sharing
ShareTensor causal_softmax(PartyNet& net, const ShareTensor& s, int frac_bits = fx::kFracBits) {
    const std::uint32_t t = s.dims[0];
    PhaseScope scope(net, "softmax");
    // per-row prefix max via one segmented tournament over the flat view
    ShareTensor flat = s;
    flat.dims = {t * t, 1};
    std::vector<std::uint32_t> begin(t), rows(t);
    for (std::uint32_t i = 0; i < t; ++i) {
        begin[i] = i * t;
        rows[i] = i + 1;
    }
    const ShareTensor m = segmented_extreme(net, flat, begin, rows, true);
    // pack the causal lanes (i, j <= i)
    const std::uint32_t lanes = t * (t + 1) / 2;
    ShareTensor d = ShareTensor::zeros({lanes});
    std::uint32_t lane = 0;
    for (std::uint32_t i = 0; i < t; ++i) {
        for (std::uint32_t j = 0; j <= i; ++j, ++lane) {
            for (int c = 0; c < 3; ++c)
                d.comp[c][lane] = s.comp[c][std::size_t{i} * t + j] - m.comp[c][i];
        }
    }
    const ShareTensor fl = share_constant({lanes}, std::vector<ring_t>(lanes, fx::encode(-16.0, frac_bits)));
    const ShareTensor below = sec_less(net, d, fl);
    d = sec_select(net, below, fl, d);
    const ShareTensor e = sec_exp(net, d, frac_bits);
    ShareTensor sums = ShareTensor::zeros({t});
    lane = 0;
    for (std::uint32_t i = 0; i < t; ++i) {
        for (std::uint32_t j = 0; j <= i; ++j, ++lane) {
            for (int c = 0; c < 3; ++c) sums.comp[c][i] += e.comp[c][lane];
        }
    }
    const ShareTensor r = sec_recip(net, sums, frac_bits);
    ShareTensor rl = ShareTensor::zeros({lanes});
    lane = 0;
    for (std::uint32_t i = 0; i < t; ++i) {
        for (std::uint32_t j = 0; j <= i; ++j, ++lane) {
            for (int c = 0; c < 3; ++c) rl.comp[c][lane] = r.comp[c][i];
        }
    }
    const ShareTensor p = sec_mul(net, e, rl, FxMode::Truncate, frac_bits);
    ShareTensor out = ShareTensor::zeros({t, t});
    lane = 0;
    for (std::uint32_t i = 0; i < t; ++i) {
        for (std::uint32_t j = 0; j <= i; ++j, ++lane) {
            for (int c = 0; c < 3; ++c) out.comp[c][std::size_t{i} * t + j] = p.comp[c][lane];
        }
    }
    return out;
}

}  // namespace

ModelSpec ModelSpec::random(std::uint32_t layers, std::uint32_t heads, std::uint32_t dim, std::uint64_t seed) {
    ModelSpec m;
    m.layers = layers;
    m.heads = heads;
    m.dim = dim;
    m.wq.resize(layers);
    m.wk.resize(layers);
    m.wv.resize(layers);
    m.wo.resize(layers);
    const double head_std = 1.0 / std::sqrt(static_cast<double>(dim));
    const double mix_std = 1.0 / std::sqrt(static_cast<double>(m.width()));
    for (std::uint32_t l = 0; l < layers; ++l) {
        m.wq[l].resize(heads);
        m.wk[l].resize(heads);
        m.wv[l].resize(heads);
        for (std::uint32_t h = 0; h < heads; ++h) {
            std::mt19937_64 rng(mix64(seed ^ (0x51ull << 56) ^ (std::uint64_t{l} << 16) ^ h));
            fill_normal(m.wq[l][h], std::size_t{dim} * dim, head_std, rng);
            fill_normal(m.wk[l][h], std::size_t{dim} * dim, head_std, rng);
            fill_normal(m.wv[l][h], std::size_t{dim} * dim, head_std, rng);
        }
        std::mt19937_64 rng(mix64(seed ^ (0x0Full << 56) ^ l));
        fill_normal(m.wo[l], std::size_t{m.width()} * m.width(), mix_std, rng);
    }
    return m;
}

ModelSpec ModelSpec::from_tensors(const PlainTensor& wq, const PlainTensor& wk, const PlainTensor& wv,
                                  const PlainTensor& wo) {
    for (const auto* t : {&wq, &wk, &wv}) {
        if (t->dims.size() != 4) throw std::invalid_argument("ModelSpec: head projections need rank 4 [L, H, d, d]");
        if (t->dims != wq.dims) throw std::invalid_argument("ModelSpec: projection tensor shapes differ");
        if (t->dims[2] != t->dims[3]) throw std::invalid_argument("ModelSpec: head projections must be square");
    }
    if (wo.dims.size() != 3) throw std::invalid_argument("ModelSpec: output mix needs rank 3 [L, H*d, H*d]");
    ModelSpec m;
    m.layers = wq.dims[0];
    m.heads = wq.dims[1];
    m.dim = wq.dims[2];
    if (wo.dims[0] != m.layers || wo.dims[1] != m.width() || wo.dims[2] != m.width())
        throw std::invalid_argument("ModelSpec: output mix shape does not match the head projections");
    const std::size_t hd = std::size_t{m.dim} * m.dim;
    m.wq.resize(m.layers);
    m.wk.resize(m.layers);
    m.wv.resize(m.layers);
    m.wo.resize(m.layers);
    for (std::uint32_t l = 0; l < m.layers; ++l) {
        m.wq[l].resize(m.heads);
        m.wk[l].resize(m.heads);
        m.wv[l].resize(m.heads);
        for (std::uint32_t h = 0; h < m.heads; ++h) {
            const std::size_t off = (std::size_t{l} * m.heads + h) * hd;
            m.wq[l][h].assign(wq.reals.begin() + off, wq.reals.begin() + off + hd);
            m.wk[l][h].assign(wk.reals.begin() + off, wk.reals.begin() + off + hd);
            m.wv[l][h].assign(wv.reals.begin() + off, wv.reals.begin() + off + hd);
        }
        const std::size_t wsz = std::size_t{m.width()} * m.width();
        m.wo[l].assign(wo.reals.begin() + std::size_t{l} * wsz, wo.reals.begin() + (std::size_t{l} + 1) * wsz);
    }
    return m;
}

namespace {

PlainTensor pack_heads(const std::vector<std::vector<std::vector<double>>>& w, std::uint32_t layers,
                       std::uint32_t heads, std::uint32_t dim) {
    PlainTensor t = PlainTensor::zeros({layers, heads, dim, dim});
    const std::size_t hd = std::size_t{dim} * dim;
    for (std::uint32_t l = 0; l < layers; ++l)
        for (std::uint32_t h = 0; h < heads; ++h)
            std::copy(w[l][h].begin(), w[l][h].end(), t.reals.begin() + (std::size_t{l} * heads + h) * hd);
    return t;
}

}  // namespace

PlainTensor ModelSpec::wq_tensor() const { return pack_heads(wq, layers, heads, dim); }
PlainTensor ModelSpec::wk_tensor() const { return pack_heads(wk, layers, heads, dim); }
PlainTensor ModelSpec::wv_tensor() const { return pack_heads(wv, layers, heads, dim); }

PlainTensor ModelSpec::wo_tensor() const {
    PlainTensor t = PlainTensor::zeros({layers, width(), width()});
    const std::size_t wsz = std::size_t{width()} * width();
    for (std::uint32_t l = 0; l < layers; ++l) std::copy(wo[l].begin(), wo[l].end(), t.reals.begin() + l * wsz);
    return t;
}

DecodeTrace DecodeTrace::random(std::uint32_t prompt_rows, std::uint32_t steps, std::uint32_t width,
                                std::uint64_t seed) {
    DecodeTrace tr;
    tr.prompt_rows = prompt_rows;
    tr.steps = steps;
    tr.width = width;
    std::mt19937_64 rng(mix64(seed ^ 0x7472616365ull));
    fill_normal(tr.prompt, std::size_t{prompt_rows} * width, 1.0, rng);
    fill_normal(tr.step_inputs, std::size_t{steps} * width, 1.0, rng);
    return tr;
}

// ---------- plaintext engine ----------

PlainEngine::PlainEngine(const ModelSpec& model, EvictionConfig cfg) : model_(model), cfg_(std::move(cfg)) {
    cfg_.validate();
}

void PlainEngine::prefill(const DecodeTrace& trace) {
    if (trace.width != model_.width()) throw std::invalid_argument("prefill: trace width does not match the model");
    const std::uint32_t t = trace.prompt_rows, width = model_.width(), d = model_.dim;
    const std::uint32_t w = observation_rows(t, cfg_.observation_frac);
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    heads_.assign(model_.layers, std::vector<PlainHeadState>(model_.heads));
    step_selection_.clear();
    std::vector<double> x = trace.prompt;
    std::vector<double> y(std::size_t{t} * width);
    for (std::uint32_t l = 0; l < model_.layers; ++l) {
        std::fill(y.begin(), y.end(), 0.0);
        for (std::uint32_t h = 0; h < model_.heads; ++h) {
            PlainHeadState& hs = heads_[l][h];
            std::vector<double> q(std::size_t{t} * d), k(std::size_t{t} * d), v(std::size_t{t} * d);
            for (std::uint32_t r = 0; r < t; ++r) {
                const double* xr = x.data() + std::size_t{r} * width + std::size_t{h} * d;
                matvec(xr, model_.wq[l][h], d, d, q.data() + std::size_t{r} * d);
                matvec(xr, model_.wk[l][h], d, d, k.data() + std::size_t{r} * d);
                matvec(xr, model_.wv[l][h], d, d, v.data() + std::size_t{r} * d);
            }
            std::vector<double> acc(t, 0.0);
            for (std::uint32_t r = 0; r < t; ++r) {
                std::vector<double> s(r + 1);
                for (std::uint32_t j = 0; j <= r; ++j) {
                    double dot = 0.0;
                    for (std::uint32_t c = 0; c < d; ++c) dot += q[std::size_t{r} * d + c] * k[std::size_t{j} * d + c];
                    s[j] = dot * inv_sqrt_d;
                }
                const std::vector<double> p = softmax_clamped(s);
                double* yr = y.data() + std::size_t{r} * width + std::size_t{h} * d;
                for (std::uint32_t j = 0; j <= r; ++j)
                    for (std::uint32_t c = 0; c < d; ++c) yr[c] += p[j] * v[std::size_t{j} * d + c];
                if (r >= t - w)
                    for (std::uint32_t j = 0; j <= r; ++j) acc[j] += p[j];
            }
            std::vector<std::uint32_t> always(w);
            for (std::uint32_t i = 0; i < w; ++i) always[i] = t - w + i;
            std::vector<std::uint32_t> retained = static_evict_plain(acc, cfg_.static_evict_ratio, always);
            const auto kept = static_cast<std::uint32_t>(retained.size());
            std::vector<double> kr(std::size_t{kept} * d), vr(std::size_t{kept} * d);
            for (std::uint32_t i = 0; i < kept; ++i) {
                std::copy_n(k.begin() + std::size_t{retained[i]} * d, d, kr.begin() + std::size_t{i} * d);
                std::copy_n(v.begin() + std::size_t{retained[i]} * d, d, vr.begin() + std::size_t{i} * d);
            }
            install_retained(hs, std::move(kr), std::move(vr), std::move(retained));
        }
        // output mix and residual
        for (std::uint32_t r = 0; r < t; ++r) {
            std::vector<double> mixed(width);
            matvec(y.data() + std::size_t{r} * width, model_.wo[l], width, width, mixed.data());
            for (std::uint32_t c = 0; c < width; ++c) x[std::size_t{r} * width + c] += mixed[c];
        }
    }
}

void PlainEngine::install_retained(PlainHeadState& hs, std::vector<double> k, std::vector<double> v,
                                   std::vector<std::uint32_t> retained) {
    const std::uint32_t d = model_.dim;
    hs.retained = std::move(retained);
    hs.prompt_rows = static_cast<std::uint32_t>(hs.retained.size());
    hs.rows = hs.prompt_rows;
    hs.closed_rows = hs.prompt_rows;
    hs.appended = 0;
    hs.k = std::move(k);
    hs.v = std::move(v);
    hs.layout = make_layout(hs.prompt_rows, cfg_.levels);
    if (!cfg_.levels.empty()) {
        const std::size_t levels = cfg_.levels.size();
        hs.level_sums.assign(levels, {});
        hs.level_sums[levels - 1] = build_summaries_plain(hs.k, hs.prompt_rows, d, hs.layout.sizes.back());
        for (std::size_t j = levels - 1; j-- > 0;)
            hs.level_sums[j] = fold_summaries_plain(hs.level_sums[j + 1], hs.layout.child_factor(j));
        hs.tables.resize(levels);
        for (std::size_t j = 0; j < levels; ++j)
            hs.tables[j] = level_table_plain(hs.level_sums[j], cfg_.alpha, hs.layout.slots[j], d);
    } else {
        hs.level_sums.clear();
        hs.tables.clear();
    }
    hs.appended_sums.clear();
    hs.appended_table = LevelTablePlain{};
}

namespace {

// synthetic retained K/V rows shared between the two engines so outputs stay
// comparable for the same seed
std::pair<std::vector<double>, std::vector<double>> synth_kv(std::uint64_t seed, std::uint32_t l,
                                                             std::uint32_t h, std::uint32_t rows,
                                                             std::uint32_t d) {
    std::mt19937_64 rng(mix64(seed ^ 0x6b76ull ^ (std::uint64_t{l} << 20) ^ (std::uint64_t{h} << 8)));
    std::pair<std::vector<double>, std::vector<double>> kv;
    fill_normal(kv.first, std::size_t{rows} * d, 1.0, rng);
    fill_normal(kv.second, std::size_t{rows} * d, 1.0, rng);
    return kv;
}

}  // namespace

void PlainEngine::prefill_synthetic(std::uint32_t prompt_rows, std::uint64_t seed) {
    heads_.assign(model_.layers, std::vector<PlainHeadState>(model_.heads));
    step_selection_.clear();
    std::vector<std::uint32_t> iota(prompt_rows);
    for (std::uint32_t i = 0; i < prompt_rows; ++i) iota[i] = i;
    for (std::uint32_t l = 0; l < model_.layers; ++l) {
        for (std::uint32_t h = 0; h < model_.heads; ++h) {
            auto kv = synth_kv(seed, l, h, prompt_rows, model_.dim);
            install_retained(heads_[l][h], std::move(kv.first), std::move(kv.second), iota);
        }
    }
}

std::vector<std::uint32_t> PlainEngine::attended_rows(const PlainHeadState& hs,
                                                      const std::vector<std::uint32_t>& fine_slots) const {
    const std::uint32_t s = hs.layout.fine_size();
    const std::uint32_t base = hs.layout.fine_slots();
    std::vector<std::uint32_t> slots = fine_slots;
    std::sort(slots.begin(), slots.end());
    std::vector<std::uint32_t> rows;
    for (std::uint32_t g : slots) {
        std::uint32_t b, e;
        if (g < base) {
            // prompt slot; pad slots past the last real row contribute nothing
            b = std::min(g * s, hs.prompt_rows);
            e = std::min((g + 1) * s, hs.prompt_rows);
        } else {
            b = hs.prompt_rows + (g - base) * s;
            e = b + s;
        }
        for (std::uint32_t r = b; r < e; ++r) rows.push_back(r);
    }
    for (std::uint32_t r = hs.closed_rows; r < hs.rows; ++r) rows.push_back(r);
    return rows;
}

std::vector<double> PlainEngine::step(const std::vector<double>& x, StepRecord* rec) {
    if (heads_.empty()) throw std::logic_error("step: prefill first");
    const std::uint32_t width = model_.width(), d = model_.dim;
    if (x.size() != width) throw std::invalid_argument("step: input width does not match the model");
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    if (rec) {
        rec->selected.assign(model_.layers, std::vector<std::vector<std::uint32_t>>(model_.heads));
        rec->reused.assign(model_.layers, std::vector<bool>(model_.heads, false));
    }
    step_selection_.assign(model_.layers, std::vector<std::vector<std::uint32_t>>(model_.heads));
    std::vector<double> cur = x;
    std::vector<double> y(width);
    for (std::uint32_t l = 0; l < model_.layers; ++l) {
        std::fill(y.begin(), y.end(), 0.0);
        for (std::uint32_t h = 0; h < model_.heads; ++h) {
            PlainHeadState& hs = heads_[l][h];
            const double* xh = cur.data() + std::size_t{h} * d;
            std::vector<double> q(d), kn(d), vn(d);
            matvec(xh, model_.wq[l][h], d, d, q.data());
            matvec(xh, model_.wk[l][h], d, d, kn.data());
            matvec(xh, model_.wv[l][h], d, d, vn.data());
            hs.k.insert(hs.k.end(), kn.begin(), kn.end());
            hs.v.insert(hs.v.end(), vn.begin(), vn.end());
            hs.rows += 1;
            std::vector<double> qs(d);
            for (std::uint32_t c = 0; c < d; ++c) qs[c] = q[c] * inv_sqrt_d;
            std::vector<std::uint32_t> attended;
            if (cfg_.levels.empty()) {
                attended.resize(hs.rows);
                for (std::uint32_t r = 0; r < hs.rows; ++r) attended[r] = r;
            } else {
                bool reused = false;
                std::vector<std::uint32_t> slots;
                if (!computes_own_selection(l, cfg_) && l > 0) {
                    const PlainHeadState& prev = heads_[l - 1][h];
                    // slot ids transfer only between identical slot spaces
                    if (prev.layout.slots == hs.layout.slots && prev.appended == hs.appended &&
                        prev.prompt_rows == hs.prompt_rows) {
                        slots = step_selection_[l - 1][h];
                        reused = true;
                    }
                }
                if (!reused)
                    slots = hierarchical_select_plain(qs, hs.tables, hs.appended_table, hs.layout,
                                                      cfg_.final_keep, cfg_.levels, hs.closed_rows);
                step_selection_[l][h] = slots;
                if (rec) {
                    rec->selected[l][h] = slots;
                    rec->reused[l][h] = reused;
                }
                attended = attended_rows(hs, slots);
            }
            std::vector<double> s(attended.size());
            for (std::size_t i = 0; i < attended.size(); ++i) {
                double dot = 0.0;
                const double* kr = hs.k.data() + std::size_t{attended[i]} * d;
                for (std::uint32_t c = 0; c < d; ++c) dot += qs[c] * kr[c];
                s[i] = dot;
            }
            const std::vector<double> p = softmax_clamped(s);
            double* yh = y.data() + std::size_t{h} * d;
            std::fill(yh, yh + d, 0.0);
            for (std::size_t i = 0; i < attended.size(); ++i) {
                const double* vr = hs.v.data() + std::size_t{attended[i]} * d;
                for (std::uint32_t c = 0; c < d; ++c) yh[c] += p[i] * vr[c];
            }
        }
        std::vector<double> mixed(width);
        matvec(y.data(), model_.wo[l], width, width, mixed.data());
        for (std::uint32_t c = 0; c < width; ++c) cur[c] += mixed[c];
    }
    // roll a filled open cluster into the closed pool between steps so every
    // layer sees a consistent slot space within one step
    if (!cfg_.levels.empty()) {
        for (auto& layer : heads_) {
            for (PlainHeadState& hs : layer) {
                const std::uint32_t s = hs.layout.fine_size();
                if (hs.rows - hs.closed_rows != s) continue;
                SummaryPlain sum;
                sum.begin = hs.closed_rows;
                sum.rows = s;
                sum.rmax.assign(d, 0.0);
                sum.rmin.assign(d, 0.0);
                for (std::uint32_t c = 0; c < d; ++c) {
                    double mx = hs.k[std::size_t{hs.closed_rows} * d + c], mn = mx;
                    for (std::uint32_t r = 1; r < s; ++r) {
                        const double vv = hs.k[std::size_t{hs.closed_rows + r} * d + c];
                        mx = std::max(mx, vv);
                        mn = std::min(mn, vv);
                    }
                    sum.rmax[c] = mx;
                    sum.rmin[c] = mn;
                }
                hs.appended_sums.push_back(sum);
                hs.appended_table.blend.push_back(blend_plain(sum, cfg_.alpha));
                hs.appended_table.pad.push_back(false);
                hs.appended += 1;
                hs.closed_rows += s;
            }
        }
    }
    return cur;
}

// ---------- secure engine ----------

SecureEngine::SecureEngine(PartyNet& net, const ModelSpec& model, EvictionConfig cfg)
    : net_(net), model_(model), cfg_(std::move(cfg)) {
    cfg_.validate();
    PhaseScope scope(net_, "setup");
    const std::uint32_t d = model_.dim, width = model_.width();
    wq_.resize(model_.layers);
    wk_.resize(model_.layers);
    wv_.resize(model_.layers);
    wo_.resize(model_.layers);
    for (std::uint32_t l = 0; l < model_.layers; ++l) {
        wq_[l].reserve(model_.heads);
        wk_[l].reserve(model_.heads);
        wv_[l].reserve(model_.heads);
        for (std::uint32_t h = 0; h < model_.heads; ++h) {
            wq_[l].push_back(share(net_, PlainTensor::from_reals({d, d}, model_.wq[l][h])));
            wk_[l].push_back(share(net_, PlainTensor::from_reals({d, d}, model_.wk[l][h])));
            wv_[l].push_back(share(net_, PlainTensor::from_reals({d, d}, model_.wv[l][h])));
        }
        wo_[l] = share(net_, PlainTensor::from_reals({width, width}, model_.wo[l]));
    }
}

void SecureEngine::prefill(const DecodeTrace& trace) {
    if (trace.width != model_.width()) throw std::invalid_argument("prefill: trace width does not match the model");
    const std::uint32_t t = trace.prompt_rows, width = model_.width(), d = model_.dim;
    const std::uint32_t w = observation_rows(t, cfg_.observation_frac);
    const ring_t inv_sqrt_d = fx::encode(1.0 / std::sqrt(static_cast<double>(d)));
    heads_.assign(model_.layers, std::vector<SecureHeadState>(model_.heads));
    step_selection_.clear();
    ShareTensor x = share(net_, PlainTensor::from_reals({t, width}, trace.prompt));
    std::vector<std::uint32_t> always(w);
    for (std::uint32_t i = 0; i < w; ++i) always[i] = t - w + i;
    for (std::uint32_t l = 0; l < model_.layers; ++l) {
        ShareTensor y = ShareTensor::zeros({t, width});
        for (std::uint32_t h = 0; h < model_.heads; ++h) {
            SecureHeadState& hs = heads_[l][h];
            ShareTensor q, k, v, scores;
            {
                PhaseScope attn(net_, "attention");
                const ShareTensor xh = slice_cols(x, h * d, d);
                q = sec_matmul(net_, xh, wq_[l][h]);
                k = sec_matmul(net_, xh, wk_[l][h]);
                v = sec_matmul(net_, xh, wv_[l][h]);
                const ShareTensor qs = mul_plain_fx(net_, q, inv_sqrt_d);
                scores = sec_matmul(net_, qs, k, true);
            }
            const ShareTensor p = causal_softmax(net_, scores);
            {
                PhaseScope attn(net_, "attention");
                const ShareTensor o = sec_matmul(net_, p, v);
                set_cols(y, h * d, o);
            }
            const ShareTensor acc = accumulate_scores_secure(slice_rows(p, t - w, t));
            const StaticEvictResult st = static_evict_secure(net_, acc, cfg_.static_evict_ratio, always);
            ShareTensor kr, vr;
            {
                PhaseScope stat(net_, "static");
                kr = gather_by_onehot(net_, st.compaction, k);
                vr = gather_by_onehot(net_, st.compaction, v);
            }
            install_retained(hs, std::move(kr), std::move(vr));
        }
        PhaseScope attn(net_, "attention");
        x = sec_add(x, sec_matmul(net_, y, wo_[l]));
    }
}

void SecureEngine::install_retained(SecureHeadState& hs, ShareTensor k, ShareTensor v) {
    const std::uint32_t d = model_.dim;
    hs.k = std::move(k);
    hs.v = std::move(v);
    hs.prompt_rows = hs.k.dims[0];
    hs.rows = hs.prompt_rows;
    hs.closed_rows = hs.prompt_rows;
    hs.appended = 0;
    hs.layout = make_layout(hs.prompt_rows, cfg_.levels);
    if (!cfg_.levels.empty()) {
        const std::size_t levels = cfg_.levels.size();
        std::vector<SummariesSecure> sums(levels);
        sums[levels - 1] = build_summaries_secure(net_, hs.k, hs.layout.sizes.back());
        for (std::size_t j = levels - 1; j-- > 0;)
            sums[j] = fold_summaries_secure(net_, sums[j + 1], hs.layout.child_factor(j));
        hs.level_blends.resize(levels);
        for (std::size_t j = 0; j < levels; ++j)
            hs.level_blends[j] = blends_with_bias(net_, sums[j], cfg_.alpha, hs.layout.slots[j]);
        // padded fine gather tables: table row i is the cache row for
        // i < prompt_rows and a zero row with bias 1 past it
        const std::uint32_t table_rows = hs.layout.fine_slots() * hs.layout.fine_size();
        hs.kpad_aug = ShareTensor::zeros({table_rows, d + 1});
        hs.vpad = ShareTensor::zeros({table_rows, d});
        for (std::uint32_t r = 0; r < table_rows; ++r) {
            if (r < hs.prompt_rows) {
                for (int c = 0; c < 3; ++c) {
                    std::memcpy(hs.kpad_aug.comp[c].data() + std::size_t{r} * (d + 1),
                                hs.k.comp[c].data() + std::size_t{r} * d, d * sizeof(ring_t));
                    std::memcpy(hs.vpad.comp[c].data() + std::size_t{r} * d,
                                hs.v.comp[c].data() + std::size_t{r} * d, d * sizeof(ring_t));
                }
            } else {
                hs.kpad_aug.comp[0][std::size_t{r} * (d + 1) + d] = fx::encode(1.0);
            }
        }
    } else {
        hs.level_blends.clear();
        hs.kpad_aug = ShareTensor::zeros({0, d + 1});
        hs.vpad = ShareTensor::zeros({0, d});
    }
    hs.appended_blends = ShareTensor::zeros({0, d + 1});
}

void SecureEngine::prefill_synthetic(std::uint32_t prompt_rows, std::uint64_t seed) {
    heads_.assign(model_.layers, std::vector<SecureHeadState>(model_.heads));
    step_selection_.clear();
    const std::uint32_t d = model_.dim;
    for (std::uint32_t l = 0; l < model_.layers; ++l) {
        for (std::uint32_t h = 0; h < model_.heads; ++h) {
            auto kv = synth_kv(seed, l, h, prompt_rows, d);
            install_retained(heads_[l][h], share(net_, PlainTensor::from_reals({prompt_rows, d}, kv.first)),
                             share(net_, PlainTensor::from_reals({prompt_rows, d}, kv.second)));
        }
    }
}

std::vector<double> SecureEngine::step(const std::vector<double>& x, StepRecord* rec) {
    if (heads_.empty()) throw std::logic_error("step: prefill first");
    const std::uint32_t width = model_.width(), d = model_.dim;
    if (x.size() != width) throw std::invalid_argument("step: input width does not match the model");
    const ring_t inv_sqrt_d = fx::encode(1.0 / std::sqrt(static_cast<double>(d)));
    if (rec) {
        rec->selected.assign(model_.layers, std::vector<std::vector<std::uint32_t>>(model_.heads));
        rec->reused.assign(model_.layers, std::vector<bool>(model_.heads, false));
    }
    step_selection_.assign(model_.layers, std::vector<std::optional<SelectionSecure>>(model_.heads));
    ShareTensor cur = share(net_, PlainTensor::from_reals({1, width}, x));
    for (std::uint32_t l = 0; l < model_.layers; ++l) {
        ShareTensor y = ShareTensor::zeros({1, width});
        for (std::uint32_t h = 0; h < model_.heads; ++h) {
            SecureHeadState& hs = heads_[l][h];
            ShareTensor qs;
            {
                PhaseScope attn(net_, "attention");
                const ShareTensor xh = slice_cols(cur, h * d, d);
                const ShareTensor q = sec_matmul(net_, xh, wq_[l][h]);
                const ShareTensor kn = sec_matmul(net_, xh, wk_[l][h]);
                const ShareTensor vn = sec_matmul(net_, xh, wv_[l][h]);
                qs = mul_plain_fx(net_, q, inv_sqrt_d);
                hs.k = concat_rows(hs.k, kn);
                hs.v = concat_rows(hs.v, vn);
                hs.rows += 1;
            }
            ShareTensor out;
            if (cfg_.levels.empty()) {
                ShareTensor sc;
                {
                    PhaseScope attn(net_, "attention");
                    sc = sec_matmul(net_, qs, hs.k, true);
                }
                sc.dims = {hs.rows};
                ShareTensor p = sec_softmax(net_, sc);
                PhaseScope attn(net_, "attention");
                p.dims = {1, hs.rows};
                out = sec_matmul(net_, p, hs.v);
            } else {
                const ShareTensor q_aug = augment_query(qs);
                bool reused = false;
                if (!computes_own_selection(l, cfg_) && l > 0 && step_selection_[l - 1][h]) {
                    const SecureHeadState& prev = heads_[l - 1][h];
                    // slot ids transfer only between identical slot spaces
                    if (prev.layout.slots == hs.layout.slots && prev.appended == hs.appended &&
                        prev.prompt_rows == hs.prompt_rows) {
                        step_selection_[l][h] = *step_selection_[l - 1][h];
                        reused = true;
                    }
                }
                if (!reused) {
                    step_selection_[l][h] =
                        hierarchical_select_secure(net_, q_aug, hs.level_blends, hs.appended_blends, hs.layout,
                                                   cfg_.final_keep, cfg_.levels, hs.closed_rows);
                }
                const SelectionSecure& sel = *step_selection_[l][h];
                ShareTensor ksel, vsel;
                {
                    PhaseScope g(net_, "gather");
                    ksel = gather_by_onehot(net_, sel.onehot, hs.kpad_aug, hs.layout.fine_size());
                    vsel = gather_by_onehot(net_, sel.onehot, hs.vpad, hs.layout.fine_size());
                }
                ShareTensor sc;
                {
                    PhaseScope attn(net_, "attention");
                    const ShareTensor s1 = sec_matmul(net_, q_aug, ksel, true);
                    const ShareTensor s2 =
                        sec_matmul(net_, qs, slice_rows(hs.k, hs.closed_rows, hs.rows), true);
                    sc = concat_flat(s1, s2);
                }
                const ShareTensor p = sec_softmax(net_, sc);
                {
                    PhaseScope attn(net_, "attention");
                    ShareTensor p2 = p;
                    p2.dims = {1, static_cast<std::uint32_t>(p.numel())};
                    const ShareTensor vall = concat_rows(vsel, slice_rows(hs.v, hs.closed_rows, hs.rows));
                    out = sec_matmul(net_, p2, vall);
                }
                if (rec) {
                    rec->reused[l][h] = reused;
                    rec->selected[l][h].reserve(sel.ids.size());
                    for (const SecretIndex& id : sel.ids)
                        rec->selected[l][h].push_back(static_cast<std::uint32_t>(reconstruct_index(net_, id)));
                }
            }
            set_cols(y, h * d, out);
        }
        PhaseScope attn(net_, "attention");
        cur = sec_add(cur, sec_matmul(net_, y, wo_[l]));
    }
    if (!cfg_.levels.empty()) {
        for (auto& layer : heads_)
            for (SecureHeadState& hs : layer) close_cluster_if_full(hs);
    }
    return reconstruct(net_, cur).reals;
}

void SecureEngine::close_cluster_if_full(SecureHeadState& hs) {
    const std::uint32_t s = hs.layout.fine_size();
    if (hs.rows - hs.closed_rows != s) return;
    const ShareTensor kspan = slice_rows(hs.k, hs.closed_rows, hs.rows);
    const SummariesSecure sum = build_summaries_secure(net_, kspan, s);
    const ShareTensor blend = blends_with_bias(net_, sum, cfg_.alpha, 1);
    hs.appended_blends = concat_rows(hs.appended_blends, blend);
    hs.kpad_aug = concat_rows(hs.kpad_aug, append_zero_bias(kspan));
    hs.vpad = concat_rows(hs.vpad, slice_rows(hs.v, hs.closed_rows, hs.rows));
    hs.appended += 1;
    hs.closed_rows += s;
}

}  // namespace mpcache
