#include "mpcache/eviction.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <set>
#include <stdexcept>

#include "json.hpp"

namespace mpcache {

namespace {

// pad slots score exactly this after the bias product, far below any
// attainable similarity yet far above the tournament sentinel
constexpr double kBury = -1048576.0;  // -2^20

std::uint32_t ceil_frac(double frac, std::uint32_t n) {
    if (n == 0) return 0;
    double v = std::ceil(frac * double(n));
    if (v <= 0) return 0;
    if (v >= double(n)) return n;
    return static_cast<std::uint32_t>(v);
}

}  // namespace

void EvictionConfig::validate() const {
    auto in01 = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!in01(static_evict_ratio) || !in01(observation_frac) || !in01(final_keep) || !in01(alpha)) {
        throw std::invalid_argument("eviction config: ratios must lie in [0, 1]");
    }
    if (share_group == 0) throw std::invalid_argument("eviction config: share_group must be positive");
    for (std::size_t j = 0; j < levels.size(); ++j) {
        if (levels[j].cluster_size == 0) throw std::invalid_argument("eviction config: zero cluster size");
        if (!in01(levels[j].keep_ratio)) throw std::invalid_argument("eviction config: keep_ratio out of range");
        if (j + 1 < levels.size()) {
            if (levels[j].cluster_size <= levels[j + 1].cluster_size ||
                levels[j].cluster_size % levels[j + 1].cluster_size != 0) {
                throw std::invalid_argument("eviction config: cluster sizes must shrink by integer factors");
            }
        }
    }
}

EvictionConfig EvictionConfig::preset_32_16() {
    EvictionConfig c;
    c.levels = {{32, 0.5}, {16, 1.0}};
    return c;
}

EvictionConfig EvictionConfig::preset_8_4() {
    EvictionConfig c;
    c.levels = {{8, 0.5}, {4, 1.0}};
    return c;
}

EvictionConfig EvictionConfig::no_eviction() {
    EvictionConfig c;
    c.static_evict_ratio = 0.0;
    c.levels = {{1, 1.0}};
    c.final_keep = 1.0;
    return c;
}

std::string EvictionConfig::to_json() const {
    nlohmann::ordered_json j;
    j["static_evict_ratio"] = static_evict_ratio;
    j["observation_frac"] = observation_frac;
    j["levels"] = nlohmann::ordered_json::array();
    for (const auto& l : levels) {
        j["levels"].push_back({{"cluster_size", l.cluster_size}, {"keep_ratio", l.keep_ratio}});
    }
    j["final_keep"] = final_keep;
    j["alpha"] = alpha;
    j["share_skip"] = share_skip;
    j["share_group"] = share_group;
    j["aggregate_heads"] = aggregate_heads;
    return j.dump(2);
}

EvictionConfig EvictionConfig::from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    EvictionConfig c;
    c.static_evict_ratio = j.value("static_evict_ratio", c.static_evict_ratio);
    c.observation_frac = j.value("observation_frac", c.observation_frac);
    if (j.contains("levels")) {
        c.levels.clear();
        for (const auto& l : j["levels"]) {
            c.levels.push_back({l.at("cluster_size").get<std::uint32_t>(), l.value("keep_ratio", 1.0)});
        }
    }
    c.final_keep = j.value("final_keep", c.final_keep);
    c.alpha = j.value("alpha", c.alpha);
    c.share_skip = j.value("share_skip", c.share_skip);
    c.share_group = j.value("share_group", c.share_group);
    c.aggregate_heads = j.value("aggregate_heads", c.aggregate_heads);
    c.validate();
    return c;
}

std::uint32_t observation_rows(std::uint32_t prompt_rows, double frac) {
    if (prompt_rows == 0) return 0;
    std::uint32_t w = ceil_frac(frac, prompt_rows);
    return std::max<std::uint32_t>(w, 1);
}

std::uint32_t static_keep_count(std::uint32_t prompt_rows, double evict_ratio) {
    return ceil_frac(1.0 - evict_ratio, prompt_rows);
}

std::uint32_t eta_token_budget(double final_keep, std::uint32_t retained_rows) {
    if (retained_rows == 0) return 0;
    return std::max<std::uint32_t>(ceil_frac(final_keep, retained_rows), 1);
}

bool computes_own_selection(std::uint32_t layer, const EvictionConfig& cfg) {
    if (layer < cfg.share_skip) return true;
    return (layer - cfg.share_skip) % cfg.share_group == 0;
}

HierarchyLayout make_layout(std::uint32_t prompt_rows, const std::vector<EvictionLevel>& levels) {
    HierarchyLayout lay;
    lay.prompt_rows = prompt_rows;
    for (const auto& l : levels) lay.sizes.push_back(l.cluster_size);
    for (std::size_t j = 0; j < lay.sizes.size(); ++j) {
        std::uint32_t s = lay.sizes[j];
        lay.real_count.push_back((prompt_rows + s - 1) / s);
        if (j == 0) {
            lay.slots.push_back(lay.real_count[0]);
        } else {
            lay.slots.push_back(lay.slots[j - 1] * (lay.sizes[j - 1] / s));
        }
    }
    return lay;
}

std::vector<double> accumulate_scores_plain(const std::vector<double>& attn, std::uint32_t rows,
                                            std::uint32_t cols) {
    std::vector<double> out(cols, 0.0);
    for (std::uint32_t r = 0; r < rows; ++r) {
        for (std::uint32_t c = 0; c < cols; ++c) out[c] += attn[std::size_t{r} * cols + c];
    }
    return out;
}

std::vector<std::uint32_t> static_evict_plain(const std::vector<double>& scores, double evict_ratio,
                                              const std::vector<std::uint32_t>& always_keep) {
    const auto t = static_cast<std::uint32_t>(scores.size());
    std::vector<std::uint32_t> order(t);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::uint32_t a, std::uint32_t b) { return scores[a] > scores[b]; });
    std::set<std::uint32_t> kept;
    std::uint32_t keep = static_keep_count(t, evict_ratio);
    for (std::uint32_t i = 0; i < keep; ++i) kept.insert(order[i]);
    for (std::uint32_t p : always_keep) {
        if (p < t) kept.insert(p);
    }
    return {kept.begin(), kept.end()};
}

std::vector<SummaryPlain> build_summaries_plain(const std::vector<double>& k, std::uint32_t rows,
                                                std::uint32_t cols, std::uint32_t cluster_size) {
    std::vector<SummaryPlain> out;
    for (std::uint32_t b = 0; b < rows; b += cluster_size) {
        SummaryPlain s;
        s.begin = b;
        s.rows = std::min(cluster_size, rows - b);
        s.rmax.assign(cols, -std::numeric_limits<double>::infinity());
        s.rmin.assign(cols, std::numeric_limits<double>::infinity());
        for (std::uint32_t r = b; r < b + s.rows; ++r) {
            for (std::uint32_t c = 0; c < cols; ++c) {
                double v = k[std::size_t{r} * cols + c];
                s.rmax[c] = std::max(s.rmax[c], v);
                s.rmin[c] = std::min(s.rmin[c], v);
            }
        }
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<SummaryPlain> fold_summaries_plain(const std::vector<SummaryPlain>& fine, std::uint32_t factor) {
    std::vector<SummaryPlain> out;
    for (std::size_t b = 0; b < fine.size(); b += factor) {
        std::size_t e = std::min(fine.size(), b + factor);
        SummaryPlain s;
        s.begin = fine[b].begin;
        s.rows = 0;
        s.rmax = fine[b].rmax;
        s.rmin = fine[b].rmin;
        for (std::size_t i = b; i < e; ++i) {
            s.rows += fine[i].rows;
            for (std::size_t c = 0; c < s.rmax.size(); ++c) {
                s.rmax[c] = std::max(s.rmax[c], fine[i].rmax[c]);
                s.rmin[c] = std::min(s.rmin[c], fine[i].rmin[c]);
            }
        }
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<double> blend_plain(const SummaryPlain& s, double alpha) {
    std::vector<double> out(s.rmax.size());
    for (std::size_t c = 0; c < out.size(); ++c) out[c] = s.rmin[c] + alpha * (s.rmax[c] - s.rmin[c]);
    return out;
}

double sim_exact_max_plain(const std::vector<double>& q, const std::vector<double>& k, std::uint32_t cols,
                           std::uint32_t row_begin, std::uint32_t row_end) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::uint32_t r = row_begin; r < row_end; ++r) {
        double dot = 0;
        for (std::uint32_t c = 0; c < cols; ++c) dot += q[c] * k[std::size_t{r} * cols + c];
        best = std::max(best, dot);
    }
    return best;
}

double sim_upper_bound_plain(const std::vector<double>& q, const SummaryPlain& s) {
    double acc = 0;
    for (std::size_t c = 0; c < q.size(); ++c) acc += std::max(q[c] * s.rmax[c], q[c] * s.rmin[c]);
    return acc;
}

double sim_linear_plain(const std::vector<double>& q, const std::vector<double>& blend) {
    double acc = 0;
    for (std::size_t c = 0; c < q.size(); ++c) acc += q[c] * blend[c];
    return acc;
}

namespace {

// descending stable top-n over candidate scores: rank order out
std::vector<std::uint32_t> plain_topk(const std::vector<double>& scores, std::uint32_t n) {
    std::vector<std::uint32_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::uint32_t a, std::uint32_t b) { return scores[a] > scores[b]; });
    order.resize(std::min<std::size_t>(n, order.size()));
    return order;
}

}  // namespace

std::vector<std::uint32_t> hierarchical_select_plain(const std::vector<double>& q,
                                                     const std::vector<LevelTablePlain>& levels,
                                                     const LevelTablePlain& appended,
                                                     const HierarchyLayout& layout, double final_keep,
                                                     const std::vector<EvictionLevel>& level_cfg,
                                                     std::uint32_t retained_rows) {
    const std::size_t nlev = layout.sizes.size();
    const auto a_count = static_cast<std::uint32_t>(appended.blend.size());
    if (nlev == 0) return {};
    if (layout.real_count[0] == 0 && a_count == 0) return {};

    // candidate list entries: slot id at the current level, with appended
    // clusters addressed past the padded prompt slots at the last level
    std::vector<std::uint32_t> cand_slots;
    std::vector<const std::vector<double>*> cand_blend;
    std::vector<bool> cand_pad;
    auto push_level_slot = [&](const LevelTablePlain& tab, std::uint32_t slot) {
        cand_slots.push_back(slot);
        cand_blend.push_back(&tab.blend[slot]);
        cand_pad.push_back(tab.pad[slot]);
    };

    for (std::uint32_t g = 0; g < layout.slots[0]; ++g) push_level_slot(levels[0], g);
    if (nlev == 1) {
        for (std::uint32_t a = 0; a < a_count; ++a) {
            cand_slots.push_back(layout.fine_slots() + a);
            cand_blend.push_back(&appended.blend[a]);
            cand_pad.push_back(appended.pad[a]);
        }
    }

    std::vector<std::uint32_t> survivors;
    for (std::size_t j = 0; j < nlev; ++j) {
        std::vector<double> scores(cand_slots.size());
        for (std::size_t i = 0; i < cand_slots.size(); ++i) {
            scores[i] = cand_pad[i] ? kBury : sim_linear_plain(q, *cand_blend[i]);
        }
        const auto cand = static_cast<std::uint32_t>(cand_slots.size());
        std::uint32_t budget;
        if (j + 1 == nlev) {
            std::uint32_t tokens = eta_token_budget(final_keep, retained_rows);
            budget = (tokens + layout.fine_size() - 1) / layout.fine_size();
        } else {
            budget = ceil_frac(level_cfg[j].keep_ratio, cand);
        }
        budget = std::max<std::uint32_t>(std::min(budget, cand), cand ? 1 : 0);

        std::vector<std::uint32_t> picked = (budget >= cand)
                                                ? [&] {
                                                      std::vector<std::uint32_t> all(cand);
                                                      std::iota(all.begin(), all.end(), 0);
                                                      return all;
                                                  }()
                                                : plain_topk(scores, budget);
        survivors.clear();
        for (std::uint32_t p : picked) survivors.push_back(cand_slots[p]);

        if (j + 1 < nlev) {
            const std::uint32_t b = layout.child_factor(j);
            cand_slots.clear();
            cand_blend.clear();
            cand_pad.clear();
            for (std::uint32_t g : survivors) {
                for (std::uint32_t u = 0; u < b; ++u) push_level_slot(levels[j + 1], g * b + u);
            }
            if (j + 2 == nlev) {
                for (std::uint32_t a = 0; a < a_count; ++a) {
                    cand_slots.push_back(layout.fine_slots() + a);
                    cand_blend.push_back(&appended.blend[a]);
                    cand_pad.push_back(appended.pad[a]);
                }
            }
        }
    }
    return survivors;
}

LevelTablePlain level_table_plain(const std::vector<SummaryPlain>& sums, double alpha,
                                  std::uint32_t slot_count, std::uint32_t cols) {
    LevelTablePlain tab;
    for (const auto& s : sums) {
        tab.blend.push_back(blend_plain(s, alpha));
        tab.pad.push_back(false);
    }
    while (tab.blend.size() < slot_count) {
        tab.blend.emplace_back(cols, 0.0);
        tab.pad.push_back(true);
    }
    return tab;
}

double commonality_score(const std::vector<std::vector<std::uint32_t>>& per_layer_topk, std::uint32_t k,
                         std::uint32_t window) {
    const std::size_t nl = per_layer_topk.size();
    if (k == 0 || window == 0 || nl <= window) return 0.0;
    double acc = 0;
    for (std::size_t l = 0; l + window < nl; ++l) {
        std::vector<std::uint32_t> inter(per_layer_topk[l].begin(), per_layer_topk[l].end());
        std::sort(inter.begin(), inter.end());
        inter.resize(std::min<std::size_t>(inter.size(), k));
        std::sort(inter.begin(), inter.end());
        for (std::size_t i = l + 1; i <= l + window; ++i) {
            std::vector<std::uint32_t> next(per_layer_topk[i].begin(), per_layer_topk[i].end());
            std::sort(next.begin(), next.end());
            if (next.size() > k) {
                std::vector<std::uint32_t> capped(per_layer_topk[i].begin(), per_layer_topk[i].end());
                capped.resize(k);
                next.assign(capped.begin(), capped.end());
                std::sort(next.begin(), next.end());
            }
            std::vector<std::uint32_t> merged;
            std::set_intersection(inter.begin(), inter.end(), next.begin(), next.end(),
                                  std::back_inserter(merged));
            inter = std::move(merged);
        }
        acc += double(inter.size());
    }
    return acc / (double(k) * double(nl - window));
}

double selection_recall(const std::vector<std::uint32_t>& selected, const std::vector<std::uint32_t>& planted) {
    if (planted.empty()) return 1.0;
    std::set<std::uint32_t> sel(selected.begin(), selected.end());
    std::size_t hit = 0;
    for (std::uint32_t p : planted) hit += sel.count(p);
    return double(hit) / double(planted.size());
}

ShareTensor accumulate_scores_secure(const ShareTensor& attn) {
    if (attn.dims.size() != 2) throw std::invalid_argument("accumulate_scores_secure: need [rows, cols]");
    const std::uint32_t rows = attn.dims[0], cols = attn.dims[1];
    ShareTensor out = ShareTensor::zeros({cols});
    for (int c = 0; c < 3; ++c) {
        for (std::uint32_t r = 0; r < rows; ++r) {
            for (std::uint32_t j = 0; j < cols; ++j) {
                out.comp[c][j] = ring_add(out.comp[c][j], attn.comp[c][std::size_t{r} * cols + j]);
            }
        }
    }
    return out;
}

StaticEvictResult static_evict_secure(PartyNet& net, const ShareTensor& scores, double evict_ratio,
                                      const std::vector<std::uint32_t>& always_keep) {
    PhaseScope scope(net, "static");
    const auto t = static_cast<std::uint32_t>(scores.numel());
    const std::uint32_t keep = static_keep_count(t, evict_ratio);

    ShareTensor ind = ShareTensor::zeros({t});
    if (keep > 0) {
        TopkResult top = sec_topk(net, scores, keep);
        for (int c = 0; c < 3; ++c) {
            for (std::uint32_t r = 0; r < keep; ++r) {
                for (std::uint32_t j = 0; j < t; ++j) {
                    ind.comp[c][j] = ring_add(ind.comp[c][j], top.onehot.comp[c][std::size_t{r} * t + j]);
                }
            }
        }
    }
    // the always-keep set is public, so the union is a local rewrite
    for (std::uint32_t p : always_keep) {
        if (p >= t) continue;
        ind.comp[0][p] = 1;
        ind.comp[1][p] = 0;
        ind.comp[2][p] = 0;
    }

    StaticEvictResult res;
    res.count = reveal_count(net, ind);
    res.compaction = compaction_matrix(net, ind, res.count);
    res.indicator = std::move(ind);
    return res;
}

namespace {

void copy_row(ShareTensor& dst, std::uint32_t dst_row, const ShareTensor& src, std::uint32_t src_row,
              std::uint32_t cols) {
    for (int c = 0; c < 3; ++c) {
        std::memcpy(dst.comp[c].data() + std::size_t{dst_row} * cols,
                    src.comp[c].data() + std::size_t{src_row} * cols, cols * sizeof(ring_t));
    }
}

}  // namespace

ShareTensor segmented_extreme(PartyNet& net, const ShareTensor& values, const std::vector<std::uint32_t>& begin,
                              const std::vector<std::uint32_t>& rows, bool take_max) {
    const std::uint32_t cols = values.dims[1];
    const auto spans = static_cast<std::uint32_t>(begin.size());
    ShareTensor work = values;
    std::vector<std::vector<std::uint32_t>> active(spans);
    for (std::uint32_t s = 0; s < spans; ++s) {
        for (std::uint32_t r = 0; r < rows[s]; ++r) active[s].push_back(begin[s] + r);
    }
    for (;;) {
        std::vector<std::pair<std::uint32_t, std::uint32_t>> duels;  // (left row, right row)
        for (std::uint32_t s = 0; s < spans; ++s) {
            for (std::size_t i = 0; i + 1 < active[s].size(); i += 2) {
                duels.emplace_back(active[s][i], active[s][i + 1]);
            }
        }
        if (duels.empty()) break;
        const auto lanes = static_cast<std::uint32_t>(duels.size());
        ShareTensor left = ShareTensor::zeros({lanes, cols});
        ShareTensor right = ShareTensor::zeros({lanes, cols});
        for (std::uint32_t i = 0; i < lanes; ++i) {
            copy_row(left, i, work, duels[i].first, cols);
            copy_row(right, i, work, duels[i].second, cols);
        }
        ShareTensor c = sec_less(net, left, right);
        ShareTensor won = take_max ? sec_select(net, c, right, left) : sec_select(net, c, left, right);
        for (std::uint32_t i = 0; i < lanes; ++i) copy_row(work, duels[i].first, won, i, cols);
        for (std::uint32_t s = 0; s < spans; ++s) {
            // winner of each duel sits in its left row; an odd tail row passes through
            std::vector<std::uint32_t> next;
            for (std::size_t i = 0; i + 1 < active[s].size(); i += 2) next.push_back(active[s][i]);
            if (active[s].size() % 2 == 1) next.push_back(active[s].back());
            active[s] = std::move(next);
        }
    }
    ShareTensor out = ShareTensor::zeros({spans, cols});
    for (std::uint32_t s = 0; s < spans; ++s) {
        if (!active[s].empty()) copy_row(out, s, work, active[s][0], cols);
    }
    return out;
}

SummariesSecure build_summaries_secure(PartyNet& net, const ShareTensor& k, std::uint32_t cluster_size) {
    PhaseScope scope(net, "summary");
    if (k.dims.size() != 2) throw std::invalid_argument("build_summaries_secure: need [rows, cols]");
    const std::uint32_t rows = k.dims[0];
    SummariesSecure s;
    s.cluster_size = cluster_size;
    for (std::uint32_t b = 0; b < rows; b += cluster_size) {
        s.begin.push_back(b);
        s.rows.push_back(std::min(cluster_size, rows - b));
    }
    s.rmax = segmented_extreme(net, k, s.begin, s.rows, true);
    s.rmin = segmented_extreme(net, k, s.begin, s.rows, false);
    return s;
}

SummariesSecure fold_summaries_secure(PartyNet& net, const SummariesSecure& fine, std::uint32_t factor) {
    PhaseScope scope(net, "summary");
    const auto n = static_cast<std::uint32_t>(fine.begin.size());
    SummariesSecure s;
    s.cluster_size = fine.cluster_size * factor;
    std::vector<std::uint32_t> cb, cr;
    for (std::uint32_t b = 0; b < n; b += factor) {
        std::uint32_t e = std::min(n, b + factor);
        s.begin.push_back(fine.begin[b]);
        std::uint32_t total = 0;
        for (std::uint32_t i = b; i < e; ++i) total += fine.rows[i];
        s.rows.push_back(total);
        cb.push_back(b);
        cr.push_back(e - b);
    }
    s.rmax = segmented_extreme(net, fine.rmax, cb, cr, true);
    s.rmin = segmented_extreme(net, fine.rmin, cb, cr, false);
    return s;
}

ShareTensor blends_with_bias(PartyNet& net, const SummariesSecure& s, double alpha, std::uint32_t slot_count) {
    const auto real = static_cast<std::uint32_t>(s.begin.size());
    const std::uint32_t cols = s.rmax.dims.empty() ? 0 : s.rmax.dims[1];
    if (slot_count < real) throw std::invalid_argument("blends_with_bias: fewer slots than clusters");

    ShareTensor gap = sec_sub(s.rmax, s.rmin);
    ShareTensor blend = sec_add(s.rmin, mul_plain_fx(net, gap, fx::encode(alpha)));

    ShareTensor out = ShareTensor::zeros({slot_count, cols + 1});
    for (std::uint32_t r = 0; r < real; ++r) {
        for (int c = 0; c < 3; ++c) {
            std::memcpy(out.comp[c].data() + std::size_t{r} * (cols + 1),
                        blend.comp[c].data() + std::size_t{r} * cols, cols * sizeof(ring_t));
        }
    }
    for (std::uint32_t r = real; r < slot_count; ++r) {
        out.comp[0][std::size_t{r} * (cols + 1) + cols] = fx::encode(1.0);
    }
    return out;
}

ShareTensor augment_query(const ShareTensor& q) {
    if (q.dims.size() != 2 || q.dims[0] != 1) throw std::invalid_argument("augment_query: need [1, cols]");
    const std::uint32_t cols = q.dims[1];
    ShareTensor out = ShareTensor::zeros({1, cols + 1});
    for (int c = 0; c < 3; ++c) {
        std::memcpy(out.comp[c].data(), q.comp[c].data(), cols * sizeof(ring_t));
    }
    out.comp[0][cols] = fx::encode(kBury);
    return out;
}

namespace {

// identity selection when the budget covers every candidate: no tournament,
// no communication
ShareTensor public_identity(std::uint32_t n) {
    ShareTensor m = ShareTensor::zeros({n, n});
    for (std::uint32_t i = 0; i < n; ++i) m.comp[0][std::size_t{i} * n + i] = 1;
    return m;
}

// M [r, c] -> M (x) I_b: block structure maps parent slots to child slots
ShareTensor expand_onehot(const ShareTensor& m, std::uint32_t b) {
    const std::uint32_t r = m.dims[0], c = m.dims[1];
    ShareTensor out = ShareTensor::zeros({r * b, c * b});
    for (int comp = 0; comp < 3; ++comp) {
        for (std::uint32_t i = 0; i < r; ++i) {
            for (std::uint32_t g = 0; g < c; ++g) {
                ring_t v = m.comp[comp][std::size_t{i} * c + g];
                if (v == 0) continue;
                for (std::uint32_t u = 0; u < b; ++u) {
                    out.comp[comp][(std::size_t{i} * b + u) * (std::size_t{c} * b) + std::size_t{g} * b + u] = v;
                }
            }
        }
    }
    return out;
}

}  // namespace

SelectionSecure hierarchical_select_secure(PartyNet& net, const ShareTensor& q_aug,
                                           const std::vector<ShareTensor>& level_blends,
                                           const ShareTensor& appended_blends, const HierarchyLayout& layout,
                                           double final_keep, const std::vector<EvictionLevel>& level_cfg,
                                           std::uint32_t retained_rows) {
    const std::size_t nlev = layout.sizes.size();
    const std::uint32_t a_count = appended_blends.dims.empty() ? 0 : appended_blends.dims[0];
    const std::uint32_t total_slots = layout.fine_slots() + a_count;
    SelectionSecure sel;
    if (nlev == 0 || total_slots == 0 || (layout.real_count[0] == 0 && a_count == 0)) return sel;

    ShareTensor cand_blends;
    {
        PhaseScope sim(net, "similarity");
        cand_blends = (nlev == 1 && a_count > 0) ? concat_rows(level_blends[0], appended_blends)
                                                 : level_blends[0];
    }

    ShareTensor global;  // [n_j, slots at this level (+ appended on the last)]
    bool global_set = false;

    for (std::size_t j = 0; j < nlev; ++j) {
        ShareTensor scores;
        {
            PhaseScope sim(net, "similarity");
            scores = sec_matmul(net, q_aug, cand_blends, /*transpose_b=*/true);
            scores.dims = {cand_blends.dims[0]};
        }
        const std::uint32_t cand = cand_blends.dims[0];
        std::uint32_t budget;
        if (j + 1 == nlev) {
            std::uint32_t tokens = eta_token_budget(final_keep, retained_rows);
            budget = (tokens + layout.fine_size() - 1) / layout.fine_size();
        } else {
            budget = std::max<std::uint32_t>(
                std::min(static_cast<std::uint32_t>(std::ceil(level_cfg[j].keep_ratio * double(cand))), cand), 1);
        }
        budget = std::max<std::uint32_t>(std::min(budget, cand), 1);

        const bool select_all = budget >= cand;
        ShareTensor local;
        if (!select_all) {
            TopkResult top = sec_topk(net, scores, budget);
            local = top.onehot;
        }

        // compose into the slot space of this level; with the full budget the
        // candidate map itself is the answer and costs nothing
        if (j == 0) {
            global = select_all ? public_identity(cand) : std::move(local);
        } else {
            PhaseScope sim(net, "similarity");
            const std::uint32_t b = layout.child_factor(j - 1);
            ShareTensor base = expand_onehot(global, b);
            if (j + 1 == nlev && a_count > 0) {
                // appended clusters join as unit rows past the prompt slots
                ShareTensor wide = ShareTensor::zeros({base.dims[0] + a_count, total_slots});
                for (int c = 0; c < 3; ++c) {
                    for (std::uint32_t r = 0; r < base.dims[0]; ++r) {
                        std::memcpy(wide.comp[c].data() + std::size_t{r} * total_slots,
                                    base.comp[c].data() + std::size_t{r} * base.dims[1],
                                    base.dims[1] * sizeof(ring_t));
                    }
                }
                for (std::uint32_t a = 0; a < a_count; ++a) {
                    wide.comp[0][(std::size_t{base.dims[0]} + a) * total_slots + layout.fine_slots() + a] = 1;
                }
                base = std::move(wide);
            }
            global = select_all ? std::move(base) : sec_matmul(net, local, base, false, FxMode::Raw);
        }
        global_set = true;

        if (j + 1 < nlev) {
            PhaseScope sim(net, "similarity");
            const std::uint32_t b = layout.child_factor(j);
            ShareTensor next = gather_by_onehot(net, global, level_blends[j + 1], b);
            cand_blends = (j + 2 == nlev && a_count > 0) ? concat_rows(next, appended_blends) : next;
        }
    }

    (void)global_set;
    sel.n_sel = global.dims[0];
    sel.onehot = std::move(global);
    const int w = index_width(total_slots);
    for (std::uint32_t r = 0; r < sel.n_sel; ++r) {
        SecretIndex id;
        id.width = w;
        for (int c = 0; c < 3; ++c) {
            ring_t acc = 0;
            for (std::uint32_t g = 0; g < sel.onehot.dims[1]; ++g) {
                acc = ring_add(acc, ring_mul(sel.onehot.comp[c][std::size_t{r} * sel.onehot.dims[1] + g],
                                             static_cast<ring_t>(g)));
            }
            id.comp[c] = acc;
        }
        sel.ids.push_back(id);
    }
    return sel;
}

}  // namespace mpcache
