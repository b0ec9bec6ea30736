#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mpcache/gather.hpp"
#include "mpcache/net.hpp"
#include "mpcache/nonlinear.hpp"
#include "mpcache/rss.hpp"

// KV cache reduction pipeline: a look-once static eviction after prefill
// (attention mass accumulated over an observation window decides which
// prompt tokens survive), then per-step dynamic selection that walks a
// cluster hierarchy coarse to fine, scoring blended cluster summaries
// against the live query and keeping a fixed fraction at each level.
// Every routine exists twice: a plaintext reference on doubles and a
// secret-shared twin whose only public outputs are sizes.

namespace mpcache {

struct EvictionLevel {
    std::uint32_t cluster_size = 1;
    double keep_ratio = 1.0;  // ignored on the last level, which gets the token budget
};

struct EvictionConfig {
    double static_evict_ratio = 0.3;  // fraction of prompt tokens dropped after prefill
    double observation_frac = 0.2;    // tail fraction of the prompt scored for eviction
    std::vector<EvictionLevel> levels;  // coarse to fine; empty disables dynamic selection
    double final_keep = 0.2;          // token budget fraction for the last level
    double alpha = 0.6;               // summary blend weight between min and max corners
    std::uint32_t share_skip = 2;     // first layers always compute their own selection
    std::uint32_t share_group = 2;    // of each group after that, only the first computes
    bool aggregate_heads = false;     // one static decision per layer instead of per head

    void validate() const;
    static EvictionConfig preset_32_16();
    static EvictionConfig preset_8_4();
    static EvictionConfig no_eviction();
    std::string to_json() const;
    static EvictionConfig from_json(const std::string& text);
};

// observation window length; never zero even for tiny prompts
std::uint32_t observation_rows(std::uint32_t prompt_rows, double frac);
std::uint32_t static_keep_count(std::uint32_t prompt_rows, double evict_ratio);
std::uint32_t eta_token_budget(double final_keep, std::uint32_t retained_rows);

// true when layer l runs its own dynamic selection, false when it reuses
// the previous layer's
bool computes_own_selection(std::uint32_t layer, const EvictionConfig& cfg);

// Cluster slot algebra.  Levels are padded so every cluster has the same
// number of child slots; real clusters occupy a prefix at every level, so
// slot id == real cluster id below the real count.
struct HierarchyLayout {
    std::uint32_t prompt_rows = 0;
    std::vector<std::uint32_t> sizes;       // s_1 > s_2 > ... > s_J, each dividing the previous
    std::vector<std::uint32_t> real_count;  // ceil(prompt_rows / s_j)
    std::vector<std::uint32_t> slots;       // padded counts; slots[0] == real_count[0]
    std::uint32_t fine_size() const { return sizes.empty() ? 1 : sizes.back(); }
    std::uint32_t fine_slots() const { return slots.empty() ? 0 : slots.back(); }
    std::uint32_t child_factor(std::size_t j) const { return sizes[j] / sizes[j + 1]; }
};

HierarchyLayout make_layout(std::uint32_t prompt_rows, const std::vector<EvictionLevel>& levels);

// ---------- plaintext reference path (row-major doubles) ----------

// attention [rows, cols] -> per-column mass
std::vector<double> accumulate_scores_plain(const std::vector<double>& attn, std::uint32_t rows,
                                            std::uint32_t cols);

// retained prompt positions, sorted ascending; ties keep the lower index
std::vector<std::uint32_t> static_evict_plain(const std::vector<double>& scores, double evict_ratio,
                                              const std::vector<std::uint32_t>& always_keep);

struct SummaryPlain {
    std::uint32_t begin = 0;
    std::uint32_t rows = 0;
    std::vector<double> rmax, rmin;
};

std::vector<SummaryPlain> build_summaries_plain(const std::vector<double>& k, std::uint32_t rows,
                                                std::uint32_t cols, std::uint32_t cluster_size);
// fold children summaries into parents (coarser level)
std::vector<SummaryPlain> fold_summaries_plain(const std::vector<SummaryPlain>& fine, std::uint32_t factor);

std::vector<double> blend_plain(const SummaryPlain& s, double alpha);

double sim_exact_max_plain(const std::vector<double>& q, const std::vector<double>& k, std::uint32_t cols,
                           std::uint32_t row_begin, std::uint32_t row_end);
double sim_upper_bound_plain(const std::vector<double>& q, const SummaryPlain& s);
double sim_linear_plain(const std::vector<double>& q, const std::vector<double>& blend);

// padded per-level candidate tables for the plaintext mirror of the secure
// walk: blends for real slots, a pad marker afterwards
struct LevelTablePlain {
    std::vector<std::vector<double>> blend;  // [slots][cols]
    std::vector<bool> pad;                   // true for slots past the real count
};

LevelTablePlain level_table_plain(const std::vector<SummaryPlain>& sums, double alpha,
                                  std::uint32_t slot_count, std::uint32_t cols);

// selected fine slots (prompt slots first, appended clusters after them),
// in descending-score rank order; ties go to the lower slot
std::vector<std::uint32_t> hierarchical_select_plain(const std::vector<double>& q,
                                                     const std::vector<LevelTablePlain>& levels,
                                                     const LevelTablePlain& appended,
                                                     const HierarchyLayout& layout, double final_keep,
                                                     const std::vector<EvictionLevel>& level_cfg,
                                                     std::uint32_t retained_rows);

double commonality_score(const std::vector<std::vector<std::uint32_t>>& per_layer_topk, std::uint32_t k,
                         std::uint32_t window);

double selection_recall(const std::vector<std::uint32_t>& selected, const std::vector<std::uint32_t>& planted);

// ---------- secret-shared path ----------

ShareTensor accumulate_scores_secure(const ShareTensor& attn);

struct StaticEvictResult {
    ShareTensor indicator;   // [prompt_rows] arithmetic 0/1
    std::uint32_t count = 0;  // the only opened value
    ShareTensor compaction;  // [count, prompt_rows] stable one-hot rows
};

StaticEvictResult static_evict_secure(PartyNet& net, const ShareTensor& scores, double evict_ratio,
                                      const std::vector<std::uint32_t>& always_keep);

struct SummariesSecure {
    std::uint32_t cluster_size = 0;
    std::vector<std::uint32_t> begin, rows;  // spans, mirroring the plain layout
    ShareTensor rmax, rmin;                  // [clusters, cols]
};

// batched per-span coordinate-wise tournament over rows of [n, cols]:
// result row s is the coordinate-wise max (or min) of span s
ShareTensor segmented_extreme(PartyNet& net, const ShareTensor& values, const std::vector<std::uint32_t>& begin,
                              const std::vector<std::uint32_t>& rows, bool take_max);

SummariesSecure build_summaries_secure(PartyNet& net, const ShareTensor& k, std::uint32_t cluster_size);
SummariesSecure fold_summaries_secure(PartyNet& net, const SummariesSecure& fine, std::uint32_t factor);

// [slots, cols+1] blend rows with a trailing pad-bias column: real rows get
// bias 0, pad rows get blend 0 and bias 1, so scoring against a query whose
// last coordinate is a large negative constant buries every pad
ShareTensor blends_with_bias(PartyNet& net, const SummariesSecure& s, double alpha, std::uint32_t slot_count);

// query row [1, cols] -> [1, cols+1] with the burying constant appended
ShareTensor augment_query(const ShareTensor& q);

struct SelectionSecure {
    std::uint32_t n_sel = 0;
    ShareTensor onehot;               // [n_sel, fine_slots + appended]
    std::vector<SecretIndex> ids;     // global fine-slot ids, rank order
};

SelectionSecure hierarchical_select_secure(PartyNet& net, const ShareTensor& q_aug,
                                           const std::vector<ShareTensor>& level_blends,
                                           const ShareTensor& appended_blends, const HierarchyLayout& layout,
                                           double final_keep, const std::vector<EvictionLevel>& level_cfg,
                                           std::uint32_t retained_rows);

}  // namespace mpcache
