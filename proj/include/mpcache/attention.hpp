#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "mpcache/eviction.hpp"
#include "mpcache/net.hpp"
#include "mpcache/rss.hpp"
#include "mpcache/tensor.hpp"

// Decoder-attention engines.  Each layer is per-head single-query attention
// over a managed KV cache with a residual connection; the plaintext engine
// is the reference semantics and the secure engine runs the same pipeline on
// replicated shares.  Cache management follows the eviction pipeline: static
// eviction right after prefill, then per-step hierarchical selection over
// closed clusters while an always-attended open cluster absorbs fresh
// tokens until it fills and rolls into the candidate pool.

namespace mpcache {

struct ModelSpec {
    std::uint32_t layers = 0, heads = 0, dim = 0;  // dim is per-head width
    // per layer, per head, row-major [dim, dim]
    std::vector<std::vector<std::vector<double>>> wq, wk, wv;
    // per layer, row-major [heads*dim, heads*dim]
    std::vector<std::vector<double>> wo;

    std::uint32_t width() const { return heads * dim; }
    static ModelSpec random(std::uint32_t layers, std::uint32_t heads, std::uint32_t dim, std::uint64_t seed);

    // rank-4 [L, H, d, d] for the head projections, rank-3 [L, H*d, H*d]
    // for the output mix
    static ModelSpec from_tensors(const PlainTensor& wq, const PlainTensor& wk, const PlainTensor& wv,
                                  const PlainTensor& wo);
    PlainTensor wq_tensor() const;
    PlainTensor wk_tensor() const;
    PlainTensor wv_tensor() const;
    PlainTensor wo_tensor() const;
};

struct DecodeTrace {
    std::uint32_t prompt_rows = 0, steps = 0, width = 0;
    std::vector<double> prompt;       // [prompt_rows, width]
    std::vector<double> step_inputs;  // [steps, width]
    static DecodeTrace random(std::uint32_t prompt_rows, std::uint32_t steps, std::uint32_t width,
                              std::uint64_t seed);
};

// per-step record of which fine slots each head attended and whether the
// selection was recomputed or adopted from the previous layer
struct StepRecord {
    std::vector<std::vector<std::vector<std::uint32_t>>> selected;  // [layer][head] global fine slots
    std::vector<std::vector<bool>> reused;                          // [layer][head]
};

struct PlainHeadState {
    std::vector<double> k, v;  // [rows, dim]
    std::uint32_t rows = 0;
    std::uint32_t prompt_rows = 0;   // retained prompt rows
    std::uint32_t closed_rows = 0;   // prompt + closed appended clusters
    std::uint32_t appended = 0;      // closed appended cluster count
    std::vector<std::uint32_t> retained;  // original prompt positions
    HierarchyLayout layout;
    std::vector<std::vector<SummaryPlain>> level_sums;
    std::vector<LevelTablePlain> tables;
    std::vector<SummaryPlain> appended_sums;
    LevelTablePlain appended_table;
};

class PlainEngine {
  public:
    PlainEngine(const ModelSpec& model, EvictionConfig cfg);
    void prefill(const DecodeTrace& trace);
    // install a synthetic retained cache (random K/V rows) without running
    // prefill attention; used for decode-cost studies at large prompt sizes
    void prefill_synthetic(std::uint32_t prompt_rows, std::uint64_t seed);
    std::vector<double> step(const std::vector<double>& x, StepRecord* rec = nullptr);
    const PlainHeadState& head(std::uint32_t l, std::uint32_t h) const { return heads_[l][h]; }

  private:
    const ModelSpec& model_;
    EvictionConfig cfg_;
    std::vector<std::vector<PlainHeadState>> heads_;
    std::vector<std::vector<std::vector<std::uint32_t>>> step_selection_;  // selections made this step

    void install_retained(PlainHeadState& hs, std::vector<double> k, std::vector<double> v,
                          std::vector<std::uint32_t> retained);
    std::vector<std::uint32_t> attended_rows(const PlainHeadState& hs,
                                             const std::vector<std::uint32_t>& fine_slots) const;
};

struct SecureHeadState {
    ShareTensor k, v;  // [rows, dim]
    std::uint32_t rows = 0;
    std::uint32_t prompt_rows = 0;
    std::uint32_t closed_rows = 0;
    std::uint32_t appended = 0;
    HierarchyLayout layout;
    std::vector<ShareTensor> level_blends;  // [slots_j, dim+1]
    ShareTensor appended_blends;            // [appended, dim+1]
    ShareTensor kpad_aug;                   // [(fine_slots+appended)*fine, dim+1]
    ShareTensor vpad;                       // [(fine_slots+appended)*fine, dim]
};

class SecureEngine {
  public:
    SecureEngine(PartyNet& net, const ModelSpec& model, EvictionConfig cfg);
    void prefill(const DecodeTrace& trace);
    // same synthetic cache as the plaintext engine for the same seed
    void prefill_synthetic(std::uint32_t prompt_rows, std::uint64_t seed);
    // one decode step; the output row is reconstructed for comparison
    std::vector<double> step(const std::vector<double>& x, StepRecord* rec = nullptr);
    const SecureHeadState& head(std::uint32_t l, std::uint32_t h) const { return heads_[l][h]; }
    PartyNet& net() { return net_; }

  private:
    PartyNet& net_;
    const ModelSpec& model_;
    EvictionConfig cfg_;
    std::vector<std::vector<ShareTensor>> wq_, wk_, wv_;  // [L][H] of [d, d]
    std::vector<ShareTensor> wo_;                         // [L] of [H*d, H*d]
    std::vector<std::vector<SecureHeadState>> heads_;
    std::vector<std::vector<std::optional<SelectionSecure>>> step_selection_;

    void install_retained(SecureHeadState& hs, ShareTensor k, ShareTensor v);
    void close_cluster_if_full(SecureHeadState& hs);
};

}  // namespace mpcache
