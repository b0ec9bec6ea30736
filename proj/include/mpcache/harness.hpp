#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include "mpcache/attention.hpp"
#include "mpcache/eviction.hpp"

// Operational surface: run configuration, ingestion, the self-test battery,
// and the report builders behind the CLI subcommands.  Reports are
// deterministic: the same configuration and seed produce byte-identical
// output, and every numeric field is labeled with what produced it
// (ledger measurement, formula evaluation, or oracle comparison).

namespace mpcache {

struct RunConfig {
    std::string subcommand;
    std::uint64_t seed = 1;
    std::string mode = "secure-ideal";  // plaintext | secure-ideal | secure-boolean
    EvictionConfig eviction = EvictionConfig::no_eviction();

    // model + trace; random from seed unless a prefix points at MPCT files
    std::uint32_t layers = 2, heads = 2, dim = 8;
    std::uint32_t prompt_rows = 32, steps = 4;
    bool synthetic_prompt = false;  // install random retained caches, skip prefill attention
    bool planted = false;           // add the planted-relevance recall experiment
    std::string weights_prefix;     // <prefix>.wq/.wk/.wv/.wo.mpct
    std::string trace_prefix;       // <prefix>.prompt/.steps.mpct

    // bench-gather sizes
    std::uint32_t bench_tokens = 1024, bench_clusters = 64;
    std::uint32_t bench_k_tokens = 256, bench_k_clusters = 16;
    std::uint32_t bench_cols = 4;

    // analyze-commonality input
    std::string trace_csv;
    std::uint32_t m_max = 4;

    std::string out_report;  // write the JSON report here when non-empty
    std::string out_csv;     // write the CSV payload here when non-empty

    std::string to_json() const;
    static RunConfig from_json(const std::string& text);
};

// MPCACHE_SEED overrides the configured seed when set
std::uint64_t effective_seed(const RunConfig& cfg);

// Small-size invariant battery; logs one line per property.  Returns the
// number of failed properties.  A nonzero trunc_fault is injected into every
// net the battery creates, which a healthy multiplication probe must catch.
int run_selftest(std::uint64_t seed, std::ostream& log, std::int64_t trunc_fault = 0);

// Real secure gathers at token and cluster granularity; asserts the ledger
// against the analytic cost model.  ok reports whether every assertion held.
std::string bench_gather_report(const RunConfig& cfg, bool& ok);

// Prefill + decode in plaintext and (optionally) secure mode, plus full-cache
// twins for equivalence and per-step communication comparison.  When
// selection_csv is non-null it receives the per-step selection trace.
std::string demo_decode_report(const RunConfig& cfg, std::string* selection_csv);

// Cross-layer commonality curve over a selection trace CSV
// (step,layer,head,rank,slot).  csv_out receives the m,score curve.
std::string analyze_commonality_report(const std::string& csv_text, std::uint32_t m_max,
                                       std::string* csv_out);

// MPCT ingestion with shape validation.
ModelSpec ingest_weights(const std::string& prefix);
DecodeTrace ingest_trace(const std::string& prefix);

}  // namespace mpcache
