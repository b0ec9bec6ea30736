#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "mpcache/attention.hpp"
#include "mpcache/eviction.hpp"
#include "mpcache/harness.hpp"
#include "mpcache/tensor.hpp"

using namespace mpcache;

namespace {

struct EnvGuard {
    std::string name;
    std::string saved;
    bool had = false;
    explicit EnvGuard(const char* n) : name(n) {
        if (const char* v = std::getenv(n)) {
            saved = v;
            had = true;
        }
    }
    ~EnvGuard() {
        if (had)
            setenv(name.c_str(), saved.c_str(), 1);
        else
            unsetenv(name.c_str());
    }
};

std::filesystem::path temp_prefix(const char* tag) {
    return std::filesystem::temp_directory_path() / (std::string("mpcache_test_") + tag);
}

}  // namespace

TEST_CASE("run config json round trip") {
    RunConfig a;
    a.subcommand = "demo-decode";
    a.seed = 42;
    a.mode = "secure-boolean";
    a.eviction = EvictionConfig::preset_32_16();
    a.layers = 6;
    a.heads = 3;
    a.dim = 16;
    a.prompt_rows = 200;
    a.steps = 9;
    a.synthetic_prompt = true;
    a.planted = true;
    a.weights_prefix = "w";
    a.trace_prefix = "t";
    a.bench_tokens = 512;
    a.bench_clusters = 32;
    a.bench_k_tokens = 128;
    a.bench_k_clusters = 8;
    a.bench_cols = 2;
    a.trace_csv = "sel.csv";
    a.m_max = 5;
    a.out_report = "r.json";
    a.out_csv = "c.csv";
    const std::string text = a.to_json();
    const RunConfig b = RunConfig::from_json(text);
    CHECK(b.to_json() == text);
    CHECK(b.eviction.levels.size() == a.eviction.levels.size());
    CHECK(b.mode == "secure-boolean");

    // unknown fields are ignored, missing fields keep defaults
    const RunConfig c = RunConfig::from_json("{\"seed\": 7, \"stray\": 1}");
    CHECK(c.seed == 7);
    CHECK(c.layers == RunConfig{}.layers);
}

TEST_CASE("environment seed override") {
    EnvGuard guard("MPCACHE_SEED");
    RunConfig cfg;
    cfg.seed = 5;
    unsetenv("MPCACHE_SEED");
    CHECK(effective_seed(cfg) == 5);
    setenv("MPCACHE_SEED", "123", 1);
    CHECK(effective_seed(cfg) == 123);
    setenv("MPCACHE_SEED", "nope", 1);
    CHECK_THROWS_AS(effective_seed(cfg), std::invalid_argument);
}

TEST_CASE("selftest passes clean and fails under an injected truncation fault") {
    std::ostringstream log;
    CHECK(run_selftest(11, log) == 0);
    CHECK(log.str().find("[fail]") == std::string::npos);

    std::ostringstream bad;
    CHECK(run_selftest(11, bad, 5) > 0);
    CHECK(bad.str().find("[fail]") != std::string::npos);
}

TEST_CASE("selftest is seed independent") {
    for (std::uint64_t seed : {101, 202, 303, 404, 505}) {
        std::ostringstream log;
        CHECK(run_selftest(seed, log) == 0);
    }
}

TEST_CASE("bench gather report checks its own ledger counts") {
    RunConfig cfg;
    cfg.bench_tokens = 256;
    cfg.bench_clusters = 16;
    cfg.bench_k_tokens = 32;
    cfg.bench_k_clusters = 4;
    cfg.bench_cols = 2;
    bool ok = false;
    const std::string report = bench_gather_report(cfg, ok);
    CHECK(ok);
    const nlohmann::json j = nlohmann::json::parse(report);
    CHECK(j["token"]["equality_tests_ledger"]["value"] == 32u * 256u);
    CHECK(j["cluster"]["equality_tests_ledger"]["value"] == 4u * 16u);
    CHECK(j["token"]["per_index"]["value"] == 256);
    CHECK(j["cluster"]["per_index"]["value"] == 16);

    // equal granularities cost the same
    cfg.bench_clusters = 256;
    cfg.bench_k_clusters = 32;
    bool ok2 = false;
    const nlohmann::json j2 = nlohmann::json::parse(bench_gather_report(cfg, ok2));
    CHECK(ok2);
    CHECK(j2["comm_ratio"]["value"].get<double>() == doctest::Approx(1.0));

    cfg.bench_k_tokens = 1000;
    CHECK_THROWS(bench_gather_report(cfg, ok));
}

TEST_CASE("reports are byte identical for identical config and seed") {
    RunConfig cfg;
    cfg.subcommand = "demo-decode";
    cfg.seed = 9;
    cfg.mode = "secure-ideal";
    cfg.layers = 2;
    cfg.heads = 1;
    cfg.dim = 8;
    cfg.prompt_rows = 16;
    cfg.steps = 2;
    cfg.eviction = EvictionConfig::preset_8_4();
    std::string csv1, csv2;
    const std::string r1 = demo_decode_report(cfg, &csv1);
    const std::string r2 = demo_decode_report(cfg, &csv2);
    CHECK(r1 == r2);
    CHECK(csv1 == csv2);
    CHECK(csv1.rfind("step,layer,head,rank,slot\n", 0) == 0);

    bool ok = false;
    RunConfig bench;
    bench.bench_tokens = 128;
    bench.bench_clusters = 8;
    bench.bench_k_tokens = 16;
    bench.bench_k_clusters = 2;
    CHECK(bench_gather_report(bench, ok) == bench_gather_report(bench, ok));

    cfg.seed = 10;
    CHECK(demo_decode_report(cfg, nullptr) != r1);
}

TEST_CASE("commonality analysis on constructed traces") {
    // identical per-layer selections: every window overlaps fully
    std::ostringstream same;
    same << "step,layer,head,rank,slot\n";
    for (int step : {0, 1})
        for (int layer : {0, 1, 2})
            for (int rank : {0, 1, 2}) same << step << "," << layer << ",0," << rank << "," << 5 + 4 * rank << "\n";
    std::string curve;
    nlohmann::json j = nlohmann::json::parse(analyze_commonality_report(same.str(), 2, &curve));
    for (const auto& s : j["score"]) CHECK(s.get<double>() == doctest::Approx(1.0));
    CHECK(curve.rfind("m,score\n", 0) == 0);

    // disjoint-by-construction: zero overlap for every window
    std::ostringstream disj;
    disj << "step,layer,head,rank,slot\n";
    for (int layer : {0, 1, 2})
        for (int rank : {0, 1}) disj << "0," << layer << ",0," << rank << "," << 10 * layer + rank << "\n";
    j = nlohmann::json::parse(analyze_commonality_report(disj.str(), 2, nullptr));
    for (const auto& s : j["score"]) CHECK(s.get<double>() == doctest::Approx(0.0));

    // random trace matches the set-intersection oracle applied directly
    std::mt19937_64 rng(424242);
    std::ostringstream rnd;
    std::vector<std::vector<std::uint32_t>> lists(4);
    rnd << "step,layer,head,rank,slot\n";
    for (int layer = 0; layer < 4; ++layer) {
        for (int rank = 0; rank < 6; ++rank) {
            std::uint32_t slot;
            do {
                slot = rng() % 24;
            } while (std::find(lists[layer].begin(), lists[layer].end(), slot) != lists[layer].end());
            lists[layer].push_back(slot);
            rnd << "0," << layer << ",0," << rank << "," << slot << "\n";
        }
    }
    j = nlohmann::json::parse(analyze_commonality_report(rnd.str(), 3, nullptr));
    for (std::uint32_t m = 1; m <= 3; ++m)
        CHECK(j["score"][m - 1].get<double>() == doctest::Approx(commonality_score(lists, 6, m)));

    CHECK_THROWS_WITH_AS(analyze_commonality_report("step,layer,head,rank,slot\n1,2\n", 2, nullptr),
                         doctest::Contains("line 2"), std::runtime_error);
    CHECK_THROWS_AS(analyze_commonality_report("", 2, nullptr), std::runtime_error);
}

TEST_CASE("model and trace ingestion round trips") {
    const auto prefix = temp_prefix("ingest");
    const ModelSpec m = ModelSpec::random(2, 2, 4, 303);
    mpct_write(prefix.string() + ".wq.mpct", m.wq_tensor());
    mpct_write(prefix.string() + ".wk.mpct", m.wk_tensor());
    mpct_write(prefix.string() + ".wv.mpct", m.wv_tensor());
    mpct_write(prefix.string() + ".wo.mpct", m.wo_tensor());
    const ModelSpec back = ingest_weights(prefix.string());
    CHECK(back.layers == m.layers);
    CHECK(back.heads == m.heads);
    CHECK(back.dim == m.dim);
    CHECK(back.wq == m.wq);
    CHECK(back.wo == m.wo);

    const DecodeTrace tr = DecodeTrace::random(8, 3, m.width(), 304);
    mpct_write(prefix.string() + ".prompt.mpct", PlainTensor::from_reals({tr.prompt_rows, tr.width}, tr.prompt));
    mpct_write(prefix.string() + ".steps.mpct", PlainTensor::from_reals({tr.steps, tr.width}, tr.step_inputs));
    const DecodeTrace tback = ingest_trace(prefix.string());
    CHECK(tback.prompt_rows == tr.prompt_rows);
    CHECK(tback.steps == tr.steps);
    CHECK(tback.prompt == tr.prompt);
    CHECK(tback.step_inputs == tr.step_inputs);

    for (const char* suffix : {".wq.mpct", ".wk.mpct", ".wv.mpct", ".wo.mpct", ".prompt.mpct", ".steps.mpct"})
        std::filesystem::remove(prefix.string() + suffix);
}

TEST_CASE("ingestion rejects malformed files with byte offsets") {
    const auto prefix = temp_prefix("bad");
    const PlainTensor t = PlainTensor::from_reals({4, 2}, std::vector<double>(8, 1.0));
    mpct_write(prefix.string() + ".prompt.mpct", t);

    // truncate the payload: the error names the failing byte offset
    {
        std::ifstream in(prefix.string() + ".prompt.mpct", std::ios::binary);
        std::ostringstream buf;
        buf << in.rdbuf();
        std::ofstream out(prefix.string() + ".steps.mpct", std::ios::binary);
        out << buf.str().substr(0, 40);
    }
    CHECK_THROWS_WITH_AS(ingest_trace(prefix.string()), doctest::Contains("byte offset"), std::runtime_error);

    // rank mismatch: trace tensors must be [rows, width]
    mpct_write(prefix.string() + ".steps.mpct", PlainTensor::from_reals({8}, std::vector<double>(8, 0.0)));
    CHECK_THROWS_AS(ingest_trace(prefix.string()), std::invalid_argument);

    std::filesystem::remove(prefix.string() + ".prompt.mpct");
    std::filesystem::remove(prefix.string() + ".steps.mpct");
}

TEST_CASE("demo report carries labeled equivalence and byte columns") {
    RunConfig cfg;
    cfg.seed = 21;
    cfg.mode = "secure-ideal";
    cfg.layers = 2;
    cfg.heads = 1;
    cfg.dim = 8;
    cfg.prompt_rows = 16;
    cfg.steps = 2;
    cfg.eviction = EvictionConfig::preset_8_4();
    const nlohmann::json j = nlohmann::json::parse(demo_decode_report(cfg, nullptr));
    CHECK(j["equivalence"]["secure_sparse_vs_plain_sparse_max_abs"]["source"] == "oracle");
    CHECK(j["equivalence"]["secure_sparse_vs_plain_sparse_max_abs"]["value"].get<double>() <=
          std::ldexp(1.0, -8));
    CHECK(j["per_step_bytes"].size() == 2);
    for (const auto& row : j["per_step_bytes"]) {
        CHECK(row["sparse_bytes"]["source"] == "ledger");
        CHECK(row["sparse_bytes"]["value"].get<std::uint64_t>() > 0);
    }
    CHECK(j["ledger"]["sparse"].contains("similarity"));
    CHECK(j["ledger"]["sparse"].contains("gather"));

    RunConfig bad = cfg;
    bad.mode = "warp-drive";
    CHECK_THROWS_AS(demo_decode_report(bad, nullptr), std::invalid_argument);
}
