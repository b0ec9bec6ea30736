#include "mpcache/harness.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <map>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "json.hpp"
#include "mpcache/gather.hpp"
#include "mpcache/net.hpp"
#include "mpcache/nonlinear.hpp"
#include "mpcache/rss.hpp"
#include "mpcache/tensor.hpp"

namespace mpcache {

namespace {

using nlohmann::ordered_json;

std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

ordered_json labeled(double value, const char* source) {
    return ordered_json{{"value", value}, {"source", source}};
}

ordered_json labeled_u(std::uint64_t value, const char* source) {
    return ordered_json{{"value", value}, {"source", source}};
}

ordered_json phase_json(const PhaseCost& c) {
    ordered_json h = ordered_json::object();
    for (const auto& [w, n] : c.bit_width_hist) h[std::to_string(w)] = n;
    return ordered_json{{"rounds", c.rounds},
                        {"bytes_sent", c.bytes_sent},
                        {"mul_invocations", c.mul_invocations},
                        {"comparison_invocations", c.comparison_invocations},
                        {"equality_invocations", c.equality_invocations},
                        {"comparison_levels", c.comparison_levels},
                        {"bit_width_hist", h}};
}

ordered_json ledger_json(const CostLedger& led) {
    ordered_json j = ordered_json::object();
    for (const auto& [name, cost] : led.phases()) j[name] = phase_json(cost);
    j["total"] = phase_json(led.total());
    return j;
}

}  // namespace

std::string RunConfig::to_json() const {
    ordered_json j;
    j["subcommand"] = subcommand;
    j["seed"] = seed;
    j["mode"] = mode;
    j["eviction"] = nlohmann::json::parse(eviction.to_json());
    j["layers"] = layers;
    j["heads"] = heads;
    j["dim"] = dim;
    j["prompt_rows"] = prompt_rows;
    j["steps"] = steps;
    j["synthetic_prompt"] = synthetic_prompt;
    j["planted"] = planted;
    j["weights_prefix"] = weights_prefix;
    j["trace_prefix"] = trace_prefix;
    j["bench_tokens"] = bench_tokens;
    j["bench_clusters"] = bench_clusters;
    j["bench_k_tokens"] = bench_k_tokens;
    j["bench_k_clusters"] = bench_k_clusters;
    j["bench_cols"] = bench_cols;
    j["trace_csv"] = trace_csv;
    j["m_max"] = m_max;
    j["out_report"] = out_report;
    j["out_csv"] = out_csv;
    return j.dump(2);
}

RunConfig RunConfig::from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    RunConfig c;
    c.subcommand = j.value("subcommand", c.subcommand);
    c.seed = j.value("seed", c.seed);
    c.mode = j.value("mode", c.mode);
    if (j.contains("eviction")) c.eviction = EvictionConfig::from_json(j["eviction"].dump());
    c.layers = j.value("layers", c.layers);
    c.heads = j.value("heads", c.heads);
    c.dim = j.value("dim", c.dim);
    c.prompt_rows = j.value("prompt_rows", c.prompt_rows);
    c.steps = j.value("steps", c.steps);
    c.synthetic_prompt = j.value("synthetic_prompt", c.synthetic_prompt);
    c.planted = j.value("planted", c.planted);
    c.weights_prefix = j.value("weights_prefix", c.weights_prefix);
    c.trace_prefix = j.value("trace_prefix", c.trace_prefix);
    c.bench_tokens = j.value("bench_tokens", c.bench_tokens);
    c.bench_clusters = j.value("bench_clusters", c.bench_clusters);
    c.bench_k_tokens = j.value("bench_k_tokens", c.bench_k_tokens);
    c.bench_k_clusters = j.value("bench_k_clusters", c.bench_k_clusters);
    c.bench_cols = j.value("bench_cols", c.bench_cols);
    c.trace_csv = j.value("trace_csv", c.trace_csv);
    c.m_max = j.value("m_max", c.m_max);
    c.out_report = j.value("out_report", c.out_report);
    c.out_csv = j.value("out_csv", c.out_csv);
    return c;
}

std::uint64_t effective_seed(const RunConfig& cfg) {
    if (const char* env = std::getenv("MPCACHE_SEED")) {
        char* end = nullptr;
        const unsigned long long v = std::strtoull(env, &end, 10);
        if (end == env || *end != '\0') throw std::invalid_argument("MPCACHE_SEED is not an integer");
        return v;
    }
    return cfg.seed;
}

// ---------- selftest ----------

namespace {

struct Probe {
    const char* name;
    std::string error;  // empty means pass
};

std::vector<double> dyadics(std::size_t n, std::uint64_t salt) {
    std::mt19937_64 rng(mix64(salt));
    std::vector<double> v(n);
    for (auto& x : v) x = std::ldexp(double(int(rng() % 2048)) - 1024.0, -10);
    return v;
}

std::string trunc_probe(std::uint64_t seed, std::int64_t fault, Backend backend) {
    PartyNet net(seed, backend);
    net.trunc_fault = fault;
    const std::size_t n = 64;
    const std::vector<double> av = dyadics(n, seed ^ 1), bv = dyadics(n, seed ^ 2);
    const ShareTensor a = share(net, PlainTensor::from_reals({std::uint32_t(n)}, av));
    const ShareTensor b = share(net, PlainTensor::from_reals({std::uint32_t(n)}, bv));
    const ShareTensor c = sec_mul(net, a, b);
    const std::vector<ring_t> got = reconstruct_raws(net, c);
    for (std::size_t i = 0; i < n; ++i) {
        const ring_t want = fx::truncate(ring_mul(fx::encode(av[i]), fx::encode(bv[i])));
        if (got[i] != want) {
            std::ostringstream os;
            os << "lane " << i << ": product truncation mismatch";
            return os.str();
        }
    }
    return {};
}

std::string compare_probe(std::uint64_t seed, std::int64_t fault, Backend backend) {
    PartyNet net(seed, backend);
    net.trunc_fault = fault;
    std::mt19937_64 rng(mix64(seed ^ 3));
    const std::size_t n = 512;
    std::vector<ring_t> av(n), bv(n);
    for (std::size_t i = 0; i < n; ++i) {
        av[i] = rng() >> (i % 3 == 0 ? 0 : 40);
        bv[i] = i % 5 == 0 ? av[i] : rng() >> (i % 3 == 1 ? 0 : 40);
    }
    const ShareTensor a = share_raws(net, {std::uint32_t(n)}, av);
    const ShareTensor b = share_raws(net, {std::uint32_t(n)}, bv);
    const std::vector<ring_t> got = reconstruct_raws(net, sec_less(net, a, b));
    for (std::size_t i = 0; i < n; ++i) {
        const ring_t want = static_cast<std::int64_t>(av[i]) < static_cast<std::int64_t>(bv[i]) ? 1 : 0;
        if (got[i] != want) return "signed comparison mismatch";
    }
    return {};
}

std::string topk_probe(std::uint64_t seed, std::int64_t fault) {
    PartyNet net(seed, Backend::Ideal);
    net.trunc_fault = fault;
    std::mt19937_64 rng(mix64(seed ^ 4));
    for (int rep = 0; rep < 10; ++rep) {
        const std::uint32_t n = 8 + rng() % 40;
        const std::uint32_t k = 1 + rng() % n;
        std::vector<double> v = dyadics(n, seed ^ (rep + 100));
        const TopkResult res = sec_topk(net, share(net, PlainTensor::from_reals({n}, v)), k);
        std::vector<std::uint32_t> order(n);
        for (std::uint32_t i = 0; i < n; ++i) order[i] = i;
        std::stable_sort(order.begin(), order.end(),
                         [&](std::uint32_t x, std::uint32_t y) { return v[x] > v[y]; });
        for (std::uint32_t i = 0; i < k; ++i) {
            if (reconstruct_index(net, res.indices[i]) != order[i]) return "top-k order mismatch";
        }
    }
    return {};
}

std::string softmax_probe(std::uint64_t seed, std::int64_t fault) {
    PartyNet net(seed, Backend::Ideal);
    net.trunc_fault = fault;
    std::mt19937_64 rng(mix64(seed ^ 5));
    std::normal_distribution<double> g(0.0, 2.0);
    const double tol = std::ldexp(1.0, -8);
    for (int rep = 0; rep < 8; ++rep) {
        const std::uint32_t n = 64;
        std::vector<double> v(n);
        for (auto& x : v) x = g(rng);
        const PlainTensor p = reconstruct(net, sec_softmax(net, share(net, PlainTensor::from_reals({n}, v))));
        double mx = v[0];
        for (double x : v) mx = std::max(mx, x);
        double sum = 0;
        std::vector<double> want(n);
        for (std::uint32_t i = 0; i < n; ++i) sum += want[i] = std::exp(v[i] - mx);
        for (std::uint32_t i = 0; i < n; ++i) {
            if (std::fabs(p.at(i) - want[i] / sum) > tol) return "softmax element out of tolerance";
        }
    }
    return {};
}

std::string gather_probe(std::uint64_t seed, std::int64_t fault) {
    PartyNet net(seed, Backend::Ideal);
    net.trunc_fault = fault;
    std::mt19937_64 rng(mix64(seed ^ 6));
    const std::uint32_t slots = 16, block = 4, cols = 3;
    const std::vector<double> tv = dyadics(std::size_t{slots} * block * cols, seed ^ 7);
    const ShareTensor table = share(net, PlainTensor::from_reals({slots * block, cols}, tv));
    std::vector<SecretIndex> ids;
    std::vector<std::uint32_t> want;
    for (int i = 0; i < 5; ++i) {
        const std::uint32_t id = rng() % slots;
        want.push_back(id);
        ids.push_back(share_index(net, id, index_width(slots)));
    }
    const PlainTensor got = reconstruct(net, gather_blocks(net, ids, table, block));
    for (std::size_t i = 0; i < want.size(); ++i) {
        for (std::uint32_t r = 0; r < block; ++r)
            for (std::uint32_t c = 0; c < cols; ++c) {
                const double expect = tv[(std::size_t{want[i]} * block + r) * cols + c];
                if (std::fabs(got.at((i * block + r) * cols + c) - expect) > 0) return "gathered row mismatch";
            }
    }
    return {};
}

std::string static_evict_probe(std::uint64_t seed, std::int64_t fault) {
    PartyNet net(seed, Backend::Ideal);
    net.trunc_fault = fault;
    std::mt19937_64 rng(mix64(seed ^ 8));
    for (int rep = 0; rep < 6; ++rep) {
        const std::uint32_t t = 24 + rng() % 40;
        const std::vector<double> scores = dyadics(t, seed ^ (rep + 200));
        const std::uint32_t w = observation_rows(t, 0.2);
        std::vector<std::uint32_t> always(w);
        for (std::uint32_t i = 0; i < w; ++i) always[i] = t - w + i;
        const std::vector<std::uint32_t> want = static_evict_plain(scores, 0.3, always);
        const StaticEvictResult res =
            static_evict_secure(net, share(net, PlainTensor::from_reals({t}, scores)), 0.3, always);
        if (res.count != want.size()) return "retained count mismatch";
        const std::vector<ring_t> ind = reconstruct_raws(net, res.indicator);
        for (std::uint32_t i = 0; i < t; ++i) {
            const bool kept = std::find(want.begin(), want.end(), i) != want.end();
            if (ind[i] != (kept ? 1u : 0u)) return "indicator mismatch";
        }
    }
    return {};
}

std::string bound_probe(std::uint64_t seed) {
    std::mt19937_64 rng(mix64(seed ^ 9));
    std::normal_distribution<double> g(0.0, 1.0);
    for (int rep = 0; rep < 2000; ++rep) {
        const std::uint32_t d = rep % 2 ? 8 : 16, s = 2 + rng() % 7;
        std::vector<double> q(d), k(std::size_t{s} * d);
        for (auto& x : q) x = g(rng);
        for (auto& x : k) x = g(rng);
        const auto sums = build_summaries_plain(k, s, d, s);
        const double ub = sim_upper_bound_plain(q, sums[0]);
        const double mx = sim_exact_max_plain(q, k, d, 0, s);
        if (ub < mx - 1e-12) return "upper bound violated";
    }
    return {};
}

std::string pipeline_probe(std::uint64_t seed, std::int64_t fault) {
    const ModelSpec m = ModelSpec::random(2, 1, 4, seed ^ 10);
    const DecodeTrace tr = DecodeTrace::random(8, 2, m.width(), seed ^ 11);
    EvictionConfig sparse_cfg = EvictionConfig::no_eviction();
    sparse_cfg.levels = {{2, 1.0}};
    sparse_cfg.final_keep = 1.0;
    PlainEngine full(m, EvictionConfig::no_eviction());
    PlainEngine sparse(m, sparse_cfg);
    full.prefill(tr);
    sparse.prefill(tr);
    PartyNet net(seed, Backend::Ideal);
    net.trunc_fault = fault;
    SecureEngine sec(net, m, sparse_cfg);
    sec.prefill(tr);
    const double tol = std::ldexp(1.0, -8);
    for (std::uint32_t i = 0; i < tr.steps; ++i) {
        std::vector<double> x(tr.step_inputs.begin() + std::size_t{i} * tr.width,
                              tr.step_inputs.begin() + std::size_t{i + 1} * tr.width);
        const std::vector<double> a = full.step(x);
        const std::vector<double> b = sparse.step(x);
        const std::vector<double> c = sec.step(x);
        if (a != b) return "full-budget sparse diverged from full attention in plaintext";
        for (std::size_t e = 0; e < a.size(); ++e) {
            if (std::fabs(a[e] - c[e]) > tol) return "secure decode out of tolerance";
        }
    }
    return {};
}

std::string backend_parity_probe(std::uint64_t seed, std::int64_t fault) {
    const ModelSpec m = ModelSpec::random(1, 1, 4, seed ^ 12);
    const DecodeTrace tr = DecodeTrace::random(5, 1, m.width(), seed ^ 13);
    PartyNet nb(seed, Backend::Boolean), ni(seed, Backend::Ideal);
    nb.trunc_fault = fault;
    ni.trunc_fault = fault;
    SecureEngine sb(nb, m, EvictionConfig::no_eviction());
    SecureEngine si(ni, m, EvictionConfig::no_eviction());
    sb.prefill(tr);
    si.prefill(tr);
    std::vector<double> x(tr.step_inputs.begin(), tr.step_inputs.begin() + tr.width);
    if (sb.step(x) != si.step(x)) return "boolean and ideal backends disagree";
    if (nb.ledger().total().comparison_invocations != ni.ledger().total().comparison_invocations)
        return "backend comparison counts disagree";
    return {};
}

}  // namespace

int run_selftest(std::uint64_t seed, std::ostream& log, std::int64_t trunc_fault) {
    std::vector<Probe> probes;
    probes.push_back({"mul-truncation-boolean", trunc_probe(seed, trunc_fault, Backend::Boolean)});
    probes.push_back({"mul-truncation-ideal", trunc_probe(seed, trunc_fault, Backend::Ideal)});
    probes.push_back({"comparison-boolean", compare_probe(seed, trunc_fault, Backend::Boolean)});
    probes.push_back({"comparison-ideal", compare_probe(seed, trunc_fault, Backend::Ideal)});
    probes.push_back({"topk-vs-sort", topk_probe(seed, trunc_fault)});
    probes.push_back({"softmax-accuracy", softmax_probe(seed, trunc_fault)});
    probes.push_back({"gather-exactness", gather_probe(seed, trunc_fault)});
    probes.push_back({"static-eviction-oracle", static_evict_probe(seed, trunc_fault)});
    probes.push_back({"similarity-upper-bound", bound_probe(seed)});
    probes.push_back({"decode-pipeline", pipeline_probe(seed, trunc_fault)});
    probes.push_back({"backend-parity", backend_parity_probe(seed, trunc_fault)});
    int failed = 0;
    for (const Probe& p : probes) {
        if (p.error.empty()) {
            log << "[ok]   " << p.name << "\n";
        } else {
            log << "[fail] " << p.name << ": " << p.error << "\n";
            ++failed;
        }
    }
    return failed;
}

// ---------- bench-gather ----------

std::string bench_gather_report(const RunConfig& cfg, bool& ok) {
    const std::uint32_t t = cfg.bench_tokens, c = cfg.bench_clusters;
    const std::uint32_t k1 = cfg.bench_k_tokens, k2 = cfg.bench_k_clusters, cols = cfg.bench_cols;
    if (t == 0 || c == 0 || t % c != 0) throw std::invalid_argument("bench-gather: clusters must divide tokens");
    if (k1 > t || k2 > c) throw std::invalid_argument("bench-gather: fetch count exceeds table");
    const std::uint32_t block = t / c;
    const Backend backend = cfg.mode == "secure-boolean" ? Backend::Boolean : Backend::Ideal;
    const std::uint64_t seed = effective_seed(cfg);
    const GatherCostModel model = gather_cost_model(t, c, k1, k2);

    PartyNet net(seed, backend);
    std::mt19937_64 rng(mix64(seed ^ 0xbe));
    const auto run = [&](std::uint32_t slots, std::uint32_t blk, std::uint32_t fetches) {
        const ShareTensor table =
            share(net, PlainTensor::from_reals({slots * blk, cols}, dyadics(std::size_t{slots} * blk * cols, rng())));
        std::vector<SecretIndex> ids;
        ids.reserve(fetches);
        for (std::uint32_t i = 0; i < fetches; ++i) ids.push_back(share_index(net, rng() % slots, index_width(slots)));
        const PhaseCost before = net.ledger().phases().count("gather") ? net.ledger().phases().at("gather") : PhaseCost{};
        (void)gather_blocks(net, ids, table, blk);
        PhaseCost after = net.ledger().phases().at("gather");
        PhaseCost delta;
        delta.equality_invocations = after.equality_invocations - before.equality_invocations;
        for (const auto& [w, n] : after.bit_width_hist) {
            const auto b = before.bit_width_hist.count(w) ? before.bit_width_hist.at(w) : 0;
            if (n > b) delta.bit_width_hist[w] = n - b;
        }
        return delta;
    };

    const PhaseCost token = run(t, 1, k1);
    const PhaseCost cluster = run(c, block, k2);

    ordered_json checks = ordered_json::array();
    bool all = true;
    const auto check = [&](const char* name, bool pass) {
        checks.push_back({{"name", name}, {"pass", pass}});
        all = all && pass;
    };
    check("token ledger equalities match the model", token.equality_invocations == model.token.equality_tests);
    check("cluster ledger equalities match the model", cluster.equality_invocations == model.cluster.equality_tests);
    check("token equality width matches the model",
          token.bit_width_hist.size() == 1 && token.bit_width_hist.count(model.token.width) &&
              token.bit_width_hist.at(model.token.width) == model.token.equality_tests);
    check("cluster equality width matches the model",
          cluster.bit_width_hist.size() == 1 && cluster.bit_width_hist.count(model.cluster.width) &&
              cluster.bit_width_hist.at(model.cluster.width) == model.cluster.equality_tests);
    check("per retrieved index: token equalities equal the table size",
          k1 != 0 && token.equality_invocations % k1 == 0 && token.equality_invocations / k1 == t);
    check("per retrieved index: cluster equalities equal the cluster count",
          k2 != 0 && cluster.equality_invocations % k2 == 0 && cluster.equality_invocations / k2 == c);
    ok = all;

    ordered_json j;
    j["config"] = ordered_json{{"tokens", t}, {"clusters", c},   {"k_tokens", k1},
                               {"k_clusters", k2}, {"cols", cols}, {"mode", cfg.mode}};
    j["effective_seed"] = seed;  // MPCACHE_SEED overrides config.seed, so echo what ran
    j["token"] = ordered_json{{"fetches", k1},
                              {"slots", labeled_u(t, "formula")},
                              {"width", labeled_u(std::uint64_t(model.token.width), "formula")},
                              {"equality_tests_model", labeled_u(model.token.equality_tests, "formula")},
                              {"equality_tests_ledger", labeled_u(token.equality_invocations, "ledger")},
                              {"per_index", labeled_u(token.equality_invocations / std::max<std::uint32_t>(k1, 1), "ledger")},
                              {"bits_model", labeled_u(model.token.bits, "formula")}};
    j["cluster"] = ordered_json{{"fetches", k2},
                                {"slots", labeled_u(c, "formula")},
                                {"width", labeled_u(std::uint64_t(model.cluster.width), "formula")},
                                {"equality_tests_model", labeled_u(model.cluster.equality_tests, "formula")},
                                {"equality_tests_ledger", labeled_u(cluster.equality_invocations, "ledger")},
                                {"per_index", labeled_u(cluster.equality_invocations / std::max<std::uint32_t>(k2, 1), "ledger")},
                                {"bits_model", labeled_u(model.cluster.bits, "formula")}};
    j["comm_ratio"] = labeled(model.comm_ratio, "formula");
    j["checks"] = checks;
    j["note"] = "bit counts are the analytic selection-vector cost of the one-hot equality tests";
    return j.dump(2);
}

// ---------- demo-decode ----------

namespace {

std::vector<double> step_input(const DecodeTrace& tr, std::uint32_t i) {
    return {tr.step_inputs.begin() + std::size_t{i} * tr.width,
            tr.step_inputs.begin() + std::size_t{i + 1} * tr.width};
}

double max_abs(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

// planted-relevance instance: three fine clusters carry keys 10x larger in
// the query direction than any noise coordinate
double planted_recall_case(std::uint64_t seed, double eta) {
    const std::uint32_t d = 16, p = 64;
    const std::vector<EvictionLevel> levels = {{8, 0.5}, {4, 1.0}};
    const std::vector<std::uint32_t> planted = {2, 7, 11};
    std::mt19937_64 rng(mix64(seed ^ 0x91a));
    std::uniform_real_distribution<double> u(-0.5, 0.5);
    std::vector<double> k(std::size_t{p} * d);
    for (auto& x : k) x = u(rng);
    for (std::uint32_t g : planted) {
        for (std::uint32_t r = g * 4; r < (g + 1) * 4; ++r) {
            for (std::uint32_t c0 = 0; c0 < d; ++c0) k[std::size_t{r} * d + c0] = c0 == 0 ? 10.0 : 0.0;
        }
    }
    const HierarchyLayout layout = make_layout(p, levels);
    std::vector<std::vector<SummaryPlain>> sums(levels.size());
    sums[1] = build_summaries_plain(k, p, d, layout.sizes.back());
    sums[0] = fold_summaries_plain(sums[1], layout.child_factor(0));
    std::vector<LevelTablePlain> tables(levels.size());
    for (std::size_t j = 0; j < levels.size(); ++j)
        tables[j] = level_table_plain(sums[j], 0.6, layout.slots[j], d);
    std::vector<double> q(d, 0.0);
    q[0] = 1.0;
    const std::vector<std::uint32_t> sel =
        hierarchical_select_plain(q, tables, LevelTablePlain{}, layout, eta, levels, p);
    return selection_recall(sel, planted);
}

}  // namespace

std::string demo_decode_report(const RunConfig& cfg, std::string* selection_csv) {
    cfg.eviction.validate();
    if (cfg.mode != "plaintext" && cfg.mode != "secure-ideal" && cfg.mode != "secure-boolean")
        throw std::invalid_argument("demo-decode: unknown mode " + cfg.mode);
    const std::uint64_t seed = effective_seed(cfg);
    const ModelSpec model = cfg.weights_prefix.empty()
                                ? ModelSpec::random(cfg.layers, cfg.heads, cfg.dim, mix64(seed ^ 0x6d))
                                : ingest_weights(cfg.weights_prefix);
    DecodeTrace trace;
    if (cfg.trace_prefix.empty()) {
        trace = DecodeTrace::random(cfg.prompt_rows, cfg.steps, model.width(), mix64(seed ^ 0x74));
    } else {
        trace = ingest_trace(cfg.trace_prefix);
        if (trace.width != model.width())
            throw std::invalid_argument("demo-decode: trace width does not match the model");
    }
    const EvictionConfig full_cfg = EvictionConfig::no_eviction();

    PlainEngine plain_sparse(model, cfg.eviction);
    PlainEngine plain_full(model, full_cfg);
    if (cfg.synthetic_prompt) {
        plain_sparse.prefill_synthetic(trace.prompt_rows, seed ^ 0x5ca1e);
        plain_full.prefill_synthetic(trace.prompt_rows, seed ^ 0x5ca1e);
    } else {
        plain_sparse.prefill(trace);
        plain_full.prefill(trace);
    }

    std::ostringstream csv;
    csv << "step,layer,head,rank,slot\n";
    std::vector<std::vector<double>> plain_sparse_out(trace.steps), plain_full_out(trace.steps);
    double plain_delta = 0.0;
    for (std::uint32_t i = 0; i < trace.steps; ++i) {
        StepRecord rec;
        plain_sparse_out[i] = plain_sparse.step(step_input(trace, i), &rec);
        plain_full_out[i] = plain_full.step(step_input(trace, i));
        plain_delta = std::max(plain_delta, max_abs(plain_sparse_out[i], plain_full_out[i]));
        for (std::uint32_t l = 0; l < model.layers; ++l)
            for (std::uint32_t h = 0; h < model.heads; ++h)
                for (std::size_t r = 0; r < rec.selected.at(l).at(h).size(); ++r)
                    csv << i << "," << l << "," << h << "," << r << "," << rec.selected[l][h][r] << "\n";
    }

    ordered_json j;
    j["config"] = nlohmann::json::parse(cfg.to_json());
    j["effective_seed"] = seed;  // MPCACHE_SEED overrides config.seed, so echo what ran
    j["model"] = ordered_json{{"layers", model.layers},
                              {"heads", model.heads},
                              {"dim", model.dim},
                              {"source", cfg.weights_prefix.empty() ? std::string("random(seed)") : cfg.weights_prefix}};
    const PlainHeadState& h00 = plain_sparse.head(0, 0);
    j["eviction_summary"] =
        ordered_json{{"prompt_rows", trace.prompt_rows},
                     {"retained_rows", labeled_u(h00.prompt_rows, "formula")},
                     {"observation_rows", labeled_u(observation_rows(trace.prompt_rows, cfg.eviction.observation_frac),
                                                    "formula")},
                     {"fine_cluster_size", h00.layout.fine_size()},
                     {"fine_slots", h00.layout.fine_slots()},
                     {"appended_clusters_end", labeled_u(h00.appended, "formula")},
                     {"token_budget", labeled_u(eta_token_budget(cfg.eviction.final_keep, h00.prompt_rows), "formula")}};
    j["equivalence"] = ordered_json{{"plain_sparse_vs_plain_full_max_abs", labeled(plain_delta, "oracle")}};

    if (cfg.mode != "plaintext") {
        const Backend backend = cfg.mode == "secure-boolean" ? Backend::Boolean : Backend::Ideal;
        PartyNet net_sparse(seed, backend), net_full(seed, backend);
        SecureEngine sec_sparse(net_sparse, model, cfg.eviction);
        SecureEngine sec_full(net_full, model, full_cfg);
        if (cfg.synthetic_prompt) {
            sec_sparse.prefill_synthetic(trace.prompt_rows, seed ^ 0x5ca1e);
            sec_full.prefill_synthetic(trace.prompt_rows, seed ^ 0x5ca1e);
        } else {
            sec_sparse.prefill(trace);
            sec_full.prefill(trace);
        }
        const std::uint64_t prefill_sparse_bytes = net_sparse.ledger().total().bytes_sent;
        const std::uint64_t prefill_full_bytes = net_full.ledger().total().bytes_sent;
        double secure_delta = 0.0, secure_full_delta = 0.0;
        std::vector<std::uint64_t> sparse_bytes, full_bytes;
        for (std::uint32_t i = 0; i < trace.steps; ++i) {
            const std::uint64_t s0 = net_sparse.ledger().total().bytes_sent;
            const std::vector<double> bs = sec_sparse.step(step_input(trace, i));
            sparse_bytes.push_back(net_sparse.ledger().total().bytes_sent - s0);
            const std::uint64_t f0 = net_full.ledger().total().bytes_sent;
            const std::vector<double> bf = sec_full.step(step_input(trace, i));
            full_bytes.push_back(net_full.ledger().total().bytes_sent - f0);
            secure_delta = std::max(secure_delta, max_abs(bs, plain_sparse_out[i]));
            secure_full_delta = std::max(secure_full_delta, max_abs(bf, plain_full_out[i]));
        }
        j["equivalence"]["secure_sparse_vs_plain_sparse_max_abs"] = labeled(secure_delta, "oracle");
        j["equivalence"]["secure_full_vs_plain_full_max_abs"] = labeled(secure_full_delta, "oracle");
        ordered_json steps_json = ordered_json::array();
        for (std::uint32_t i = 0; i < trace.steps; ++i) {
            steps_json.push_back(ordered_json{
                {"step", i},
                {"sparse_bytes", labeled_u(sparse_bytes[i], "ledger")},
                {"full_bytes", labeled_u(full_bytes[i], "ledger")},
                {"reduction_factor",
                 labeled(sparse_bytes[i] ? double(full_bytes[i]) / double(sparse_bytes[i]) : 0.0, "ledger")}});
        }
        j["per_step_bytes"] = steps_json;
        j["per_step_note"] = "measured on this configuration; magnitudes are not asserted claims";
        j["prefill_bytes"] = ordered_json{{"sparse", labeled_u(prefill_sparse_bytes, "ledger")},
                                          {"full", labeled_u(prefill_full_bytes, "ledger")}};
        j["ledger"] = ordered_json{{"sparse", ledger_json(net_sparse.ledger())},
                                   {"full", ledger_json(net_full.ledger())}};
    }

    if (cfg.planted) {
        ordered_json etas = ordered_json::array(), recalls = ordered_json::array();
        for (double eta : {0.15, 0.2, 0.5, 1.0}) {
            etas.push_back(eta);
            recalls.push_back(planted_recall_case(seed, eta));
        }
        j["planted_recall"] = ordered_json{{"eta", etas}, {"recall", recalls}, {"source", "oracle"}};
    }

    if (selection_csv) *selection_csv = csv.str();
    return j.dump(2);
}

// ---------- analyze-commonality ----------

std::string analyze_commonality_report(const std::string& csv_text, std::uint32_t m_max,
                                       std::string* csv_out) {
    // rows: step,layer,head,rank,slot
    struct Key {
        std::uint32_t step, head;
        bool operator<(const Key& o) const { return step != o.step ? step < o.step : head < o.head; }
    };
    std::map<Key, std::map<std::uint32_t, std::vector<std::uint32_t>>> rows;
    std::istringstream in(csv_text);
    std::string line;
    std::size_t lineno = 0;
    std::uint32_t max_layer = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        if (lineno == 1 && line.find("step") != std::string::npos) continue;
        std::array<std::uint32_t, 5> f{};
        std::size_t pos = 0;
        for (int i = 0; i < 5; ++i) {
            const std::size_t comma = i < 4 ? line.find(',', pos) : line.size();
            if (comma == std::string::npos) {
                std::ostringstream os;
                os << "trace line " << lineno << ": expected 5 comma-separated fields";
                throw std::runtime_error(os.str());
            }
            try {
                f[i] = static_cast<std::uint32_t>(std::stoul(line.substr(pos, comma - pos)));
            } catch (const std::exception&) {
                std::ostringstream os;
                os << "trace line " << lineno << ": field " << i + 1 << " is not an integer";
                throw std::runtime_error(os.str());
            }
            pos = comma + 1;
        }
        max_layer = std::max(max_layer, f[1]);
        rows[{f[0], f[2]}][f[1]].push_back(f[4]);
    }
    if (rows.empty()) throw std::runtime_error("trace is empty");
    const std::uint32_t layer_count = max_layer + 1;

    ordered_json ms = ordered_json::array(), scores = ordered_json::array();
    std::ostringstream curve;
    curve << "m,score\n";
    for (std::uint32_t m = 1; m <= m_max; ++m) {
        double acc = 0.0;
        std::size_t cases = 0;
        for (const auto& [key, per_layer_map] : rows) {
            std::vector<std::vector<std::uint32_t>> per_layer(layer_count);
            std::uint32_t k = 0;
            for (const auto& [l, slots] : per_layer_map) {
                per_layer[l] = slots;
                k = k == 0 ? std::uint32_t(slots.size()) : std::min<std::uint32_t>(k, slots.size());
            }
            acc += commonality_score(per_layer, k, m);
            ++cases;
        }
        const double score = cases ? acc / double(cases) : 0.0;
        ms.push_back(m);
        scores.push_back(score);
        curve << m << "," << score << "\n";
    }
    if (csv_out) *csv_out = curve.str();
    ordered_json j;
    j["layers"] = layer_count;
    j["cases"] = rows.size();
    j["m"] = ms;
    j["score"] = scores;
    j["source"] = "oracle";
    return j.dump(2);
}

// ---------- ingestion ----------

ModelSpec ingest_weights(const std::string& prefix) {
    const PlainTensor wq = mpct_read(prefix + ".wq.mpct");
    const PlainTensor wk = mpct_read(prefix + ".wk.mpct");
    const PlainTensor wv = mpct_read(prefix + ".wv.mpct");
    const PlainTensor wo = mpct_read(prefix + ".wo.mpct");
    return ModelSpec::from_tensors(wq, wk, wv, wo);
}

DecodeTrace ingest_trace(const std::string& prefix) {
    const PlainTensor prompt = mpct_read(prefix + ".prompt.mpct");
    const PlainTensor steps = mpct_read(prefix + ".steps.mpct");
    if (prompt.dims.size() != 2 || steps.dims.size() != 2)
        throw std::invalid_argument("trace tensors must be rank 2 [rows, width]");
    if (prompt.dims[1] != steps.dims[1])
        throw std::invalid_argument("prompt and step tensors disagree on width");
    if (prompt.dims[0] == 0) throw std::invalid_argument("trace prompt has no rows");
    DecodeTrace tr;
    tr.prompt_rows = prompt.dims[0];
    tr.steps = steps.dims[0];
    tr.width = prompt.dims[1];
    tr.prompt = prompt.reals;
    tr.step_inputs = steps.reals;
    return tr;
}

}  // namespace mpcache
