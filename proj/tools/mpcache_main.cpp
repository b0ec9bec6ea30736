// Command-line driver: selftest, bench-gather, demo-decode,
// analyze-commonality, ingest-check.  Exit codes: 0 ok, 1 property
// failure, 2 config or IO error.
#include <cstdint>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mpcache/harness.hpp"
#include "mpcache/tensor.hpp"

namespace {

using mpcache::RunConfig;

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

void spill(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << text;
}

void emit(const std::string& report, const std::string& out_path) {
    if (out_path.empty()) {
        std::cout << report << "\n";
    } else {
        spill(out_path, report);
        std::cout << "wrote " << out_path << "\n";
    }
}

// "8:0.5,4:1.0" -> levels; "none" or "" -> empty
std::vector<mpcache::EvictionLevel> parse_levels(const std::string& text) {
    std::vector<mpcache::EvictionLevel> levels;
    if (text.empty() || text == "none") return levels;
    std::istringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
        const std::size_t colon = item.find(':');
        if (colon == std::string::npos)
            throw std::invalid_argument("--levels entries must look like size:keep_ratio");
        mpcache::EvictionLevel lv;
        try {
            lv.cluster_size = static_cast<std::uint32_t>(std::stoul(item.substr(0, colon)));
            lv.keep_ratio = std::stod(item.substr(colon + 1));
        } catch (const std::exception&) {
            throw std::invalid_argument("--levels: cannot parse entry '" + item + "'");
        }
        levels.push_back(lv);
    }
    return levels;
}

struct FlagBinding {
    std::string levels_text;
    std::vector<CLI::Option*> levels_opts;  // one per subcommand, same bound string

    bool levels_given() const {
        for (const CLI::Option* o : levels_opts)
            if (o->count()) return true;
        return false;
    }
};

// every RunConfig field gets a flag of the same name; flags beat config-file values
void add_config_flags(CLI::App* sub, RunConfig& cfg, FlagBinding& bind) {
    sub->add_option("--config", "JSON RunConfig file (flags given here override its values)")
        ->type_name("FILE");
    sub->add_option("--seed", cfg.seed, "run seed (MPCACHE_SEED env wins over both)");
    sub->add_option("--mode", cfg.mode, "plaintext | secure-ideal | secure-boolean");
    sub->add_option("--layers", cfg.layers);
    sub->add_option("--heads", cfg.heads);
    sub->add_option("--dim", cfg.dim, "per-head dimension");
    sub->add_option("--prompt-rows", cfg.prompt_rows);
    sub->add_option("--steps", cfg.steps, "decode steps after prefill");
    sub->add_flag("--synthetic-prompt,!--no-synthetic-prompt", cfg.synthetic_prompt,
                  "install a synthetic retained cache instead of running prefill");
    sub->add_flag("--planted,!--no-planted", cfg.planted,
                  "add the planted-relevance recall experiment to the report");
    sub->add_option("--weights-prefix", cfg.weights_prefix, "read model from PREFIX.w{q,k,v,o}.mpct");
    sub->add_option("--trace-prefix", cfg.trace_prefix, "read trace from PREFIX.{prompt,steps}.mpct");
    sub->add_option("--static-evict-ratio", cfg.eviction.static_evict_ratio);
    sub->add_option("--observation-frac", cfg.eviction.observation_frac);
    bind.levels_opts.push_back(sub->add_option("--levels", bind.levels_text,
                                               "cluster hierarchy, e.g. 32:0.5,16:1.0 ('none' disables)"));
    sub->add_option("--final-keep", cfg.eviction.final_keep, "token budget fraction");
    sub->add_option("--alpha", cfg.eviction.alpha, "summary blend coefficient");
    sub->add_option("--share-skip", cfg.eviction.share_skip);
    sub->add_option("--share-group", cfg.eviction.share_group);
    sub->add_flag("--aggregate-heads,!--no-aggregate-heads", cfg.eviction.aggregate_heads);
    sub->add_option("--bench-tokens", cfg.bench_tokens);
    sub->add_option("--bench-clusters", cfg.bench_clusters);
    sub->add_option("--bench-k-tokens", cfg.bench_k_tokens);
    sub->add_option("--bench-k-clusters", cfg.bench_k_clusters);
    sub->add_option("--bench-cols", cfg.bench_cols);
    sub->add_option("--trace-csv", cfg.trace_csv, "selection trace CSV to analyze");
    sub->add_option("--m-max", cfg.m_max, "largest adjacent-layer window");
    sub->add_option("--out-report", cfg.out_report, "write the JSON report here instead of stdout");
    sub->add_option("--out-csv", cfg.out_csv, "write the CSV side output here");
}

void describe(const std::string& label, const mpcache::PlainTensor& t) {
    std::cout << label << ": dims [";
    for (std::size_t i = 0; i < t.dims.size(); ++i) std::cout << (i ? ", " : "") << t.dims[i];
    std::cout << "], dtype " << (t.dtype == mpcache::DType::Real64 ? "real64" : "raw")
              << ", elements " << t.numel() << "\n";
}

int cmd_selftest(const RunConfig& cfg, std::int64_t trunc_fault) {
    const int failed = mpcache::run_selftest(mpcache::effective_seed(cfg), std::cout, trunc_fault);
    if (failed) {
        std::cout << failed << " properties failed\n";
        return 1;
    }
    std::cout << "all properties passed\n";
    return 0;
}

int cmd_bench_gather(const RunConfig& cfg) {
    bool ok = false;
    const std::string report = mpcache::bench_gather_report(cfg, ok);
    emit(report, cfg.out_report);
    return ok ? 0 : 1;
}

int cmd_demo_decode(const RunConfig& cfg) {
    std::string csv;
    const std::string report = mpcache::demo_decode_report(cfg, &csv);
    emit(report, cfg.out_report);
    if (!cfg.out_csv.empty()) spill(cfg.out_csv, csv);
    return 0;
}

int cmd_analyze(const RunConfig& cfg) {
    if (cfg.trace_csv.empty()) throw std::invalid_argument("analyze-commonality needs --trace-csv");
    std::string curve;
    const std::string report = mpcache::analyze_commonality_report(slurp(cfg.trace_csv), cfg.m_max, &curve);
    emit(report, cfg.out_report);
    if (!cfg.out_csv.empty()) spill(cfg.out_csv, curve);
    return 0;
}

int cmd_ingest_check(const RunConfig& cfg, const std::vector<std::string>& files) {
    bool did = false;
    if (!cfg.weights_prefix.empty()) {
        const mpcache::ModelSpec m = mpcache::ingest_weights(cfg.weights_prefix);
        std::cout << "model " << cfg.weights_prefix << ": layers " << m.layers << ", heads " << m.heads
                  << ", dim " << m.dim << ", width " << m.width() << "\n";
        did = true;
    }
    if (!cfg.trace_prefix.empty()) {
        const mpcache::DecodeTrace t = mpcache::ingest_trace(cfg.trace_prefix);
        std::cout << "trace " << cfg.trace_prefix << ": prompt_rows " << t.prompt_rows << ", steps "
                  << t.steps << ", width " << t.width << "\n";
        did = true;
    }
    for (const std::string& f : files) {
        describe(f, mpcache::mpct_read(f));
        did = true;
    }
    if (!did) throw std::invalid_argument("ingest-check needs --weights-prefix, --trace-prefix, or files");
    std::cout << "ok\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    RunConfig cfg;
    // the config file is applied before parsing so explicit flags override it
    try {
        for (int i = 1; i < argc; ++i) {
            const std::string a = argv[i];
            if (a == "--config" && i + 1 < argc) {
                cfg = RunConfig::from_json(slurp(argv[i + 1]));
            } else if (a.rfind("--config=", 0) == 0) {
                cfg = RunConfig::from_json(slurp(a.substr(9)));
            }
        }
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    }

    CLI::App app{"secret-shared KV-cache eviction demonstrator"};
    app.require_subcommand(1);

    FlagBinding bind;
    std::int64_t trunc_fault = 0;
    std::vector<std::string> ingest_files;

    CLI::App* s_self = app.add_subcommand("selftest", "run the invariant suite at small sizes");
    CLI::App* s_bench = app.add_subcommand("bench-gather", "token vs cluster gather cost comparison");
    CLI::App* s_demo = app.add_subcommand("demo-decode", "prefill + decode in plaintext and secure modes");
    CLI::App* s_ana = app.add_subcommand("analyze-commonality", "cross-layer selection overlap curve");
    CLI::App* s_ing = app.add_subcommand("ingest-check", "validate MPCT model/trace files");
    for (CLI::App* sub : {s_self, s_bench, s_demo, s_ana, s_ing}) add_config_flags(sub, cfg, bind);
    s_self->add_option("--trunc-fault", trunc_fault,
                       "additive fault injected into every truncation (mutation testing)");
    s_ing->add_option("files", ingest_files, "MPCT files to describe");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (bind.levels_given()) cfg.eviction.levels = parse_levels(bind.levels_text);
        if (s_self->parsed()) {
            cfg.subcommand = "selftest";
            return cmd_selftest(cfg, trunc_fault);
        }
        if (s_bench->parsed()) {
            cfg.subcommand = "bench-gather";
            return cmd_bench_gather(cfg);
        }
        if (s_demo->parsed()) {
            cfg.subcommand = "demo-decode";
            return cmd_demo_decode(cfg);
        }
        if (s_ana->parsed()) {
            cfg.subcommand = "analyze-commonality";
            return cmd_analyze(cfg);
        }
        cfg.subcommand = "ingest-check";
        return cmd_ingest_check(cfg, ingest_files);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
