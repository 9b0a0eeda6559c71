#include "shmkit/cli.hpp"

#include <cmath>
#include <iomanip>
#include <iostream>
#include <limits>
#include <optional>
#include <random>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "shmkit/apply.hpp"
#include "shmkit/bench.hpp"
#include "shmkit/cluster.hpp"
#include "shmkit/error.hpp"
#include "shmkit/ingest.hpp"
#include "shmkit/log.hpp"
#include "shmkit/mi.hpp"
#include "shmkit/registry.hpp"
#include "shmkit/segment.hpp"

namespace shmkit::cli {

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Globals {
    std::string ns = "cli_ns";
    std::uint64_t seed = 1234;
    std::optional<std::size_t> cores;
    std::string worker;
};

ClusterOptions cluster_options(const Globals& g)
{
    ClusterOptions o;
    if (!g.worker.empty()) o.worker_path = g.worker;
    return o;
}

std::size_t cores_of(const Globals& g) { return g.cores.value_or(default_core_count()); }

void check_namespace(const std::string& ns)
{
    if (!SegmentName::valid_identifier(ns)) throw UsageError("invalid namespace '" + ns + "'");
}

std::filesystem::path sibling_json(const std::filesystem::path& p)
{
    auto out = p;
    out.replace_extension(".summary.json");
    return out;
}

// ---------------------------------------------------------------------------

struct BenchArgs {
    std::vector<double> exponents{1, 2, 3};
    std::uint32_t reps = 100;
    std::vector<std::string> modes{"serial", "shared", "copy"};
    std::string out = "bench.csv";
    std::string summary;
};

int cmd_bench(const Globals& g, const BenchArgs& a, std::ostream& out)
{
    bench::BenchConfig cfg;
    cfg.exponents = a.exponents;
    cfg.reps = a.reps;
    cfg.modes.clear();
    for (const auto& m : a.modes) {
        try {
            cfg.modes.push_back(bench::parse_mode(m));
        } catch (const Error& e) {
            throw UsageError(e.what());
        }
    }
    if (cfg.reps == 0) throw UsageError("--reps must be at least 1");
    for (double e : cfg.exponents)
        if (!(e > 0.0 && e <= 6.0)) throw UsageError("--exponents entries must lie in (0, 6]");
    check_namespace(g.ns);
    cfg.ns = g.ns;
    cfg.seed = g.seed;
    cfg.cluster_size = cores_of(g);
    cfg.csv_path = a.out;
    cfg.cluster_options = cluster_options(g);

    const auto report = bench::run_benchmark(cfg);
    const auto summary = a.summary.empty() ? sibling_json(a.out) : std::filesystem::path(a.summary);
    bench::write_summary_json(summary, report);

    out << "seed " << g.seed << ", " << report.cluster_size << " worker(s), " << report.records.size()
        << " record(s) -> " << a.out << "\n";
    out << std::left << std::setw(8) << "mode" << std::setw(10) << "exponent" << std::setw(6) << "reps"
        << std::setw(16) << "median_sec" << std::setw(16) << "median_memdiff" << "median_mem_after\n";
    for (const auto& s : report.groups)
        out << std::setw(8) << bench::to_string(s.mode) << std::setw(10) << s.exponent << std::setw(6) << s.reps
            << std::setw(16) << s.median_diff_sec << std::setw(16) << s.median_mem_diff_mb << s.median_mem_after_mb
            << "\n";
    for (const auto& f : report.failures)
        out << "failed: " << bench::to_string(f.mode) << " exponent " << f.exponent << " rep " << f.rep << ": "
            << f.reason << "\n";
    out << "summary -> " << summary.string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------

struct MiArgs {
    std::string matrix;
    std::string labels;
    std::string lengths;
    bool log2 = false;
    std::optional<double> threshold;
    std::string out = "mi_scores.csv";
    std::string summary;
};

int cmd_mi_select(const Globals& g, const MiArgs& a, std::ostream& out)
{
    check_namespace(g.ns);
    auto input = ingest::read_any_matrix(a.matrix);
    const auto labels = ingest::read_labels(a.labels);
    if (labels.ids.size() != input.values.nrow())
        throw Error(ErrorCode::LengthMismatch, "matrix has " + std::to_string(input.values.nrow()) + " rows but " +
                                                   a.labels + " has " + std::to_string(labels.ids.size()) + " labels");
    if (input.names.empty())
        for (std::size_t j = 0; j < input.values.ncol(); ++j) input.names.push_back("f" + std::to_string(j));

    Matrix x = std::move(input.values);
    if (!a.lengths.empty()) {
        auto table = ingest::make_count_table(std::move(x), input.names, ingest::read_gene_lengths(a.lengths));
        x = ingest::tpm_normalize(table);
        std::size_t ok = 0, nonzero = 0;
        for (std::size_t i = 0; i < x.nrow(); ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < x.ncol(); ++j) s += x(i, j);
            if (s == 0.0) continue;
            ++nonzero;
            if (std::abs(s - 1e6) <= 1e-6 * 1e6) ++ok;
        }
        out << "TPM applied: " << ok << " of " << nonzero << " nonzero cases sum to 1e6\n";
        if (ok != nonzero) throw Error(ErrorCode::DomainError, "TPM row sums off by more than 1e-6 relative");
    }
    if (a.log2) ingest::log2p1(x);

    Cluster cluster(std::min<std::size_t>(cores_of(g), std::max<std::size_t>(1, x.ncol())), cluster_options(g));
    mi::SelectionRequest req;
    req.ns = g.ns;
    req.cluster = &cluster;
    req.threshold = a.threshold;
    const auto selection = mi::select_features(x, labels.ids, req);
    cluster.stop();

    mi::write_scores_csv(a.out, selection, input.names);
    const auto s = mi::summarize(selection);
    nlohmann::json j{{"count", s.count}, {"min", s.min},       {"q1", s.q1},           {"median", s.median},
                     {"q3", s.q3},       {"max", s.max},       {"seed", g.seed},       {"tpm", !a.lengths.empty()},
                     {"log2", a.log2},   {"units", "nats"},    {"workers", cluster.size()}};
    if (selection.selected) {
        j["threshold"] = *a.threshold;
        j["selected"] = *selection.selected;
    }
    const auto summary = a.summary.empty() ? sibling_json(a.out) : std::filesystem::path(a.summary);
    std::ofstream js(summary);
    if (!js) throw Error(ErrorCode::IoFailure, "cannot write " + summary.string());
    js << j.dump(2) << "\n";

    out << "scored " << s.count << " feature(s) on " << x.nrow() << " case(s) with " << cluster.size()
        << " worker(s), seed " << g.seed << "\n";
    out << "mi nats: min " << s.min << ", q1 " << s.q1 << ", median " << s.median << ", q3 " << s.q3 << ", max "
        << s.max << "\n";
    const auto top = std::min<std::size_t>(10, selection.ranked.size());
    for (std::size_t k = 0; k < top; ++k) {
        const auto& r = selection.ranked[k];
        out << "  " << std::setw(3) << k + 1 << "  " << input.names[r.feature_index] << "  " << r.mi_nats << "\n";
    }
    if (selection.selected) out << selection.selected->size() << " feature(s) at or above " << *a.threshold << "\n";
    out << "scores -> " << a.out << ", summary -> " << summary.string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------

int cmd_inspect(std::optional<std::string> ns, bool sweep, std::ostream& out)
{
    if (ns) check_namespace(*ns);
    std::optional<std::string_view> filter;
    if (ns) filter = *ns;
    if (sweep) {
        const auto swept = sweep_orphans(filter);
        out << "swept " << swept.size() << " orphaned variable(s)\n";
        for (const auto& v : swept) out << "  removed " << v.ns << "." << v.variable << " (attach_count " << v.attach_count << ")\n";
    }
    const auto vars = inspect_variables(filter);
    std::size_t pages = 0, views = 0;
    for (const auto& v : vars) {
        pages += v.owner_present ? 1 : 0;
        views += v.view_slots;
    }
    out << pages << " pages, " << views << " views\n";
    for (const auto& v : vars) {
        out << "  " << v.ns << "." << v.variable << "  " << (v.meta.kind() == ValueKind::matrix ? "matrix" : "vector")
            << " " << v.meta.nrow << "x" << v.meta.ncol << "  attach_count " << v.meta.attach_count << "  holders";
        for (const auto& h : v.holders) out << " " << h.pid << (h.role == MetaBlock::SlotRole::owner ? "(owner)" : "(view)");
        out << "\n";
    }
    return 0;
}

// ---------------------------------------------------------------------------

double max_abs_diff(const ApplyResult& a, const ApplyResult& b)
{
    if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
    double d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].size() != b[i].size()) return std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < a[i].size(); ++k) d = std::max(d, std::abs(a[i][k] - b[i][k]));
    }
    return d;
}

int cmd_demo(const Globals& g, std::ostream& out)
{
    check_namespace(g.ns);
    std::mt19937_64 rng(g.seed);
    std::normal_distribution<double> normal;
    const std::size_t nrow = 2000, ncol = 200;
    Matrix x(nrow, ncol);
    for (auto& v : x.values()) v = normal(rng);
    std::vector<double> y(nrow);
    for (auto& v : y) v = normal(rng);

    Cluster cluster(cores_of(g), cluster_options(g));
    out << "demo: seed " << g.seed << ", namespace " << g.ns << ", " << cluster.size() << " worker(s)\n";

    ApplyOptions opts;
    opts.ns = g.ns;
    opts.cluster = &cluster;
    opts.vars.emplace("y", SharedInput(VariableRef::of_vector(y)));
    ChannelStats stats;
    opts.stats = &stats;
    const auto corr = mem_apply(x, Margin::cols, "corr_with", opts);
    const auto corr_ref = serial_apply(x, Margin::cols, "corr_with", {{"y", y}});
    out << "corr_with: " << corr.size() << " correlations for " << ncol << " columns, first " << corr[0][0]
        << ", max |shared - serial| " << max_abs_diff(corr, corr_ref) << "\n";

    // Zero-copy check on a pre-registered matrix.
    const auto big_name = "demo_x";
    const Matrix big(4000, 500, std::vector<double>(4000 * 500, 1.0));
    process_registry().register_variables(g.ns, {{big_name, VariableRef::of_matrix(big)}});
    const auto pids = cluster.pids();
    const double before = bench::total_rss_mb(pids, false);
    ApplyOptions sd_opts;
    sd_opts.ns = g.ns;
    sd_opts.cluster = &cluster;
    ChannelStats sd_stats;
    sd_opts.stats = &sd_stats;
    const auto sds = mem_apply(std::string(big_name), Margin::cols, "sd", sd_opts);
    const double after = bench::total_rss_mb(pids, false);
    process_registry().release_variables(g.ns, {big_name});
    const double mb = 8.0 * static_cast<double>(big.size()) / 1048576.0;
    out << "zero-copy: " << sds.size() << " column sd(s) of a " << mb << " MB matrix; worker RSS change "
        << (after - before) << " MB; largest frame " << std::max(sd_stats.max_sent_frame, sd_stats.max_received_frame)
        << " bytes\n";

    // List example: matrices times a shared vector.
    std::vector<Matrix> mats;
    for (int k = 0; k < 100; ++k) {
        Matrix m(100, 100);
        for (auto& v : m.values()) v = normal(rng);
        mats.push_back(std::move(m));
    }
    std::vector<double> v100(100);
    for (auto& v : v100) v = normal(rng);
    std::vector<VariableRef> refs;
    for (const auto& m : mats) refs.push_back(VariableRef::of_matrix(m));
    ApplyOptions lopts;
    lopts.ns = g.ns;
    lopts.cluster = &cluster;
    lopts.vars.emplace("y", SharedInput(VariableRef::of_vector(v100)));
    const auto prods = mem_lapply(refs, "matvec", lopts);
    const auto prods_ref = serial_lapply(refs, "matvec", {{"y", v100}});
    out << "matvec: " << prods.size() << " product(s) of length " << prods[0].size() << ", max |shared - serial| "
        << max_abs_diff(prods, prods_ref) << "\n";

    memshare_gc(g.ns, cluster);
    cluster.stop();
    const auto left = inspect_variables(g.ns);
    out << "namespace " << g.ns << " after cleanup: " << left.size() << " variable(s)\n";
    if (max_abs_diff(corr, corr_ref) != 0.0 || max_abs_diff(prods, prods_ref) != 0.0 || !left.empty()) {
        out << "demo: mismatch\n";
        return 1;
    }
    return 0;
}

} // namespace

int run(int argc, char** argv) { return run(argc, argv, std::cout, std::cerr); }

int run(int argc, char** argv, std::ostream& out, std::ostream& err)
{
    CLI::App app{"Shared-memory computation kit"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    app.add_option("--namespace", g.ns, "Namespace for shared variables")->capture_default_str();
    app.add_option("--seed", g.seed, "Seed for all randomness")->capture_default_str();
    app.add_option("--worker", g.worker, "Worker executable (default: shmkit-worker next to this binary)");

    auto* bench_cmd = app.add_subcommand("bench", "Column-wise sd benchmark: serial, shared and copy modes");
    BenchArgs ba;
    bench_cmd->add_option("--exponents", ba.exponents, "Matrix side exponents, side = 10^e")->delimiter(',')->capture_default_str();
    bench_cmd->add_option("--reps", ba.reps, "Repetitions per mode and size")->capture_default_str();
    bench_cmd->add_option("--modes", ba.modes, "Any of serial,shared,copy")->delimiter(',')->capture_default_str();
    bench_cmd->add_option("--cores", g.cores, "Workers (default: physical cores - 1)");
    bench_cmd->add_option("--out", ba.out, "Record CSV")->capture_default_str();
    bench_cmd->add_option("--summary", ba.summary, "Summary JSON (default: next to --out)");

    auto* mi_cmd = app.add_subcommand("mi-select", "Rank features by mutual information with the labels");
    MiArgs ma;
    mi_cmd->add_option("--matrix", ma.matrix, "Cases x features, .msmx or CSV with header")->required();
    mi_cmd->add_option("--labels", ma.labels, "One label per line, one per case")->required();
    mi_cmd->add_option("--lengths", ma.lengths, "gene,length CSV; applies TPM first");
    mi_cmd->add_flag("--log2", ma.log2, "Transform with log2(x + 1) before scoring");
    mi_cmd->add_option("--threshold", ma.threshold, "Select features with MI >= threshold");
    mi_cmd->add_option("--cores", g.cores, "Workers (default: physical cores - 1)");
    mi_cmd->add_option("--out", ma.out, "Score CSV")->capture_default_str();
    mi_cmd->add_option("--summary", ma.summary, "Summary JSON (default: next to --out)");

    auto* inspect_cmd = app.add_subcommand("inspect", "List shared variables on this host");
    bool sweep = false;
    std::optional<std::string> inspect_ns;
    inspect_cmd->add_option("--namespace", inspect_ns, "Only this namespace");
    inspect_cmd->add_flag("--sweep", sweep, "Remove variables whose holders are all dead");

    auto* demo_cmd = app.add_subcommand("demo", "Correlation and matrix-vector examples");
    demo_cmd->add_option("--cores", g.cores, "Workers (default: physical cores - 1)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp& e) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n" << app.help();
        return 2;
    }

    try {
        if (g.cores && *g.cores == 0) throw UsageError("--cores must be at least 1");
        if (bench_cmd->parsed()) return cmd_bench(g, ba, out);
        if (mi_cmd->parsed()) return cmd_mi_select(g, ma, out);
        if (inspect_cmd->parsed()) {
            if (!inspect_ns && app.count("--namespace") > 0) inspect_ns = g.ns;
            return cmd_inspect(inspect_ns, sweep, out);
        }
        if (demo_cmd->parsed()) return cmd_demo(g, out);
    } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n" << app.help();
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        process_registry().shutdown();
        return 1;
    }
    return 2;
}

} // namespace shmkit::cli
