#include "shmkit/bench.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <new>
#include <random>
#include <sstream>

#include <malloc.h>
#include <unistd.h>

#include <json.hpp>

#include "shmkit/error.hpp"
#include "shmkit/log.hpp"

namespace shmkit::bench {

std::string_view to_string(Mode m) noexcept
{
    switch (m) {
    case Mode::shared: return "shared";
    case Mode::copy: return "copy";
    case Mode::serial: return "serial";
    }
    return "?";
}

Mode parse_mode(std::string_view s)
{
    if (s == "shared") return Mode::shared;
    if (s == "copy") return Mode::copy;
    if (s == "serial") return Mode::serial;
    throw Error(ErrorCode::InvalidArgument, "unknown mode '" + std::string(s) + "' (shared, copy, serial)");
}

double rss_mb(pid_t pid)
{
    std::ifstream in(pid == 0 ? std::string("/proc/self/statm") : "/proc/" + std::to_string(pid) + "/statm");
    std::uint64_t size = 0, resident = 0;
    if (!(in >> size >> resident)) return 0.0;
    static const auto page = static_cast<double>(::sysconf(_SC_PAGESIZE));
    return static_cast<double>(resident) * page / (1024.0 * 1024.0);
}

double total_rss_mb(const std::vector<pid_t>& pids, bool include_master)
{
    double total = 0.0;
    for (auto pid : pids)
        if (pid > 0) total += rss_mb(pid);
    if (include_master) total += rss_mb(0);
    return total;
}

std::uint64_t available_memory_bytes()
{
    std::ifstream in("/proc/meminfo");
    std::string key;
    std::uint64_t value = 0;
    std::string unit;
    while (in >> key >> value) {
        std::getline(in, unit);
        if (key == "MemAvailable:") return value * 1024;
    }
    return 0;
}

std::size_t side_length(double exponent) { return static_cast<std::size_t>(std::llround(std::pow(10.0, exponent))); }

std::vector<double> bench_data(std::uint64_t seed, double exponent, std::uint32_t rep)
{
    const auto n = side_length(exponent);
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(std::llround(exponent * 1000)), rep};
    std::mt19937_64 rng(seq);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::vector<double> v(n * n);
    for (auto& x : v) x = unif(rng);
    return v;
}

// ---------------------------------------------------------------------------

PrivateCopies::~PrivateCopies()
{
    try {
        drop();
    } catch (const std::exception& e) {
        log::warn(std::string("dropping private copies: ") + e.what());
    }
}

PrivateCopies::PrivateCopies(PrivateCopies&& other) noexcept
    : cluster_(std::exchange(other.cluster_, nullptr)), name_(std::move(other.name_))
{
}

PrivateCopies& PrivateCopies::operator=(PrivateCopies&& other) noexcept
{
    if (this != &other) {
        try {
            drop();
        } catch (...) {
        }
        cluster_ = std::exchange(other.cluster_, nullptr);
        name_ = std::move(other.name_);
    }
    return *this;
}

void PrivateCopies::drop()
{
    if (cluster_ == nullptr) return;
    auto* cluster = std::exchange(cluster_, nullptr);
    for (std::size_t k = 0; k < cluster->size(); ++k) {
        if (!cluster->alive(k)) continue;
        TaskFrame release;
        release.type = FrameType::release;
        release.x_name = name_;
        const auto reply = cluster->request(k, release);
        if (reply.type == FrameType::error) rethrow_remote(reply.message);
    }
}

ApplyResult copy_mode_apply(const Matrix& x, Margin margin, std::string_view kernel, Cluster& cluster,
                            ChannelStats* stats, PrivateCopies* keep)
{
    if (margin == Margin::list) throw Error(ErrorCode::InvalidArgument, "copy mode takes rows or cols");
    const auto* entry = cluster.kernels().find(kernel);
    if (entry == nullptr) throw Error(ErrorCode::KernelUnknown, "no kernel named '" + std::string(kernel) + "'");
    if (!entry->extra_args.empty())
        throw Error(ErrorCode::VarNameMismatch, "copy mode runs kernels without shared arguments only");

    PrivateCopies copies(cluster, temporary_name("copy"));
    for (std::size_t k = 0; k < cluster.size(); ++k) cluster.load(k, copies.name(), x, stats);

    Dispatch job;
    job.x_name = copies.name();
    job.margin = margin;
    job.kernel = entry->name;
    job.count = margin == Margin::cols ? x.ncol() : x.nrow();
    job.release_x = false;
    auto out = dispatch(cluster, job, stats);
    if (keep != nullptr) *keep = std::move(copies);
    return out;
}

// ---------------------------------------------------------------------------

double median(std::vector<double> v)
{
    if (v.empty()) return std::nan("");
    std::sort(v.begin(), v.end());
    const auto n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double mad(const std::vector<double>& v)
{
    if (v.empty()) return std::nan("");
    const double m = median(v);
    std::vector<double> dev;
    dev.reserve(v.size());
    for (double x : v) dev.push_back(std::abs(x - m));
    return 1.4826 * median(std::move(dev));
}

std::vector<GroupSummary> summarize(const std::vector<BenchRecord>& records)
{
    std::vector<GroupSummary> out;
    std::map<std::pair<int, double>, std::vector<const BenchRecord*>> groups;
    std::vector<std::pair<int, double>> order;
    for (const auto& r : records) {
        const auto key = std::make_pair(static_cast<int>(r.mode), r.exponent);
        auto& g = groups[key];
        if (g.empty()) order.push_back(key);
        g.push_back(&r);
    }
    for (const auto& key : order) {
        std::vector<double> t, d, a;
        for (const auto* r : groups[key]) {
            t.push_back(r->diff_sec);
            d.push_back(r->mem_after_mb - r->mem_before_mb);
            a.push_back(r->mem_after_mb);
        }
        GroupSummary s;
        s.mode = static_cast<Mode>(key.first);
        s.exponent = key.second;
        s.reps = t.size();
        s.median_diff_sec = median(t);
        s.mad_diff_sec = mad(t);
        s.median_mem_diff_mb = median(d);
        s.mad_mem_diff_mb = mad(d);
        s.median_mem_after_mb = median(a);
        s.mad_mem_after_mb = mad(a);
        out.push_back(s);
    }
    return out;
}

namespace {

std::string shortest(double v)
{
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

double parse_number(std::string_view s, std::size_t line)
{
    double v;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size())
        throw Error(ErrorCode::NonNumericCell, "bench CSV line " + std::to_string(line) + ": '" + std::string(s) + "'");
    return v;
}

double estimated_bytes(Mode mode, std::size_t side, std::size_t workers)
{
    const double m = 8.0 * static_cast<double>(side) * static_cast<double>(side);
    switch (mode) {
    case Mode::serial: return 1.1 * m;
    case Mode::shared: return 2.1 * m;
    case Mode::copy: return (3.0 + static_cast<double>(workers)) * m;
    }
    return m;
}

} // namespace

std::string format_record(const BenchRecord& r)
{
    return std::string(to_string(r.mode)) + "," + shortest(r.exponent) + "," + std::to_string(r.rep) + "," +
           shortest(r.diff_sec) + "," + shortest(r.mem_before_mb) + "," + shortest(r.mem_after_mb);
}

std::vector<BenchRecord> read_records_csv(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw Error(ErrorCode::EmptyFile, path.string() + " is empty");
    if (line != kCsvHeader) throw Error(ErrorCode::BadMagic, path.string() + ": unexpected header '" + line + "'");
    std::vector<BenchRecord> out;
    std::size_t number = 1;
    while (std::getline(in, line)) {
        ++number;
        if (line.empty()) continue;
        std::vector<std::string_view> cells;
        std::string_view rest(line);
        while (true) {
            const auto comma = rest.find(',');
            cells.push_back(rest.substr(0, comma));
            if (comma == std::string_view::npos) break;
            rest.remove_prefix(comma + 1);
        }
        if (cells.size() != 6)
            throw Error(ErrorCode::RaggedRows, path.string() + ": line " + std::to_string(number) + " has " +
                                                   std::to_string(cells.size()) + " cells");
        BenchRecord r;
        r.mode = parse_mode(cells[0]);
        r.exponent = parse_number(cells[1], number);
        r.rep = static_cast<std::uint32_t>(parse_number(cells[2], number));
        r.diff_sec = parse_number(cells[3], number);
        r.mem_before_mb = parse_number(cells[4], number);
        r.mem_after_mb = parse_number(cells[5], number);
        out.push_back(r);
    }
    return out;
}

void write_summary_json(const std::filesystem::path& path, const BenchReport& report)
{
    nlohmann::json j;
    j["seed"] = report.seed;
    j["cluster_size"] = report.cluster_size;
    j["dispersion"] = "mad_1.4826";
    j["groups"] = nlohmann::json::array();
    for (const auto& g : report.groups) {
        j["groups"].push_back({{"mode", to_string(g.mode)},
                               {"exponent", g.exponent},
                               {"reps", g.reps},
                               {"median_diff_sec", g.median_diff_sec},
                               {"mad_diff_sec", g.mad_diff_sec},
                               {"median_mem_diff_mb", g.median_mem_diff_mb},
                               {"mad_mem_diff_mb", g.mad_mem_diff_mb},
                               {"median_mem_after_mb", g.median_mem_after_mb},
                               {"mad_mem_after_mb", g.mad_mem_after_mb}});
    }
    j["failures"] = nlohmann::json::array();
    for (const auto& f : report.failures)
        j["failures"].push_back(
            {{"mode", to_string(f.mode)}, {"exponent", f.exponent}, {"rep", f.rep}, {"reason", f.reason}});
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + path.string());
    out << j.dump(2) << '\n';
    if (!out) throw Error(ErrorCode::IoFailure, "failed writing " + path.string());
}

BenchReport run_benchmark(const BenchConfig& config)
{
    if (config.reps == 0) throw Error(ErrorCode::InvalidArgument, "reps must be at least 1");
    if (config.exponents.empty() || config.modes.empty())
        throw Error(ErrorCode::InvalidArgument, "need at least one exponent and one mode");
    for (double e : config.exponents)
        if (!(e > 0.0 && e <= 6.0)) throw Error(ErrorCode::InvalidArgument, "exponent " + shortest(e) + " out of (0, 6]");

    BenchReport report;
    report.seed = config.seed;
    report.cluster_size = config.cluster_size == 0 ? default_core_count() : config.cluster_size;

    std::ofstream csv;
    if (config.csv_path) {
        csv.open(*config.csv_path, std::ios::trunc);
        if (!csv) throw Error(ErrorCode::IoFailure, "cannot write " + config.csv_path->string());
        csv << kCsvHeader << '\n' << std::flush;
    }

    Cluster cluster(report.cluster_size, config.cluster_options);
    const auto pids = cluster.pids();

    for (double exponent : config.exponents) {
        const auto side = side_length(exponent);
        for (Mode mode : config.modes) {
            for (std::uint32_t rep = 1; rep <= config.reps; ++rep) {
                const auto need = estimated_bytes(mode, side, cluster.size());
                const auto avail = available_memory_bytes();
                if (avail != 0 && need > 0.9 * static_cast<double>(avail)) {
                    report.failures.push_back({mode, exponent, rep,
                                               "OutOfMemory: needs about " + shortest(std::round(need / 1048576.0)) +
                                                   " MB, " + shortest(std::round(avail / 1048576.0)) + " MB available"});
                    break;
                }
                BenchRecord r;
                r.mode = mode;
                r.exponent = exponent;
                r.rep = rep;
                try {
                    auto y = bench_data(config.seed, exponent, rep);
                    r.mem_before_mb = total_rss_mb(pids, true);
                    const auto t0 = std::chrono::steady_clock::now();
                    Matrix a(side, side, std::move(y));
                    ApplyResult res;
                    PrivateCopies copies;
                    switch (mode) {
                    case Mode::serial: res = serial_apply(a, Margin::cols, "sd", {}, cluster.kernels()); break;
                    case Mode::shared: {
                        ApplyOptions opts;
                        opts.ns = config.ns;
                        opts.cluster = &cluster;
                        res = mem_apply(a, Margin::cols, "sd", opts);
                        break;
                    }
                    case Mode::copy: res = copy_mode_apply(a, Margin::cols, "sd", cluster, nullptr, &copies); break;
                    }
                    const auto t1 = std::chrono::steady_clock::now();
                    r.diff_sec = std::chrono::duration<double>(t1 - t0).count();
                    r.mem_after_mb = total_rss_mb(pids, true);
                    copies.drop();
                    res = {};
                    a = Matrix();
                } catch (const std::bad_alloc&) {
                    report.failures.push_back({mode, exponent, rep, "OutOfMemory: allocation failed"});
                    ::malloc_trim(0);
                    break;
                } catch (const Error& e) {
                    if (e.code() != ErrorCode::ResourceExhausted && e.code() != ErrorCode::OutOfMemory) throw;
                    report.failures.push_back({mode, exponent, rep, e.what()});
                    ::malloc_trim(0);
                    break;
                }
                ::malloc_trim(0);
                report.records.push_back(r);
                if (csv.is_open()) csv << format_record(r) << '\n' << std::flush;
                if (config.on_record) config.on_record(r);
            }
        }
    }
    cluster.stop();
    report.groups = summarize(report.records);
    return report;
}

} // namespace shmkit::bench
