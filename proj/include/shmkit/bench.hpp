#pragma once

// Column-wise sd over square uniform matrices in three modes, with wall time
// and resident memory summed over the master and every worker.
//
//   serial  one loop in the master
//   shared  mem_apply: workers attach views of one shared copy
//   copy    every worker is sent a private copy over its channel

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <sys/types.h>

#include "shmkit/apply.hpp"
#include "shmkit/cluster.hpp"
#include "shmkit/matrix.hpp"

namespace shmkit::bench {

enum class Mode { shared, copy, serial };

std::string_view to_string(Mode m) noexcept;
// Errors: InvalidArgument for anything but shared/copy/serial.
Mode parse_mode(std::string_view s);

// Resident set size of each pid (dead or unreadable ones count 0), plus the
// calling process when include_master. MB = 2^20 bytes.
double total_rss_mb(const std::vector<pid_t>& pids, bool include_master = true);
double rss_mb(pid_t pid);

// Available memory according to the kernel, in bytes (0 if unknown).
std::uint64_t available_memory_bytes();

struct BenchRecord {
    Mode mode = Mode::serial;
    double exponent = 0; // side length round(10^exponent)
    std::uint32_t rep = 0;
    double diff_sec = 0;
    double mem_before_mb = 0;
    double mem_after_mb = 0;

    bool operator==(const BenchRecord&) const = default;
};

struct BenchFailure {
    Mode mode = Mode::serial;
    double exponent = 0;
    std::uint32_t rep = 0;
    std::string reason;
};

struct GroupSummary {
    Mode mode = Mode::serial;
    double exponent = 0;
    std::size_t reps = 0;
    double median_diff_sec = 0, mad_diff_sec = 0;
    double median_mem_diff_mb = 0, mad_mem_diff_mb = 0;
    double median_mem_after_mb = 0, mad_mem_after_mb = 0;
};

struct BenchConfig {
    std::vector<double> exponents{1, 2, 3};
    std::uint32_t reps = 100;
    std::vector<Mode> modes{Mode::serial, Mode::shared, Mode::copy};
    std::size_t cluster_size = 0; // 0: default_core_count()
    std::uint64_t seed = 1234;
    std::string ns = "bench_ns";
    std::optional<std::filesystem::path> csv_path;
    ClusterOptions cluster_options;
    std::function<void(const BenchRecord&)> on_record;
};

struct BenchReport {
    std::vector<BenchRecord> records;
    std::vector<BenchFailure> failures;
    std::vector<GroupSummary> groups;
    std::size_t cluster_size = 0;
    std::uint64_t seed = 0;
};

std::size_t side_length(double exponent);

// Seeded uniform(0,1) values for one (exponent, rep); identical across modes.
std::vector<double> bench_data(std::uint64_t seed, double exponent, std::uint32_t rep);

// Runs every (exponent, mode, rep), appending to csv_path after each rep.
// A rep that runs out of memory (or would, by a check against available
// memory) is recorded as a failure and the remaining reps of that size and
// mode are skipped.
BenchReport run_benchmark(const BenchConfig& config);

// Worker-held private copies; released by drop() or the destructor.
class PrivateCopies {
public:
    PrivateCopies() = default;
    PrivateCopies(Cluster& cluster, std::string name) : cluster_(&cluster), name_(std::move(name)) {}
    ~PrivateCopies();
    PrivateCopies(PrivateCopies&& other) noexcept;
    PrivateCopies& operator=(PrivateCopies&& other) noexcept;

    void drop();
    const std::string& name() const noexcept { return name_; }

private:
    Cluster* cluster_ = nullptr;
    std::string name_;
};

// Same results as mem_apply, but the full payload is shipped to every worker.
// With `keep`, copies stay loaded until the caller drops them.
ApplyResult copy_mode_apply(const Matrix& x, Margin margin, std::string_view kernel, Cluster& cluster,
                            ChannelStats* stats = nullptr, PrivateCopies* keep = nullptr);

double median(std::vector<double> v);
// Median absolute deviation times 1.4826.
double mad(const std::vector<double>& v);

std::vector<GroupSummary> summarize(const std::vector<BenchRecord>& records);

inline constexpr std::string_view kCsvHeader = "mode,exponent,rep,diff_sec,mem_before_mb,mem_after_mb";

std::string format_record(const BenchRecord& r);
std::vector<BenchRecord> read_records_csv(const std::filesystem::path& path);
void write_summary_json(const std::filesystem::path& path, const BenchReport& report);

} // namespace shmkit::bench
