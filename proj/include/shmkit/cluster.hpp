#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <sys/types.h>

#include "shmkit/kernels.hpp"
#include "shmkit/matrix.hpp"
#include "shmkit/registry.hpp"
#include "shmkit/wire.hpp"

namespace shmkit {

std::size_t physical_core_count();

// Physical cores minus one, never below one.
std::size_t default_core_count();

struct ClusterOptions {
    // Empty: $SHMKIT_WORKER, else "shmkit-worker" next to the running executable.
    std::filesystem::path worker_path;
    std::vector<std::string> worker_args;
    const KernelTable* kernels = nullptr; // defaults to builtin_kernels()
};

std::filesystem::path resolve_worker_path(const ClusterOptions& options);

// A pool of worker processes, each connected by one private channel. Requests
// on one worker are strictly serial; different workers may be driven from
// different threads at the same time.
class Cluster {
public:
    // Errors: InvalidArgument (n == 0), SpawnFailure, KernelMismatch.
    explicit Cluster(std::size_t n, ClusterOptions options = {});
    ~Cluster();

    Cluster(const Cluster&) = delete;
    Cluster& operator=(const Cluster&) = delete;
    Cluster(Cluster&&) noexcept;
    Cluster& operator=(Cluster&&) noexcept;

    std::size_t size() const noexcept { return workers_.size(); }
    std::vector<pid_t> pids() const;
    bool alive(std::size_t worker) const { return workers_.at(worker).alive; }
    const KernelTable& kernels() const noexcept { return *kernels_; }

    // Sends one frame and waits for the reply. A closed channel marks the
    // worker dead and throws Error(WorkerCrash). `call_stats`, if given,
    // accumulates the sizes of exactly this exchange.
    TaskFrame request(std::size_t worker, const TaskFrame& frame, ChannelStats* call_stats = nullptr);

    // Ships a private copy of a matrix to one worker (copy-mode baseline).
    void load(std::size_t worker, const std::string& name, const Matrix& x, ChannelStats* call_stats = nullptr);

    // Views the master believes each worker holds, from the frames it sent.
    std::vector<ViewEntry> tracked_views(std::size_t worker) const;

    ChannelStats stats() const;
    void reset_stats();

    // Shutdown frames, channel close, reap. Idempotent.
    void stop();

    // Reaps workers that have exited without blocking.
    void reap();

private:
    struct Worker {
        pid_t pid = -1;
        Channel channel;
        bool alive = true;
        std::set<std::pair<std::string, std::string>> views;
    };

    void track(Worker& w, const TaskFrame& sent, const TaskFrame& reply);
    void mark_dead(Worker& w);

    std::vector<Worker> workers_;
    const KernelTable* kernels_ = nullptr;
};

Cluster make_cluster(std::size_t n, ClusterOptions options = {});

// Tells every worker to drop its views of `ns`, then releases every page and
// view the master holds there. Unreachable workers are reported with the
// views they were last known to hold (Error(WorkerUnreachable)) after the
// rest of the cleanup, including a sweep of segments only dead workers held.
void memshare_gc(std::string_view ns, Cluster& cluster, Registry& registry = process_registry());

// ---------------------------------------------------------------------------
// Worker side.

// Frame handling of one worker, independent of the transport.
class WorkerSession {
public:
    WorkerSession(Registry& registry, const KernelTable& kernels);
    ~WorkerSession();

    // Never throws; failures become error frames.
    TaskFrame handle(TaskFrame frame);

    bool finished() const noexcept { return finished_; }
    std::uint64_t retrieve_calls() const noexcept { return retrieve_calls_; }
    std::uint64_t cache_hits() const noexcept { return cache_hits_; }
    std::size_t views_held() const noexcept { return cache_.size(); }

private:
    TaskFrame attach(const TaskFrame& f);
    TaskFrame run(const TaskFrame& f);
    TaskFrame release(const TaskFrame& f);
    TaskFrame gc(const TaskFrame& f);
    TaskFrame shutdown();
    void drop(const std::string& ns, const std::string& name);

    Registry& registry_;
    const KernelTable& kernels_;
    std::map<std::pair<std::string, std::string>, View> cache_;
    std::map<std::string, Matrix> private_copies_;
    std::uint64_t retrieve_calls_ = 0;
    std::uint64_t cache_hits_ = 0;
    bool finished_ = false;
};

// Sends the hello frame, then serves frames until shutdown or channel close.
int worker_loop(Channel& channel, const KernelTable& kernels, Registry& registry = process_registry());

// Entry point of a worker executable: expects "--fd <n>".
int worker_main(int argc, char** argv, const KernelTable& kernels);

} // namespace shmkit
