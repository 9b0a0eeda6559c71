#include "shmkit/cluster.hpp"

#include <algorithm>
#include <cerrno>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <thread>

#include <fcntl.h>
#include <malloc.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include "shmkit/log.hpp"

namespace shmkit {

std::size_t physical_core_count()
{
    std::ifstream in("/proc/cpuinfo");
    std::set<std::pair<std::string, std::string>> cores;
    std::string line, physical = "0";
    while (std::getline(in, line)) {
        const auto colon = line.find(':');
        if (colon == std::string::npos) continue;
        auto key = line.substr(0, colon);
        key.erase(key.find_last_not_of(" \t") + 1);
        auto value = line.substr(colon + 1);
        value.erase(0, value.find_first_not_of(" \t"));
        if (key == "physical id") physical = value;
        if (key == "core id") cores.emplace(physical, value);
    }
    if (!cores.empty()) return cores.size();
    return std::max(1u, std::thread::hardware_concurrency());
}

std::size_t default_core_count()
{
    const auto physical = physical_core_count();
    return physical > 1 ? physical - 1 : 1;
}

std::filesystem::path resolve_worker_path(const ClusterOptions& options)
{
    if (!options.worker_path.empty()) return options.worker_path;
    if (const char* env = std::getenv("SHMKIT_WORKER"); env != nullptr && *env != '\0') return env;
    std::error_code ec;
    const auto self = std::filesystem::read_symlink("/proc/self/exe", ec);
    if (!ec) return self.parent_path() / "shmkit-worker";
    return "shmkit-worker";
}

// ---------------------------------------------------------------------------

Cluster::Cluster(std::size_t n, ClusterOptions options)
    : kernels_(options.kernels != nullptr ? options.kernels : &builtin_kernels())
{
    if (n == 0) throw Error(ErrorCode::InvalidArgument, "a cluster needs at least one worker");
    const auto exe = resolve_worker_path(options);
    const std::string exe_str = exe.string();

    std::vector<std::string> arg_storage{exe_str, "--fd", "3"};
    arg_storage.insert(arg_storage.end(), options.worker_args.begin(), options.worker_args.end());
    std::vector<char*> argv;
    for (auto& a : arg_storage) argv.push_back(a.data());
    argv.push_back(nullptr);

    workers_.reserve(n);
    try {
        for (std::size_t i = 0; i < n; ++i) {
            auto [master_end, worker_end] = make_channel_pair();
            const pid_t pid = ::fork();
            if (pid < 0) throw_errno(ErrorCode::SpawnFailure, "fork", errno);
            if (pid == 0) {
                const int fd = worker_end.fd();
                if (fd == 3) {
                    ::fcntl(3, F_SETFD, 0);
                } else if (::dup2(fd, 3) < 0) {
                    ::_exit(126);
                }
                ::execv(exe_str.c_str(), argv.data());
                ::_exit(127);
            }
            worker_end.close();
            Worker w;
            w.pid = pid;
            w.channel = std::move(master_end);
            workers_.push_back(std::move(w));

            TaskFrame hello;
            try {
                hello = workers_.back().channel.recv();
            } catch (const Error& e) {
                throw Error(ErrorCode::SpawnFailure, "worker " + exe_str + " did not complete the handshake: " + e.what());
            }
            if (hello.type != FrameType::hello)
                throw Error(ErrorCode::SpawnFailure, "worker sent an unexpected first frame");
            if (hello.kernel_hash != kernels_->name_hash())
                throw Error(ErrorCode::KernelMismatch, "worker " + std::to_string(pid) +
                                                           " was built with a different kernel table");
        }
    } catch (...) {
        stop();
        throw;
    }
}

Cluster::~Cluster() { stop(); }

Cluster::Cluster(Cluster&& other) noexcept : workers_(std::move(other.workers_)), kernels_(other.kernels_)
{
    other.workers_.clear();
}

Cluster& Cluster::operator=(Cluster&& other) noexcept
{
    if (this != &other) {
        stop();
        workers_ = std::move(other.workers_);
        other.workers_.clear();
        kernels_ = other.kernels_;
    }
    return *this;
}

std::vector<pid_t> Cluster::pids() const
{
    std::vector<pid_t> out;
    for (const auto& w : workers_) out.push_back(w.pid);
    return out;
}

void Cluster::track(Worker& w, const TaskFrame& sent, const TaskFrame& reply)
{
    if (reply.type == FrameType::error) return;
    switch (sent.type) {
    case FrameType::attach:
        if (sent.margin != Margin::list && !sent.x_name.empty()) w.views.emplace(sent.ns, sent.x_name);
        for (const auto& v : sent.extra_vars) w.views.emplace(sent.ns, parse_binding(v).variable);
        break;
    case FrameType::release:
        w.views.erase({sent.ns, sent.x_name});
        for (const auto& v : sent.extra_vars) w.views.erase({sent.ns, parse_binding(v).variable});
        break;
    case FrameType::gc:
        for (auto it = w.views.begin(); it != w.views.end();) it = it->first == sent.ns ? w.views.erase(it) : std::next(it);
        break;
    case FrameType::shutdown:
        w.views.clear();
        break;
    default:
        break;
    }
}

TaskFrame Cluster::request(std::size_t worker, const TaskFrame& frame, ChannelStats* call_stats)
{
    auto& w = workers_.at(worker);
    if (!w.alive) throw Error(ErrorCode::WorkerCrash, "worker " + std::to_string(w.pid) + " is not running");
    const auto before = w.channel.stats();
    TaskFrame reply;
    try {
        w.channel.send(frame);
        reply = w.channel.recv();
    } catch (const ChannelClosed&) {
        mark_dead(w);
        throw Error(ErrorCode::WorkerCrash, "worker " + std::to_string(-w.pid) + " closed its channel");
    }
    if (call_stats != nullptr) {
        const auto& after = w.channel.stats();
        ChannelStats delta;
        delta.frames_sent = 1;
        delta.frames_received = 1;
        delta.bytes_sent = delta.max_sent_frame = after.bytes_sent - before.bytes_sent;
        delta.bytes_received = delta.max_received_frame = after.bytes_received - before.bytes_received;
        call_stats->merge(delta);
    }
    track(w, frame, reply);
    return reply;
}

void Cluster::load(std::size_t worker, const std::string& name, const Matrix& x, ChannelStats* call_stats)
{
    auto& w = workers_.at(worker);
    if (!w.alive) throw Error(ErrorCode::WorkerCrash, "worker " + std::to_string(w.pid) + " is not running");
    const auto before = w.channel.stats();
    TaskFrame reply;
    try {
        w.channel.send_load(name, x.nrow(), x.ncol(), x.values());
        reply = w.channel.recv();
    } catch (const ChannelClosed&) {
        mark_dead(w);
        throw Error(ErrorCode::WorkerCrash, "worker " + std::to_string(-w.pid) + " closed its channel");
    }
    if (call_stats != nullptr) {
        const auto& after = w.channel.stats();
        ChannelStats delta;
        delta.frames_sent = delta.frames_received = 1;
        delta.bytes_sent = delta.max_sent_frame = after.bytes_sent - before.bytes_sent;
        delta.bytes_received = delta.max_received_frame = after.bytes_received - before.bytes_received;
        call_stats->merge(delta);
    }
    if (reply.type == FrameType::error) rethrow_remote(reply.message);
}

std::vector<ViewEntry> Cluster::tracked_views(std::size_t worker) const
{
    std::vector<ViewEntry> out;
    for (const auto& [ns, var] : workers_.at(worker).views) out.push_back({ns, var});
    return out;
}

ChannelStats Cluster::stats() const
{
    ChannelStats total;
    for (const auto& w : workers_) total.merge(w.channel.stats());
    return total;
}

void Cluster::reset_stats()
{
    for (auto& w : workers_) w.channel.reset_stats();
}

void Cluster::mark_dead(Worker& w)
{
    w.alive = false;
    w.channel.close();
    if (w.pid > 0) {
        int status = 0;
        ::waitpid(w.pid, &status, 0);
        w.pid = -w.pid;
    }
}

void Cluster::reap()
{
    for (auto& w : workers_) {
        if (w.pid <= 0) continue;
        int status = 0;
        if (::waitpid(w.pid, &status, WNOHANG) == w.pid) {
            w.alive = false;
            w.channel.close();
            w.pid = -w.pid; // reaped; the id stays visible for diagnostics
        }
    }
}

void Cluster::stop()
{
    for (auto& w : workers_) {
        if (w.alive && w.channel.open()) {
            try {
                TaskFrame bye;
                bye.type = FrameType::shutdown;
                w.channel.send(bye);
                w.channel.recv();
            } catch (const std::exception&) {
                // already gone
            }
        }
        w.alive = false;
        w.channel.close();
        if (w.pid > 0) {
            int status = 0;
            while (::waitpid(w.pid, &status, 0) < 0 && errno == EINTR) {
            }
            w.pid = -w.pid;
        }
    }
}

Cluster make_cluster(std::size_t n, ClusterOptions options) { return Cluster(n, std::move(options)); }

void memshare_gc(std::string_view ns, Cluster& cluster, Registry& registry)
{
    std::vector<std::string> unreleased;
    for (std::size_t i = 0; i < cluster.size(); ++i) {
        const auto known = cluster.tracked_views(i);
        TaskFrame gc;
        gc.type = FrameType::gc;
        gc.ns = std::string(ns);
        try {
            const auto reply = cluster.request(i, gc);
            if (reply.type == FrameType::error) rethrow_remote(reply.message);
        } catch (const Error&) {
            auto pid = cluster.pids()[i];
            if (pid < 0) pid = -pid;
            const auto before = unreleased.size();
            for (const auto& v : known)
                if (v.ns == ns) unreleased.push_back("worker " + std::to_string(pid) + ": " + v.variable);
            if (unreleased.size() == before) unreleased.push_back("worker " + std::to_string(pid) + ": none tracked");
        }
    }
    registry.release_namespace(ns);
    if (!unreleased.empty()) {
        cluster.reap();
        const auto swept = sweep_orphans(ns);
        std::string msg = "gc of '" + std::string(ns) + "' could not reach every worker; un-released views:";
        for (const auto& u : unreleased) msg += " [" + u + "]";
        msg += "; swept " + std::to_string(swept.size()) + " orphaned variable(s)";
        throw Error(ErrorCode::WorkerUnreachable, msg);
    }
}

// ---------------------------------------------------------------------------

WorkerSession::WorkerSession(Registry& registry, const KernelTable& kernels) : registry_(registry), kernels_(kernels) {}

WorkerSession::~WorkerSession()
{
    if (!finished_) shutdown();
}

TaskFrame WorkerSession::handle(TaskFrame frame)
{
    try {
        switch (frame.type) {
        case FrameType::attach: return attach(frame);
        case FrameType::run: return run(frame);
        case FrameType::release: return release(frame);
        case FrameType::gc: return gc(frame);
        case FrameType::shutdown: return shutdown();
        case FrameType::load: {
            private_copies_.insert_or_assign(frame.x_name, Matrix(frame.nrow, frame.ncol, std::move(frame.payload)));
            ::malloc_trim(0); // the receive buffer
            return TaskFrame::make_result({});
        }
        default:
            return TaskFrame::make_error("ProtocolError: unexpected frame type " +
                                         std::to_string(static_cast<int>(frame.type)));
        }
    } catch (const std::exception& e) {
        return TaskFrame::make_error(e.what());
    }
}

TaskFrame WorkerSession::attach(const TaskFrame& f)
{
    std::vector<std::string> wanted;
    if (f.margin != Margin::list && !f.x_name.empty()) wanted.push_back(f.x_name);
    for (const auto& v : f.extra_vars) wanted.push_back(parse_binding(v).variable);
    std::vector<std::string> missing;
    for (const auto& name : wanted) {
        if (cache_.count({f.ns, name}) || private_copies_.count(name))
            ++cache_hits_;
        else if (std::find(missing.begin(), missing.end(), name) == missing.end())
            missing.push_back(name);
    }
    if (!missing.empty()) {
        ++retrieve_calls_;
        for (auto& [name, view] : registry_.retrieve_views(f.ns, missing)) cache_.emplace(std::make_pair(f.ns, name), view);
    }
    return TaskFrame::make_result({{static_cast<double>(retrieve_calls_), static_cast<double>(cache_hits_),
                                    static_cast<double>(cache_.size())}});
}

TaskFrame WorkerSession::run(const TaskFrame& f)
{
    const auto* kernel = kernels_.find(f.kernel);
    if (kernel == nullptr) throw Error(ErrorCode::KernelUnknown, "kernel '" + f.kernel + "' is not in this worker's table");

    KernelExtras extras;
    for (const auto& v : f.extra_vars) {
        const auto b = parse_binding(v);
        auto it = cache_.find({f.ns, b.variable});
        if (it == cache_.end())
            throw Error(ErrorCode::NotHeld, "shared variable '" + b.variable + "' used before attach");
        extras.emplace(b.arg, Slice{it->second.values(), it->second.nrow(), it->second.ncol()});
    }

    std::vector<std::vector<double>> outputs;
    outputs.reserve(f.indices.size());

    if (f.margin == Margin::list) {
        for (auto index : f.indices) {
            const auto element = f.x_name + "." + std::to_string(index);
            ++retrieve_calls_;
            auto view = registry_.retrieve_view(f.ns, element);
            try {
                outputs.push_back(kernel->fn(Slice{view.values(), view.nrow(), view.ncol()}, extras));
            } catch (...) {
                registry_.release_views(f.ns, {element});
                throw;
            }
            registry_.release_views(f.ns, {element});
        }
        return TaskFrame::make_result(std::move(outputs));
    }

    std::span<const double> data;
    std::uint64_t nrow = 0, ncol = 0;
    if (auto pc = private_copies_.find(f.x_name); pc != private_copies_.end()) {
        data = pc->second.values();
        nrow = pc->second.nrow();
        ncol = pc->second.ncol();
    } else if (auto it = cache_.find({f.ns, f.x_name}); it != cache_.end()) {
        data = it->second.values();
        nrow = it->second.nrow();
        ncol = it->second.ncol();
    } else {
        throw Error(ErrorCode::NotHeld, "run on '" + f.x_name + "' before attach");
    }

    std::vector<double> scratch;
    for (auto index : f.indices) {
        if (f.margin == Margin::cols) {
            if (index >= ncol) throw Error(ErrorCode::InvalidArgument, "column index out of range");
            outputs.push_back(kernel->fn(Slice{data.subspan(index * nrow, nrow), nrow, 1}, extras));
        } else {
            if (index >= nrow) throw Error(ErrorCode::InvalidArgument, "row index out of range");
            scratch.resize(ncol);
            for (std::uint64_t j = 0; j < ncol; ++j) scratch[j] = data[j * nrow + index];
            outputs.push_back(kernel->fn(Slice{scratch, ncol, 1}, extras));
        }
    }
    return TaskFrame::make_result(std::move(outputs));
}

void WorkerSession::drop(const std::string& ns, const std::string& name)
{
    if (cache_.erase({ns, name}) > 0) registry_.release_views(ns, {name});
}

TaskFrame WorkerSession::release(const TaskFrame& f)
{
    if (!f.x_name.empty()) {
        if (private_copies_.erase(f.x_name) > 0) ::malloc_trim(0);
        drop(f.ns, f.x_name);
    }
    for (const auto& v : f.extra_vars) drop(f.ns, parse_binding(v).variable);
    return TaskFrame::make_result({{static_cast<double>(cache_.size())}});
}

TaskFrame WorkerSession::gc(const TaskFrame& f)
{
    std::size_t released = 0;
    for (auto it = cache_.begin(); it != cache_.end();) {
        if (it->first.first == f.ns) {
            registry_.release_views(it->first.first, {it->first.second});
            it = cache_.erase(it);
            ++released;
        } else {
            ++it;
        }
    }
    return TaskFrame::make_result({{static_cast<double>(released), static_cast<double>(cache_.size())}});
}

TaskFrame WorkerSession::shutdown()
{
    for (auto& [key, view] : cache_) {
        try {
            registry_.release_views(key.first, {key.second});
        } catch (const std::exception& e) {
            log::write(log::Level::error, e.what());
        }
    }
    cache_.clear();
    private_copies_.clear();
    finished_ = true;
    return TaskFrame::make_result({{static_cast<double>(registry_.view_list().size())}});
}

int worker_loop(Channel& channel, const KernelTable& kernels, Registry& registry)
{
    WorkerSession session(registry, kernels);
    try {
        TaskFrame hello;
        hello.type = FrameType::hello;
        hello.pid = static_cast<std::uint32_t>(::getpid());
        hello.kernel_hash = kernels.name_hash();
        channel.send(hello);
        while (!session.finished()) {
            TaskFrame frame;
            try {
                frame = channel.recv();
            } catch (const ChannelClosed&) {
                break;
            } catch (const Error& e) {
                channel.send(TaskFrame::make_error(e.what()));
                continue;
            }
            auto reply = session.handle(std::move(frame));
            try {
                channel.send(reply);
            } catch (const ChannelClosed&) {
                throw;
            } catch (const Error& e) {
                // reply could not be encoded, e.g. an output over the cap
                channel.send(TaskFrame::make_error(e.what()));
            }
        }
    } catch (const ChannelClosed&) {
        // master went away; views are released below
    }
    return 0;
}

int worker_main(int argc, char** argv, const KernelTable& kernels)
{
    int fd = -1;
    for (int i = 1; i + 1 < argc; ++i)
        if (std::strcmp(argv[i], "--fd") == 0) fd = std::atoi(argv[i + 1]);
    if (fd < 0) {
        log::write(log::Level::error, "worker needs --fd <descriptor>");
        return 2;
    }
    ::signal(SIGPIPE, SIG_IGN);
    Channel channel(fd);
    const int rc = worker_loop(channel, kernels);
    process_registry().shutdown();
    return rc;
}

} // namespace shmkit
