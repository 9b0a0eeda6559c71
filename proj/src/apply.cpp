#include "shmkit/apply.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <set>
#include <thread>

#include <unistd.h>

#include "shmkit/error.hpp"
#include "shmkit/log.hpp"
#include "shmkit/registry.hpp"

namespace shmkit {

std::pair<std::size_t, std::size_t> block_range(std::size_t n, std::size_t w, std::size_t k) noexcept
{
    return {k * n / w, (k + 1) * n / w};
}

std::string temporary_name(std::string_view hint)
{
    static std::atomic<std::uint64_t> counter{0};
    std::string name = "t" + std::to_string(::getpid()) + "_" + std::to_string(counter++);
    if (!hint.empty()) name += "_" + std::string(hint);
    if (name.size() > 56) name.resize(56);
    return name;
}

namespace {

TaskFrame task(FrameType type, const Dispatch& job)
{
    TaskFrame f;
    f.type = type;
    f.ns = job.ns;
    f.x_name = job.x_name;
    f.margin = job.margin;
    f.kernel = job.kernel;
    f.extra_vars = job.extra_vars;
    return f;
}

TaskFrame expect_result(TaskFrame reply)
{
    if (reply.type == FrameType::error) rethrow_remote(reply.message);
    if (reply.type != FrameType::result) throw Error(ErrorCode::ProtocolError, "worker replied with a non-result frame");
    return reply;
}

} // namespace

ApplyResult dispatch(Cluster& cluster, const Dispatch& job, ChannelStats* stats)
{
    ApplyResult out(job.count);
    if (job.count == 0) return out;
    const std::size_t w = cluster.size();

    std::vector<std::exception_ptr> failures(w);
    std::vector<ChannelStats> per_worker(w);
    auto body = [&](std::size_t k) {
        const auto [begin, end] = block_range(job.count, w, k);
        if (begin == end) return;
        try {
            auto attach = task(FrameType::attach, job);
            expect_result(cluster.request(k, attach, &per_worker[k]));
            std::exception_ptr failure;
            try {
                for (std::size_t i = begin; i < end; i += kIndicesPerRunFrame) {
                    auto run = task(FrameType::run, job);
                    const auto stop = std::min(end, i + kIndicesPerRunFrame);
                    for (std::size_t idx = i; idx < stop; ++idx) run.indices.push_back(idx);
                    auto reply = expect_result(cluster.request(k, run, &per_worker[k]));
                    if (reply.outputs.size() != run.indices.size())
                        throw Error(ErrorCode::ProtocolError, "worker returned the wrong number of outputs");
                    for (std::size_t o = 0; o < reply.outputs.size(); ++o) out[i + o] = std::move(reply.outputs[o]);
                }
            } catch (...) {
                failure = std::current_exception();
            }
            if (cluster.alive(k)) {
                auto release = task(FrameType::release, job);
                if (!job.release_x || job.margin == Margin::list) release.x_name.clear();
                try {
                    expect_result(cluster.request(k, release, &per_worker[k]));
                } catch (...) {
                    if (!failure) failure = std::current_exception();
                }
            }
            if (failure) std::rethrow_exception(failure);
        } catch (...) {
            failures[k] = std::current_exception();
        }
    };

    if (w == 1) {
        body(0);
    } else {
        std::vector<std::thread> threads;
        threads.reserve(w);
        for (std::size_t k = 0; k < w; ++k) threads.emplace_back(body, k);
        for (auto& t : threads) t.join();
    }
    if (stats != nullptr)
        for (const auto& s : per_worker) stats->merge(s);

    // A crash outranks the errors it causes elsewhere.
    std::exception_ptr first;
    for (auto& f : failures) {
        if (!f) continue;
        try {
            std::rethrow_exception(f);
        } catch (const Error& e) {
            if (e.code() == ErrorCode::WorkerCrash) std::rethrow_exception(f);
        } catch (...) {
        }
        if (!first) first = f;
    }
    if (first) std::rethrow_exception(first);
    return out;
}

namespace {

const KernelEntry& resolve_kernel(const ApplyOptions& options, std::string_view kernel)
{
    const KernelTable& table = options.cluster != nullptr ? options.cluster->kernels()
                               : options.cluster_options.kernels != nullptr ? *options.cluster_options.kernels
                                                                            : builtin_kernels();
    const auto* entry = table.find(kernel);
    if (entry == nullptr) throw Error(ErrorCode::KernelUnknown, "no kernel named '" + std::string(kernel) + "'");
    std::set<std::string> wanted(entry->extra_args.begin(), entry->extra_args.end());
    std::set<std::string> given;
    for (const auto& [name, value] : options.vars) given.insert(name);
    if (wanted != given) {
        std::string msg = "kernel '" + entry->name + "' takes {";
        for (const auto& a : wanted) msg += (a == *wanted.begin() ? "" : ",") + a;
        msg += "} but vars has {";
        for (const auto& a : given) msg += (a == *given.begin() ? "" : ",") + a;
        throw Error(ErrorCode::VarNameMismatch, msg + "}");
    }
    return *entry;
}

// Everything this call registered, released on every exit path.
class Temporaries {
public:
    explicit Temporaries(std::string ns) : ns_(std::move(ns)) {}
    ~Temporaries()
    {
        auto& reg = process_registry();
        try {
            if (!names_.empty()) reg.release_variables(ns_, names_);
            for (const auto& l : lists_) reg.release_list(ns_, l);
        } catch (const std::exception& e) {
            log::warn(std::string("releasing temporaries: ") + e.what());
        }
        if (swept_) sweep_orphans(ns_);
    }

    void add(const std::string& name) { names_.push_back(name); }
    void add_list(const std::string& name) { lists_.push_back(name); }
    void sweep_on_exit() { swept_ = true; }

private:
    std::string ns_;
    std::vector<std::string> names_;
    std::vector<std::string> lists_;
    bool swept_ = false;
};

std::vector<std::string> share_vars(const ApplyOptions& options, Temporaries& temps)
{
    std::vector<std::string> bindings;
    std::map<std::string, VariableRef> to_register;
    for (const auto& [arg, input] : options.vars) {
        if (const auto* name = std::get_if<std::string>(&input)) {
            bindings.push_back(render_binding(arg, *name));
        } else {
            const auto tmp = temporary_name(arg);
            to_register.emplace(tmp, std::get<VariableRef>(input));
            bindings.push_back(render_binding(arg, tmp));
        }
    }
    if (!to_register.empty()) {
        process_registry().register_variables(options.ns, to_register);
        for (const auto& [name, ref] : to_register) temps.add(name);
    }
    return bindings;
}

ApplyResult run_job(Dispatch job, const ApplyOptions& options, Temporaries& temps)
{
    if (job.count == 0) return {};
    try {
        if (options.cluster != nullptr) return dispatch(*options.cluster, job, options.stats);
        auto size = options.max_cores.value_or(default_core_count());
        size = std::clamp<std::size_t>(size, 1, job.count);
        Cluster cluster(size, options.cluster_options);
        auto out = dispatch(cluster, job, options.stats);
        cluster.stop();
        return out;
    } catch (const Error& e) {
        if (e.code() == ErrorCode::WorkerCrash) temps.sweep_on_exit();
        throw;
    }
}

} // namespace

ApplyResult mem_apply(const Matrix& x, Margin margin, std::string_view kernel, const ApplyOptions& options)
{
    if (margin == Margin::list) throw Error(ErrorCode::InvalidArgument, "mem_apply takes rows or cols");
    const auto& entry = resolve_kernel(options, kernel);
    Temporaries temps(options.ns);
    Dispatch job;
    job.ns = options.ns;
    job.margin = margin;
    job.kernel = entry.name;
    job.count = margin == Margin::cols ? x.ncol() : x.nrow();
    if (job.count == 0) return {};
    job.extra_vars = share_vars(options, temps);
    job.x_name = temporary_name("x");
    process_registry().register_variables(options.ns, {{job.x_name, VariableRef::of_matrix(x)}});
    temps.add(job.x_name);
    return run_job(std::move(job), options, temps);
}

ApplyResult mem_apply(const std::string& x_name, Margin margin, std::string_view kernel, const ApplyOptions& options)
{
    if (margin == Margin::list) throw Error(ErrorCode::InvalidArgument, "mem_apply takes rows or cols");
    const auto& entry = resolve_kernel(options, kernel);
    const auto meta = process_registry().retrieve_metadata(options.ns, x_name);
    Temporaries temps(options.ns);
    Dispatch job;
    job.ns = options.ns;
    job.x_name = x_name;
    job.margin = margin;
    job.kernel = entry.name;
    job.count = margin == Margin::cols ? meta.ncol : meta.nrow;
    if (job.count == 0) return {};
    job.extra_vars = share_vars(options, temps);
    return run_job(std::move(job), options, temps);
}

ApplyResult mem_lapply(std::span<const VariableRef> x, std::string_view kernel, const ApplyOptions& options)
{
    const auto& entry = resolve_kernel(options, kernel);
    if (x.empty()) return {};
    Temporaries temps(options.ns);
    Dispatch job;
    job.ns = options.ns;
    job.margin = Margin::list;
    job.kernel = entry.name;
    job.count = x.size();
    job.extra_vars = share_vars(options, temps);
    job.x_name = temporary_name("l");
    process_registry().register_list(options.ns, job.x_name, x);
    temps.add_list(job.x_name);
    return run_job(std::move(job), options, temps);
}

ApplyResult mem_lapply(const std::string& list_name, std::string_view kernel, const ApplyOptions& options)
{
    const auto& entry = resolve_kernel(options, kernel);
    const auto length = process_registry().list_length(options.ns, list_name);
    if (!length) throw Error(ErrorCode::NotFound, "no list '" + list_name + "' in namespace '" + options.ns + "'");
    Temporaries temps(options.ns);
    Dispatch job;
    job.ns = options.ns;
    job.x_name = list_name;
    job.margin = Margin::list;
    job.kernel = entry.name;
    job.count = *length;
    if (job.count == 0) return {};
    job.extra_vars = share_vars(options, temps);
    return run_job(std::move(job), options, temps);
}

namespace {

KernelExtras serial_extras(const std::map<std::string, std::span<const double>>& vars)
{
    KernelExtras extras;
    for (const auto& [name, values] : vars) extras.emplace(name, Slice{values, values.size(), 1});
    return extras;
}

const KernelEntry& serial_kernel(const KernelTable& kernels, std::string_view kernel)
{
    const auto* entry = kernels.find(kernel);
    if (entry == nullptr) throw Error(ErrorCode::KernelUnknown, "no kernel named '" + std::string(kernel) + "'");
    return *entry;
}

} // namespace

ApplyResult serial_apply(const Matrix& x, Margin margin, std::string_view kernel,
                         const std::map<std::string, std::span<const double>>& vars, const KernelTable& kernels)
{
    const auto& entry = serial_kernel(kernels, kernel);
    const auto extras = serial_extras(vars);
    ApplyResult out;
    if (margin == Margin::cols) {
        for (std::size_t j = 0; j < x.ncol(); ++j) out.push_back(entry.fn(Slice{x.column(j), x.nrow(), 1}, extras));
    } else if (margin == Margin::rows) {
        std::vector<double> row(x.ncol());
        for (std::size_t i = 0; i < x.nrow(); ++i) {
            for (std::size_t j = 0; j < x.ncol(); ++j) row[j] = x(i, j);
            out.push_back(entry.fn(Slice{row, x.ncol(), 1}, extras));
        }
    } else {
        throw Error(ErrorCode::InvalidArgument, "serial_apply takes rows or cols");
    }
    return out;
}

ApplyResult serial_lapply(std::span<const VariableRef> x, std::string_view kernel,
                          const std::map<std::string, std::span<const double>>& vars, const KernelTable& kernels)
{
    const auto& entry = serial_kernel(kernels, kernel);
    const auto extras = serial_extras(vars);
    ApplyResult out;
    for (const auto& v : x) out.push_back(entry.fn(Slice{v.payload, v.nrow, v.ncol}, extras));
    return out;
}

} // namespace shmkit
