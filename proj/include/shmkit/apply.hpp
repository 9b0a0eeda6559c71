#pragma once

// Parallel map over the rows, columns or list elements of a shared variable.
// Only names and indices travel to workers; each worker attaches views once
// per call and reads the payload in place.

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "shmkit/cluster.hpp"
#include "shmkit/kernels.hpp"
#include "shmkit/matrix.hpp"
#include "shmkit/wire.hpp"

namespace shmkit {

// A kernel argument: either a value this call shares (and releases again), or
// the name of a variable already registered in the namespace.
using SharedInput = std::variant<VariableRef, std::string>;

struct ApplyOptions {
    std::string ns = "apply_ns";
    Cluster* cluster = nullptr;
    std::map<std::string, SharedInput> vars; // keys must equal the kernel's extra arguments
    std::optional<std::size_t> max_cores;     // only used when cluster is null
    ClusterOptions cluster_options;           // for an internally created cluster
    ChannelStats* stats = nullptr;            // accumulates every exchange of the call
};

using ApplyResult = std::vector<std::vector<double>>;

// Errors: KernelUnknown, VarNameMismatch, InvalidArgument (margin=list),
// WorkerCrash (namespace swept), plus anything a kernel raises remotely.
ApplyResult mem_apply(const Matrix& x, Margin margin, std::string_view kernel, const ApplyOptions& options = {});
ApplyResult mem_apply(const std::string& x_name, Margin margin, std::string_view kernel,
                      const ApplyOptions& options = {});

ApplyResult mem_lapply(std::span<const VariableRef> x, std::string_view kernel, const ApplyOptions& options = {});
ApplyResult mem_lapply(const std::string& list_name, std::string_view kernel, const ApplyOptions& options = {});

// Single-process reference: the same kernel entry called in index order.
ApplyResult serial_apply(const Matrix& x, Margin margin, std::string_view kernel,
                         const std::map<std::string, std::span<const double>>& vars = {},
                         const KernelTable& kernels = builtin_kernels());
ApplyResult serial_lapply(std::span<const VariableRef> x, std::string_view kernel,
                          const std::map<std::string, std::span<const double>>& vars = {},
                          const KernelTable& kernels = builtin_kernels());

// Contiguous block of [0, n) assigned to worker k of w.
std::pair<std::size_t, std::size_t> block_range(std::size_t n, std::size_t w, std::size_t k) noexcept;

// Lower layer shared by mem_apply and the copy-mode baseline: attach, run the
// indices of [0, n) in static blocks, release. `x_name` must already be
// resolvable on every worker (shared or privately loaded).
struct Dispatch {
    std::string ns;
    std::string x_name;
    Margin margin = Margin::cols;
    std::size_t count = 0;
    std::string kernel;
    std::vector<std::string> extra_vars; // rendered bindings
    bool release_x = true;               // false keeps private copies loaded
};

ApplyResult dispatch(Cluster& cluster, const Dispatch& job, ChannelStats* stats = nullptr);

// Unique variable name for a temporary of this process.
std::string temporary_name(std::string_view hint);

} // namespace shmkit
