#pragma once

// Compiled-in kernel table. Closures never cross the process boundary; the
// master names a kernel and every worker runs its own copy of the same entry.
// Master and workers verify at handshake that their name sets hash equal.

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace shmkit {

// One task unit handed to a kernel: a row, a column, or a whole list element.
struct Slice {
    std::span<const double> values;
    std::uint64_t nrow = 0;
    std::uint64_t ncol = 1;
};

using KernelExtras = std::map<std::string, Slice, std::less<>>;
using KernelFn = std::function<std::vector<double>(const Slice&, const KernelExtras&)>;

struct KernelEntry {
    std::string name;
    std::vector<std::string> extra_args; // shared variables the kernel reads, by exact name
    KernelFn fn;
    bool mutating = false;
};

class KernelTable {
public:
    void add(KernelEntry entry);
    bool erase(std::string_view name);
    const KernelEntry* find(std::string_view name) const;
    std::vector<std::string> names() const;

    // FNV-1a over the ascending names joined by '\n'.
    std::uint64_t name_hash() const;

private:
    std::map<std::string, KernelEntry, std::less<>> entries_;
};

// mean, sd, corr_with(y), matvec(y), identity_sum, mi_pde(labels)
const KernelTable& builtin_kernels();

namespace kernels {

// Strict left-to-right accumulation everywhere, so results are bitwise
// independent of how indices are spread over workers.
double mean(std::span<const double> x) noexcept;
// Sample standard deviation, denominator n - 1, two passes.
double sample_sd(std::span<const double> x) noexcept;
double pearson(std::span<const double> x, std::span<const double> y) noexcept;
double sum(std::span<const double> x) noexcept;
// Column-major (nrow x ncol) times y (ncol); each row sums over j ascending.
std::vector<double> matvec(const Slice& a, std::span<const double> y);

} // namespace kernels
} // namespace shmkit
