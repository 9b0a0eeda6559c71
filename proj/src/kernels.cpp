#include "shmkit/kernels.hpp"

#include <cmath>

#include "shmkit/error.hpp"
#include "shmkit/mi.hpp"

namespace shmkit {

void KernelTable::add(KernelEntry entry)
{
    auto name = entry.name;
    entries_.insert_or_assign(std::move(name), std::move(entry));
}

bool KernelTable::erase(std::string_view name)
{
    auto it = entries_.find(name);
    if (it == entries_.end()) return false;
    entries_.erase(it);
    return true;
}

const KernelEntry* KernelTable::find(std::string_view name) const
{
    auto it = entries_.find(name);
    return it == entries_.end() ? nullptr : &it->second;
}

std::vector<std::string> KernelTable::names() const
{
    std::vector<std::string> out;
    for (const auto& [name, entry] : entries_) out.push_back(name);
    return out;
}

std::uint64_t KernelTable::name_hash() const
{
    std::uint64_t h = 1469598103934665603ULL;
    bool first = true;
    for (const auto& [name, entry] : entries_) {
        if (!first) {
            h ^= static_cast<unsigned char>('\n');
            h *= 1099511628211ULL;
        }
        first = false;
        for (unsigned char c : name) {
            h ^= c;
            h *= 1099511628211ULL;
        }
    }
    return h;
}

namespace kernels {

double sum(std::span<const double> x) noexcept
{
    double s = 0.0;
    for (double v : x) s += v;
    return s;
}

double mean(std::span<const double> x) noexcept { return sum(x) / static_cast<double>(x.size()); }

double sample_sd(std::span<const double> x) noexcept
{
    const double m = mean(x);
    double ss = 0.0;
    for (double v : x) ss += (v - m) * (v - m);
    return std::sqrt(ss / static_cast<double>(x.size() - 1));
}

double pearson(std::span<const double> x, std::span<const double> y) noexcept
{
    const double mx = mean(x);
    const double my = mean(y);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = x[i] - mx;
        const double dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    return sxy / std::sqrt(sxx * syy);
}

std::vector<double> matvec(const Slice& a, std::span<const double> y)
{
    if (y.size() != a.ncol)
        throw Error(ErrorCode::LengthMismatch, "matvec: matrix has " + std::to_string(a.ncol) +
                                                   " columns but y has " + std::to_string(y.size()) + " entries");
    std::vector<double> out(a.nrow, 0.0);
    for (std::uint64_t i = 0; i < a.nrow; ++i) {
        double s = 0.0;
        for (std::uint64_t j = 0; j < a.ncol; ++j) s += a.values[j * a.nrow + i] * y[j];
        out[i] = s;
    }
    return out;
}

} // namespace kernels

namespace {

const Slice& extra(const KernelExtras& extras, std::string_view name)
{
    auto it = extras.find(name);
    if (it == extras.end()) throw Error(ErrorCode::VarNameMismatch, "kernel needs shared variable '" + std::string(name) + "'");
    return it->second;
}

KernelTable make_builtins()
{
    KernelTable t;
    t.add({"mean", {}, [](const Slice& s, const KernelExtras&) { return std::vector<double>{kernels::mean(s.values)}; }});
    t.add({"sd", {}, [](const Slice& s, const KernelExtras&) { return std::vector<double>{kernels::sample_sd(s.values)}; }});
    t.add({"identity_sum", {}, [](const Slice& s, const KernelExtras&) { return std::vector<double>{kernels::sum(s.values)}; }});
    t.add({"corr_with", {"y"}, [](const Slice& s, const KernelExtras& e) {
               const auto& y = extra(e, "y");
               if (y.values.size() != s.values.size())
                   throw Error(ErrorCode::LengthMismatch, "corr_with: slice and y differ in length");
               return std::vector<double>{kernels::pearson(s.values, y.values)};
           }});
    t.add({"matvec", {"y"}, [](const Slice& s, const KernelExtras& e) { return kernels::matvec(s, extra(e, "y").values); }});
    t.add({"mi_pde", {"labels"}, [](const Slice& s, const KernelExtras& e) {
               const auto& raw = extra(e, "labels").values;
               std::vector<mi::LabelId> labels(raw.begin(), raw.end());
               return mi::encode_score(mi::mi_pde(s.values, labels));
           }});
    return t;
}

} // namespace

const KernelTable& builtin_kernels()
{
    static const KernelTable table = make_builtins();
    return table;
}

} // namespace shmkit
