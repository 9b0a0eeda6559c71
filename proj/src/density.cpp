#include "shmkit/density.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include "shmkit/error.hpp"

namespace shmkit::density {

double info_content(double p)
{
    if (!(p > 0.0 && p <= 1.0)) throw Error(ErrorCode::DomainError, "information content needs p in (0, 1]");
    return -p * std::log(p);
}

double unrealized_potential(double p)
{
    const double optimum = info_content(1.0 / std::numbers::e);
    return 1.0 - info_content(p) / optimum;
}

double quantile_sorted(std::span<const double> ascending, double q)
{
    if (ascending.empty()) throw Error(ErrorCode::InvalidArgument, "quantile of an empty sequence");
    const double h = static_cast<double>(ascending.size() - 1) * q;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    if (lo + 1 >= ascending.size()) return ascending.back();
    const double frac = h - static_cast<double>(lo);
    return ascending[lo] + frac * (ascending[lo + 1] - ascending[lo]);
}

namespace {

std::vector<double> pairwise_distances(std::span<const double> pts)
{
    std::vector<double> d;
    d.reserve(pts.size() * (pts.size() - 1) / 2);
    for (std::size_t i = 0; i < pts.size(); ++i)
        for (std::size_t j = i + 1; j < pts.size(); ++j) d.push_back(std::abs(pts[i] - pts[j]));
    return d;
}

// Same rule as quantile_sorted, via selection instead of a full sort.
double quantile_select(std::vector<double>& d, double q)
{
    const double h = static_cast<double>(d.size() - 1) * q;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(lo), d.end());
    const double at_lo = d[lo];
    if (lo + 1 >= d.size()) return at_lo;
    const double at_hi = *std::min_element(d.begin() + static_cast<std::ptrdiff_t>(lo) + 1, d.end());
    const double frac = h - static_cast<double>(lo);
    return at_lo + frac * (at_hi - at_lo);
}

std::vector<double> seeded_subsample(std::span<const double> x, std::size_t k, std::uint64_t seed)
{
    std::vector<std::size_t> idx(x.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < k; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
        std::swap(idx[i], idx[pick(rng)]);
    }
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    std::vector<double> out;
    out.reserve(k);
    for (auto i : idx) out.push_back(x[i]);
    return out;
}

double smallest_positive_gap(std::span<const double> x)
{
    std::vector<double> s(x.begin(), x.end());
    std::sort(s.begin(), s.end());
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 1; i < s.size(); ++i)
        if (s[i] > s[i - 1]) best = std::min(best, s[i] - s[i - 1]);
    return best;
}

} // namespace

RadiusResult pareto_radius_detail(std::span<const double> x, const RadiusOptions& options)
{
    if (x.size() < 2) throw Error(ErrorCode::DegenerateSample, "Pareto radius needs at least two values");
    for (double v : x)
        if (!std::isfinite(v)) throw Error(ErrorCode::DomainError, "Pareto radius needs finite values");
    const auto [mn, mx] = std::minmax_element(x.begin(), x.end());
    if (*mn == *mx) throw Error(ErrorCode::DegenerateSample, "all values are identical; no positive radius exists");

    RadiusResult result;
    std::vector<double> d;
    if (x.size() > options.subsample_threshold && options.subsample_threshold >= 2) {
        result.subsampled = true;
        result.seed = options.seed;
        const auto pts = seeded_subsample(x, options.subsample_threshold, options.seed);
        result.points_used = pts.size();
        d = pairwise_distances(pts);
    } else {
        result.points_used = x.size();
        d = pairwise_distances(x);
    }
    result.radius = quantile_select(d, options.quantile);
    if (result.radius <= 0.0) {
        double smallest = std::numeric_limits<double>::infinity();
        for (double v : d)
            if (v > 0.0) smallest = std::min(smallest, v);
        result.radius = std::isfinite(smallest) ? smallest : smallest_positive_gap(x);
    }
    return result;
}

double pareto_radius(std::span<const double> x, const RadiusOptions& options)
{
    return pareto_radius_detail(x, options).radius;
}

std::vector<double> default_grid(std::span<const double> x, std::size_t points)
{
    if (x.empty()) throw Error(ErrorCode::InvalidArgument, "grid of an empty sample");
    if (points < 2) throw Error(ErrorCode::InvalidArgument, "grid needs at least two points");
    const auto [mn, mx] = std::minmax_element(x.begin(), x.end());
    const double range = *mx - *mn;
    const double lo = *mn - 0.05 * range;
    const double hi = *mx + 0.05 * range;
    std::vector<double> grid(points);
    const double step = (hi - lo) / static_cast<double>(points - 1);
    for (std::size_t i = 0; i < points; ++i) grid[i] = lo + step * static_cast<double>(i);
    grid.back() = hi;
    return grid;
}

double trapezoid(std::span<const double> grid, std::span<const double> values)
{
    if (grid.size() != values.size()) throw Error(ErrorCode::InvalidArgument, "grid and values differ in length");
    double total = 0.0;
    for (std::size_t i = 1; i < grid.size(); ++i) total += 0.5 * (grid[i] - grid[i - 1]) * (values[i] + values[i - 1]);
    return total;
}

std::vector<double> hypersphere_density(std::span<const double> x, std::span<const double> grid, double radius)
{
    std::vector<double> sorted(x.begin(), x.end());
    std::sort(sorted.begin(), sorted.end());
    const auto n = sorted.size();
    const auto inside = [&](std::size_t i, double g) { return std::abs(sorted[i] - g) <= radius; };
    const double scale = 1.0 / (static_cast<double>(n) * 2.0 * radius);

    std::vector<double> out(grid.size());
    for (std::size_t k = 0; k < grid.size(); ++k) {
        const double g = grid[k];
        // Binary search on the shifted bounds, then settle the edges with the
        // exact |x - g| <= R predicate.
        auto lo = static_cast<std::size_t>(std::lower_bound(sorted.begin(), sorted.end(), g - radius) - sorted.begin());
        while (lo > 0 && inside(lo - 1, g)) --lo;
        while (lo < n && !inside(lo, g) && sorted[lo] < g) ++lo;
        auto hi = static_cast<std::size_t>(std::upper_bound(sorted.begin(), sorted.end(), g + radius) - sorted.begin());
        while (hi < n && inside(hi, g)) ++hi;
        while (hi > lo && !inside(hi - 1, g)) --hi;
        out[k] = static_cast<double>(hi > lo ? hi - lo : 0) * scale;
    }
    return out;
}

DensityEstimate pde(std::span<const double> x, std::optional<std::span<const double>> grid,
                    const RadiusOptions& options)
{
    const auto radius = pareto_radius_detail(x, options);
    DensityEstimate est;
    est.grid = grid ? std::vector<double>(grid->begin(), grid->end()) : default_grid(x);
    if (est.grid.size() < 2 || !std::is_sorted(est.grid.begin(), est.grid.end()))
        throw Error(ErrorCode::InvalidArgument, "density grid must be ascending with at least two points");
    est.pareto_radius = radius.radius;
    est.subsampled = radius.subsampled;
    est.seed = radius.seed;
    est.values = hypersphere_density(x, est.grid, radius.radius);
    const double mass = trapezoid(est.grid, est.values);
    if (!(mass > 0.0)) throw Error(ErrorCode::DegenerateSample, "grid does not cover the sample");
    for (auto& v : est.values) v /= mass;
    return est;
}

} // namespace shmkit::density
