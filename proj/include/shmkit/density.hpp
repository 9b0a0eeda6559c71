#pragma once

// Pareto Density Estimation for univariate samples.
//
// The Pareto radius R is the 18% quantile of all pairwise absolute distances
// |x_i - x_j| (i < j), using the linear-interpolation quantile rule
//
//     h = (m - 1) * q,   Q = d[floor(h)] + (h - floor(h)) * (d[floor(h) + 1] - d[floor(h)])
//
// over the ascending distances d[0..m). For n above the subsample threshold
// the distances are taken over a seeded uniform subsample of points. The
// density at a grid point g is #{i : |x_i - g| <= R} / (n * 2R), renormalized
// so the trapezoidal integral over the grid is one.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace shmkit::density {

// -p ln p on (0, 1]; throws Error(DomainError) elsewhere.
double info_content(double p);

// 1 - I(p) / I(1/e): zero at the optimum, one at p = 1.
double unrealized_potential(double p);

// Linear-interpolation quantile of an ascending sequence.
double quantile_sorted(std::span<const double> ascending, double q);

inline constexpr double kParetoQuantile = 0.18;
inline constexpr std::size_t kDefaultGridPoints = 200;

struct RadiusOptions {
    std::size_t subsample_threshold = 5000;
    std::uint64_t seed = 0x5EED'1234ULL;
    double quantile = kParetoQuantile;
};

struct RadiusResult {
    double radius = 0.0;
    bool subsampled = false;
    std::uint64_t seed = 0;
    std::size_t points_used = 0;
};

// Throws Error(DegenerateSample) when fewer than two distinct values exist.
// If the quantile itself is zero (heavy ties) the smallest positive pairwise
// distance is returned instead, so the radius is always strictly positive.
RadiusResult pareto_radius_detail(std::span<const double> x, const RadiusOptions& options = {});
double pareto_radius(std::span<const double> x, const RadiusOptions& options = {});

// 200 (or `points`) equally spaced values over [min - 0.05 range, max + 0.05 range].
std::vector<double> default_grid(std::span<const double> x, std::size_t points = kDefaultGridPoints);

double trapezoid(std::span<const double> grid, std::span<const double> values);

struct DensityEstimate {
    std::vector<double> grid;
    std::vector<double> values;
    double pareto_radius = 0.0;
    bool subsampled = false;
    std::uint64_t seed = 0;
};

// Raw hypersphere counts at each grid point with a given radius, not normalized.
std::vector<double> hypersphere_density(std::span<const double> x, std::span<const double> grid, double radius);

DensityEstimate pde(std::span<const double> x, std::optional<std::span<const double>> grid = std::nullopt,
                    const RadiusOptions& options = {});

} // namespace shmkit::density
