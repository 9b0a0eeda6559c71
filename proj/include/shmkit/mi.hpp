#pragma once

// Mutual information between a continuous feature and a discrete label,
//
//     I(X;Y) = sum_c p(y=c) KL(p(x|c) || p(x)),
//
// with p(x|c) estimated by PDE on a grid shared by all classes of one feature
// and p(y=c) the relative label count.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "shmkit/density.hpp"
#include "shmkit/matrix.hpp"

namespace shmkit {
class Cluster;
}

namespace shmkit::mi {

using LabelId = std::uint32_t;

struct LabelDistribution {
    std::vector<LabelId> classes; // ascending
    std::vector<double> p_y;
    std::vector<std::uint64_t> counts;

    double entropy() const noexcept;
};

// Throws Error(InvalidArgument) on an empty label vector.
LabelDistribution label_distribution(std::span<const LabelId> y);

// How p(x) is obtained on the shared grid.
//  - mixture: sum_c p(y=c) p(x|c) over the eligible classes. Consistent with
//    the class densities, so the score never exceeds H(Y).
//  - pooled_pde: an independent PDE of the pooled sample. Its radius differs
//    from the per-class radii, so the H(Y) bound can be overshot slightly.
enum class Marginal { mixture, pooled_pde };

struct MIOptions {
    std::size_t min_class_count = 5;
    double epsilon = 1e-12;
    std::size_t grid_points = density::kDefaultGridPoints;
    Marginal marginal = Marginal::mixture;
    density::RadiusOptions radius;
};

struct MIScore {
    std::uint64_t feature_index = 0;
    double mi_nats = 0.0;
    std::vector<LabelId> skipped_classes;
};

// Entropy (nats) of the eligible classes after renormalization; the upper
// bound of mi_pde under the mixture marginal.
double eligible_entropy(std::span<const LabelId> y, std::size_t min_class_count = 5);

// Errors: LengthMismatch, DegenerateFeature (pooled x constant),
// NoEligibleClass.
MIScore mi_pde(std::span<const double> x, std::span<const LabelId> y, const MIOptions& options = {});

// Kernel wire form: {mi_nats, k, skipped_0 .. skipped_{k-1}}.
std::vector<double> encode_score(const MIScore& score);
MIScore decode_score(std::span<const double> encoded, std::uint64_t feature_index);

struct Selection {
    std::vector<MIScore> ranked; // descending mi, ties by feature index
    std::optional<std::vector<std::uint64_t>> selected;
};

// Ordering and thresholding shared by the serial and parallel paths.
Selection rank_scores(std::vector<MIScore> scores, std::optional<double> threshold);

Selection select_features_serial(const Matrix& x, std::span<const LabelId> y,
                                 std::optional<double> threshold = std::nullopt, const MIOptions& options = {});

struct SelectionRequest {
    std::string ns = "mi_ns";
    Cluster* cluster = nullptr;
    std::optional<std::size_t> max_cores;
    std::optional<double> threshold;
};

// Column-wise mem_apply with the mi_pde kernel; labels travel as a shared
// variable named "labels".
Selection select_features(const Matrix& x, std::span<const LabelId> y, const SelectionRequest& request);
// Same, for a matrix already registered under `x_name` in request.ns.
Selection select_features(const std::string& x_name, std::span<const LabelId> y, const SelectionRequest& request);

void write_scores_csv(const std::filesystem::path& path, const Selection& selection,
                      std::span<const std::string> feature_names);

struct ScoreSummary {
    std::size_t count = 0;
    double min = 0, q1 = 0, median = 0, q3 = 0, max = 0;
};
ScoreSummary summarize(const Selection& selection);

} // namespace shmkit::mi
