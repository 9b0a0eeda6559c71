#include "shmkit/mi.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include "shmkit/apply.hpp"
#include "shmkit/error.hpp"

namespace shmkit::mi {

double LabelDistribution::entropy() const noexcept
{
    double h = 0.0;
    for (double p : p_y)
        if (p > 0.0) h -= p * std::log(p);
    return h;
}

LabelDistribution label_distribution(std::span<const LabelId> y)
{
    if (y.empty()) throw Error(ErrorCode::InvalidArgument, "label vector is empty");
    std::map<LabelId, std::uint64_t> counts;
    for (auto label : y) ++counts[label];
    LabelDistribution dist;
    for (const auto& [label, count] : counts) {
        dist.classes.push_back(label);
        dist.counts.push_back(count);
        dist.p_y.push_back(static_cast<double>(count) / static_cast<double>(y.size()));
    }
    return dist;
}

double eligible_entropy(std::span<const LabelId> y, std::size_t min_class_count)
{
    const auto dist = label_distribution(y);
    std::uint64_t total = 0;
    for (auto c : dist.counts)
        if (c >= min_class_count) total += c;
    double h = 0.0;
    for (auto c : dist.counts) {
        if (c < min_class_count) continue;
        const double p = static_cast<double>(c) / static_cast<double>(total);
        h -= p * std::log(p);
    }
    return h;
}

MIScore mi_pde(std::span<const double> x, std::span<const LabelId> y, const MIOptions& options)
{
    if (x.size() != y.size())
        throw Error(ErrorCode::LengthMismatch, "feature has " + std::to_string(x.size()) + " values but there are " +
                                                   std::to_string(y.size()) + " labels");
    if (x.size() < 2) throw Error(ErrorCode::DegenerateFeature, "feature needs at least two values");
    const auto [mn, mx] = std::minmax_element(x.begin(), x.end());
    if (*mn == *mx) throw Error(ErrorCode::DegenerateFeature, "feature is constant");

    const auto grid = density::default_grid(x, options.grid_points);
    const auto dist = label_distribution(y);

    MIScore score;
    std::vector<std::vector<double>> class_density;
    std::vector<double> weight;
    std::vector<double> xc;
    for (std::size_t c = 0; c < dist.classes.size(); ++c) {
        if (dist.counts[c] < options.min_class_count) {
            score.skipped_classes.push_back(dist.classes[c]);
            continue;
        }
        xc.clear();
        for (std::size_t i = 0; i < x.size(); ++i)
            if (y[i] == dist.classes[c]) xc.push_back(x[i]);
        try {
            class_density.push_back(density::pde(xc, std::span<const double>(grid), options.radius).values);
        } catch (const Error& e) {
            // A class concentrated on one value has no PDE radius.
            if (e.code() != ErrorCode::DegenerateSample) throw;
            score.skipped_classes.push_back(dist.classes[c]);
            continue;
        }
        weight.push_back(static_cast<double>(dist.counts[c]));
    }
    if (class_density.empty()) throw Error(ErrorCode::NoEligibleClass, "no class has enough observations");

    double total = 0.0;
    for (double w : weight) total += w;
    for (double& w : weight) w /= total;

    std::vector<double> marginal(grid.size(), 0.0);
    if (options.marginal == Marginal::mixture) {
        for (std::size_t c = 0; c < class_density.size(); ++c)
            for (std::size_t g = 0; g < grid.size(); ++g) marginal[g] += weight[c] * class_density[c][g];
    } else {
        marginal = density::pde(x, std::span<const double>(grid), options.radius).values;
    }

    std::vector<double> integrand(grid.size());
    double mi = 0.0;
    for (std::size_t c = 0; c < class_density.size(); ++c) {
        const auto& pc = class_density[c];
        for (std::size_t g = 0; g < grid.size(); ++g) {
            integrand[g] = pc[g] > 0.0 ? pc[g] * std::log(pc[g] / std::max(marginal[g], options.epsilon)) : 0.0;
        }
        mi += weight[c] * density::trapezoid(grid, integrand);
    }
    std::sort(score.skipped_classes.begin(), score.skipped_classes.end());
    score.mi_nats = mi;
    return score;
}

std::vector<double> encode_score(const MIScore& score)
{
    std::vector<double> out{score.mi_nats, static_cast<double>(score.skipped_classes.size())};
    for (auto c : score.skipped_classes) out.push_back(static_cast<double>(c));
    return out;
}

MIScore decode_score(std::span<const double> encoded, std::uint64_t feature_index)
{
    if (encoded.size() < 2) throw Error(ErrorCode::ProtocolError, "malformed MI score");
    MIScore s;
    s.feature_index = feature_index;
    s.mi_nats = encoded[0];
    const auto k = static_cast<std::size_t>(encoded[1]);
    if (encoded.size() != 2 + k) throw Error(ErrorCode::ProtocolError, "malformed MI score");
    for (std::size_t i = 0; i < k; ++i) s.skipped_classes.push_back(static_cast<LabelId>(encoded[2 + i]));
    return s;
}

Selection rank_scores(std::vector<MIScore> scores, std::optional<double> threshold)
{
    std::stable_sort(scores.begin(), scores.end(), [](const MIScore& a, const MIScore& b) {
        if (a.mi_nats != b.mi_nats) return a.mi_nats > b.mi_nats;
        return a.feature_index < b.feature_index;
    });
    Selection sel;
    if (threshold) {
        sel.selected.emplace();
        for (const auto& s : scores)
            if (s.mi_nats >= *threshold) sel.selected->push_back(s.feature_index);
    }
    sel.ranked = std::move(scores);
    return sel;
}

Selection select_features_serial(const Matrix& x, std::span<const LabelId> y, std::optional<double> threshold,
                                 const MIOptions& options)
{
    if (y.size() != x.nrow())
        throw Error(ErrorCode::LengthMismatch, "matrix has " + std::to_string(x.nrow()) + " rows but there are " +
                                                   std::to_string(y.size()) + " labels");
    std::vector<MIScore> scores;
    for (std::size_t j = 0; j < x.ncol(); ++j) {
        auto s = mi_pde(x.column(j), y, options);
        s.feature_index = j;
        scores.push_back(std::move(s));
    }
    return rank_scores(std::move(scores), threshold);
}

namespace {

Selection collect(const ApplyResult& results, std::optional<double> threshold)
{
    std::vector<MIScore> scores;
    scores.reserve(results.size());
    for (std::size_t j = 0; j < results.size(); ++j) scores.push_back(decode_score(results[j], j));
    return rank_scores(std::move(scores), threshold);
}

std::vector<double> labels_as_doubles(std::span<const LabelId> y)
{
    return std::vector<double>(y.begin(), y.end());
}

ApplyOptions apply_options(const SelectionRequest& request, const std::vector<double>& labels)
{
    ApplyOptions opts;
    opts.ns = request.ns;
    opts.cluster = request.cluster;
    opts.max_cores = request.max_cores;
    opts.vars.emplace("labels", SharedInput(VariableRef::of_vector(labels)));
    return opts;
}

} // namespace

Selection select_features(const Matrix& x, std::span<const LabelId> y, const SelectionRequest& request)
{
    if (y.size() != x.nrow())
        throw Error(ErrorCode::LengthMismatch, "matrix has " + std::to_string(x.nrow()) + " rows but there are " +
                                                   std::to_string(y.size()) + " labels");
    const auto labels = labels_as_doubles(y);
    return collect(mem_apply(x, Margin::cols, "mi_pde", apply_options(request, labels)), request.threshold);
}

Selection select_features(const std::string& x_name, std::span<const LabelId> y, const SelectionRequest& request)
{
    const auto labels = labels_as_doubles(y);
    return collect(mem_apply(x_name, Margin::cols, "mi_pde", apply_options(request, labels)), request.threshold);
}

void write_scores_csv(const std::filesystem::path& path, const Selection& selection,
                      std::span<const std::string> feature_names)
{
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + path.string());
    out.precision(17);
    out << "feature_index,feature_name,mi_nats,skipped_classes\n";
    for (const auto& s : selection.ranked) {
        out << s.feature_index << ',';
        if (s.feature_index < feature_names.size())
            out << feature_names[s.feature_index];
        else
            out << 'f' << s.feature_index;
        out << ',' << s.mi_nats << ',';
        for (std::size_t i = 0; i < s.skipped_classes.size(); ++i) out << (i ? ";" : "") << s.skipped_classes[i];
        out << '\n';
    }
    if (!out) throw Error(ErrorCode::IoFailure, "failed writing " + path.string());
}

ScoreSummary summarize(const Selection& selection)
{
    ScoreSummary s;
    s.count = selection.ranked.size();
    if (s.count == 0) return s;
    std::vector<double> v;
    for (const auto& r : selection.ranked) v.push_back(r.mi_nats);
    std::sort(v.begin(), v.end());
    s.min = v.front();
    s.max = v.back();
    s.q1 = density::quantile_sorted(v, 0.25);
    s.median = density::quantile_sorted(v, 0.5);
    s.q3 = density::quantile_sorted(v, 0.75);
    return s;
}

} // namespace shmkit::mi
