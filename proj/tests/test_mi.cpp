#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <numbers>
#include <random>

#include "shmkit/cluster.hpp"
#include "shmkit/error.hpp"
#include "shmkit/mi.hpp"
#include "support/common.hpp"

using namespace shmkit;
using namespace shmkit::mi;

namespace {

// Plug-in MI of x discretized into equal-width bins.
double binned_mi(const std::vector<double>& x, const std::vector<LabelId>& y, int bins = 256)
{
    const auto [lo, hi] = std::minmax_element(x.begin(), x.end());
    const double width = (*hi - *lo) / bins;
    std::map<std::pair<int, LabelId>, double> joint;
    std::map<int, double> px;
    std::map<LabelId, double> py;
    const double n = static_cast<double>(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        int b = static_cast<int>((x[i] - *lo) / width);
        b = std::min(b, bins - 1);
        joint[{b, y[i]}] += 1 / n;
        px[b] += 1 / n;
        py[y[i]] += 1 / n;
    }
    double mi = 0;
    for (const auto& [key, p] : joint) mi += p * std::log(p / (px[key.first] * py[key.second]));
    return mi;
}

struct TwoClass {
    std::vector<double> x;
    std::vector<LabelId> y;
};

TwoClass two_gaussians(double separation, std::size_t per_class, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n;
    TwoClass out;
    for (std::size_t i = 0; i < per_class; ++i) {
        out.x.push_back(n(rng));
        out.y.push_back(0);
        out.x.push_back(separation + n(rng));
        out.y.push_back(1);
    }
    return out;
}

Matrix planted(std::size_t rows, std::size_t cols, std::vector<LabelId>& y, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n;
    y.resize(rows);
    for (std::size_t i = 0; i < rows; ++i) y[i] = static_cast<LabelId>(i % 2);
    Matrix x(rows, cols);
    for (std::size_t j = 0; j < cols; ++j)
        for (std::size_t i = 0; i < rows; ++i) x(i, j) = n(rng) + (j < 5 ? 3.0 * y[i] : 0.0);
    return x;
}

ErrorCode code_of(auto&& fn)
{
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    return ErrorCode::OutOfMemory;
}

} // namespace

TEST_CASE("label distributions")
{
    auto d = label_distribution(std::vector<LabelId>{0, 0, 1, 1});
    CHECK(d.p_y == std::vector<double>{0.5, 0.5});
    d = label_distribution(std::vector<LabelId>{0, 0, 0, 1});
    CHECK(d.p_y == std::vector<double>{0.75, 0.25});
    CHECK(d.counts == std::vector<std::uint64_t>{3, 1});
    d = label_distribution(std::vector<LabelId>{4});
    CHECK(d.p_y == std::vector<double>{1.0});
    CHECK(d.classes == std::vector<LabelId>{4});
    CHECK(d.entropy() == 0.0);
    CHECK(label_distribution(std::vector<LabelId>{7, 2, 7, 2}).entropy() == doctest::Approx(std::numbers::ln2));
    CHECK(code_of([] { label_distribution(std::vector<LabelId>{}); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("independent feature scores near zero")
{
    std::mt19937_64 rng(31);
    std::normal_distribution<double> n;
    std::bernoulli_distribution coin;
    std::vector<double> x(20000);
    std::vector<LabelId> y(20000);
    for (std::size_t i = 0; i < x.size(); ++i) {
        x[i] = n(rng);
        y[i] = coin(rng) ? 1 : 0;
    }
    const auto s = mi_pde(x, y);
    CHECK(s.mi_nats < 0.02);
    CHECK(s.mi_nats >= -1e-6);
}

TEST_CASE("separated classes reach the label entropy")
{
    const auto tc = two_gaussians(8.0, 5000, 3);
    const auto s = mi_pde(tc.x, tc.y);
    CHECK(std::abs(s.mi_nats - std::numbers::ln2) < 0.1 * std::numbers::ln2);
    CHECK(s.mi_nats <= std::numbers::ln2 + 1e-6);
    CHECK(std::abs(binned_mi(tc.x, tc.y) - std::numbers::ln2) < 0.01);
}

TEST_CASE("score never exceeds the label entropy")
{
    std::mt19937_64 rng(101);
    for (int t = 0; t < 100; ++t) {
        const std::size_t n = 20 + rng() % 600;
        const std::size_t k = 1 + rng() % 5;
        std::vector<double> x(n);
        std::vector<LabelId> y(n);
        std::normal_distribution<double> noise;
        const double shift = static_cast<double>(rng() % 10);
        for (std::size_t i = 0; i < n; ++i) {
            y[i] = static_cast<LabelId>(rng() % k);
            x[i] = noise(rng) + shift * y[i];
        }
        if (std::adjacent_find(x.begin(), x.end(), std::not_equal_to<>()) == x.end()) continue;
        try {
            const auto s = mi_pde(x, y);
            const double bound = label_distribution(y).entropy();
            CHECK(s.mi_nats <= eligible_entropy(y) + 1e-6);
            if (s.skipped_classes.empty()) CHECK(s.mi_nats <= bound + 1e-6);
            CHECK(s.mi_nats >= -1e-6);
        } catch (const Error& e) {
            CHECK(e.code() == ErrorCode::NoEligibleClass);
        }
    }
}

TEST_CASE("agreement with the binned oracle and monotonicity")
{
    double previous = -1;
    for (int step = 0; step <= 9; ++step) {
        const double sep = 6.0 * step / 9.0;
        const auto tc = two_gaussians(sep, 3000, 500 + step);
        const double score = mi_pde(tc.x, tc.y).mi_nats;
        CHECK(score >= previous - 1e-3);
        previous = score;
        if (sep >= 2.0) CHECK(std::abs(score - binned_mi(tc.x, tc.y)) <= 0.15 * binned_mi(tc.x, tc.y));
    }
}

TEST_CASE("affine and permutation behaviour")
{
    const auto tc = two_gaussians(1.5, 800, 4);
    const double base = mi_pde(tc.x, tc.y).mi_nats;
    std::vector<double> moved(tc.x.size());
    for (std::size_t i = 0; i < moved.size(); ++i) moved[i] = -3 + 2.5 * tc.x[i];
    CHECK(mi_pde(moved, tc.y).mi_nats == doctest::Approx(base).epsilon(1e-6));

    std::vector<std::size_t> order(tc.x.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(6);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<double> px;
    std::vector<LabelId> py;
    for (auto i : order) {
        px.push_back(tc.x[i]);
        py.push_back(tc.y[i]);
    }
    const double shuffled = mi_pde(px, py).mi_nats;
    CHECK(std::memcmp(&shuffled, &base, sizeof base) == 0);

    std::vector<double> nulls;
    for (int t = 0; t < 20; ++t) {
        auto y = tc.y;
        std::shuffle(y.begin(), y.end(), rng);
        nulls.push_back(mi_pde(tc.x, y).mi_nats);
    }
    std::sort(nulls.begin(), nulls.end());
    CHECK(nulls[18] < 0.02);
}

TEST_CASE("small classes are skipped")
{
    auto tc = two_gaussians(2.0, 100, 9);
    for (int i = 0; i < 3; ++i) {
        tc.x.push_back(50.0 + i);
        tc.y.push_back(7);
    }
    const auto s = mi_pde(tc.x, tc.y);
    CHECK(s.skipped_classes == std::vector<LabelId>{7});
    CHECK(s.mi_nats <= std::numbers::ln2 + 1e-6);
    CHECK(eligible_entropy(tc.y) == doctest::Approx(std::numbers::ln2));
    const auto encoded = encode_score(s);
    const auto back = decode_score(encoded, 12);
    CHECK(back.feature_index == 12);
    CHECK(back.mi_nats == s.mi_nats);
    CHECK(back.skipped_classes == s.skipped_classes);
}

TEST_CASE("mi errors")
{
    const std::vector<double> x{1, 2, 3};
    CHECK(code_of([&] { mi_pde(x, std::vector<LabelId>{0, 1}); }) == ErrorCode::LengthMismatch);
    CHECK(code_of([] { mi_pde(std::vector<double>(10, 2.0), std::vector<LabelId>(10, 0)); }) ==
          ErrorCode::DegenerateFeature);
    CHECK(code_of([] {
              mi_pde(std::vector<double>{1, 2, 3, 4, 5, 6}, std::vector<LabelId>{0, 0, 1, 1, 2, 2});
          }) == ErrorCode::NoEligibleClass);
    // A class with no spread has no radius and is skipped.
    std::vector<double> cx{1, 1, 1, 1, 1, 2, 3, 4, 5, 6};
    std::vector<LabelId> cy{0, 0, 0, 0, 0, 1, 1, 1, 1, 1};
    const auto s = mi_pde(cx, cy);
    CHECK(s.skipped_classes == std::vector<LabelId>{0});
    CHECK(std::abs(s.mi_nats) < 1e-9);
}

TEST_CASE("planted features are ranked first, serially and in parallel")
{
    std::vector<LabelId> y;
    const auto x = planted(1000, 50, y, 17);
    const auto serial = select_features_serial(x, y);
    REQUIRE(serial.ranked.size() == 50);
    std::set<std::uint64_t> top;
    for (int k = 0; k < 5; ++k) top.insert(serial.ranked[k].feature_index);
    CHECK(top == std::set<std::uint64_t>{0, 1, 2, 3, 4});
    for (std::size_t k = 1; k < serial.ranked.size(); ++k)
        CHECK(serial.ranked[k - 1].mi_nats >= serial.ranked[k].mi_nats);

    auto cluster = make_cluster(4);
    SelectionRequest req;
    req.ns = testing::unique_ns("mi");
    req.cluster = &cluster;
    const auto parallel = select_features(x, y, req);
    REQUIRE(parallel.ranked.size() == serial.ranked.size());
    for (std::size_t k = 0; k < serial.ranked.size(); ++k) {
        CHECK(parallel.ranked[k].feature_index == serial.ranked[k].feature_index);
        CHECK(std::memcmp(&parallel.ranked[k].mi_nats, &serial.ranked[k].mi_nats, sizeof(double)) == 0);
    }
    CHECK(testing::live_segments(req.ns) == 0);

    req.threshold = std::numeric_limits<double>::infinity();
    const auto none = select_features(x, y, req);
    REQUIRE(none.selected);
    CHECK(none.selected->empty());

    const auto thresholded = rank_scores(serial.ranked, serial.ranked[4].mi_nats);
    REQUIRE(thresholded.selected);
    CHECK(thresholded.selected->size() == 5);
}

TEST_CASE("score export")
{
    std::vector<MIScore> scores{{0, 0.1, {}}, {1, 0.5, {3, 4}}, {2, 0.3, {}}, {3, 0.3, {}}};
    const auto sel = rank_scores(scores, std::nullopt);
    CHECK(sel.ranked[0].feature_index == 1);
    CHECK(sel.ranked[1].feature_index == 2);
    CHECK(sel.ranked[2].feature_index == 3);
    CHECK_FALSE(sel.selected);
    const auto summary = summarize(sel);
    CHECK(summary.count == 4);
    CHECK(summary.min == 0.1);
    CHECK(summary.max == 0.5);
    CHECK(summary.median == doctest::Approx(0.3));

    const auto path = std::filesystem::temp_directory_path() / ("scores_" + std::to_string(::getpid()) + ".csv");
    const std::vector<std::string> names{"g0", "g1", "g2", "g3"};
    write_scores_csv(path, sel, names);
    std::ifstream in(path);
    std::string header, first;
    std::getline(in, header);
    std::getline(in, first);
    CHECK(header == "feature_index,feature_name,mi_nats,skipped_classes");
    CHECK(first.rfind("1,g1,0.5,", 0) == 0);
    CHECK(first.find("3;4") != std::string::npos);
    std::filesystem::remove(path);
}
