#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "mtunet/error.hpp"
#include "mtunet/metrics.hpp"

using namespace mtunet;
using metrics::Mask;

namespace {

Mask make_mask(std::int64_t h, std::int64_t w, std::initializer_list<std::int64_t> on = {}) {
    Mask m{h, w, std::vector<std::uint8_t>(static_cast<std::size_t>(h * w), 0)};
    for (auto idx : on) m.data[static_cast<std::size_t>(idx)] = 1;
    return m;
}

Mask random_mask(std::int64_t h, std::int64_t w, double density, std::mt19937_64& rng) {
    Mask m{h, w, std::vector<std::uint8_t>(static_cast<std::size_t>(h * w), 0)};
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    for (auto& v : m.data) v = dist(rng) < density;
    return m;
}

// Independent oracle: boundary by direct neighbor scan, directed distances by
// exhaustive all-pairs search, nearest-rank percentile by sort + index.
std::vector<std::pair<std::int64_t, std::int64_t>> oracle_boundary(const Mask& m) {
    std::vector<std::pair<std::int64_t, std::int64_t>> pts;
    for (std::int64_t r = 0; r < m.h; ++r) {
        for (std::int64_t c = 0; c < m.w; ++c) {
            if (!m.data[r * m.w + c]) continue;
            bool edge = r == 0 || r == m.h - 1 || c == 0 || c == m.w - 1;
            if (!edge) {
                edge = !m.data[(r - 1) * m.w + c] || !m.data[(r + 1) * m.w + c] ||
                       !m.data[r * m.w + c - 1] || !m.data[r * m.w + c + 1];
            }
            if (edge) pts.emplace_back(r, c);
        }
    }
    return pts;
}

double oracle_hd95(const Mask& a, const Mask& b) {
    auto pa = oracle_boundary(a);
    auto pb = oracle_boundary(b);
    auto directed = [](const auto& from, const auto& to) {
        std::vector<double> dists;
        for (const auto& [r1, c1] : from) {
            double best = 1e300;
            for (const auto& [r2, c2] : to) {
                const double d = double(r1 - r2) * (r1 - r2) + double(c1 - c2) * (c1 - c2);
                best = std::min(best, d);
            }
            dists.push_back(std::sqrt(best));
        }
        std::sort(dists.begin(), dists.end());
        const auto n = static_cast<std::int64_t>(dists.size());
        auto rank = static_cast<std::int64_t>(std::ceil(0.95 * double(n)));
        rank = std::max<std::int64_t>(1, std::min(rank, n));
        return dists[rank - 1];
    };
    return std::max(directed(pa, pb), directed(pb, pa));
}

}  // namespace

TEST_CASE("dice: identity, disjoint, analytic, conventions") {
    auto a = make_mask(4, 4, {0, 1, 4, 5});
    CHECK(metrics::dice_score(a, a) == 1.0);

    auto b = make_mask(4, 4, {10, 11});
    CHECK(metrics::dice_score(a, b) == 0.0);

    // |A|=4, |B|=2, |A∩B|=2 -> 2*2/(4+2)
    auto c = make_mask(4, 4, {0, 1});
    CHECK(metrics::dice_score(a, c) == doctest::Approx(2.0 * 2.0 / 6.0));

    auto empty = make_mask(4, 4);
    CHECK(metrics::dice_score(empty, empty) == 1.0);
    CHECK(metrics::dice_score(a, empty) == 0.0);
    CHECK(metrics::dice_score(empty, a) == 0.0);

    CHECK_THROWS_AS(metrics::dice_score(a, make_mask(3, 4)), DimensionError);
}

TEST_CASE("dice is symmetric and translation invariant") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        auto a = random_mask(12, 12, 0.3, rng);
        auto b = random_mask(12, 12, 0.3, rng);
        CHECK(metrics::dice_score(a, b) == metrics::dice_score(b, a));

        // Translate both masks down-right by one inside a larger canvas.
        Mask at = make_mask(14, 14), bt = make_mask(14, 14);
        for (std::int64_t r = 0; r < 12; ++r)
            for (std::int64_t c = 0; c < 12; ++c) {
                at.data[(r + 1) * 14 + c + 1] = a.data[r * 12 + c];
                bt.data[(r + 1) * 14 + c + 1] = b.data[r * 12 + c];
            }
        Mask a0 = make_mask(14, 14), b0 = make_mask(14, 14);
        for (std::int64_t r = 0; r < 12; ++r)
            for (std::int64_t c = 0; c < 12; ++c) {
                a0.data[r * 14 + c] = a.data[r * 12 + c];
                b0.data[r * 14 + c] = b.data[r * 12 + c];
            }
        CHECK(metrics::dice_score(a0, b0) == metrics::dice_score(at, bt));
        auto h0 = metrics::hd95(a0, b0);
        auto h1 = metrics::hd95(at, bt);
        CHECK(h0.has_value() == h1.has_value());
        if (h0) CHECK(*h0 == doctest::Approx(*h1).epsilon(1e-12));
    }
}

TEST_CASE("hd95: identity, single-pixel distance, missing semantics") {
    auto a = make_mask(8, 8, {9, 10, 17, 18});
    auto h = metrics::hd95(a, a);
    REQUIRE(h.has_value());
    CHECK(*h == 0.0);

    // Two single-pixel masks three columns apart in the same row.
    auto p1 = make_mask(8, 8, {2 * 8 + 1});
    auto p2 = make_mask(8, 8, {2 * 8 + 4});
    auto d = metrics::hd95(p1, p2);
    REQUIRE(d.has_value());
    CHECK(*d == doctest::Approx(3.0));

    auto empty = make_mask(8, 8);
    CHECK_FALSE(metrics::hd95(a, empty).has_value());
    CHECK_FALSE(metrics::hd95(empty, a).has_value());
    CHECK_FALSE(metrics::hd95(empty, empty).has_value());

    CHECK_THROWS_AS(metrics::hd95(a, make_mask(4, 4)), DimensionError);
}

TEST_CASE("hd95 matches the exhaustive all-pairs oracle") {
    std::mt19937_64 rng(7);
    int compared = 0;
    for (int trial = 0; trial < 80; ++trial) {
        auto a = random_mask(16, 16, 0.2 + 0.4 * (trial % 3), rng);
        auto b = random_mask(16, 16, 0.2 + 0.3 * (trial % 2), rng);
        auto got = metrics::hd95(a, b);
        if (a.empty_mask() || b.empty_mask()) {
            CHECK_FALSE(got.has_value());
            continue;
        }
        REQUIRE(got.has_value());
        CHECK(std::abs(*got - oracle_hd95(a, b)) < 1e-9);
        // Symmetry under the max-of-directed definition.
        CHECK(*metrics::hd95(b, a) == doctest::Approx(*got).epsilon(1e-12));
        ++compared;
    }
    CHECK(compared > 50);
}

TEST_CASE("boundary extraction: filled squares reduce to rings") {
    auto m = make_mask(6, 6);
    for (std::int64_t r = 1; r <= 4; ++r)
        for (std::int64_t c = 1; c <= 4; ++c) m.data[r * 6 + c] = 1;
    auto b = metrics::boundary_of(m);
    for (std::int64_t r = 1; r <= 4; ++r)
        for (std::int64_t c = 1; c <= 4; ++c) {
            const bool ring = r == 1 || r == 4 || c == 1 || c == 4;
            CHECK(b.data[r * 6 + c] == (ring ? 1 : 0));
        }
    // Mask touching the image border is boundary there.
    auto full = make_mask(3, 3, {0, 1, 2, 3, 4, 5, 6, 7, 8});
    auto fb = metrics::boundary_of(full);
    CHECK(fb.data[4] == 0);
    CHECK(fb.data[0] == 1);
}

TEST_CASE("evaluate_labels: identity, all-background, missing-class means") {
    std::vector<std::int64_t> gt(8 * 8, 0);
    for (int i = 0; i < 8; ++i) gt[i] = 1;
    for (int i = 8; i < 12; ++i) gt[i] = 2;

    auto identity = metrics::evaluate_labels(gt, gt, 8, 8, 3);
    REQUIRE(identity.per_class.size() == 2);
    CHECK(identity.mean_dsc == 1.0);
    REQUIRE(identity.mean_hd95.has_value());
    CHECK(*identity.mean_hd95 == 0.0);

    std::vector<std::int64_t> background(8 * 8, 0);
    auto none = metrics::evaluate_labels(background, gt, 8, 8, 3);
    CHECK(none.mean_dsc == 0.0);
    CHECK_FALSE(none.mean_hd95.has_value());
    for (const auto& cm : none.per_class) {
        CHECK(cm.dsc == 0.0);
        CHECK_FALSE(cm.hd95.has_value());
    }
}

TEST_CASE("report serialization carries per-class rows and means") {
    metrics::MetricReport report;
    report.per_class.push_back({1, 0.75, 2.0});
    report.per_class.push_back({2, 0.5, std::nullopt});
    report.mean_dsc = 0.625;
    report.mean_hd95 = 2.0;

    auto text = metrics::report_to_text(report);
    CHECK(text.find("class 1: dsc=0.750000 hd95=2.000000") != std::string::npos);
    CHECK(text.find("class 2: dsc=0.500000 hd95=missing") != std::string::npos);
    CHECK(text.find("mean: dsc=0.625000") != std::string::npos);

    auto csv = metrics::report_to_csv(report);
    CHECK(csv.find("class,dsc,hd95\n") == 0);
    CHECK(csv.find("2,0.500000,\n") != std::string::npos);
    CHECK(csv.find("mean,0.625000,2.000000\n") != std::string::npos);
}
