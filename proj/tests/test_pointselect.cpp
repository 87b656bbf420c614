#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <random>
#include <set>

#include "contraseg/pointselect.hpp"
#include "helpers.hpp"

using namespace contraseg;

namespace {

// Full sort of every voxel: uncertain by error, then certain by probability
// among the rest; ties to the smaller linear index.
PointSet sorted_selection(const ImageVolume& pm, const MaskVolume& m, std::size_t n, double beta) {
    const std::size_t u = static_cast<std::size_t>(std::floor(beta * static_cast<double>(n) + 1e-9));
    std::vector<std::size_t> idx(pm.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    auto err = [&](std::size_t i) { return std::abs(static_cast<double>(pm[i]) - (m[i] ? 1.0 : 0.0)); };
    std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return err(a) > err(b); });
    PointSet out;
    std::set<std::size_t> used;
    for (std::size_t k = 0; k < u; ++k) {
        out.uncertain.push_back(pm.voxel(idx[k]));
        used.insert(idx[k]);
    }
    std::vector<std::size_t> rest;
    for (std::size_t i = 0; i < pm.size(); ++i) {
        if (!used.count(i)) rest.push_back(i);
    }
    std::stable_sort(rest.begin(), rest.end(), [&](auto a, auto b) { return pm[a] > pm[b]; });
    for (std::size_t k = 0; k < n - u; ++k) out.certain.push_back(pm.voxel(rest[k]));
    return out;
}

ImageVolume distinct_probabilities(const Dims& d, std::mt19937_64& rng) {
    std::vector<float> v(d.voxels());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = (static_cast<float>(i) + 0.5f) / static_cast<float>(v.size());
    std::shuffle(v.begin(), v.end(), rng);
    return ImageVolume(d, std::move(v));
}

}  // namespace

TEST_CASE("prediction error is |P_m - M|") {
    const ImageVolume pm({1, 1, 4}, std::vector<float>{1.0f, 0.2f, 0.5f, 0.5f});
    const MaskVolume m({1, 1, 4}, std::vector<std::uint8_t>{1, 1, 0, 1});
    const ImageVolume e = prediction_error(pm, m);
    CHECK(e[0] == 0.0f);
    CHECK(e[1] == doctest::Approx(0.8));
    CHECK(e[2] == 0.5f);
    CHECK(e[3] == 0.5f);
    CHECK_THROWS_AS(prediction_error(pm, MaskVolume({1, 1, 3}, 0)), ShapeError);
}

TEST_CASE("uncertain count is floor(beta N)") {
    CHECK(uncertain_count(4, 0.75) == 3);
    CHECK(uncertain_count(1024, 0.75) == 768);
    CHECK(uncertain_count(10, 0.33) == 3);
    CHECK(uncertain_count(10, 0.3) == 3);  // 0.3 * 10 is 2.9999999999999996 in binary
    CHECK(uncertain_count(7, 0.0) == 0);
    CHECK(uncertain_count(7, 1.0) == 7);
}

TEST_CASE("N = 4, beta = 0.75 gives 3 uncertain and 1 certain") {
    std::mt19937_64 rng(1);
    const Dims d{2, 2, 2};
    const PointSet s = select_points(testing::random_image(d, rng), testing::random_mask(d, rng), 4, 0.75, rng);
    CHECK(s.uncertain.size() == 3);
    CHECK(s.certain.size() == 1);
}

TEST_CASE("selection on 8 voxels with distinct errors equals the full sort") {
    std::mt19937_64 rng(2);
    const Dims d{2, 2, 2};
    for (int trial = 0; trial < 50; ++trial) {
        const ImageVolume pm = distinct_probabilities(d, rng);
        const MaskVolume m = testing::random_mask(d, rng);
        for (std::size_t n = 1; n <= 8; ++n) {
            for (double beta : {0.0, 0.25, 0.5, 0.75, 1.0}) {
                const PointSet got = select_points(pm, m, n, beta, rng);
                const PointSet want = sorted_selection(pm, m, n, beta);
                CHECK(got.uncertain == want.uncertain);
                CHECK(got.certain == want.certain);
            }
        }
    }
}

TEST_CASE("ties go to the smaller z-major index") {
    std::mt19937_64 rng(3);
    const Dims d{2, 3, 3};
    const ImageVolume pm(d, 0.5f);
    const MaskVolume m = testing::random_mask(d, rng);
    const PointSet s = select_points(pm, m, 5, 0.6, rng);
    CHECK(s.uncertain == std::vector<Voxel>{{0, 0, 0}, {0, 0, 1}, {0, 0, 2}});
    CHECK(s.certain == std::vector<Voxel>{{0, 1, 0}, {0, 1, 1}});
}

TEST_CASE("beta 0 selects only certain points, beta 1 only uncertain") {
    std::mt19937_64 rng(4);
    const Dims d{3, 4, 4};
    const ImageVolume pm = testing::random_image(d, rng);
    const MaskVolume m = testing::random_mask(d, rng);
    const PointSet a = select_points(pm, m, 10, 0.0, rng);
    CHECK(a.uncertain.empty());
    CHECK(a.certain.size() == 10);
    const PointSet b = select_points(pm, m, 10, 1.0, rng);
    CHECK(b.uncertain.size() == 10);
    CHECK(b.certain.empty());
}

TEST_CASE("selection invariants against the sort oracle on random volumes") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 30; ++trial) {
        std::uniform_int_distribution<std::size_t> side(2, 16);
        const Dims d{side(rng) / 2 + 1, side(rng), side(rng)};
        const ImageVolume pm = testing::random_image(d, rng);
        const MaskVolume m = testing::random_mask(d, rng, 0.3);
        std::uniform_int_distribution<std::size_t> pick(1, d.voxels());
        const std::size_t n = pick(rng);
        const double beta = std::uniform_real_distribution<double>(0, 1)(rng);
        const PointSet s = select_points(pm, m, n, beta, rng);

        CHECK(s.size() == n);
        CHECK(s.uncertain.size() == uncertain_count(n, beta));
        std::set<Voxel> all(s.uncertain.begin(), s.uncertain.end());
        all.insert(s.certain.begin(), s.certain.end());
        CHECK(all.size() == n);

        const ImageVolume err = prediction_error(pm, m);
        std::set<Voxel> unc(s.uncertain.begin(), s.uncertain.end());
        float min_selected = 2.0f;
        for (const auto& v : s.uncertain) min_selected = std::min(min_selected, err(v.z, v.y, v.x));
        float max_rest = -1.0f;
        for (std::size_t i = 0; i < err.size(); ++i) {
            if (!unc.count(err.voxel(i))) max_rest = std::max(max_rest, err[i]);
        }
        if (!s.uncertain.empty() && s.uncertain.size() < err.size()) CHECK(min_selected >= max_rest);

        const PointSet want = sorted_selection(pm, m, n, beta);
        CHECK(s.uncertain == want.uncertain);
        CHECK(s.certain == want.certain);
    }
}

TEST_CASE("selection errors") {
    std::mt19937_64 rng(6);
    const Dims d{1, 2, 2};
    const ImageVolume pm(d, 0.5f);
    const MaskVolume m(d, 0);
    CHECK_THROWS_AS(select_points(pm, m, 5, 0.5, rng), ConfigError);
    CHECK_THROWS_AS(select_points(pm, m, 2, 1.5, rng), ConfigError);
    CHECK_THROWS_AS(select_points(pm, MaskVolume({1, 1, 4}, 0), 2, 0.5, rng), ShapeError);
}

TEST_CASE("oversampling draws from the rng and stays within the contract") {
    const Dims d{4, 8, 8};
    std::mt19937_64 data(7);
    const ImageVolume pm = testing::random_image(d, data);
    const MaskVolume m = testing::random_mask(d, data);
    SelectOptions opt;
    opt.oversample = true;
    opt.oversample_ratio = 2.0;
    std::mt19937_64 a(1), b(1), c(2);
    const PointSet sa = select_points(pm, m, 20, 0.75, a, opt);
    const PointSet sb = select_points(pm, m, 20, 0.75, b, opt);
    const PointSet sc = select_points(pm, m, 20, 0.75, c, opt);
    CHECK(sa.uncertain == sb.uncertain);
    CHECK(sa.certain == sb.certain);
    CHECK_FALSE((sa.uncertain == sc.uncertain && sa.certain == sc.certain));
    CHECK(sa.uncertain.size() == 15);
    CHECK(sa.certain.size() == 5);
    std::set<Voxel> all(sa.uncertain.begin(), sa.uncertain.end());
    all.insert(sa.certain.begin(), sa.certain.end());
    CHECK(all.size() == 20);

    // Without oversampling the rng is untouched.
    std::mt19937_64 r(9);
    const auto before = r;
    (void)select_points(pm, m, 20, 0.75, r);
    CHECK(r == before);
}

TEST_CASE("partition by class") {
    const Dims d{1, 2, 3};
    PointSet s;
    s.uncertain = {{0, 0, 0}, {0, 0, 1}, {0, 1, 2}};
    s.certain = {{0, 0, 2}, {0, 1, 0}, {0, 1, 1}};

    SUBCASE("all foreground") {
        const ClassPartition p = partition_by_class(s, MaskVolume(d, 1));
        CHECK(p.background.empty());
        CHECK(p.certain_fg == s.certain);
        CHECK(p.uncertain_fg == s.uncertain);
    }
    SUBCASE("all background") {
        const ClassPartition p = partition_by_class(s, MaskVolume(d, 0));
        CHECK(p.certain_fg.empty());
        CHECK(p.uncertain_fg.empty());
        CHECK(p.background.size() == 6);
    }
    SUBCASE("mixed six points by hand") {
        // Row 0: 1 0 1, row 1: 0 1 1
        const MaskVolume m(d, std::vector<std::uint8_t>{1, 0, 1, 0, 1, 1});
        const ClassPartition p = partition_by_class(s, m);
        CHECK(p.uncertain_fg == std::vector<Voxel>{{0, 0, 0}, {0, 1, 2}});
        CHECK(p.certain_fg == std::vector<Voxel>{{0, 0, 2}, {0, 1, 1}});
        std::set<Voxel> bg(p.background.begin(), p.background.end());
        CHECK(bg == std::set<Voxel>{{0, 0, 1}, {0, 1, 0}});
    }
    SUBCASE("partition is exact and disjoint on random sets") {
        std::mt19937_64 rng(8);
        for (int t = 0; t < 20; ++t) {
            const Dims big{3, 5, 5};
            const MaskVolume m = testing::random_mask(big, rng);
            const PointSet sel = select_points(testing::random_image(big, rng), m, 30, 0.6, rng);
            const ClassPartition p = partition_by_class(sel, m);
            CHECK(p.certain_fg.size() + p.uncertain_fg.size() + p.background.size() == 30);
            std::set<Voxel> all(p.certain_fg.begin(), p.certain_fg.end());
            all.insert(p.uncertain_fg.begin(), p.uncertain_fg.end());
            all.insert(p.background.begin(), p.background.end());
            std::set<Voxel> want(sel.uncertain.begin(), sel.uncertain.end());
            want.insert(sel.certain.begin(), sel.certain.end());
            CHECK(all == want);
            for (const auto& v : p.certain_fg) CHECK(std::find(sel.certain.begin(), sel.certain.end(), v) != sel.certain.end());
            for (const auto& v : p.uncertain_fg) {
                CHECK(std::find(sel.uncertain.begin(), sel.uncertain.end(), v) != sel.uncertain.end());
            }
        }
    }
}
