#include <doctest.h>

#include <random>

#include "contraseg/errors.hpp"
#include "contraseg/metrics.hpp"
#include "contraseg/postprocess.hpp"
#include "fields.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace contraseg;

namespace {

MaskVolume cube_mask(const Dims& d, std::size_t z0, std::size_t y0, std::size_t x0, std::size_t side) {
    MaskVolume m(d, 0);
    for (std::size_t z = z0; z < z0 + side; ++z)
        for (std::size_t y = y0; y < y0 + side; ++y)
            for (std::size_t x = x0; x < x0 + side; ++x) m(z, y, x) = 1;
    return m;
}

}  // namespace

TEST_CASE("neighbour offsets") {
    CHECK(neighbor_offsets(6).size() == 6);
    CHECK(neighbor_offsets(26).size() == 26);
    for (auto o : neighbor_offsets(6)) CHECK(std::abs(o[0]) + std::abs(o[1]) + std::abs(o[2]) == 1);
    CHECK_THROWS_AS(neighbor_offsets(18), ConfigError);
    CHECK_THROWS_AS(neighbor_offsets(0), ConfigError);
}

TEST_CASE("watershed parameters validate") {
    WatershedParams p;
    CHECK_NOTHROW(p.validate());
    SUBCASE("connectivity") { p.connectivity = 8; }
    SUBCASE("threshold out of range") { p.marker_mask_threshold = 1.5; }
    SUBCASE("negative threshold") { p.foreground_threshold = -0.1; }
    CHECK_THROWS_AS(p.validate(), ConfigError);
}

TEST_CASE("connected components of two cubes and an empty mask") {
    const Dims d{6, 6, 6};
    MaskVolume m = cube_mask(d, 0, 0, 0, 2);
    const MaskVolume b = cube_mask(d, 3, 3, 3, 3);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] |= b[i];
    const LabelVolume l = connected_components(m, 6);
    CHECK(l(0, 0, 0) == 1);
    CHECK(l(1, 1, 1) == 1);
    CHECK(l(5, 5, 5) == 2);
    CHECK(oracle::count_of(l, 1) == 8);
    CHECK(oracle::count_of(l, 2) == 27);

    const LabelVolume e = connected_components(MaskVolume(d, 0), 26);
    CHECK(oracle::ids(e).empty());
}

TEST_CASE("diagonal contact joins under 26 but not 6") {
    const Dims d{2, 2, 2};
    MaskVolume m(d, 0);
    m(0, 0, 0) = 1;
    m(1, 1, 1) = 1;
    CHECK(oracle::ids(connected_components(m, 6)).size() == 2);
    CHECK(oracle::ids(connected_components(m, 26)).size() == 1);
}

TEST_CASE("connected components agree with the search oracle") {
    std::mt19937_64 rng(11);
    for (int t = 0; t < 60; ++t) {
        std::uniform_int_distribution<std::size_t> side(1, 9);
        const Dims d{side(rng), side(rng), side(rng)};
        const MaskVolume m = testing::random_mask(d, rng, std::uniform_real_distribution<double>(0.1, 0.7)(rng));
        for (int conn : {6, 26}) {
            const LabelVolume l = connected_components(m, conn);
            const auto comps = oracle::components(m, conn);
            LabelVolume want(d, 0);
            for (std::size_t k = 0; k < comps.size(); ++k) {
                for (auto i : comps[k]) want[i] = static_cast<std::uint32_t>(k + 1);
            }
            CHECK(l.data() == want.data());
        }
    }
}

TEST_CASE("relabel drops small instances, compacts ids and scores by mean") {
    const Dims d{1, 4, 6};
    // Instance 3 has two voxels, instance 7 has eight, instance 9 has four.
    const LabelVolume l(d, std::vector<std::uint32_t>{7, 7, 7, 7, 0, 3,  //
                                                      7, 7, 7, 7, 0, 3,  //
                                                      0, 0, 0, 0, 0, 0,  //
                                                      9, 9, 9, 9, 0, 0});
    std::vector<float> p(d.voxels());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = static_cast<float>(i) / 32.0f;
    const ImageVolume pm(d, p);

    const InstanceSeg s = relabel_and_score(l, pm, 3);
    CHECK(oracle::ids(s.labels) == std::set<std::uint32_t>{1, 2});
    CHECK(s.labels(0, 0, 0) == 1);
    CHECK(s.labels(0, 3, 0) == 2);
    CHECK(s.labels(0, 0, 5) == 0);
    REQUIRE(s.scores.size() == 2);
    CHECK(s.scores[0] == doctest::Approx((0 + 1 + 2 + 3 + 6 + 7 + 8 + 9) / 8.0 / 32.0));
    CHECK(s.scores[1] == doctest::Approx((18 + 19 + 20 + 21) / 4.0 / 32.0));

    const InstanceSeg all = relabel_and_score(l, pm, 1);
    CHECK(all.scores.size() == 3);
    CHECK(all.labels(0, 0, 5) == 1);  // ids 3 < 7 < 9 keep their order
    CHECK(all.labels(0, 0, 0) == 2);
    CHECK(all.labels(0, 3, 0) == 3);
    CHECK(all.scores[0] == doctest::Approx((5 + 11) / 2.0 / 32.0));
}

TEST_CASE("a single blob gives one instance") {
    const Dims d{6, 16, 16};
    ImageVolume pm(d, 0.0f);
    const testing::Blob b{2.5, 7.5, 7.5, 2.0, 3.0, 1.3};
    for (std::size_t z = 0; z < d.d; ++z)
        for (std::size_t y = 0; y < d.h; ++y)
            for (std::size_t x = 0; x < d.w; ++x) pm(z, y, x) = static_cast<float>(std::min(1.0, b.at(z, y, x)));
    const ImageVolume pb(d, 0.1f);
    const InstanceSeg s = marker_watershed(pm, pb, WatershedParams{});
    CHECK(s.scores.size() == 1);
    CHECK(testing::watershed_violation(pm, pb, WatershedParams{}, s).empty());
}

TEST_CASE("two blobs separated by a valley give two matching instances") {
    std::mt19937_64 rng(12);
    const WatershedParams params;
    for (int t = 0; t < 10; ++t) {
        const auto f = testing::two_blob_field(rng, params.foreground_threshold);
        const InstanceSeg s = marker_watershed(f.mask_prob, f.boundary_prob, params);
        REQUIRE(s.scores.size() == 2);
        for (const auto& blob : f.blobs) {
            double best = 0;
            for (std::uint32_t id = 1; id <= 2; ++id) {
                MaskVolume inst(s.labels.dims(), 0);
                for (std::size_t i = 0; i < inst.size(); ++i) inst[i] = s.labels[i] == id;
                best = std::max(best, oracle::jaccard(inst, blob));
            }
            CHECK(best >= 0.9);
        }
    }
}

TEST_CASE("high boundary probability suppresses every marker") {
    std::mt19937_64 rng(13);
    const WatershedParams params;
    auto f = testing::two_blob_field(rng, params.foreground_threshold);
    const ImageVolume wall(f.mask_prob.dims(), 0.9f);
    const InstanceSeg s = marker_watershed(f.mask_prob, wall, params);
    CHECK(s.scores.empty());
    CHECK(oracle::ids(s.labels).empty());
}

TEST_CASE("watershed invariants on random fields") {
    std::mt19937_64 rng(14);
    int nonempty = 0;
    for (int t = 0; t < 40; ++t) {
        std::uniform_int_distribution<std::size_t> side(4, 14);
        const Dims d{side(rng) / 2 + 1, side(rng), side(rng)};
        ImageVolume pm, pb;
        testing::random_fields(rng, d, pm, pb);
        const WatershedParams params = testing::random_params(rng);
        const InstanceSeg s = marker_watershed(pm, pb, params);
        CAPTURE(t);
        CHECK(testing::watershed_violation(pm, pb, params, s) == "");
        nonempty += !s.scores.empty();

        const InstanceSeg again = marker_watershed(pm, pb, params);
        CHECK(again.labels.data() == s.labels.data());
        CHECK(again.scores == s.scores);
    }
    CHECK(nonempty > 10);
}

TEST_CASE("watershed shape mismatch throws") {
    CHECK_THROWS_AS(marker_watershed(ImageVolume({2, 2, 2}), ImageVolume({2, 2, 3}), WatershedParams{}), ShapeError);
}
