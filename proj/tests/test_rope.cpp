#include <catch2/catch_amalgamated.hpp>

#include "icflow/rope.hpp"

#include <cmath>
#include <vector>

using namespace icflow;

TEST_CASE("assign_positions row-major target", "[rope]") {
    auto pos = assign_positions({2, 2}, {});
    REQUIRE(pos.size() == 4);
    CHECK(pos[0] == PositionTriplet{0, 0, 0});
    CHECK(pos[1] == PositionTriplet{0, 0, 1});
    CHECK(pos[2] == PositionTriplet{0, 1, 0});
    CHECK(pos[3] == PositionTriplet{0, 1, 1});
}

TEST_CASE("assign_positions context time offsets", "[rope]") {
    auto pos = assign_positions({1, 1}, {{1, 1}, {1, 1}});
    REQUIRE(pos.size() == 3);
    CHECK(pos[0].t == 0);
    CHECK(pos[1].t == 1);
    CHECK(pos[2].t == 2);
}

TEST_CASE("assign_positions context grid coordinates", "[rope]") {
    auto pos = assign_positions({1, 1}, {{2, 3}});
    REQUIRE(pos.size() == 1 + 6);
    for (size_t i = 1; i < pos.size(); ++i) {
        CHECK(pos[i].t == 1);
        CHECK(pos[i].h < 2);
        CHECK(pos[i].w < 3);
    }
    // total length = H*W + sum Hi*Wi
    auto pos2 = assign_positions({4, 4}, {{2, 2}, {3, 1}});
    CHECK(pos2.size() == 16u + 4u + 3u);
    CHECK_THROWS_AS(assign_positions({0, 2}, {}), Error);
}

TEST_CASE("rope config default splits", "[rope]") {
    auto c64 = RopeConfig::default_for(64);
    CHECK(c64.axis_split == std::array<int, 3>{8, 28, 28});
    auto c32 = RopeConfig::default_for(32);
    CHECK(c32.axis_split == std::array<int, 3>{4, 14, 14});
    for (int hd : {6, 8, 16, 24, 32, 48, 64, 128}) {
        auto c = RopeConfig::default_for(hd);
        CHECK(c.axis_split[0] + c.axis_split[1] + c.axis_split[2] == hd);
        for (int d : c.axis_split) {
            CHECK(d >= 2);
            CHECK(d % 2 == 0);
        }
    }
    CHECK_THROWS_AS(RopeConfig::default_for(5), Error);

    RopeConfig bad;
    bad.head_dim = 8;
    bad.axis_split = {2, 2, 2};
    CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("zero position is the identity rotation", "[rope]") {
    auto cfg = RopeConfig::default_for(32);
    Rng rng(9);
    Mat<double> x(5, 32);
    rng.fill_normal(x);
    std::vector<PositionTriplet> zeros(5, PositionTriplet{0, 0, 0});
    Mat<double> y = rope_rotate(x, zeros, cfg);
    CHECK(x == y);  // cos(0)=1, sin(0)=0 exactly
}

TEST_CASE("rotation preserves norms", "[rope]") {
    auto cfg = RopeConfig::default_for(64);
    Rng rng(10);
    Mat<double> x(7, 64);
    rng.fill_normal(x);
    std::vector<PositionTriplet> pos = {{0, 0, 0}, {0, 3, 5}, {1, 0, 0},
                                        {2, 7, 1}, {1, 15, 15}, {3, 2, 9},
                                        {0, 31, 2}};
    Mat<double> y = rope_rotate(x, pos, cfg);
    for (int i = 0; i < 7; ++i)
        CHECK(y.row(i).norm() == Catch::Approx(x.row(i).norm()).margin(1e-6));
}

TEST_CASE("relative position invariance per axis", "[rope]") {
    // <rope(q,u+D), rope(k,v+D)> == <rope(q,u), rope(k,v)> for each axis shift
    auto cfg = RopeConfig::default_for(32);
    Rng rng(11);
    Mat<double> q(1, 32), k(1, 32);
    rng.fill_normal(q);
    rng.fill_normal(k);

    PositionTriplet u{1, 3, 2}, v{0, 7, 5};
    auto dot_at = [&](PositionTriplet a, PositionTriplet b) {
        Mat<double> qr = rope_rotate(q, {a}, cfg);
        Mat<double> kr = rope_rotate(k, {b}, cfg);
        return qr.row(0).dot(kr.row(0));
    };
    double base = dot_at(u, v);

    const PositionTriplet shifts[] = {
        {4, 0, 0}, {0, 6, 0}, {0, 0, 9}, {2, 3, 4}, {1, 1, 1}};
    for (auto d : shifts) {
        PositionTriplet ud{u.t + d.t, u.h + d.h, u.w + d.w};
        PositionTriplet vd{v.t + d.t, v.h + d.h, v.w + d.w};
        CHECK(dot_at(ud, vd) == Catch::Approx(base).margin(1e-5));
    }
}

TEST_CASE("rotation is linear in its input", "[rope]") {
    auto cfg = RopeConfig::default_for(16);
    Rng rng(12);
    Mat<double> a(3, 16), b(3, 16);
    rng.fill_normal(a);
    rng.fill_normal(b);
    std::vector<PositionTriplet> pos = {{0, 1, 2}, {1, 0, 3}, {2, 2, 2}};
    Mat<double> lhs = rope_rotate<double>(2.0 * a + 3.0 * b, pos, cfg);
    Mat<double> rhs =
        (2.0 * rope_rotate(a, pos, cfg) + 3.0 * rope_rotate(b, pos, cfg)).eval();
    CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("inverse rotation round-trips", "[rope]") {
    auto cfg = RopeConfig::default_for(24);
    Rng rng(13);
    Mat<double> x(4, 24);
    rng.fill_normal(x);
    std::vector<PositionTriplet> pos = {{0, 5, 1}, {1, 2, 2}, {2, 0, 7},
                                        {1, 9, 9}};
    Matd angles = rope_angles(pos, cfg);
    Mat<double> cos_tab = angles.array().cos();
    Mat<double> sin_tab = angles.array().sin();
    Mat<double> fwd = rope_apply(x, cos_tab, sin_tab, 1);
    Mat<double> back = rope_apply(fwd, cos_tab, sin_tab, -1);
    CHECK((back - x).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("rope dimension mismatches are rejected", "[rope]") {
    auto cfg = RopeConfig::default_for(16);
    Mat<double> x(2, 8);
    x.setZero();
    std::vector<PositionTriplet> pos = {{0, 0, 0}, {0, 0, 1}};
    CHECK_THROWS_AS(rope_rotate(x, pos, cfg), Error);
    Mat<double> x2(3, 16);
    x2.setZero();
    CHECK_THROWS_AS(rope_rotate(x2, pos, cfg), Error);
}

TEST_CASE("rope determinism", "[rope]") {
    auto cfg = RopeConfig::default_for(32);
    Rng rng(14);
    Mat<double> x(6, 32);
    rng.fill_normal(x);
    std::vector<PositionTriplet> pos(6);
    for (int i = 0; i < 6; ++i)
        pos[static_cast<size_t>(i)] = {i % 3, i, 2 * i};
    Mat<double> y1 = rope_rotate(x, pos, cfg);
    Mat<double> y2 = rope_rotate(x, pos, cfg);
    CHECK(y1 == y2);
}
