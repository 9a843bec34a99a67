#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "pliv/motionctl.hpp"
#include "pliv/rng.hpp"

using namespace pliv;
namespace mc = pliv::motionctl;

static mc::KeypointSet random_kps(uint64_t seed) {
    Rng r(seed);
    mc::KeypointSet k;
    for (auto& p : k.pts) {
        p[0] = r.uniform(-0.8, 0.8);
        p[1] = r.uniform(-0.8, 0.8);
    }
    return k;
}

static double kps_dist(const mc::KeypointSet& a, const mc::KeypointSet& b) {
    double m = 0;
    for (int i = 0; i < mc::KeypointSet::kCount; ++i) {
        m = std::max(m, std::fabs(a.pts[size_t(i)][0] - b.pts[size_t(i)][0]));
        m = std::max(m, std::fabs(a.pts[size_t(i)][1] - b.pts[size_t(i)][1]));
    }
    return m;
}

TEST_CASE("transform_keypoints: affine group laws") {
    auto k = random_kps(1);
    // identity
    CHECK(kps_dist(mc::transform_keypoints(k, 0.0, {0, 0}, 1.0), k) == 0.0);
    // ccw convention: (1,0) rotated by pi/2 -> (0,1)
    mc::KeypointSet unit{};
    unit.pts[0] = {1.0, 0.0};
    auto ru = mc::transform_keypoints(unit, M_PI / 2, {0, 0}, 1.0);
    CHECK(std::fabs(ru.pts[0][0] - 0.0) < 1e-12);
    CHECK(std::fabs(ru.pts[0][1] - 1.0) < 1e-12);
    // inverse
    Rng r(2);
    for (int i = 0; i < 50; ++i) {
        const double th = r.uniform(-1.5, 1.5);
        auto back = mc::transform_keypoints(mc::transform_keypoints(k, th, {0, 0}, 1.0), -th, {0, 0}, 1.0);
        CHECK(kps_dist(back, k) < 1e-9);
    }
    // composition over 100 random angle pairs
    for (int i = 0; i < 100; ++i) {
        const double t1 = r.uniform(-1.5, 1.5), t2 = r.uniform(-1.5, 1.5);
        auto lhs = mc::transform_keypoints(mc::transform_keypoints(k, t1, {0, 0}, 1.0), t2, {0, 0}, 1.0);
        auto rhs = mc::transform_keypoints(k, t1 + t2, {0, 0}, 1.0);
        CHECK(kps_dist(lhs, rhs) < 1e-9);
    }
    // pure affine case
    auto t = mc::transform_keypoints(k, 0.0, {0.1, 0.0}, 2.0);
    for (int i = 0; i < 10; ++i) {
        CHECK(t.pts[size_t(i)][0] == doctest::Approx(2 * k.pts[size_t(i)][0] + 0.1).epsilon(1e-12));
        CHECK(t.pts[size_t(i)][1] == doctest::Approx(2 * k.pts[size_t(i)][1]).epsilon(1e-12));
    }
    CHECK_THROWS(mc::transform_keypoints(k, 0.0, {0, 0}, 0.0));
    CHECK_THROWS(mc::transform_keypoints(k, 0.0, {0, 0}, -1.0));
}

TEST_CASE("rasterize_keypoints: peaks, clipping, mass") {
    mc::KeypointSet k{};
    k.pts[0] = {0.0, 0.0};     // image center
    k.pts[1] = {10.0, 10.0};   // far off-canvas
    k.pts[2] = {-0.5, 0.25};   // generic interior point
    auto maps = mc::rasterize_keypoints(k);
    REQUIRE(maps.shape == std::vector<int>{10, 64, 64});

    // center point: argmax at the canvas center pixel
    const float* ch0 = maps.data();
    int best = 0;
    for (int i = 1; i < 64 * 64; ++i)
        if (ch0[i] > ch0[best]) best = i;
    const int by = best / 64, bx = best % 64;
    CHECK(std::abs(by - 32) <= 1);
    CHECK(std::abs(bx - 32) <= 1);
    CHECK(ch0[best] == 1.0f);

    // off-canvas channel is all zeros
    const float* ch1 = maps.data() + 64 * 64;
    for (int i = 0; i < 64 * 64; ++i) CHECK(ch1[i] == 0.0f);

    // discrete mass of an interior channel ~ 2*pi*sigma^2
    const float* ch2 = maps.data() + 2 * 64 * 64;
    double mass = 0;
    for (int i = 0; i < 64 * 64; ++i) mass += ch2[i];
    const double want = 2.0 * M_PI * mc::kHeatmapSigmaPx * mc::kHeatmapSigmaPx;
    CHECK(std::fabs(mass - want) / want < 0.05);

    // argmax recovers an in-bounds keypoint to within one pixel
    const double px = (k.pts[2][0] + 1.0) * 0.5 * 64 - 0.5;
    const double py = (k.pts[2][1] + 1.0) * 0.5 * 64 - 0.5;
    int best2 = 0;
    for (int i = 1; i < 64 * 64; ++i)
        if (ch2[i] > ch2[best2]) best2 = i;
    CHECK(std::fabs(best2 % 64 - px) <= 1.0);
    CHECK(std::fabs(best2 / 64 - py) <= 1.0);

    // max <= 1 everywhere
    for (int64_t i = 0; i < maps.numel(); ++i) CHECK(maps.d[i] <= 1.0f);
}

TEST_CASE("interpolate_motion: boundaries and linearity") {
    MotionParams a = neutral_motion();
    MotionParams b;
    b.roll = 0.4;
    b.trans = {0.1, -0.2};
    b.scale = 1.2;
    b.expr = {0.2, 0.9, 0.7, 0.1, 0.8};
    // note: roll 0.4 is within the toy range; validate() not required here
    CHECK(mc::interpolate_motion(a, b, 0.0) == a);
    CHECK(mc::interpolate_motion(a, b, 1.0) == b);
    auto mid = mc::interpolate_motion(a, b, 0.5);
    CHECK(mid.roll == doctest::Approx(0.2).epsilon(1e-15));
    CHECK(mid.scale == doctest::Approx(1.1).epsilon(1e-15));
    // pointwise-linear for every field
    Rng r(5);
    for (int i = 0; i < 200; ++i) {
        const double w = r.uniform();
        auto m = mc::interpolate_motion(a, b, w);
        CHECK(m.roll == a.roll + w * (b.roll - a.roll));
        CHECK(m.trans[0] == a.trans[0] + w * (b.trans[0] - a.trans[0]));
        CHECK(m.trans[1] == a.trans[1] + w * (b.trans[1] - a.trans[1]));
        CHECK(m.scale == a.scale + w * (b.scale - a.scale));
        for (int e = 0; e < 5; ++e) CHECK(m.expr[size_t(e)] == a.expr[size_t(e)] + w * (b.expr[size_t(e)] - a.expr[size_t(e)]));
    }
    CHECK_THROWS(mc::interpolate_motion(a, b, -0.01));
    CHECK_THROWS(mc::interpolate_motion(a, b, 1.01));
}

TEST_CASE("mii_weights") {
    auto w = mc::mii_weights(4, 4);
    REQUIRE(w.size() == 16);
    CHECK(w.front() == 0.0);
    CHECK(w.back() == 1.0);
    for (size_t i = 1; i < w.size(); ++i) {
        CHECK(w[i] > w[i - 1]);
        CHECK(std::fabs((w[i] - w[i - 1]) - 1.0 / 15.0) < 1e-12);
    }
    auto w2 = mc::mii_weights(1, 2);
    CHECK(w2 == std::vector<double>{0.0, 1.0});
    CHECK_THROWS(mc::mii_weights(1, 1));
}
