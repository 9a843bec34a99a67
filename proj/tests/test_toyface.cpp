#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <set>

#include "pliv/png_io.hpp"
#include "pliv/toyface.hpp"

using namespace pliv;
namespace tf = pliv::toyface;
namespace fs = std::filesystem;

static IdentityParams test_identity() {
    IdentityParams id;
    id.face_hue = 0.08;
    id.face_aspect = 1.05;
    id.eye_hue = 0.62;
    id.skin_brightness = 0.85;
    id.torso_hue = 0.33;
    return id;
}

// luminance-threshold bounding box of the head region (rows above the torso)
static double head_bbox_area(const Frame& f) {
    int x0 = kFrameW, x1 = -1, y0 = kFrameH, y1 = -1;
    const int64_t plane = int64_t(kFrameH) * kFrameW;
    for (int y = 0; y < tf::kTorsoTopRow; ++y)
        for (int x = 0; x < kFrameW; ++x) {
            const int64_t i = int64_t(y) * kFrameW + x;
            const float lum = 0.299f * f.d[size_t(i)] + 0.587f * f.d[size_t(plane + i)] + 0.114f * f.d[size_t(2 * plane + i)];
            if (lum > 0.2f) {
                x0 = std::min(x0, x);
                x1 = std::max(x1, x);
                y0 = std::min(y0, y);
                y1 = std::max(y1, y);
            }
        }
    if (x1 < 0) return 0.0;
    return double(x1 - x0 + 1) * double(y1 - y0 + 1);
}

TEST_CASE("render: determinism and value range") {
    auto id = test_identity();
    auto m = neutral_motion();
    auto f1 = tf::render(id, m);
    auto f2 = tf::render(id, m);
    CHECK(bitwise_equal(f1, f2));
    for (float v : f1.d) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
        CHECK(std::isfinite(v));
        // values sit on the 1/255 grid so 8-bit storage is exact
        CHECK(v * 255.0f == doctest::Approx(std::round(v * 255.0f)).epsilon(1e-6));
    }
    MotionParams bad = m;
    bad.scale = 2.0;
    CHECK_THROWS(tf::render(id, bad));
}

TEST_CASE("render: bbox area scales like scale^2") {
    auto id = test_identity();
    auto m = neutral_motion();
    auto base = head_bbox_area(tf::render(id, m));
    m.scale = 1.2;
    auto scaled = head_bbox_area(tf::render(id, m));
    CHECK(scaled / base == doctest::Approx(1.44).epsilon(0.1 / 1.44));
}

TEST_CASE("render: mouth locality") {
    auto id = test_identity();
    auto closed = neutral_motion();
    auto open = closed;
    open.expr[2] = 1.0;
    auto f0 = tf::render(id, closed);
    auto f1 = tf::render(id, open);
    double diff = 0;
    for (int64_t i = 0; i < f0.numel(); ++i) diff += std::fabs(double(f0.d[i]) - f1.d[i]);
    CHECK(diff > 0.0);
    // torso band identical
    const int64_t plane = int64_t(kFrameH) * kFrameW;
    for (int c = 0; c < 3; ++c)
        for (int y = tf::kTorsoTopRow; y < kFrameH; ++y)
            for (int x = 0; x < kFrameW; ++x)
                CHECK(f0.d[size_t(c * plane + y * kFrameW + x)] == f1.d[size_t(c * plane + y * kFrameW + x)]);
    // torso hue change leaves head rows alone
    auto id2 = id;
    id2.torso_hue = 0.8;
    auto f2 = tf::render(id2, closed);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < tf::kTorsoTopRow; ++y)
            for (int x = 0; x < kFrameW; ++x)
                CHECK(f0.d[size_t(c * plane + y * kFrameW + x)] == f2.d[size_t(c * plane + y * kFrameW + x)]);
}

TEST_CASE("sample_trajectory: determinism, ranges, step bound") {
    auto a = tf::sample_trajectory(0, 40);
    auto b = tf::sample_trajectory(0, 40);
    REQUIRE(a.size() == 40);
    CHECK(a == b);
    CHECK_THROWS(tf::sample_trajectory(0, 1));

    double max_droll = 0;
    for (uint64_t seed = 0; seed < 1000; ++seed) {
        auto tr = tf::sample_trajectory(seed, 20);
        for (size_t i = 0; i < tr.size(); ++i) {
            CHECK_NOTHROW(validate(tr[i]));
            if (i > 0) max_droll = std::max(max_droll, std::fabs(tr[i].roll - tr[i - 1].roll));
        }
    }
    CHECK(max_droll <= 0.05 * (M_PI / 2.0));
}

TEST_CASE("extract_hybrid_motion: exactness and retargeting") {
    auto id = test_identity();
    id.face_aspect = 1.0;
    auto kc = tf::canonical_keypoints(id);

    auto h = tf::extract_hybrid_motion(neutral_motion(), id);
    CHECK(h.m_f == neutral_motion().expr);
    for (int i = 0; i < 10; ++i) {
        CHECK(h.k_d.pts[size_t(i)][0] == kc.pts[size_t(i)][0]);
        CHECK(h.k_d.pts[size_t(i)][1] == kc.pts[size_t(i)][1]);
    }

    MotionParams m;
    m.scale = 1.25;
    m.trans = {0.1, 0.0};
    auto h2 = tf::extract_hybrid_motion(m, id);
    for (int i = 0; i < 10; ++i) {
        CHECK(h2.k_d.pts[size_t(i)][0] == doctest::Approx(1.25 * kc.pts[size_t(i)][0] + 0.1).epsilon(1e-12));
        CHECK(h2.k_d.pts[size_t(i)][1] == doctest::Approx(1.25 * kc.pts[size_t(i)][1]).epsilon(1e-12));
    }

    // expr passthrough is the identity
    MotionParams m3 = neutral_motion();
    m3.expr = {0.3, 0.4, 0.5, 0.6, 0.7};
    CHECK(tf::extract_hybrid_motion(m3, id).m_f == m3.expr);
}

TEST_CASE("dataset: build, manifest, round trip, split disjointness") {
    const std::string root = (fs::temp_directory_path() / "pliv_test_ds").string();
    fs::remove_all(root);
    tf::DatasetSpec spec;
    spec.root = root;
    spec.clips = 10;
    spec.frames = 6;
    spec.seed = 7;
    tf::build_dataset(spec);

    // refuses to clobber without overwrite
    CHECK_THROWS(tf::build_dataset(spec));
    spec.overwrite = true;
    CHECK_NOTHROW(tf::build_dataset(spec));

    auto man = tf::load_manifest(root);
    REQUIRE(man.clips.size() == 10);
    CHECK(man.by_split("train").size() == 8);
    CHECK(man.by_split("val").size() == 1);
    CHECK(man.by_split("test").size() == 1);

    // round trip: params exact, frames equal render-then-quantize
    auto clip = tf::load_clip(root, man.clips[0].id);
    REQUIRE(clip.frames.size() == 6);
    REQUIRE(clip.motions.size() == 6);
    for (size_t i = 0; i < clip.frames.size(); ++i) {
        auto rendered = tf::render(clip.identity, clip.motions[i]);
        CHECK(bitwise_equal(rendered, clip.frames[i]));
    }

    // regeneration with the same seed is bit-identical on disk
    const std::string root2 = root + "_again";
    fs::remove_all(root2);
    auto spec2 = spec;
    spec2.root = root2;
    spec2.overwrite = false;
    tf::build_dataset(spec2);
    auto clip2 = tf::load_clip(root2, man.clips[0].id);
    CHECK(clip2.identity == clip.identity);
    CHECK(clip2.motions == clip.motions);
    for (size_t i = 0; i < clip.frames.size(); ++i) CHECK(bitwise_equal(clip2.frames[i], clip.frames[i]));

    // identity tuples disjoint across splits
    std::set<std::array<double, 5>> train_ids, test_ids;
    for (const auto& ci : man.clips) {
        auto c = tf::load_clip_params_only(root, ci.id);
        std::array<double, 5> tup{c.identity.face_hue, c.identity.face_aspect, c.identity.eye_hue,
                                  c.identity.skin_brightness, c.identity.torso_hue};
        if (ci.split == "train") train_ids.insert(tup);
        if (ci.split == "test") test_ids.insert(tup);
    }
    for (const auto& t : test_ids) CHECK(train_ids.find(t) == train_ids.end());

    fs::remove_all(root);
    fs::remove_all(root2);
}

TEST_CASE("motion row: text round trip is exact") {
    auto tr = tf::sample_trajectory(123, 5);
    for (const auto& m : tr) {
        auto back = tf::parse_motion_row(tf::motion_row(m));
        CHECK(back == m);
    }
}
