#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "pliv/streamer.hpp"
#include "pliv/toyface.hpp"

using namespace pliv;
namespace st = pliv::stream;

namespace {

nets::DenoiserConfig tiny_cfg() {
    nets::DenoiserConfig c;
    c.base_channels = 8;
    c.max_window_frames = 16;
    return c;
}

struct Setup {
    IdentityParams id;
    Frame reference;
    MotionParams source_motion;
    std::vector<MotionParams> driving;

    explicit Setup(uint64_t seed, int frames = 40) {
        Rng r(seed);
        id = toyface::sample_identity(r);
        auto traj = toyface::sample_trajectory(seed ^ 0x5555, frames + 1);
        source_motion = traj[0];
        driving.assign(traj.begin() + 1, traj.end());
        reference = toyface::render(id, source_motion);
    }
};

st::StreamConfig stream_cfg(uint64_t seed = 3, double tau = 0.35) {
    st::StreamConfig c;
    c.seed = seed;
    c.tau = tau;
    return c;
}

}  // namespace

TEST_CASE("init_stream: MII window and bank contracts") {
    nets::Denoiser net(tiny_cfg(), 1);
    Setup s(11);
    auto state = st::init_stream(s.reference, s.id, s.source_motion, s.driving[0], net, stream_cfg());

    REQUIRE(state.window.chunks.size() == 4);
    // boundary interpolation: first window frame conditioned on the source
    // motion, last on the first driving motion
    CHECK(state.window.chunks[0].motions[0] == s.source_motion);
    CHECK(state.window.chunks[3].motions[3] == s.driving[0]);
    // the t=0 chunk holds the clean reference latent
    const int64_t fsz = int64_t(3) * kFrameH * kFrameW;
    for (int i = 0; i < 4; ++i)
        for (int64_t j = 0; j < fsz; ++j)
            CHECK(state.window.chunks[0].frames.d[size_t(i * fsz + j)] == s.reference.d[size_t(j)]);
    // higher chunks are noised, not clean
    CHECK(max_abs_diff(state.window.chunks[3].frames.reshaped({4, 3, kFrameH, kFrameW}),
                       state.window.chunks[0].frames.reshaped({4, 3, kFrameH, kFrameW})) > 0.1f);
    CHECK(state.banks.history.size() == 1);
    CHECK(state.banks.motion.size() == 1);
    CHECK(state.emitted_count == 0);
}

TEST_CASE("stream_step: cadence, window invariants, validation") {
    nets::Denoiser net(tiny_cfg(), 2);
    Setup s(13);
    auto state = st::init_stream(s.reference, s.id, s.source_motion, s.driving[0], net, stream_cfg());

    for (int k = 0; k < 3; ++k) {
        std::vector<MotionParams> chunk(s.driving.begin() + k * 4, s.driving.begin() + (k + 1) * 4);
        auto frames = st::stream_step(state, net, chunk);
        REQUIRE(frames.size() == 4);
        CHECK(state.emitted_count == 4 * (k + 1));
        REQUIRE(state.window.chunks.size() == 4);
        for (int c = 0; c < 4; ++c) CHECK(state.window.chunks[size_t(c)].level_index == c + 1);
        for (const auto& f : frames)
            for (float v : f.d) {
                CHECK(v >= 0.0f);
                CHECK(v <= 1.0f);
            }
    }
    CHECK_THROWS(st::stream_step(state, net, {s.driving[0]}));  // wrong motion count
    st::StreamState empty;
    CHECK_THROWS(st::stream_step(empty, net, std::vector<MotionParams>(4, s.driving[0])));
}

TEST_CASE("run_stream: emission accounting and end-to-end determinism") {
    nets::Denoiser net(tiny_cfg(), 3);
    Setup s(17);
    auto cfg = stream_cfg(5);
    auto a = st::run_stream(s.reference, s.id, s.source_motion, s.driving, net, cfg);
    REQUIRE(a.frames.size() == 40);
    REQUIRE(a.timing.size() == 10);  // one latency entry per emission event
    CHECK(a.denoiser_passes == 10);
    CHECK(a.timing.back().emitted == 40);

    auto b = st::run_stream(s.reference, s.id, s.source_motion, s.driving, net, cfg);
    for (size_t i = 0; i < a.frames.size(); ++i) CHECK(bitwise_equal(a.frames[i], b.frames[i]));

    CHECK_THROWS(st::run_stream(s.reference, s.id, s.source_motion,
                                std::vector<MotionParams>(s.driving.begin(), s.driving.begin() + 5), net, cfg));

    // warm-up alignment: the first MN frames are interpolation-conditioned,
    // later frames carry the driving motions shifted by MN
    CHECK(a.frame_motions[0] == s.source_motion);
    CHECK(a.frame_motions[15] == s.driving[0]);
    for (int i = 16; i < 40; ++i) CHECK(a.frame_motions[size_t(i)] == s.driving[size_t(i - 16)]);
}

TEST_CASE("maybe_add_keyframe: threshold rule, pinning, fifo") {
    nets::Denoiser net(tiny_cfg(), 4);
    Setup s(19);
    auto state = st::init_stream(s.reference, s.id, s.source_motion, s.driving[0], net, stream_cfg());

    // distance oracle: bank {0}, candidate 0.3 away inserts iff tau < 0.3
    state.banks.motion[0] = {0, 0, 0, 0, 0};
    std::array<float, 5> cand{0.3f, 0, 0, 0, 0};
    state.cfg.tau = 0.31;
    CHECK(!st::maybe_add_keyframe(state, s.reference, cand, net));
    CHECK(state.banks.history.size() == 1);
    state.cfg.tau = 0.29;
    CHECK(st::maybe_add_keyframe(state, s.reference, cand, net));
    CHECK(state.banks.history.size() == 2);
    // re-offering the same motion is now within tau of the bank
    CHECK(!st::maybe_add_keyframe(state, s.reference, cand, net));

    // tau = 0: every distinct motion inserts until capacity, then FIFO evicts
    // the oldest non-source entry
    state.cfg.tau = 0.0;
    std::array<float, 5> m2{0.6f, 0, 0, 0, 0}, m3{0.9f, 0, 0, 0, 0}, m4{1.2f, 0, 0, 0, 0};
    CHECK(st::maybe_add_keyframe(state, s.reference, m2, net));
    CHECK(st::maybe_add_keyframe(state, s.reference, m3, net));
    CHECK(state.banks.history.size() == 4);
    CHECK(st::maybe_add_keyframe(state, s.reference, m4, net));
    CHECK(state.banks.history.size() == 4);
    CHECK(state.banks.motion[0] == std::array<float, 5>{0, 0, 0, 0, 0});  // source pinned
    CHECK(state.banks.motion[1] == m2);                                   // 'cand' was evicted
    CHECK(state.banks.motion[3] == m4);

    // bank pairwise distances stay above tau on a non-evicting run
    for (size_t i = 0; i < state.banks.motion.size(); ++i)
        for (size_t j = i + 1; j < state.banks.motion.size(); ++j) {
            double d2 = 0;
            for (int k = 0; k < 5; ++k) {
                double df = double(state.banks.motion[i][size_t(k)]) - state.banks.motion[j][size_t(k)];
                d2 += df * df;
            }
            CHECK(std::sqrt(d2) > state.cfg.tau);
        }
}

TEST_CASE("degenerate stream: constant source-motion driving never inserts keyframes") {
    nets::Denoiser net(tiny_cfg(), 5);
    Setup s(23);
    std::vector<MotionParams> constant(12, s.source_motion);
    auto res = st::run_stream(s.reference, s.id, s.source_motion, constant, net, stream_cfg());
    for (const auto& t : res.timing) CHECK(t.bank_size == 1);
}

TEST_CASE("hkm off: emissions identical until the first would-be insertion") {
    nets::Denoiser net(tiny_cfg(), 6);
    // a zero output head would make the denoiser ignore its references
    Rng pert(55);
    for (auto& v : net.params().find("out.w")->val.d) v = float(pert.normal()) * 0.05f;
    Setup s(29, 24);
    // drive with an expression far from the source so a keyframe fires during
    // the MII ramp, well before the stream ends
    s.source_motion = neutral_motion();
    s.reference = toyface::render(s.id, s.source_motion);
    MotionParams far = neutral_motion();
    far.expr = {0.0, 0.0, 1.0, 1.0, 1.0};
    s.driving.assign(24, far);
    auto on = stream_cfg(7, 0.05);  // low threshold: inserts early
    auto off = stream_cfg(7, std::numeric_limits<double>::infinity());
    auto ra = st::run_stream(s.reference, s.id, s.source_motion, s.driving, net, on);
    auto rb = st::run_stream(s.reference, s.id, s.source_motion, s.driving, net, off);
    // find first insertion step in the HKM run
    int first_ins = -1;
    for (const auto& t : ra.timing)
        if (t.bank_size > 1) {
            first_ins = t.step;
            break;
        }
    REQUIRE(first_ins >= 0);
    // emissions before and including that step's output are identical (the
    // inserted keyframe only affects the NEXT window pass)
    for (int i = 0; i < (first_ins + 1) * 4; ++i) CHECK(bitwise_equal(ra.frames[size_t(i)], rb.frames[size_t(i)]));
    // and they diverge afterwards
    float diff = 0;
    for (size_t i = size_t(first_ins + 1) * 4; i < ra.frames.size(); ++i)
        diff += max_abs_diff(ra.frames[i], rb.frames[i]);
    CHECK(diff > 0.0f);
}

TEST_CASE("serialize/resume: bit-exact continuation") {
    nets::Denoiser net(tiny_cfg(), 7);
    Setup s(31, 16);
    auto cfg = stream_cfg(9, 0.2);

    auto straight = st::init_stream(s.reference, s.id, s.source_motion, s.driving[0], net, cfg);
    std::vector<Frame> a;
    for (int k = 0; k < 4; ++k) {
        std::vector<MotionParams> chunk(s.driving.begin() + k * 4, s.driving.begin() + (k + 1) * 4);
        for (auto& f : st::stream_step(straight, net, chunk)) a.push_back(f);
    }

    auto resumed = st::init_stream(s.reference, s.id, s.source_motion, s.driving[0], net, cfg);
    std::vector<Frame> b;
    for (int k = 0; k < 2; ++k) {
        std::vector<MotionParams> chunk(s.driving.begin() + k * 4, s.driving.begin() + (k + 1) * 4);
        for (auto& f : st::stream_step(resumed, net, chunk)) b.push_back(f);
    }
    auto bytes = st::serialize(resumed);
    auto restored = st::deserialize(bytes);
    CHECK(restored.emitted_count == resumed.emitted_count);
    for (int k = 2; k < 4; ++k) {
        std::vector<MotionParams> chunk(s.driving.begin() + k * 4, s.driving.begin() + (k + 1) * 4);
        for (auto& f : st::stream_step(restored, net, chunk)) b.push_back(f);
    }
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) CHECK(bitwise_equal(a[i], b[i]));

    // save -> load -> save is byte-identical
    CHECK(st::serialize(restored) == st::serialize(straight));
}

TEST_CASE("generate_chunkwise: uniform levels, one emission, N=1 equivalence") {
    nets::Denoiser net(tiny_cfg(), 8);
    Setup s(37, 16);
    auto cfg = stream_cfg(11);
    std::vector<MotionParams> mn_motions(s.driving.begin(), s.driving.begin() + 16);
    auto res = st::generate_chunkwise(s.reference, s.id, mn_motions, net, cfg);
    REQUIRE(res.frames.size() == 16);
    CHECK(res.denoiser_passes == 4);       // one window pass per level
    CHECK(res.timing.size() == 1);         // exactly one emission event
    CHECK_THROWS(st::generate_chunkwise(s.reference, s.id,
                                        std::vector<MotionParams>(s.driving.begin(), s.driving.begin() + 8), net,
                                        cfg));

    // degenerate N=1 schedule: one-pass streaming on the same pure-noise
    // window equals the chunk-wise baseline
    st::StreamConfig one;
    one.chunk = 4;
    one.n_levels = 1;
    one.levels = {999};
    one.seed = 21;
    std::vector<MotionParams> m4(s.driving.begin(), s.driving.begin() + 4);
    auto cw = st::generate_chunkwise(s.reference, s.id, m4, net, one);

    st::StreamState manual;
    manual.cfg = one;
    manual.source_identity = s.id;
    manual.rng = Rng(one.seed);
    st::MicroChunk ch;
    ch.level_index = 1;
    ch.motions = m4;
    Rng noise(one.seed);
    ch.frames = Tensor::randn({4, 3, kFrameH, kFrameW}, noise);
    manual.window.chunks.push_back(std::move(ch));
    std::array<float, 5> mf0;
    for (int i = 0; i < 5; ++i) mf0[size_t(i)] = float(m4[0].expr[size_t(i)]);
    manual.banks.history = {net.encode_reference(s.reference, mf0)};
    manual.banks.motion = {mf0};
    auto frames = st::stream_step(manual, net, m4);
    REQUIRE(frames.size() == 4);
    for (int i = 0; i < 4; ++i) CHECK(bitwise_equal(frames[size_t(i)], cw.frames[size_t(i)]));
}

TEST_CASE("per-frame samplers: call counts and determinism") {
    nets::Denoiser net(tiny_cfg(), 9);
    Setup s(41, 4);
    auto cfg = stream_cfg(13);
    auto refs = std::vector<nets::RefFeatures>{net.encode_reference(s.reference)};
    auto mf = st::motions_mf({s.driving[0]});
    auto cond = st::motions_cond({s.driving[0]}, s.id);

    int calls = 0;
    Rng r1(1);
    auto f1 = st::sample_frame_compact(net, refs, mf, cond, cfg, r1, &calls);
    CHECK(calls == 4);
    Rng r2(1);
    auto f2 = st::sample_frame_compact(net, refs, mf, cond, cfg, r2);
    CHECK(bitwise_equal(f1, f2));

    Rng r3(2);
    auto f3 = st::sample_frame_ddim(net, refs, mf, cond, 50, r3, &calls);
    CHECK(calls == 50);
    CHECK(f3.shape == std::vector<int>{3, kFrameH, kFrameW});
}
