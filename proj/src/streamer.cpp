#include "pliv/streamer.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "pliv/motionctl.hpp"
#include "pliv/toyface.hpp"

namespace pliv::stream {

namespace {

const schedule::NoiseSchedule& noise_table() {
    static const schedule::NoiseSchedule ns = schedule::make_schedule();
    return ns;
}

std::array<float, 5> expr_f(const MotionParams& m) {
    std::array<float, 5> out;
    for (int i = 0; i < 5; ++i) out[size_t(i)] = float(m.expr[size_t(i)]);
    return out;
}

void validate_config(const StreamConfig& cfg, const nets::Denoiser& net) {
    if (cfg.chunk < 1 || cfg.n_levels < 1) throw std::invalid_argument("stream: M and N must be positive");
    if (int(cfg.levels.size()) != cfg.n_levels) throw std::invalid_argument("stream: levels/N mismatch");
    schedule::CompactSchedule::make(cfg.levels);  // ascending-range validation
    if (cfg.chunk * cfg.n_levels > net.config().max_window_frames)
        throw std::invalid_argument("stream: window larger than the model's configured maximum");
    if (cfg.bank_capacity < 1) throw std::invalid_argument("stream: bank capacity must be >= 1");
}

double wall_ms_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

struct WindowTensors {
    Tensor frames, mf, cond;
    std::vector<int> tsteps;
};

WindowTensors gather(const StreamState& st) {
    const int m = st.cfg.chunk, n = st.cfg.n_levels, mn = m * n;
    const int64_t fsz = int64_t(3) * kFrameH * kFrameW;
    WindowTensors w;
    w.frames = Tensor({mn, 3, kFrameH, kFrameW});
    std::vector<MotionParams> motions;
    w.tsteps.assign(size_t(mn), 0);
    for (int c = 0; c < n; ++c) {
        const auto& ch = st.window.chunks[size_t(c)];
        std::copy(ch.frames.d.begin(), ch.frames.d.end(), w.frames.d.begin() + int64_t(c) * m * fsz);
        for (int i = 0; i < m; ++i) {
            motions.push_back(ch.motions[size_t(i)]);
            w.tsteps[size_t(c * m + i)] = st.cfg.levels[size_t(ch.level_index - 1)];
        }
    }
    w.mf = motions_mf(motions);
    w.cond = motions_cond(motions, st.source_identity);
    return w;
}

}  // namespace

Frame clamp_frame(const Tensor& latent) {
    Frame f = latent.ndim() == 4 ? latent.reshaped({3, kFrameH, kFrameW}) : latent;
    for (auto& v : f.d) v = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
    return f;
}

Tensor motions_mf(const std::vector<MotionParams>& motions) {
    Tensor out({int(motions.size()), 5});
    for (size_t i = 0; i < motions.size(); ++i)
        for (int j = 0; j < 5; ++j) out.d[i * 5 + size_t(j)] = float(motions[i].expr[size_t(j)]);
    return out;
}

Tensor motions_cond(const std::vector<MotionParams>& motions, const IdentityParams& source_identity) {
    const int k = motionctl::KeypointSet::kCount;
    const int64_t csz = int64_t(k) * kFrameH * kFrameW;
    Tensor out({int(motions.size()), k, kFrameH, kFrameW});
    for (size_t i = 0; i < motions.size(); ++i) {
        auto hm = toyface::extract_hybrid_motion(motions[i], source_identity);
        auto maps = motionctl::rasterize_keypoints(hm.k_d);
        std::copy(maps.d.begin(), maps.d.end(), out.d.begin() + int64_t(i) * csz);
    }
    return out;
}

StreamState init_stream(const Frame& reference, const IdentityParams& source_identity,
                        const MotionParams& source_motion, const MotionParams& first_driving,
                        const nets::Denoiser& net, const StreamConfig& cfg) {
    validate_config(cfg, net);
    if (reference.shape != std::vector<int>{3, kFrameH, kFrameW})
        throw std::invalid_argument("init_stream: reference must be a frame");
    validate(source_motion);
    validate(first_driving);

    StreamState st;
    st.cfg = cfg;
    st.source_identity = source_identity;
    st.rng = Rng(cfg.seed);

    const int m = cfg.chunk, n = cfg.n_levels, mn = m * n;
    const auto omega = motionctl::mii_weights(m, n);
    const Tensor z_ref = schedule::encode_latent(reference);
    const int64_t fsz = int64_t(3) * kFrameH * kFrameW;

    for (int c = 0; c < n; ++c) {
        MicroChunk ch;
        ch.level_index = c + 1;
        ch.frames = Tensor({m, 3, kFrameH, kFrameW});
        for (int i = 0; i < m; ++i) {
            const int idx = c * m + i;  // 0-based frame index in the window
            ch.motions.push_back(motionctl::interpolate_motion(source_motion, first_driving, omega[size_t(idx)]));
            Tensor eps = Tensor::randn({3, kFrameH, kFrameW}, st.rng);
            Tensor zt = schedule::forward_noise(noise_table(), z_ref, eps, cfg.levels[size_t(c)]);
            std::copy(zt.d.begin(), zt.d.end(), ch.frames.d.begin() + int64_t(i) * fsz);
        }
        st.window.chunks.push_back(std::move(ch));
    }
    st.banks.history = {net.encode_reference(reference, expr_f(source_motion))};
    st.banks.motion = {expr_f(source_motion)};
    return st;
}

bool maybe_add_keyframe(StreamState& state, const Frame& emitted_first, const std::array<float, 5>& m_f,
                        const nets::Denoiser& net) {
    if (state.banks.motion.empty()) throw std::logic_error("maybe_add_keyframe: banks not initialized");
    double d = std::numeric_limits<double>::infinity();
    for (const auto& mi : state.banks.motion) {
        double s = 0;
        for (int j = 0; j < 5; ++j) {
            const double diff = double(m_f[size_t(j)]) - mi[size_t(j)];
            s += diff * diff;
        }
        d = std::min(d, std::sqrt(s));
    }
    if (!(d > state.cfg.tau)) return false;
    auto feats = net.encode_reference(emitted_first, m_f);
    if (int(state.banks.history.size()) >= state.cfg.bank_capacity) {
        // FIFO over non-source entries; entry 0 is pinned
        state.banks.history.erase(state.banks.history.begin() + 1);
        state.banks.motion.erase(state.banks.motion.begin() + 1);
    }
    state.banks.history.push_back(std::move(feats));
    state.banks.motion.push_back(m_f);
    return true;
}

std::vector<Frame> stream_step(StreamState& state, const nets::Denoiser& net,
                               const std::vector<MotionParams>& next_motions) {
    if (!state.initialized()) throw std::logic_error("stream_step: state not initialized");
    const int m = state.cfg.chunk, n = state.cfg.n_levels;
    if (int(next_motions.size()) != m) throw std::invalid_argument("stream_step: need exactly M motions");
    for (const auto& mo : next_motions) validate(mo);

    auto w = gather(state);
    Tensor pred = net.denoise_window(w.frames, w.tsteps, state.banks.history, w.mf, w.cond, m);

    const int64_t fsz = int64_t(3) * kFrameH * kFrameW;
    // emit the refined t=0 chunk
    std::vector<Frame> emitted;
    for (int i = 0; i < m; ++i) {
        Tensor latent({3, kFrameH, kFrameW});
        std::copy(pred.d.begin() + int64_t(i) * fsz, pred.d.begin() + int64_t(i + 1) * fsz, latent.d.begin());
        emitted.push_back(clamp_frame(schedule::decode_latent(latent)));
    }
    const auto emitted_motions = state.window.chunks[0].motions;

    // slide: surviving predictions renoise one level down with fresh noise
    DenoiseWindow next;
    for (int c = 1; c < n; ++c) {
        MicroChunk ch;
        ch.level_index = c;  // was c+1, now one lower
        ch.motions = state.window.chunks[size_t(c)].motions;
        Tensor zhat({m, 3, kFrameH, kFrameW});
        std::copy(pred.d.begin() + int64_t(c) * m * fsz, pred.d.begin() + int64_t(c + 1) * m * fsz,
                  zhat.d.begin());
        Tensor eps = Tensor::randn({m, 3, kFrameH, kFrameW}, state.rng);
        ch.frames = schedule::renoise(noise_table(), zhat, eps, state.cfg.levels[size_t(c - 1)]);
        next.chunks.push_back(std::move(ch));
    }
    MicroChunk fresh;
    fresh.level_index = n;
    fresh.motions = next_motions;
    fresh.frames = Tensor::randn({m, 3, kFrameH, kFrameW}, state.rng);
    next.chunks.push_back(std::move(fresh));
    state.window = std::move(next);

    maybe_add_keyframe(state, emitted[0], expr_f(emitted_motions[0]), net);
    state.emitted_count += m;
    return emitted;
}

RunResult run_stream(const Frame& reference, const IdentityParams& source_identity,
                     const MotionParams& source_motion, const std::vector<MotionParams>& driving,
                     const nets::Denoiser& net, const StreamConfig& cfg) {
    if (driving.empty() || int(driving.size()) % cfg.chunk != 0)
        throw std::invalid_argument("run_stream: driving length must be a positive multiple of M");
    auto state = init_stream(reference, source_identity, source_motion, driving[0], net, cfg);

    RunResult out;
    const int steps = int(driving.size()) / cfg.chunk;
    for (int k = 0; k < steps; ++k) {
        std::vector<MotionParams> chunk(driving.begin() + int64_t(k) * cfg.chunk,
                                        driving.begin() + int64_t(k + 1) * cfg.chunk);
        const auto window_motions = state.window.chunks[0].motions;
        const auto t0 = std::chrono::steady_clock::now();
        auto frames = stream_step(state, net, chunk);
        StepTiming t;
        t.step = k;
        t.wall_ms = wall_ms_since(t0);
        t.emitted = state.emitted_count;
        t.bank_size = int(state.banks.history.size());
        out.timing.push_back(t);
        ++out.denoiser_passes;
        for (size_t i = 0; i < frames.size(); ++i) {
            out.frames.push_back(std::move(frames[i]));
            out.frame_motions.push_back(window_motions[i]);
        }
    }
    return out;
}

RunResult generate_chunkwise(const Frame& reference, const IdentityParams& source_identity,
                             const std::vector<MotionParams>& driving_mn, const nets::Denoiser& net,
                             const StreamConfig& cfg) {
    validate_config(cfg, net);
    const int m = cfg.chunk, n = cfg.n_levels, mn = m * n;
    if (int(driving_mn.size()) != mn) throw std::invalid_argument("generate_chunkwise: need exactly MN motions");
    for (const auto& mo : driving_mn) validate(mo);

    Rng rng(cfg.seed);
    auto refs = std::vector<nets::RefFeatures>{net.encode_reference(reference, expr_f(driving_mn[0]))};
    Tensor mf = motions_mf(driving_mn);
    Tensor cond = motions_cond(driving_mn, source_identity);

    const auto t0 = std::chrono::steady_clock::now();
    Tensor z = Tensor::randn({mn, 3, kFrameH, kFrameW}, rng);
    Tensor pred;
    int passes = 0;
    for (int p = n; p >= 1; --p) {
        std::vector<int> tsteps(size_t(mn), cfg.levels[size_t(p - 1)]);
        pred = net.denoise_window(z, tsteps, refs, mf, cond, m);
        ++passes;
        if (p > 1) {
            Tensor eps = Tensor::randn({mn, 3, kFrameH, kFrameW}, rng);
            z = schedule::renoise(noise_table(), pred, eps, cfg.levels[size_t(p - 2)]);
        }
    }

    RunResult out;
    const int64_t fsz = int64_t(3) * kFrameH * kFrameW;
    for (int i = 0; i < mn; ++i) {
        Tensor latent({3, kFrameH, kFrameW});
        std::copy(pred.d.begin() + int64_t(i) * fsz, pred.d.begin() + int64_t(i + 1) * fsz, latent.d.begin());
        out.frames.push_back(clamp_frame(schedule::decode_latent(latent)));
        out.frame_motions.push_back(driving_mn[size_t(i)]);
    }
    StepTiming t;
    t.step = 0;
    t.wall_ms = wall_ms_since(t0);
    t.emitted = mn;
    t.bank_size = 1;
    out.timing.push_back(t);
    out.denoiser_passes = passes;
    return out;
}

// ---- per-frame samplers ----

Frame sample_frame_compact(const nets::Denoiser& net, const std::vector<nets::RefFeatures>& refs, const Tensor& mf,
                           const Tensor& cond, const StreamConfig& cfg, Rng& rng, int* calls_out) {
    const int n = cfg.n_levels;
    Tensor z = Tensor::randn({1, 3, kFrameH, kFrameW}, rng);
    Tensor pred;
    int calls = 0;
    for (int p = n; p >= 1; --p) {
        pred = net.denoise_window(z, {cfg.levels[size_t(p - 1)]}, refs, mf, cond, 1);
        ++calls;
        if (p > 1) {
            Tensor eps = Tensor::randn({1, 3, kFrameH, kFrameW}, rng);
            z = schedule::renoise(noise_table(), pred, eps, cfg.levels[size_t(p - 2)]);
        }
    }
    if (calls_out) *calls_out = calls;
    return clamp_frame(schedule::decode_latent(pred));
}

Frame sample_frame_ddim(const nets::Denoiser& net, const std::vector<nets::RefFeatures>& refs, const Tensor& mf,
                        const Tensor& cond, int steps, Rng& rng, int* calls_out) {
    if (steps < 1) throw std::invalid_argument("sample_frame_ddim: steps >= 1");
    const auto& ns = noise_table();
    // evenly spaced grid 999 -> 0
    std::vector<int> grid(size_t(steps), 0);
    for (int i = 0; i < steps; ++i)
        grid[size_t(i)] = steps == 1 ? 999 : int(std::lround(999.0 * (1.0 - double(i) / double(steps - 1))));
    Tensor z = Tensor::randn({1, 3, kFrameH, kFrameW}, rng);
    Tensor pred;
    int calls = 0;
    for (int i = 0; i < steps; ++i) {
        const int t = grid[size_t(i)];
        pred = net.denoise_window(z, {t}, refs, mf, cond, 1);
        ++calls;
        if (i + 1 < steps) {
            const int t_next = grid[size_t(i + 1)];
            if (t == 0) {
                z = pred;
            } else {
                // deterministic eps-form DDIM move to t_next
                Tensor eps_hat = schedule::convert_parameterization(ns, z, pred, t, schedule::ParamDir::X0ToEps);
                z = schedule::forward_noise(ns, pred, eps_hat, t_next);
            }
        }
    }
    if (calls_out) *calls_out = calls;
    return clamp_frame(schedule::decode_latent(pred));
}

// ---- serialization ----

namespace {

struct Writer {
    std::vector<uint8_t> buf;
    void u8(uint8_t v) { buf.push_back(v); }
    void u32(uint32_t v) {
        for (int i = 0; i < 4; ++i) buf.push_back(uint8_t(v >> (8 * i)));
    }
    void u64(uint64_t v) {
        for (int i = 0; i < 8; ++i) buf.push_back(uint8_t(v >> (8 * i)));
    }
    void f64(double v) {
        uint64_t bits;
        std::memcpy(&bits, &v, 8);
        u64(bits);
    }
    void f32(float v) {
        uint32_t bits;
        std::memcpy(&bits, &v, 4);
        u32(bits);
    }
    void tensor(const Tensor& t) {
        u32(uint32_t(t.shape.size()));
        for (int s : t.shape) u32(uint32_t(s));
        for (float v : t.d) f32(v);
    }
    void motion(const MotionParams& m) {
        f64(m.roll);
        f64(m.trans[0]);
        f64(m.trans[1]);
        f64(m.scale);
        for (double e : m.expr) f64(e);
    }
};

struct Reader {
    const std::vector<uint8_t>& buf;
    size_t pos = 0;
    uint8_t u8() { return buf.at(pos++); }
    uint32_t u32() {
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= uint32_t(u8()) << (8 * i);
        return v;
    }
    uint64_t u64() {
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= uint64_t(u8()) << (8 * i);
        return v;
    }
    double f64() {
        uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    float f32() {
        uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    Tensor tensor() {
        std::vector<int> shape(size_t(u32()), 0);
        for (auto& s : shape) s = int(u32());
        Tensor t(shape);
        for (auto& v : t.d) v = f32();
        return t;
    }
    MotionParams motion() {
        MotionParams m;
        m.roll = f64();
        m.trans[0] = f64();
        m.trans[1] = f64();
        m.scale = f64();
        for (auto& e : m.expr) e = f64();
        return m;
    }
};

constexpr char kStateMagic[5] = {'P', 'L', 'S', 'S', '1'};

}  // namespace

std::vector<uint8_t> serialize(const StreamState& state) {
    Writer w;
    for (char c : kStateMagic) w.u8(uint8_t(c));
    w.u32(uint32_t(state.cfg.chunk));
    w.u32(uint32_t(state.cfg.n_levels));
    for (int lv : state.cfg.levels) w.u32(uint32_t(lv));
    w.f64(state.cfg.tau);
    w.u32(uint32_t(state.cfg.bank_capacity));
    w.u64(state.cfg.seed);
    w.f64(state.source_identity.face_hue);
    w.f64(state.source_identity.face_aspect);
    w.f64(state.source_identity.eye_hue);
    w.f64(state.source_identity.skin_brightness);
    w.f64(state.source_identity.torso_hue);
    w.u64(uint64_t(state.emitted_count));
    const auto rs = state.rng.state();
    for (uint64_t s : rs.s) w.u64(s);
    w.u8(rs.has_spare ? 1 : 0);
    w.f64(rs.spare);
    w.u32(uint32_t(state.window.chunks.size()));
    for (const auto& ch : state.window.chunks) {
        w.u32(uint32_t(ch.level_index));
        w.u32(uint32_t(ch.motions.size()));
        for (const auto& m : ch.motions) w.motion(m);
        w.tensor(ch.frames);
    }
    w.u32(uint32_t(state.banks.history.size()));
    for (size_t i = 0; i < state.banks.history.size(); ++i) {
        for (float v : state.banks.motion[i]) w.f32(v);
        const auto& rf = state.banks.history[i];
        w.u32(uint32_t(rf.scales.size()));
        for (const auto& s : rf.scales) w.tensor(s);
    }
    return w.buf;
}

StreamState deserialize(const std::vector<uint8_t>& bytes) {
    Reader r{bytes};
    for (char c : kStateMagic)
        if (r.u8() != uint8_t(c)) throw std::runtime_error("stream state: bad magic");
    StreamState st;
    st.cfg.chunk = int(r.u32());
    st.cfg.n_levels = int(r.u32());
    st.cfg.levels.assign(size_t(st.cfg.n_levels), 0);
    for (auto& lv : st.cfg.levels) lv = int(r.u32());
    st.cfg.tau = r.f64();
    st.cfg.bank_capacity = int(r.u32());
    st.cfg.seed = r.u64();
    st.source_identity.face_hue = r.f64();
    st.source_identity.face_aspect = r.f64();
    st.source_identity.eye_hue = r.f64();
    st.source_identity.skin_brightness = r.f64();
    st.source_identity.torso_hue = r.f64();
    st.emitted_count = int64_t(r.u64());
    Rng::State rs;
    for (auto& s : rs.s) s = r.u64();
    rs.has_spare = r.u8() != 0;
    rs.spare = r.f64();
    st.rng.set_state(rs);
    const uint32_t nchunks = r.u32();
    for (uint32_t c = 0; c < nchunks; ++c) {
        MicroChunk ch;
        ch.level_index = int(r.u32());
        const uint32_t nm = r.u32();
        for (uint32_t i = 0; i < nm; ++i) ch.motions.push_back(r.motion());
        ch.frames = r.tensor();
        st.window.chunks.push_back(std::move(ch));
    }
    const uint32_t nbank = r.u32();
    for (uint32_t i = 0; i < nbank; ++i) {
        std::array<float, 5> mf;
        for (auto& v : mf) v = r.f32();
        nets::RefFeatures rf;
        rf.m_f = mf;
        const uint32_t ns = r.u32();
        for (uint32_t s = 0; s < ns; ++s) rf.scales.push_back(r.tensor());
        st.banks.history.push_back(std::move(rf));
        st.banks.motion.push_back(mf);
    }
    return st;
}

}  // namespace pliv::stream
