#pragma once

#include <cstdint>
#include <vector>

#include "pliv/face_types.hpp"
#include "pliv/nets.hpp"
#include "pliv/schedule.hpp"

namespace pliv::stream {

struct StreamConfig {
    int chunk = 4;     // M
    int n_levels = 4;  // N
    std::vector<int> levels = {0, 333, 666, 999};
    double tau = 0.35;  // HKM motion threshold over m_f L2; infinity disables
    int bank_capacity = 4;
    uint64_t seed = 0;
};

struct MicroChunk {
    Tensor frames;  // [M,3,H,W] latents
    int level_index = 1;
    std::vector<MotionParams> motions;
};

struct DenoiseWindow {
    std::vector<MicroChunk> chunks;  // level_index ascending 1..N
};

// Paired history/motion banks; entry 0 is the pinned source reference,
// eviction is FIFO over the rest.
struct Banks {
    std::vector<nets::RefFeatures> history;
    std::vector<std::array<float, 5>> motion;
};

struct StepTiming {
    int step = 0;
    double wall_ms = 0;
    int64_t emitted = 0;
    int bank_size = 0;
};

struct StreamState {
    StreamConfig cfg;
    IdentityParams source_identity;
    DenoiseWindow window;
    Banks banks;
    int64_t emitted_count = 0;
    Rng rng;

    bool initialized() const { return !window.chunks.empty(); }
};

// Motion-interpolated initialization: every chunk holds the reference latent
// noised to its level (the t=0 chunk is the clean latent), conditioned on
// motions interpolated from the source to the first driving frame.
StreamState init_stream(const Frame& reference, const IdentityParams& source_identity,
                        const MotionParams& source_motion, const MotionParams& first_driving,
                        const nets::Denoiser& net, const StreamConfig& cfg);

// One engine step: denoise the window, emit the t=0 chunk, renoise the
// surviving predictions one level down, append a pure-noise chunk carrying
// next_motions, then run the keyframe check on the first emitted frame.
std::vector<Frame> stream_step(StreamState& state, const nets::Denoiser& net,
                               const std::vector<MotionParams>& next_motions);

// Eq. 8 check: inserts (features, m_f) when min_i ||m_f - m_i||_2 > tau.
bool maybe_add_keyframe(StreamState& state, const Frame& emitted_first, const std::array<float, 5>& m_f,
                        const nets::Denoiser& net);

struct RunResult {
    std::vector<Frame> frames;
    std::vector<MotionParams> frame_motions;  // conditioning motion per emitted frame
    std::vector<StepTiming> timing;
    int denoiser_passes = 0;  // full-window denoiser invocations
};

// init + S/M steps. The first MN emitted frames are the MII warm-up
// (reference-to-driving transition); frame i >= MN is driven by driving[i-MN].
RunResult run_stream(const Frame& reference, const IdentityParams& source_identity,
                     const MotionParams& source_motion, const std::vector<MotionParams>& driving,
                     const nets::Denoiser& net, const StreamConfig& cfg);

// Uniform-level baseline: all MN frames start at t_N and descend the compact
// schedule together; nothing is emitted until the final pass.
RunResult generate_chunkwise(const Frame& reference, const IdentityParams& source_identity,
                             const std::vector<MotionParams>& driving_mn, const nets::Denoiser& net,
                             const StreamConfig& cfg);

std::vector<uint8_t> serialize(const StreamState& state);
StreamState deserialize(const std::vector<uint8_t>& bytes);

// Conditioning tensors from raw motion lists (Eq. 3 retargeting against the
// source identity's canonical keypoints).
Tensor motions_mf(const std::vector<MotionParams>& motions);
Tensor motions_cond(const std::vector<MotionParams>& motions, const IdentityParams& source_identity);

// Per-frame samplers used by self-reenactment evaluation. The compact sampler
// is the Algorithm-1 inference path (fresh renoise between levels); the
// uniform sampler is a deterministic eps-form DDIM descent over `steps`
// evenly spaced timesteps. Both report denoiser calls via calls_out.
Frame sample_frame_compact(const nets::Denoiser& net, const std::vector<nets::RefFeatures>& refs, const Tensor& mf,
                           const Tensor& cond, const StreamConfig& cfg, Rng& rng, int* calls_out = nullptr);
Frame sample_frame_ddim(const nets::Denoiser& net, const std::vector<nets::RefFeatures>& refs, const Tensor& mf,
                        const Tensor& cond, int steps, Rng& rng, int* calls_out = nullptr);

Frame clamp_frame(const Tensor& latent);

}  // namespace pliv::stream
