#pragma once

#include <array>
#include <string>
#include <vector>

#include "pliv/face_types.hpp"
#include "pliv/motionctl.hpp"

namespace pliv::toyface {

// Procedural face: head ellipse (rotated/scaled/translated), eyes, mouth and
// brows driven by the 5-D expression vector, plus a static torso band in the
// bottom rows whose color is an identity field but which no motion parameter
// touches. Deterministic, anti-aliased by 4x4 coverage sampling, output
// snapped to the 1/255 grid so PNG round-trips are exact.
Frame render(const IdentityParams& id, const MotionParams& m);

// Torso band rows [kTorsoTopRow, H). The head stays strictly above this band
// for every in-range motion, which is what makes the band a clean drift probe.
inline constexpr int kTorsoTopRow = 56;

// Fixed 10-point canonical template (head outline 4, eyes 2, mouth corners 2,
// brows 2), stretched horizontally by face_aspect.
motionctl::KeypointSet canonical_keypoints(const IdentityParams& id);

// Exact stand-ins for the learned extractors: m_f is the expression vector
// itself; k_d applies the driving pose to the SOURCE identity's canonical
// template (retargeting: source template, driving roll/trans/scale).
struct HybridMotion {
    std::array<double, 5> m_f;
    motionctl::KeypointSet k_d;
};
HybridMotion extract_hybrid_motion(const MotionParams& motion, const IdentityParams& source_identity);

// Mean-reverting random walk per field, per-step delta clamped to 5% of the
// field's range, values clamped to range. Deterministic in the seed.
std::vector<MotionParams> sample_trajectory(uint64_t seed, int t);

IdentityParams sample_identity(Rng& rng);

// ---- dataset ----

struct DatasetSpec {
    std::string root;
    int clips = 200;
    int frames = 40;
    uint64_t seed = 7;
    bool overwrite = false;
    double train_frac = 0.8;
    double val_frac = 0.1;
};

struct ClipInfo {
    std::string id;
    std::string split;  // train | val | test
    int frames = 0;
    uint64_t seed = 0;
};

struct Manifest {
    uint64_t seed = 0;
    int frames = 0;
    int fps = 25;
    std::vector<ClipInfo> clips;

    std::vector<ClipInfo> by_split(const std::string& split) const;
};

// Layout: <root>/manifest.json, <root>/<clip>/frame_%05d.png,
// <root>/<clip>/params.csv (identity header block + one row per frame).
void build_dataset(const DatasetSpec& spec);
Manifest load_manifest(const std::string& root);
Clip load_clip(const std::string& root, const std::string& clip_id);
Clip load_clip_params_only(const std::string& root, const std::string& clip_id);

// params.csv row helpers, shared with the CLI's motion-stream input.
std::string motion_row(const MotionParams& m);
MotionParams parse_motion_row(const std::string& line);

}  // namespace pliv::toyface
