#pragma once

#include <array>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "pliv/tensor.hpp"

namespace pliv {

inline constexpr int kFrameH = 64;
inline constexpr int kFrameW = 64;

// Frames are [3,64,64] float tensors with values on the 1/255 grid in [0,1].
using Frame = Tensor;

inline Frame make_frame() { return Tensor({3, kFrameH, kFrameW}); }

struct IdentityParams {
    double face_hue = 0.1;         // [0,1]
    double face_aspect = 1.0;      // [0.7,1.3], ellipse width/height
    double eye_hue = 0.6;          // [0,1]
    double skin_brightness = 0.8;  // [0.4,1.0]
    double torso_hue = 0.35;       // [0,1]

    bool operator==(const IdentityParams&) const = default;
};

struct MotionParams {
    double roll = 0.0;                              // radians, [-pi/4, pi/4]
    std::array<double, 2> trans{0.0, 0.0};          // [-0.3,0.3]^2, normalized coords
    double scale = 1.0;                             // [0.7,1.3]
    std::array<double, 5> expr{1, 1, 0, 0.5, 0.5};  // eye_l, eye_r, mouth_open, mouth_width, brow

    bool operator==(const MotionParams&) const = default;
};

inline MotionParams neutral_motion() { return MotionParams{}; }

namespace ranges {
inline constexpr double kRollMax = M_PI / 4.0;
inline constexpr double kTransMax = 0.3;
inline constexpr double kScaleMin = 0.7, kScaleMax = 1.3;
inline constexpr double kAspectMin = 0.7, kAspectMax = 1.3;
inline constexpr double kBrightMin = 0.4, kBrightMax = 1.0;
}  // namespace ranges

inline void validate(const IdentityParams& id) {
    using namespace ranges;
    auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!unit(id.face_hue) || !unit(id.eye_hue) || !unit(id.torso_hue) ||
        id.face_aspect < kAspectMin || id.face_aspect > kAspectMax || id.skin_brightness < kBrightMin ||
        id.skin_brightness > kBrightMax)
        throw std::invalid_argument("identity params out of range");
}

inline void validate(const MotionParams& m) {
    using namespace ranges;
    if (std::fabs(m.roll) > kRollMax || std::fabs(m.trans[0]) > kTransMax || std::fabs(m.trans[1]) > kTransMax ||
        m.scale < kScaleMin || m.scale > kScaleMax)
        throw std::invalid_argument("motion params out of range");
    for (double e : m.expr)
        if (e < 0.0 || e > 1.0) throw std::invalid_argument("motion params out of range");
}

struct Clip {
    IdentityParams identity;
    std::vector<Frame> frames;
    std::vector<MotionParams> motions;
    int fps = 25;
};

}  // namespace pliv
