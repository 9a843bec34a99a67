#pragma once

#include <array>
#include <vector>

#include "pliv/face_types.hpp"
#include "pliv/tensor.hpp"

namespace pliv::motionctl {

// Keypoints in normalized image coords, [-1,1]^2 with the origin at the image
// center and y pointing down screen. Transformed points may leave the square.
struct KeypointSet {
    static constexpr int kCount = 10;
    std::array<std::array<double, 2>, kCount> pts{};
};

inline constexpr double kHeatmapSigmaPx = 1.5;

// k' = scale * R(roll) * k + trans, counter-clockwise in the algebraic sense:
// R(pi/2) maps (1,0) to (0,1).
KeypointSet transform_keypoints(const KeypointSet& k, double roll, const std::array<double, 2>& trans, double scale);

// One Gaussian heatmap per keypoint, sigma 1.5px, peak 1.0 at the nearest
// pixel center. Points outside [-1.5,1.5]^2 give an all-zero channel; points
// inside but off-canvas clamp to the border pixel.
Tensor rasterize_keypoints(const KeypointSet& k, int h = kFrameH, int w = kFrameW);

// Pointwise-linear interpolation of every field; roll is a plain lerp in
// angle space, valid because |roll| <= pi/4 by construction (a general Euler
// interpolation would need shortest-arc handling).
MotionParams interpolate_motion(const MotionParams& src, const MotionParams& drv, double omega);

// omega_i = (i-1)/(MN-1) for i = 1..MN
std::vector<double> mii_weights(int m, int n);

}  // namespace pliv::motionctl
