#include "pliv/motionctl.hpp"

#include <cmath>
#include <stdexcept>

namespace pliv::motionctl {

KeypointSet transform_keypoints(const KeypointSet& k, double roll, const std::array<double, 2>& trans,
                                double scale) {
    if (!(scale > 0.0)) throw std::invalid_argument("transform_keypoints: scale must be > 0");
    if (!std::isfinite(roll) || !std::isfinite(trans[0]) || !std::isfinite(trans[1]) || !std::isfinite(scale))
        throw std::invalid_argument("transform_keypoints: non-finite input");
    const double c = std::cos(roll), s = std::sin(roll);
    KeypointSet out;
    for (int i = 0; i < KeypointSet::kCount; ++i) {
        const double x = k.pts[size_t(i)][0], y = k.pts[size_t(i)][1];
        out.pts[size_t(i)][0] = scale * (c * x - s * y) + trans[0];
        out.pts[size_t(i)][1] = scale * (s * x + c * y) + trans[1];
    }
    return out;
}

Tensor rasterize_keypoints(const KeypointSet& k, int h, int w) {
    Tensor out({KeypointSet::kCount, h, w});
    const double two_sigma2 = 2.0 * kHeatmapSigmaPx * kHeatmapSigmaPx;
    for (int i = 0; i < KeypointSet::kCount; ++i) {
        const double x = k.pts[size_t(i)][0], y = k.pts[size_t(i)][1];
        if (!std::isfinite(x) || !std::isfinite(y)) throw std::invalid_argument("rasterize_keypoints: non-finite");
        if (x < -1.5 || x > 1.5 || y < -1.5 || y > 1.5) continue;  // channel stays zero
        // nearest pixel center, clamped onto the canvas
        int cx = int(std::lround((x + 1.0) * 0.5 * w - 0.5));
        int cy = int(std::lround((y + 1.0) * 0.5 * h - 0.5));
        cx = std::min(std::max(cx, 0), w - 1);
        cy = std::min(std::max(cy, 0), h - 1);
        float* ch = out.data() + int64_t(i) * h * w;
        for (int py = 0; py < h; ++py)
            for (int px = 0; px < w; ++px) {
                const double d2 = double(px - cx) * (px - cx) + double(py - cy) * (py - cy);
                ch[py * w + px] = float(std::exp(-d2 / two_sigma2));
            }
    }
    return out;
}

MotionParams interpolate_motion(const MotionParams& src, const MotionParams& drv, double omega) {
    if (!(omega >= 0.0 && omega <= 1.0)) throw std::invalid_argument("interpolate_motion: omega out of [0,1]");
    // endpoints are returned verbatim so the boundaries are exact, not 1-ulp off
    if (omega == 0.0) return src;
    if (omega == 1.0) return drv;
    MotionParams out;
    out.roll = src.roll + omega * (drv.roll - src.roll);
    out.trans[0] = src.trans[0] + omega * (drv.trans[0] - src.trans[0]);
    out.trans[1] = src.trans[1] + omega * (drv.trans[1] - src.trans[1]);
    out.scale = src.scale + omega * (drv.scale - src.scale);
    for (int i = 0; i < 5; ++i) out.expr[size_t(i)] = src.expr[size_t(i)] + omega * (drv.expr[size_t(i)] - src.expr[size_t(i)]);
    return out;
}

std::vector<double> mii_weights(int m, int n) {
    const int mn = m * n;
    if (mn < 2) throw std::invalid_argument("mii_weights: MN must be >= 2");
    std::vector<double> w(size_t(mn), 0.0);
    for (int i = 1; i <= mn; ++i) w[size_t(i - 1)] = double(i - 1) / double(mn - 1);
    return w;
}

}  // namespace pliv::motionctl
