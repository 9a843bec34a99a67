#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "pliv/tensor.hpp"

namespace pliv::schedule {

// Forward-noising tables over t in [0,1000]. beta is linear 1e-4 -> 2e-2;
// alphabar[0] = 1 and alphabar[t] = prod_{i=1..t} (1 - beta_i).
struct NoiseSchedule {
    static constexpr int kSteps = 1000;
    std::vector<double> beta;      // beta[t-1] holds beta_t, t = 1..1000
    std::vector<double> alphabar;  // size 1001
};

NoiseSchedule make_schedule();

// The N ascending timesteps kept after distillation.
struct CompactSchedule {
    std::vector<int> levels;

    static CompactSchedule make(std::vector<int> lv) {
        if (lv.empty()) throw std::invalid_argument("compact schedule: empty");
        for (size_t i = 0; i < lv.size(); ++i) {
            if (lv[i] < 0 || lv[i] > 999) throw std::invalid_argument("compact schedule: level out of [0,999]");
            if (i > 0 && lv[i] <= lv[i - 1]) throw std::invalid_argument("compact schedule: not strictly ascending");
        }
        return CompactSchedule{std::move(lv)};
    }

    static CompactSchedule default4() { return make({0, 333, 666, 999}); }

    int n() const { return int(levels.size()); }
};

inline void check_t(int t) {
    if (t < 0 || t > NoiseSchedule::kSteps) throw std::invalid_argument("timestep out of [0,1000]");
}

// z_t = sqrt(abar_t) z + sqrt(1-abar_t) eps. Exactly z at t=0.
template <typename T>
void forward_noise(const NoiseSchedule& ns, const T* z, const T* eps, int64_t n, int t, T* out) {
    check_t(t);
    const double ab = ns.alphabar[size_t(t)];
    const T a = T(std::sqrt(ab));
    const T b = T(std::sqrt(1.0 - ab));
    for (int64_t i = 0; i < n; ++i) out[i] = a * z[i] + b * eps[i];
}

// Same map; named for the sampler's x0-renoise step back up to t_target.
template <typename T>
void renoise(const NoiseSchedule& ns, const T* z0_hat, const T* eps, int64_t n, int t_target, T* out) {
    forward_noise(ns, z0_hat, eps, n, t_target, out);
}

enum class ParamDir { X0ToEps, EpsToX0 };

template <typename T>
void convert_parameterization(const NoiseSchedule& ns, const T* z_t, const T* value, int64_t n, int t, ParamDir dir,
                              T* out) {
    check_t(t);
    const double ab = ns.alphabar[size_t(t)];
    if (dir == ParamDir::X0ToEps) {
        if (t == 0) throw std::invalid_argument("convert_parameterization: eps undefined at t=0");
        const T a = T(std::sqrt(ab));
        const T ib = T(1.0 / std::sqrt(1.0 - ab));
        for (int64_t i = 0; i < n; ++i) out[i] = (z_t[i] - a * value[i]) * ib;
    } else {
        const T b = T(std::sqrt(1.0 - ab));
        const T ia = T(1.0 / std::sqrt(ab));
        for (int64_t i = 0; i < n; ++i) out[i] = (z_t[i] - b * value[i]) * ia;
    }
}

// Tensor conveniences used by the trainers and the streaming engine.
Tensor forward_noise(const NoiseSchedule& ns, const Tensor& z, const Tensor& eps, int t);
Tensor renoise(const NoiseSchedule& ns, const Tensor& z0_hat, const Tensor& eps, int t_target);
Tensor convert_parameterization(const NoiseSchedule& ns, const Tensor& z_t, const Tensor& value, int t, ParamDir dir);

// Latent codec hook. Pixel-space latents for now: both directions are the
// identity, kept at the boundary where the samplers decode predictions.
inline Tensor encode_latent(const Tensor& frame) { return frame; }
inline Tensor decode_latent(const Tensor& z0) { return z0; }

}  // namespace pliv::schedule
