#include "pliv/schedule.hpp"

namespace pliv::schedule {

NoiseSchedule make_schedule() {
    NoiseSchedule ns;
    ns.beta.resize(NoiseSchedule::kSteps);
    ns.alphabar.resize(NoiseSchedule::kSteps + 1);
    const double b0 = 1e-4, b1 = 2e-2;
    for (int t = 1; t <= NoiseSchedule::kSteps; ++t)
        ns.beta[size_t(t - 1)] = b0 + (b1 - b0) * double(t - 1) / double(NoiseSchedule::kSteps - 1);
    ns.alphabar[0] = 1.0;
    for (int t = 1; t <= NoiseSchedule::kSteps; ++t)
        ns.alphabar[size_t(t)] = ns.alphabar[size_t(t - 1)] * (1.0 - ns.beta[size_t(t - 1)]);
    return ns;
}

static void check_same(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b)) throw std::invalid_argument(std::string(what) + ": shape mismatch");
}

Tensor forward_noise(const NoiseSchedule& ns, const Tensor& z, const Tensor& eps, int t) {
    check_same(z, eps, "forward_noise");
    Tensor out(z.shape);
    forward_noise(ns, z.data(), eps.data(), z.numel(), t, out.data());
    return out;
}

Tensor renoise(const NoiseSchedule& ns, const Tensor& z0_hat, const Tensor& eps, int t_target) {
    return forward_noise(ns, z0_hat, eps, t_target);
}

Tensor convert_parameterization(const NoiseSchedule& ns, const Tensor& z_t, const Tensor& value, int t,
                                ParamDir dir) {
    check_same(z_t, value, "convert_parameterization");
    Tensor out(z_t.shape);
    convert_parameterization(ns, z_t.data(), value.data(), z_t.numel(), t, dir, out.data());
    return out;
}

}  // namespace pliv::schedule
