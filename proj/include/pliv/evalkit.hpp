#pragma once

#include <utility>
#include <vector>

#include "pliv/face_types.hpp"
#include "pliv/nets.hpp"
#include "pliv/streamer.hpp"

namespace pliv::eval {

struct MetricReport {
    double l1 = 0, ssim = 0, tlp_proxy = 0, aed = 0, apd = 0, id_drift = 0;
    std::vector<double> l1_series, ssim_series;
};

struct BenchReport {
    double fps = 0;
    double inter_chunk_latency_ms_mean = 0;
    double inter_chunk_latency_ms_p95 = 0;
    double denoiser_calls_per_frame = 0;
};

double frame_l1(const Frame& a, const Frame& b);
// 7x7 Gaussian window (sigma 1.5), standard constants, channel-averaged
double frame_ssim(const Frame& a, const Frame& b);

// per-frame series over aligned clips
std::pair<std::vector<double>, std::vector<double>> frame_metrics(const std::vector<Frame>& generated,
                                                                  const std::vector<Frame>& target);

// mean_t | d(gen_t, gen_t+1) - d(tgt_t, tgt_t+1) | * 1e3, d = perceptual distance
double tlp_proxy(const std::vector<Frame>& generated, const std::vector<Frame>& target,
                 const nets::Perceptual& percep);

// Renderer inversion: seeded multi-start coordinate descent on pixel L2,
// budget counted in render calls.
MotionParams refit_motion(const Frame& frame, const IdentityParams& identity, uint64_t seed = 0,
                          int render_budget = 2000);

// (AED, APD): expression / pose L1 against the driving parameters, pose
// fields normalized to unit range before averaging.
std::pair<double, double> motion_accuracy(const std::vector<Frame>& generated,
                                          const std::vector<MotionParams>& driving, const IdentityParams& identity,
                                          uint64_t seed = 0, int render_budget = 2000);

// Identity statistic = mean torso-band color (3) + 8-bin head hue histogram;
// drift = L1 between the statistic averaged over the first and last 10% of
// frames. The reference frame is validated but does not enter the statistic.
double id_drift(const std::vector<Frame>& generated, const Frame& reference);

std::vector<double> identity_statistic(const Frame& f);

BenchReport bench_latency(const stream::RunResult& run, int chunk, int n_levels);

}  // namespace pliv::eval
