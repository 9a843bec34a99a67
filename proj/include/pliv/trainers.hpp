#pragma once

#include <string>
#include <vector>

#include "pliv/nets.hpp"
#include "pliv/schedule.hpp"
#include "pliv/toyface.hpp"

namespace pliv::train {

struct TrainConfig {
    int stage = 1;
    float lr = 1e-4f;  // toy default; the reference backbone trains at 1e-5
    float weight_decay = 0.01f;
    int batch = 4;
    double lambda_lpips = 2.0;
    double lambda_adv = 0.05;
    int n_levels = 4;  // N
    int chunk = 4;     // M
    int seq_len = 40;  // S
    int steps = 1000;  // optimizer steps (stages 1-2) or sequences (stage 3)
    uint64_t seed = 0;
    std::vector<int> levels = {0, 333, 666, 999};
};

struct LossReport {
    double total = 0, mse = 0, perceptual = 0, adversarial = 0, disc_loss = 0;
    int rollout_steps = 0;  // n drawn by distill_rollout
};

struct TrainResult {
    std::vector<LossReport> curve;
    // stage 3: one entry per gradient update, (sequence index, window position s)
    std::vector<std::pair<int, int>> update_events;
};

// In-memory view of one dataset split.
class TrainSet {
public:
    TrainSet(const std::string& root, const std::string& split);
    size_t size() const { return clips_.size(); }
    const Clip& clip(size_t i) const { return clips_[i]; }

private:
    std::vector<Clip> clips_;
};

// Conditioning tensors for clip frames [lo, hi).
Tensor window_mf(const Clip& clip, int lo, int hi);
Tensor window_cond(const Clip& clip, int lo, int hi);

struct RolloutSample {
    Tensor ref_frame;
    std::array<float, 5> ref_mf{};
    Tensor gt_frame;
    Tensor mf;    // [1,5]
    Tensor cond;  // [1,K,H,W]
};
RolloutSample make_rollout_sample(const Clip& clip, int ref_index, int drv_index);

struct RolloutResult {
    LossReport report;
    std::vector<ad::Var> preds;  // gradient-bearing final predictions, one per sample
    ad::Var loss;
};

// Fewer-step distillation rollout: z ~ N(0,I) at t_N, n ~ U{1..N} sampler
// iterations down the compact schedule, renoising the x0 prediction with
// fresh noise between levels. Only the final denoiser call records gradients;
// prefix_net, when given, runs the gradient-free prefix iterations (the
// gradient-locality probe swaps in perturbed weights there).
RolloutResult distill_rollout(const std::vector<RolloutSample>& batch, const TrainConfig& cfg,
                              const nets::Denoiser& net, const nets::Discriminator& disc,
                              const nets::Perceptual& percep, const schedule::NoiseSchedule& ns, Rng& rng,
                              const nets::Denoiser* prefix_net = nullptr);

// Hinge critic update, alternating 1:1 with generator updates.
LossReport adversarial_step(const Tensor& real_batch, const Tensor& fake_batch, nets::Discriminator& disc,
                            ad::AdamW& opt);

// First sliding window: chunks 1..N-1 are ground-truth latents noised to
// their chunk's level, chunk N is pure noise. Noise is drawn from rng in
// chunk-major order, one [3,H,W] tensor per frame.
Tensor build_initial_window(const Clip& clip, const TrainConfig& cfg, const schedule::NoiseSchedule& ns, Rng& rng);

TrainResult train_stage1(const std::string& dataset_root, const TrainConfig& cfg, nets::Denoiser& net);

TrainResult train_stage2(const std::string& dataset_root, const TrainConfig& cfg, nets::Denoiser& net,
                         nets::Discriminator& disc, const nets::Perceptual& percep);

// Sliding training over the model's own renoised predictions. Gradient
// updates at s mod (N-1) == 0 touch only the temporal-attention parameters.
TrainResult train_stage3_sliding(const std::string& dataset_root, const TrainConfig& cfg, nets::Denoiser& net,
                                 nets::Discriminator& disc, const nets::Perceptual& percep);

void write_loss_table(const std::string& path, const TrainResult& result);

}  // namespace pliv::train
