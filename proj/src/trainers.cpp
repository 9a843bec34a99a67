#include "pliv/trainers.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "pliv/motionctl.hpp"

namespace pliv::train {

namespace {

std::array<float, 5> expr_f(const MotionParams& m) {
    std::array<float, 5> out;
    for (int i = 0; i < 5; ++i) out[size_t(i)] = float(m.expr[size_t(i)]);
    return out;
}

Tensor stack_frames(const std::vector<const Tensor*>& frames) {
    const int f = int(frames.size());
    Tensor out({f, 3, kFrameH, kFrameW});
    const int64_t fsz = int64_t(3) * kFrameH * kFrameW;
    for (int i = 0; i < f; ++i)
        std::copy(frames[size_t(i)]->d.begin(), frames[size_t(i)]->d.end(), out.d.begin() + i * fsz);
    return out;
}

}  // namespace

TrainSet::TrainSet(const std::string& root, const std::string& split) {
    auto man = toyface::load_manifest(root);
    for (const auto& ci : man.by_split(split)) clips_.push_back(toyface::load_clip(root, ci.id));
    if (clips_.empty()) throw std::runtime_error("train: split '" + split + "' is empty");
}

Tensor window_mf(const Clip& clip, int lo, int hi) {
    Tensor out({hi - lo, 5});
    for (int i = lo; i < hi; ++i) {
        const auto e = expr_f(clip.motions[size_t(i)]);
        for (int j = 0; j < 5; ++j) out.d[size_t((i - lo) * 5 + j)] = e[size_t(j)];
    }
    return out;
}

Tensor window_cond(const Clip& clip, int lo, int hi) {
    const int f = hi - lo;
    Tensor out({f, motionctl::KeypointSet::kCount, kFrameH, kFrameW});
    const int64_t csz = int64_t(motionctl::KeypointSet::kCount) * kFrameH * kFrameW;
    for (int i = lo; i < hi; ++i) {
        auto hm = toyface::extract_hybrid_motion(clip.motions[size_t(i)], clip.identity);
        auto maps = motionctl::rasterize_keypoints(hm.k_d);
        std::copy(maps.d.begin(), maps.d.end(), out.d.begin() + (i - lo) * csz);
    }
    return out;
}

RolloutSample make_rollout_sample(const Clip& clip, int ref_index, int drv_index) {
    RolloutSample s;
    s.ref_frame = clip.frames[size_t(ref_index)];
    s.ref_mf = expr_f(clip.motions[size_t(ref_index)]);
    s.gt_frame = clip.frames[size_t(drv_index)];
    s.mf = window_mf(clip, drv_index, drv_index + 1);
    s.cond = window_cond(clip, drv_index, drv_index + 1);
    return s;
}

RolloutResult distill_rollout(const std::vector<RolloutSample>& batch, const TrainConfig& cfg,
                              const nets::Denoiser& net, const nets::Discriminator& disc,
                              const nets::Perceptual& percep, const schedule::NoiseSchedule& ns, Rng& rng,
                              const nets::Denoiser* prefix_net) {
    if (batch.empty()) throw std::invalid_argument("distill_rollout: empty batch");
    const int n_levels = int(cfg.levels.size());
    if (n_levels != cfg.n_levels) throw std::invalid_argument("distill_rollout: levels/n mismatch");
    const nets::Denoiser& prefix = prefix_net ? *prefix_net : net;

    const int n = int(rng.uniform_int(1, n_levels));

    RolloutResult res;
    res.report.rollout_steps = n;
    ad::Var mse_acc, perc_acc, adv_acc;

    for (const auto& s : batch) {
        auto refs = std::vector<nets::RefFeatures>{net.encode_reference(s.ref_frame, s.ref_mf)};
        Tensor z = Tensor::randn({1, 3, kFrameH, kFrameW}, rng);
        // iterations i = N down to N-n+1; all but the last run without gradients
        for (int i = n_levels; i > n_levels - n + 1; --i) {
            ad::NoGrad ng;
            const int t_i = cfg.levels[size_t(i - 1)];
            auto zhat = prefix.denoise_window(z, {t_i}, refs, s.mf, s.cond, 1);
            Tensor eps = Tensor::randn({1, 3, kFrameH, kFrameW}, rng);
            z = schedule::renoise(ns, zhat, eps, cfg.levels[size_t(i - 2)]);
        }
        const int t_last = cfg.levels[size_t(n_levels - n)];
        auto pred = net.forward(ad::constant(z), {t_last}, refs, ad::constant(s.mf), ad::constant(s.cond), 1);
        // identity codec: the decoded image is the prediction itself
        auto gt = ad::constant(s.gt_frame.reshaped({1, 3, kFrameH, kFrameW}));
        auto m = ad::mse(pred, gt);
        mse_acc = mse_acc ? ad::add(mse_acc, m) : m;
        if (cfg.lambda_lpips != 0.0) {
            auto p = percep.distance(pred, gt);
            perc_acc = perc_acc ? ad::add(perc_acc, p) : p;
        }
        if (cfg.lambda_adv != 0.0) {
            auto a = ad::neg(ad::mean_all(disc.patch_logits(pred)));
            adv_acc = adv_acc ? ad::add(adv_acc, a) : a;
        }
        res.preds.push_back(pred);
    }

    const float inv_b = 1.0f / float(batch.size());
    auto loss = ad::scale(mse_acc, inv_b);
    res.report.mse = double(mse_acc->val.d[0]) * inv_b;
    if (perc_acc) {
        loss = ad::add(loss, ad::scale(perc_acc, float(cfg.lambda_lpips) * inv_b));
        res.report.perceptual = double(perc_acc->val.d[0]) * inv_b;
    }
    if (adv_acc) {
        loss = ad::add(loss, ad::scale(adv_acc, float(cfg.lambda_adv) * inv_b));
        res.report.adversarial = double(adv_acc->val.d[0]) * inv_b;
    }
    res.report.total = res.report.mse + cfg.lambda_lpips * res.report.perceptual +
                       cfg.lambda_adv * res.report.adversarial;
    res.loss = loss;
    return res;
}

LossReport adversarial_step(const Tensor& real_batch, const Tensor& fake_batch, nets::Discriminator& disc,
                            ad::AdamW& opt) {
    if (!real_batch.same_shape(fake_batch)) throw std::invalid_argument("adversarial_step: shape mismatch");
    disc.params().clear_grads();
    auto lr = disc.patch_logits(ad::constant(real_batch));
    auto lf = disc.patch_logits(ad::constant(fake_batch));
    auto loss = ad::add(ad::mean_all(ad::relu(ad::affine(lr, -1.0f, 1.0f))),
                        ad::mean_all(ad::relu(ad::affine(lf, 1.0f, 1.0f))));
    ad::backward(loss);
    opt.step(disc.params());
    LossReport rep;
    rep.disc_loss = double(loss->val.d[0]);
    return rep;
}

TrainResult train_stage1(const std::string& dataset_root, const TrainConfig& cfg, nets::Denoiser& net) {
    if (cfg.stage != 1) throw std::invalid_argument("train_stage1: config stage must be 1");
    TrainSet ts(dataset_root, "train");
    auto ns = schedule::make_schedule();
    Rng rng(cfg.seed);
    ad::AdamW opt;
    opt.lr = cfg.lr;
    opt.weight_decay = cfg.weight_decay;

    TrainResult out;
    for (int step = 0; step < cfg.steps; ++step) {
        net.params().clear_grads();
        ad::Var loss_acc;
        for (int b = 0; b < cfg.batch; ++b) {
            const auto& clip = ts.clip(size_t(rng.uniform_int(0, int64_t(ts.size()) - 1)));
            const int nf = int(clip.frames.size());
            const int ref_i = int(rng.uniform_int(0, nf - 1));
            const int drv_i = int(rng.uniform_int(0, nf - 1));
            auto s = make_rollout_sample(clip, ref_i, drv_i);
            const int t = int(rng.uniform_int(1, 1000));
            Tensor eps = Tensor::randn({1, 3, kFrameH, kFrameW}, rng);
            Tensor zt = schedule::forward_noise(ns, s.gt_frame.reshaped({1, 3, kFrameH, kFrameW}), eps, t);
            auto refs = std::vector<nets::RefFeatures>{net.encode_reference(s.ref_frame, s.ref_mf)};
            auto pred = net.forward(ad::constant(zt), {t}, refs, ad::constant(s.mf), ad::constant(s.cond), 1);
            auto m = ad::mse(pred, ad::constant(s.gt_frame.reshaped({1, 3, kFrameH, kFrameW})));
            loss_acc = loss_acc ? ad::add(loss_acc, m) : m;
        }
        auto loss = ad::scale(loss_acc, 1.0f / float(cfg.batch));
        ad::backward(loss);
        opt.step(net.params());
        LossReport rep;
        rep.mse = double(loss->val.d[0]);
        rep.total = rep.mse;
        out.curve.push_back(rep);
    }
    return out;
}

TrainResult train_stage2(const std::string& dataset_root, const TrainConfig& cfg, nets::Denoiser& net,
                         nets::Discriminator& disc, const nets::Perceptual& percep) {
    if (cfg.stage != 2) throw std::invalid_argument("train_stage2: config stage must be 2");
    TrainSet ts(dataset_root, "train");
    auto ns = schedule::make_schedule();
    Rng rng(cfg.seed);
    ad::AdamW opt;
    opt.lr = cfg.lr;
    opt.weight_decay = cfg.weight_decay;
    ad::AdamW dopt;
    dopt.lr = cfg.lr;
    dopt.weight_decay = cfg.weight_decay;

    TrainResult out;
    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<RolloutSample> batch;
        for (int b = 0; b < cfg.batch; ++b) {
            const auto& clip = ts.clip(size_t(rng.uniform_int(0, int64_t(ts.size()) - 1)));
            const int nf = int(clip.frames.size());
            batch.push_back(make_rollout_sample(clip, int(rng.uniform_int(0, nf - 1)),
                                                int(rng.uniform_int(0, nf - 1))));
        }
        net.params().clear_grads();
        auto rr = distill_rollout(batch, cfg, net, disc, percep, ns, rng);
        ad::backward(rr.loss);
        opt.step(net.params());

        // alternating 1:1 critic update on the decoded predictions
        std::vector<const Tensor*> realp, fakep;
        std::vector<Tensor> fakes;
        for (size_t b = 0; b < batch.size(); ++b) {
            realp.push_back(&batch[b].gt_frame);
            fakes.push_back(rr.preds[b]->val.reshaped({3, kFrameH, kFrameW}));
        }
        for (auto& f : fakes) fakep.push_back(&f);
        auto drep = adversarial_step(stack_frames(realp), stack_frames(fakep), disc, dopt);
        rr.report.disc_loss = drep.disc_loss;
        out.curve.push_back(rr.report);
    }
    return out;
}

Tensor build_initial_window(const Clip& clip, const TrainConfig& cfg, const schedule::NoiseSchedule& ns, Rng& rng) {
    const int m = cfg.chunk, n = cfg.n_levels, mn = m * n;
    const int64_t fsz = int64_t(3) * kFrameH * kFrameW;
    if (int(clip.frames.size()) < mn) throw std::invalid_argument("build_initial_window: clip too short");
    Tensor window({mn, 3, kFrameH, kFrameW});
    for (int c = 0; c < n - 1; ++c) {
        for (int i = 0; i < m; ++i) {
            Tensor eps = Tensor::randn({3, kFrameH, kFrameW}, rng);
            Tensor zt = schedule::forward_noise(ns, clip.frames[size_t(c * m + i)], eps, cfg.levels[size_t(c)]);
            std::copy(zt.d.begin(), zt.d.end(), window.d.begin() + (c * m + i) * fsz);
        }
    }
    for (int64_t i = int64_t(n - 1) * m * fsz; i < int64_t(mn) * fsz; ++i) window.d[size_t(i)] = float(rng.normal());
    return window;
}

TrainResult train_stage3_sliding(const std::string& dataset_root, const TrainConfig& cfg, nets::Denoiser& net,
                                 nets::Discriminator& disc, const nets::Perceptual& percep) {
    if (cfg.stage != 3) throw std::invalid_argument("train_stage3: config stage must be 3");
    if (cfg.seq_len % cfg.chunk != 0) throw std::invalid_argument("train_stage3: S must be divisible by M");
    TrainSet ts(dataset_root, "train");
    auto ns = schedule::make_schedule();
    Rng rng(cfg.seed);
    ad::AdamW opt;
    opt.lr = cfg.lr;
    opt.weight_decay = cfg.weight_decay;
    ad::AdamW dopt;
    dopt.lr = cfg.lr;
    dopt.weight_decay = cfg.weight_decay;

    const int m = cfg.chunk, n = cfg.n_levels, mn = m * n;
    const int64_t fsz = int64_t(3) * kFrameH * kFrameW;
    auto trainable = [](const std::string& name) { return nets::Denoiser::is_temporal_param(name); };

    TrainResult out;
    for (int seq = 0; seq < cfg.steps; ++seq) {
        const auto& clip = ts.clip(size_t(rng.uniform_int(0, int64_t(ts.size()) - 1)));
        if (int(clip.frames.size()) < cfg.seq_len)
            throw std::runtime_error("train_stage3: clip shorter than seq_len");
        auto refs = std::vector<nets::RefFeatures>{
            net.encode_reference(clip.frames[0], expr_f(clip.motions[0]))};

        Tensor window = build_initial_window(clip, cfg, ns, rng);

        std::vector<int> tsteps(size_t(mn), 0);
        for (int c = 0; c < n; ++c)
            for (int i = 0; i < m; ++i) tsteps[size_t(c * m + i)] = cfg.levels[size_t(c)];

        LossReport last_rep;
        for (int s = 0; s <= cfg.seq_len / m - n; ++s) {
            const int lo = s * m, hi = s * m + mn;
            Tensor mf = window_mf(clip, lo, hi);
            Tensor cond = window_cond(clip, lo, hi);

            Tensor pred;
            if (s % (n - 1) == 0) {
                net.params().clear_grads();
                auto outv = net.forward(ad::constant(window), tsteps, refs, ad::constant(mf), ad::constant(cond), m);
                // supervise the full decoded window against ground truth
                std::vector<const Tensor*> gts;
                for (int i = lo; i < hi; ++i) gts.push_back(&clip.frames[size_t(i)]);
                Tensor gt = stack_frames(gts);
                auto gtc = ad::constant(gt);
                auto mse_v = ad::mse(outv, gtc);
                auto loss = mse_v;
                LossReport rep;
                rep.mse = double(mse_v->val.d[0]);
                if (cfg.lambda_lpips != 0.0) {
                    auto p = percep.distance(outv, gtc);
                    loss = ad::add(loss, ad::scale(p, float(cfg.lambda_lpips)));
                    rep.perceptual = double(p->val.d[0]);
                }
                if (cfg.lambda_adv != 0.0) {
                    auto a = ad::neg(ad::mean_all(disc.patch_logits(outv)));
                    loss = ad::add(loss, ad::scale(a, float(cfg.lambda_adv)));
                    rep.adversarial = double(a->val.d[0]);
                }
                rep.total = rep.mse + cfg.lambda_lpips * rep.perceptual + cfg.lambda_adv * rep.adversarial;
                ad::backward(loss);
                opt.step(net.params(), trainable);
                out.update_events.push_back({seq, s});

                auto drep = adversarial_step(gt, outv->val, disc, dopt);
                rep.disc_loss = drep.disc_loss;
                last_rep = rep;
                pred = outv->val;
            } else {
                pred = net.denoise_window(window, tsteps, refs, mf, cond, m);
            }

            // slide: drop chunk 1, renoise surviving predictions to t_1..t_{N-1}
            // with fresh noise, append a pure-noise chunk at t_N
            Tensor next({mn, 3, kFrameH, kFrameW});
            for (int c = 1; c < n; ++c) {
                Tensor zhat({m, 3, kFrameH, kFrameW});
                std::copy(pred.d.begin() + c * m * fsz, pred.d.begin() + (c + 1) * m * fsz, zhat.d.begin());
                Tensor eps = Tensor::randn({m, 3, kFrameH, kFrameW}, rng);
                Tensor zn = schedule::renoise(ns, zhat, eps, cfg.levels[size_t(c - 1)]);
                std::copy(zn.d.begin(), zn.d.end(), next.d.begin() + (c - 1) * m * fsz);
            }
            for (int64_t i = (n - 1) * m * fsz; i < int64_t(mn) * fsz; ++i) next.d[size_t(i)] = float(rng.normal());
            window = std::move(next);
        }
        out.curve.push_back(last_rep);
    }
    return out;
}

void write_loss_table(const std::string& path, const TrainResult& result) {
    std::ofstream f(path);
    f << "step\ttotal\tmse\tperceptual\tadversarial\tdisc_loss\trollout_steps\n";
    for (size_t i = 0; i < result.curve.size(); ++i) {
        const auto& r = result.curve[i];
        char buf[256];
        std::snprintf(buf, sizeof(buf), "%zu\t%.8g\t%.8g\t%.8g\t%.8g\t%.8g\t%d\n", i, r.total, r.mse, r.perceptual,
                      r.adversarial, r.disc_loss, r.rollout_steps);
        f << buf;
    }
    if (!result.update_events.empty()) {
        f << "# stage3 gradient updates (sequence, window position)\n";
        for (const auto& [seq, s] : result.update_events) f << "# update\t" << seq << "\t" << s << "\n";
    }
}

}  // namespace pliv::train
