#include "pliv/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "pliv/toyface.hpp"

namespace pliv::eval {

namespace {

void check_frame(const Tensor& f, const char* what) {
    if (f.shape != std::vector<int>{3, kFrameH, kFrameW}) throw std::invalid_argument(std::string(what) + ": bad frame shape");
}

std::vector<double> gaussian7() {
    std::vector<double> k(7);
    double s = 0;
    for (int i = 0; i < 7; ++i) {
        const double x = i - 3;
        k[size_t(i)] = std::exp(-x * x / (2.0 * 1.5 * 1.5));
        s += k[size_t(i)];
    }
    for (auto& v : k) v /= s;
    return k;
}

// separable 7x7 Gaussian blur with border renormalization
void blur(const float* src, double* dst, int h, int w) {
    static const std::vector<double> k = gaussian7();
    std::vector<double> tmp(size_t(h) * w, 0.0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0, wsum = 0;
            for (int i = -3; i <= 3; ++i) {
                const int xx = x + i;
                if (xx < 0 || xx >= w) continue;
                acc += k[size_t(i + 3)] * src[y * w + xx];
                wsum += k[size_t(i + 3)];
            }
            tmp[size_t(y) * w + x] = acc / wsum;
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0, wsum = 0;
            for (int i = -3; i <= 3; ++i) {
                const int yy = y + i;
                if (yy < 0 || yy >= h) continue;
                acc += k[size_t(i + 3)] * tmp[size_t(yy) * w + x];
                wsum += k[size_t(i + 3)];
            }
            dst[y * w + x] = acc / wsum;
        }
}

double hue_of(double r, double g, double b) {
    const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
    const double d = mx - mn;
    if (d <= 1e-12) return 0.0;
    double h;
    if (mx == r)
        h = std::fmod((g - b) / d, 6.0);
    else if (mx == g)
        h = (b - r) / d + 2.0;
    else
        h = (r - g) / d + 4.0;
    h /= 6.0;
    return h < 0 ? h + 1.0 : h;
}

}  // namespace

double frame_l1(const Frame& a, const Frame& b) {
    check_frame(a, "frame_l1");
    if (!a.same_shape(b)) throw std::invalid_argument("frame_l1: shape mismatch");
    double s = 0;
    for (int64_t i = 0; i < a.numel(); ++i) s += std::fabs(double(a.d[size_t(i)]) - b.d[size_t(i)]);
    return s / double(a.numel());
}

double frame_ssim(const Frame& a, const Frame& b) {
    check_frame(a, "frame_ssim");
    if (!a.same_shape(b)) throw std::invalid_argument("frame_ssim: shape mismatch");
    constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    const int h = kFrameH, w = kFrameW;
    const int64_t plane = int64_t(h) * w;
    std::vector<double> mu_a(size_t(plane), 0.0), mu_b(size_t(plane), 0.0), m_aa(size_t(plane), 0.0),
        m_bb(size_t(plane), 0.0), m_ab(size_t(plane), 0.0);
    std::vector<float> prod(size_t(plane), 0.0f);
    double total = 0;
    for (int c = 0; c < 3; ++c) {
        const float* pa = a.data() + c * plane;
        const float* pb = b.data() + c * plane;
        blur(pa, mu_a.data(), h, w);
        blur(pb, mu_b.data(), h, w);
        for (int64_t i = 0; i < plane; ++i) prod[size_t(i)] = pa[i] * pa[i];
        blur(prod.data(), m_aa.data(), h, w);
        for (int64_t i = 0; i < plane; ++i) prod[size_t(i)] = pb[i] * pb[i];
        blur(prod.data(), m_bb.data(), h, w);
        for (int64_t i = 0; i < plane; ++i) prod[size_t(i)] = pa[i] * pb[i];
        blur(prod.data(), m_ab.data(), h, w);
        double acc = 0;
        for (int64_t i = 0; i < plane; ++i) {
            const double ma = mu_a[size_t(i)], mb = mu_b[size_t(i)];
            const double va = m_aa[size_t(i)] - ma * ma;
            const double vb = m_bb[size_t(i)] - mb * mb;
            const double cab = m_ab[size_t(i)] - ma * mb;
            acc += ((2 * ma * mb + c1) * (2 * cab + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += acc / double(plane);
    }
    return total / 3.0;
}

std::pair<std::vector<double>, std::vector<double>> frame_metrics(const std::vector<Frame>& generated,
                                                                  const std::vector<Frame>& target) {
    if (generated.size() != target.size() || generated.empty())
        throw std::invalid_argument("frame_metrics: length mismatch");
    std::vector<double> l1s, ssims;
    for (size_t i = 0; i < generated.size(); ++i) {
        l1s.push_back(frame_l1(generated[i], target[i]));
        ssims.push_back(frame_ssim(generated[i], target[i]));
    }
    return {l1s, ssims};
}

double tlp_proxy(const std::vector<Frame>& generated, const std::vector<Frame>& target,
                 const nets::Perceptual& percep) {
    if (generated.size() != target.size() || generated.size() < 2)
        throw std::invalid_argument("tlp_proxy: need >= 2 aligned frames");
    double acc = 0;
    for (size_t t = 0; t + 1 < generated.size(); ++t) {
        const double dg = percep.distance(generated[t], generated[t + 1]);
        const double dt = percep.distance(target[t], target[t + 1]);
        acc += std::fabs(dg - dt);
    }
    return acc / double(generated.size() - 1) * 1e3;
}

namespace {

struct FieldDef {
    double lo, hi;
};
constexpr FieldDef kMotionFields[9] = {
    {-ranges::kRollMax, ranges::kRollMax}, {-ranges::kTransMax, ranges::kTransMax},
    {-ranges::kTransMax, ranges::kTransMax}, {ranges::kScaleMin, ranges::kScaleMax},
    {0, 1}, {0, 1}, {0, 1}, {0, 1}, {0, 1},
};

MotionParams fields_to_motion(const double* f) {
    MotionParams m;
    m.roll = f[0];
    m.trans = {f[1], f[2]};
    m.scale = f[3];
    for (int i = 0; i < 5; ++i) m.expr[size_t(i)] = f[4 + i];
    return m;
}

void motion_to_fields(const MotionParams& m, double* f) {
    f[0] = m.roll;
    f[1] = m.trans[0];
    f[2] = m.trans[1];
    f[3] = m.scale;
    for (int i = 0; i < 5; ++i) f[4 + i] = m.expr[size_t(i)];
}

struct RefitLoss {
    const Frame& target;
    const IdentityParams& identity;
    int renders = 0;
    int budget;

    double operator()(const double* fields) {
        ++renders;
        Frame r = toyface::render(identity, fields_to_motion(fields));
        double s = 0;
        for (int64_t i = 0; i < r.numel(); ++i) {
            const double d = double(r.d[size_t(i)]) - target.d[size_t(i)];
            s += d * d;
        }
        return s;
    }
    bool exhausted() const { return renders >= budget; }
};

// centroid / area / orientation of the head region, used to seed the search
void head_moments(const Frame& f, double& cx, double& cy, double& area, double& theta) {
    const int64_t plane = int64_t(kFrameH) * kFrameW;
    double sx = 0, sy = 0, n = 0;
    std::vector<std::pair<double, double>> pts;
    for (int y = 0; y < toyface::kTorsoTopRow; ++y)
        for (int x = 0; x < kFrameW; ++x) {
            const int64_t i = int64_t(y) * kFrameW + x;
            const double dr = f.d[size_t(i)] - 0.07, dg = f.d[size_t(plane + i)] - 0.08,
                         db = f.d[size_t(2 * plane + i)] - 0.10;
            if (dr * dr + dg * dg + db * db > 0.02) {
                const double nx = (x + 0.5) / kFrameW * 2.0 - 1.0;
                const double ny = (y + 0.5) / kFrameH * 2.0 - 1.0;
                sx += nx;
                sy += ny;
                n += 1;
                pts.push_back({nx, ny});
            }
        }
    if (n < 4) {
        cx = cy = theta = 0;
        area = 0.25;
        return;
    }
    cx = sx / n;
    cy = sy / n;
    area = n * (2.0 / kFrameW) * (2.0 / kFrameH);
    double mxx = 0, myy = 0, mxy = 0;
    for (auto& [px, py] : pts) {
        mxx += (px - cx) * (px - cx);
        myy += (py - cy) * (py - cy);
        mxy += (px - cx) * (py - cy);
    }
    theta = 0.5 * std::atan2(2.0 * mxy, mxx - myy);
}

}  // namespace

namespace {

// exact 1-D minimization of one field: coarse scan over [lo,hi], then golden
// section inside the bracketing interval
double refine_field(RefitLoss& loss, double* x, int fi, double lo, double hi, double& cur, int coarse = 7) {
    const auto& fd = kMotionFields[fi];
    lo = std::max(lo, fd.lo);
    hi = std::min(hi, fd.hi);
    if (hi - lo < 1e-9 || loss.exhausted()) return cur;

    std::vector<double> samples(size_t(coarse), 0.0), vals(size_t(coarse), 0.0);
    int best = 0;
    for (int i = 0; i < coarse && !loss.exhausted(); ++i) {
        samples[size_t(i)] = lo + (hi - lo) * double(i) / double(coarse - 1);
        double cand[9];
        std::copy(x, x + 9, cand);
        cand[fi] = samples[size_t(i)];
        vals[size_t(i)] = loss(cand);
        if (vals[size_t(i)] < vals[size_t(best)]) best = i;
    }
    double a = samples[size_t(std::max(best - 1, 0))];
    double b = samples[size_t(std::min(best + 1, coarse - 1))];
    double best_v = vals[size_t(best)], best_x = samples[size_t(best)];

    constexpr double kInvPhi = 0.6180339887498949;
    double x1 = b - kInvPhi * (b - a), x2 = a + kInvPhi * (b - a);
    auto eval = [&](double v) {
        double cand[9];
        std::copy(x, x + 9, cand);
        cand[fi] = v;
        const double l = loss(cand);
        if (l < best_v) {
            best_v = l;
            best_x = v;
        }
        return l;
    };
    double f1 = eval(x1), f2 = eval(x2);
    for (int it = 0; it < 9 && !loss.exhausted(); ++it) {
        if (f1 <= f2) {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - kInvPhi * (b - a);
            f1 = eval(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + kInvPhi * (b - a);
            f2 = eval(x2);
        }
    }
    if (best_v < cur) {
        x[fi] = best_x;
        cur = best_v;
    }
    return cur;
}

}  // namespace

MotionParams refit_motion(const Frame& frame, const IdentityParams& identity, uint64_t seed, int render_budget) {
    check_frame(frame, "refit_motion");
    RefitLoss loss{frame, identity, 0, render_budget};
    (void)seed;  // the search is fully deterministic; seed kept for interface stability

    double cx, cy, area, theta;
    head_moments(frame, cx, cy, area, theta);
    const double s_est =
        std::clamp(std::sqrt(std::max(area, 1e-4) / (M_PI * 0.36 * 0.36 * identity.face_aspect)),
                   ranges::kScaleMin, ranges::kScaleMax);

    auto make_start = [&](double roll_guess) {
        MotionParams m = neutral_motion();
        m.roll = std::clamp(roll_guess, -ranges::kRollMax, ranges::kRollMax);
        m.scale = s_est;
        m.trans = {std::clamp(cx, -ranges::kTransMax, ranges::kTransMax),
                   std::clamp(cy + 0.15 * s_est, -ranges::kTransMax, ranges::kTransMax)};
        return m;
    };

    double x[9];
    motion_to_fields(make_start(theta), x);
    double cur = loss(x);

    // pose first (roll over its whole range: an ellipse within +-45 degrees
    // has a unique orientation, so a dense global scan settles it), twice,
    // with the expression still neutral; a misfit pose poisons every
    // expression fit
    for (int rep = 0; rep < 2 && !loss.exhausted(); ++rep) {
        refine_field(loss, x, 0, kMotionFields[0].lo, kMotionFields[0].hi, cur, 13);
        refine_field(loss, x, 1, x[1] - 0.15, x[1] + 0.15, cur);
        refine_field(loss, x, 2, x[2] - 0.15, x[2] + 0.15, cur);
        refine_field(loss, x, 3, x[3] - 0.20, x[3] + 0.20, cur);
    }
    // expression fields: global scan, then a full roll re-scan (the fitted
    // expression reshapes the roll landscape), then once more
    for (int rep = 0; rep < 2 && !loss.exhausted(); ++rep) {
        for (int fi = 4; fi < 9; ++fi) refine_field(loss, x, fi, 0.0, 1.0, cur);
        refine_field(loss, x, 0, kMotionFields[0].lo, kMotionFields[0].hi, cur, 13);
        for (int fi = 1; fi < 4; ++fi) {
            const double w = (kMotionFields[fi].hi - kMotionFields[fi].lo) * 0.08;
            refine_field(loss, x, fi, x[fi] - w, x[fi] + w, cur);
        }
    }
    // fine polish
    for (int round = 0; round < 2 && !loss.exhausted(); ++round) {
        for (int fi = 0; fi < 9; ++fi) {
            const double w = (kMotionFields[fi].hi - kMotionFields[fi].lo) * (round == 0 ? 0.03 : 0.01);
            refine_field(loss, x, fi, x[fi] - w, x[fi] + w, cur);
        }
    }
    return fields_to_motion(x);
}

std::pair<double, double> motion_accuracy(const std::vector<Frame>& generated,
                                          const std::vector<MotionParams>& driving, const IdentityParams& identity,
                                          uint64_t seed, int render_budget) {
    if (generated.size() != driving.size() || generated.empty())
        throw std::invalid_argument("motion_accuracy: length mismatch");
    // per-frame results land in fixed slots so the final sum order never
    // depends on thread scheduling
    std::vector<double> aeds(generated.size(), 0.0), apds(generated.size(), 0.0);
#pragma omp parallel for schedule(dynamic)
    for (int64_t i = 0; i < int64_t(generated.size()); ++i) {
        const auto fit = refit_motion(generated[size_t(i)], identity, seed + uint64_t(i), render_budget);
        const auto& drv = driving[size_t(i)];
        double e = 0;
        for (int j = 0; j < 5; ++j) e += std::fabs(fit.expr[size_t(j)] - drv.expr[size_t(j)]);
        aeds[size_t(i)] = e / 5.0;
        double p = 0;
        p += std::fabs(fit.roll - drv.roll) / (2.0 * ranges::kRollMax);
        p += std::fabs(fit.trans[0] - drv.trans[0]) / (2.0 * ranges::kTransMax);
        p += std::fabs(fit.trans[1] - drv.trans[1]) / (2.0 * ranges::kTransMax);
        p += std::fabs(fit.scale - drv.scale) / (ranges::kScaleMax - ranges::kScaleMin);
        apds[size_t(i)] = p / 4.0;
    }
    double aed = 0, apd = 0;
    for (size_t i = 0; i < generated.size(); ++i) {
        aed += aeds[i];
        apd += apds[i];
    }
    return {aed / double(generated.size()), apd / double(generated.size())};
}

std::vector<double> identity_statistic(const Frame& f) {
    check_frame(f, "identity_statistic");
    const int64_t plane = int64_t(kFrameH) * kFrameW;
    std::vector<double> stat(11, 0.0);
    // mean torso-band color
    int tn = 0;
    for (int y = toyface::kTorsoTopRow; y < kFrameH; ++y)
        for (int x = 0; x < kFrameW; ++x) {
            const int64_t i = int64_t(y) * kFrameW + x;
            stat[0] += f.d[size_t(i)];
            stat[1] += f.d[size_t(plane + i)];
            stat[2] += f.d[size_t(2 * plane + i)];
            ++tn;
        }
    for (int j = 0; j < 3; ++j) stat[size_t(j)] /= tn;
    // 8-bin hue histogram over the head region (saturated, non-dark pixels)
    double hn = 0;
    for (int y = 0; y < toyface::kTorsoTopRow; ++y)
        for (int x = 0; x < kFrameW; ++x) {
            const int64_t i = int64_t(y) * kFrameW + x;
            const double r = f.d[size_t(i)], g = f.d[size_t(plane + i)], b = f.d[size_t(2 * plane + i)];
            const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
            if (mx < 0.15 || (mx - mn) / std::max(mx, 1e-9) < 0.08) continue;
            int bin = int(hue_of(r, g, b) * 8.0);
            bin = std::min(bin, 7);
            stat[size_t(3 + bin)] += 1.0;
            hn += 1.0;
        }
    if (hn > 0)
        for (int j = 3; j < 11; ++j) stat[size_t(j)] /= hn;
    return stat;
}

double id_drift(const std::vector<Frame>& generated, const Frame& reference) {
    if (generated.size() < 20) throw std::invalid_argument("id_drift: need at least 20 frames");
    check_frame(reference, "id_drift");
    const size_t k = generated.size() / 10;
    std::vector<double> first(11, 0.0), last(11, 0.0);
    for (size_t i = 0; i < k; ++i) {
        auto s = identity_statistic(generated[i]);
        for (int j = 0; j < 11; ++j) first[size_t(j)] += s[size_t(j)] / double(k);
    }
    for (size_t i = generated.size() - k; i < generated.size(); ++i) {
        auto s = identity_statistic(generated[i]);
        for (int j = 0; j < 11; ++j) last[size_t(j)] += s[size_t(j)] / double(k);
    }
    double d = 0;
    for (int j = 0; j < 11; ++j) d += std::fabs(first[size_t(j)] - last[size_t(j)]);
    return d;
}

BenchReport bench_latency(const stream::RunResult& run, int chunk, int n_levels) {
    if (run.timing.empty()) throw std::invalid_argument("bench_latency: empty timing log");
    BenchReport rep;
    double total_ms = 0;
    std::vector<double> lat;
    for (const auto& t : run.timing) {
        total_ms += t.wall_ms;
        lat.push_back(t.wall_ms);
    }
    rep.fps = double(run.frames.size()) / (total_ms / 1000.0);
    std::sort(lat.begin(), lat.end());
    double mean = 0;
    for (double v : lat) mean += v;
    rep.inter_chunk_latency_ms_mean = mean / double(lat.size());
    rep.inter_chunk_latency_ms_p95 = lat[size_t(std::ceil(0.95 * double(lat.size())) - 1)];
    rep.denoiser_calls_per_frame =
        double(run.denoiser_passes) * double(chunk * n_levels) / double(run.frames.size());
    return rep;
}

}  // namespace pliv::eval
