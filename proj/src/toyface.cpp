#include "pliv/toyface.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "pliv/png_io.hpp"

namespace fs = std::filesystem;

namespace pliv::toyface {

namespace {

struct Rgb {
    double r, g, b;
};

Rgb hsv_to_rgb(double h, double s, double v) {
    h = h - std::floor(h);
    const double hh = h * 6.0;
    const int i = int(hh) % 6;
    const double f = hh - std::floor(hh);
    const double p = v * (1.0 - s);
    const double q = v * (1.0 - s * f);
    const double t = v * (1.0 - s * (1.0 - f));
    switch (i) {
        case 0: return {v, t, p};
        case 1: return {q, v, p};
        case 2: return {p, v, t};
        case 3: return {p, q, v};
        case 4: return {t, p, v};
        default: return {v, p, q};
    }
}

// Canonical face geometry, normalized coords, y down.
constexpr double kHeadCx = 0.0, kHeadCy = -0.15;
constexpr double kHeadAx = 0.36, kHeadAy = 0.36;
constexpr double kEyeDx = 0.15, kEyeCy = -0.25;
constexpr double kEyeAx = 0.055;
constexpr double kMouthCy = 0.01;
constexpr double kBrowDx = 0.15, kBrowCyNeutral = -0.34;
constexpr double kBrowAx = 0.075, kBrowAy = 0.014;

struct Ellipse {
    double cx, cy, ax, ay;  // canonical-frame center and semi-axes
    Rgb color;

    bool contains(double x, double y) const {
        const double u = (x - cx) / ax, v = (y - cy) / ay;
        return u * u + v * v <= 1.0;
    }
};

}  // namespace

motionctl::KeypointSet canonical_keypoints(const IdentityParams& id) {
    validate(id);
    const double a = id.face_aspect;
    motionctl::KeypointSet k;
    const double pts[10][2] = {
        {-kHeadAx * a, kHeadCy},          {kHeadAx * a, kHeadCy},  // head left/right
        {0.0, kHeadCy - kHeadAy},         {0.0, kHeadCy + kHeadAy},  // head top/chin
        {-kEyeDx * a, kEyeCy},            {kEyeDx * a, kEyeCy},
        {-0.105 * a, kMouthCy},           {0.105 * a, kMouthCy},  // mouth corners at neutral width
        {-kBrowDx * a, kBrowCyNeutral},   {kBrowDx * a, kBrowCyNeutral},
    };
    for (int i = 0; i < 10; ++i) {
        k.pts[size_t(i)][0] = pts[i][0];
        k.pts[size_t(i)][1] = pts[i][1];
    }
    return k;
}

Frame render(const IdentityParams& id, const MotionParams& m) {
    validate(id);
    validate(m);

    const double a = id.face_aspect;
    const Rgb bg{0.07, 0.08, 0.10};
    const Rgb face = hsv_to_rgb(id.face_hue, 0.42, id.skin_brightness);
    const Rgb sclera{0.95, 0.95, 0.93};
    const Rgb iris = hsv_to_rgb(id.eye_hue, 0.80, 0.60);
    const Rgb mouth{0.45, 0.16, 0.18};
    const Rgb brow{0.13, 0.10, 0.08};
    const Rgb torso = hsv_to_rgb(id.torso_hue, 0.55, 0.72);

    const double eyeAyL = 0.008 + 0.042 * m.expr[0];
    const double eyeAyR = 0.008 + 0.042 * m.expr[1];
    const double mouthAx = (0.06 + 0.09 * m.expr[3]) * a;
    const double mouthAy = 0.004 + 0.075 * m.expr[2];
    const double browCy = kBrowCyNeutral - 0.16 * (m.expr[4] - 0.5);

    // painter order: drawn back to front inside the head
    const Ellipse shapes[] = {
        {kHeadCx, kHeadCy, kHeadAx * a, kHeadAy, face},
        {-kBrowDx * a, browCy, kBrowAx * a, kBrowAy, brow},
        {kBrowDx * a, browCy, kBrowAx * a, kBrowAy, brow},
        {-kEyeDx * a, kEyeCy, kEyeAx * a, eyeAyL, sclera},
        {kEyeDx * a, kEyeCy, kEyeAx * a, eyeAyR, sclera},
        {-kEyeDx * a, kEyeCy, kEyeAx * a * 0.5, eyeAyL * 0.62, iris},
        {kEyeDx * a, kEyeCy, kEyeAx * a * 0.5, eyeAyR * 0.62, iris},
        {0.0, kMouthCy, mouthAx, mouthAy, mouth},
    };

    const double cosr = std::cos(m.roll), sinr = std::sin(m.roll);
    const double inv_s = 1.0 / m.scale;

    Frame out = make_frame();
    constexpr int kSub = 4;
    const double torso_y = (double(kTorsoTopRow) / kFrameH) * 2.0 - 1.0;

    for (int py = 0; py < kFrameH; ++py) {
        for (int px = 0; px < kFrameW; ++px) {
            // subsample positions in normalized coords
            double cov[9] = {0};  // torso + shapes (padded)
            for (int sy = 0; sy < kSub; ++sy) {
                for (int sx = 0; sx < kSub; ++sx) {
                    const double x = ((px + (sx + 0.5) / kSub) / kFrameW) * 2.0 - 1.0;
                    const double y = ((py + (sy + 0.5) / kSub) / kFrameH) * 2.0 - 1.0;
                    if (y >= torso_y) cov[0] += 1.0;
                    // back to the canonical frame: q' = R^T (q - t) / s
                    const double dx = x - m.trans[0], dy = y - m.trans[1];
                    const double qx = (cosr * dx + sinr * dy) * inv_s;
                    const double qy = (-sinr * dx + cosr * dy) * inv_s;
                    for (int si = 0; si < 8; ++si)
                        if (shapes[si].contains(qx, qy)) cov[si + 1] += 1.0;
                }
            }
            Rgb c = bg;
            auto blend = [&c](double alpha, const Rgb& col) {
                c.r += alpha * (col.r - c.r);
                c.g += alpha * (col.g - c.g);
                c.b += alpha * (col.b - c.b);
            };
            const double inv_n = 1.0 / (kSub * kSub);
            blend(cov[0] * inv_n, torso);
            for (int si = 0; si < 8; ++si) blend(cov[si + 1] * inv_n, shapes[si].color);
            const int64_t idx = int64_t(py) * kFrameW + px;
            out.d[size_t(0 * kFrameH * kFrameW + idx)] = float(std::lround(c.r * 255.0) / 255.0);
            out.d[size_t(1 * kFrameH * kFrameW + idx)] = float(std::lround(c.g * 255.0) / 255.0);
            out.d[size_t(2 * kFrameH * kFrameW + idx)] = float(std::lround(c.b * 255.0) / 255.0);
        }
    }
    return out;
}

HybridMotion extract_hybrid_motion(const MotionParams& motion, const IdentityParams& source_identity) {
    validate(motion);
    HybridMotion h;
    h.m_f = motion.expr;
    h.k_d = motionctl::transform_keypoints(canonical_keypoints(source_identity), motion.roll, motion.trans,
                                           motion.scale);
    return h;
}

namespace {

struct FieldSpec {
    double lo, hi, neutral;
};

constexpr FieldSpec kFields[9] = {
    {-ranges::kRollMax, ranges::kRollMax, 0.0},   // roll
    {-ranges::kTransMax, ranges::kTransMax, 0.0},  // tx
    {-ranges::kTransMax, ranges::kTransMax, 0.0},  // ty
    {ranges::kScaleMin, ranges::kScaleMax, 1.0},   // scale
    {0.0, 1.0, 1.0},                               // eye_l
    {0.0, 1.0, 1.0},                               // eye_r
    {0.0, 1.0, 0.0},                               // mouth open
    {0.0, 1.0, 0.5},                               // mouth width
    {0.0, 1.0, 0.5},                               // brow
};

MotionParams fields_to_motion(const double* f) {
    MotionParams m;
    m.roll = f[0];
    m.trans = {f[1], f[2]};
    m.scale = f[3];
    for (int i = 0; i < 5; ++i) m.expr[size_t(i)] = f[4 + i];
    return m;
}

}  // namespace

std::vector<MotionParams> sample_trajectory(uint64_t seed, int t) {
    if (t < 2) throw std::invalid_argument("sample_trajectory: T must be >= 2");
    Rng rng(seed);
    double x[9];
    for (int i = 0; i < 9; ++i) {
        const auto& fs = kFields[i];
        const double range = fs.hi - fs.lo;
        x[i] = std::clamp(fs.neutral + 0.3 * range * (rng.uniform() - 0.5), fs.lo, fs.hi);
    }
    std::vector<MotionParams> out;
    out.reserve(size_t(t));
    out.push_back(fields_to_motion(x));
    for (int k = 1; k < t; ++k) {
        for (int i = 0; i < 9; ++i) {
            const auto& fs = kFields[i];
            const double range = fs.hi - fs.lo;
            // kept a hair under the contract's 5% so rounding in x+delta
            // cannot push an observed step over the bound
            const double cap = 0.05 * range * (1.0 - 1e-9);
            double delta = 0.08 * (fs.neutral - x[i]) + 0.030 * range * rng.normal();
            delta = std::clamp(delta, -cap, cap);
            x[i] = std::clamp(x[i] + delta, fs.lo, fs.hi);
        }
        out.push_back(fields_to_motion(x));
    }
    return out;
}

IdentityParams sample_identity(Rng& rng) {
    IdentityParams id;
    id.face_hue = rng.uniform();
    id.face_aspect = rng.uniform(ranges::kAspectMin, ranges::kAspectMax);
    id.eye_hue = rng.uniform();
    id.skin_brightness = rng.uniform(ranges::kBrightMin, ranges::kBrightMax);
    id.torso_hue = rng.uniform();
    return id;
}

// ---- dataset ----

std::vector<ClipInfo> Manifest::by_split(const std::string& split) const {
    std::vector<ClipInfo> out;
    for (const auto& c : clips)
        if (c.split == split) out.push_back(c);
    return out;
}

std::string motion_row(const MotionParams& m) {
    char buf[512];
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", m.roll, m.trans[0],
                  m.trans[1], m.scale, m.expr[0], m.expr[1], m.expr[2], m.expr[3], m.expr[4]);
    return buf;
}

MotionParams parse_motion_row(const std::string& line) {
    double f[9];
    std::stringstream ss(line);
    std::string tok;
    for (int i = 0; i < 9; ++i) {
        if (!std::getline(ss, tok, ',')) throw std::runtime_error("motion row: expected 9 fields");
        f[i] = std::stod(tok);
    }
    return fields_to_motion(f);
}

static std::string identity_header(const IdentityParams& id) {
    char buf[512];
    std::snprintf(buf, sizeof(buf),
                  "# identity face_hue=%.17g face_aspect=%.17g eye_hue=%.17g skin_brightness=%.17g torso_hue=%.17g",
                  id.face_hue, id.face_aspect, id.eye_hue, id.skin_brightness, id.torso_hue);
    return buf;
}

static IdentityParams parse_identity_header(const std::string& line) {
    IdentityParams id;
    if (std::sscanf(line.c_str(),
                    "# identity face_hue=%lf face_aspect=%lf eye_hue=%lf skin_brightness=%lf torso_hue=%lf",
                    &id.face_hue, &id.face_aspect, &id.eye_hue, &id.skin_brightness, &id.torso_hue) != 5)
        throw std::runtime_error("params.csv: bad identity header");
    return id;
}

static uint64_t clip_seed(uint64_t dataset_seed, int index) {
    uint64_t x = dataset_seed ^ (0x9e3779b97f4a7c15ull * uint64_t(index + 1));
    x ^= x >> 33;
    x *= 0xff51afd7ed558ccdull;
    x ^= x >> 33;
    return x;
}

void build_dataset(const DatasetSpec& spec) {
    if (spec.clips < 1 || spec.frames < 2) throw std::invalid_argument("dataset spec: clips >= 1, frames >= 2");
    fs::path root(spec.root);
    if (fs::exists(root) && !fs::is_empty(root)) {
        if (!spec.overwrite) throw std::runtime_error("dataset root exists and is not empty: " + spec.root);
        fs::remove_all(root);
    }
    fs::create_directories(root);

    const int n_train = int(std::lround(spec.train_frac * spec.clips));
    const int n_val = int(std::lround(spec.val_frac * spec.clips));

    nlohmann::json man;
    man["seed"] = spec.seed;
    man["frames"] = spec.frames;
    man["fps"] = 25;
    man["clips"] = nlohmann::json::array();

    for (int ci = 0; ci < spec.clips; ++ci) {
        char idbuf[32];
        std::snprintf(idbuf, sizeof(idbuf), "clip_%05d", ci);
        const std::string clip_id = idbuf;
        const uint64_t cseed = clip_seed(spec.seed, ci);

        Rng id_rng(cseed);
        const IdentityParams identity = sample_identity(id_rng);
        const auto motions = sample_trajectory(cseed ^ 0xa5a5a5a5a5a5a5a5ull, spec.frames);

        fs::path cdir = root / clip_id;
        fs::create_directories(cdir);

        std::ofstream csv(cdir / "params.csv");
        csv << identity_header(identity) << "\n";
        csv << "roll,tx,ty,scale,expr0,expr1,expr2,expr3,expr4\n";
        for (int fi = 0; fi < spec.frames; ++fi) {
            csv << motion_row(motions[size_t(fi)]) << "\n";
            char fbuf[32];
            std::snprintf(fbuf, sizeof(fbuf), "frame_%05d.png", fi);
            io::write_frame_png((cdir / fbuf).string(), render(identity, motions[size_t(fi)]));
        }

        const std::string split = ci < n_train ? "train" : (ci < n_train + n_val ? "val" : "test");
        man["clips"].push_back({{"id", clip_id}, {"split", split}, {"frames", spec.frames}, {"seed", cseed}});
    }

    std::ofstream mf(root / "manifest.json");
    mf << man.dump(2) << "\n";
}

Manifest load_manifest(const std::string& root) {
    std::ifstream mf(fs::path(root) / "manifest.json");
    if (!mf) throw std::runtime_error("dataset: no manifest at " + root);
    nlohmann::json man = nlohmann::json::parse(mf);
    Manifest out;
    out.seed = man.at("seed").get<uint64_t>();
    out.frames = man.at("frames").get<int>();
    out.fps = man.at("fps").get<int>();
    for (const auto& c : man.at("clips")) {
        ClipInfo ci;
        ci.id = c.at("id").get<std::string>();
        ci.split = c.at("split").get<std::string>();
        ci.frames = c.at("frames").get<int>();
        ci.seed = c.at("seed").get<uint64_t>();
        out.clips.push_back(ci);
    }
    return out;
}

Clip load_clip_params_only(const std::string& root, const std::string& clip_id) {
    fs::path cdir = fs::path(root) / clip_id;
    std::ifstream csv(cdir / "params.csv");
    if (!csv) throw std::runtime_error("dataset: no params.csv for " + clip_id);
    Clip clip;
    std::string line;
    std::getline(csv, line);
    clip.identity = parse_identity_header(line);
    std::getline(csv, line);  // column header
    while (std::getline(csv, line)) {
        if (line.empty()) continue;
        clip.motions.push_back(parse_motion_row(line));
    }
    return clip;
}

Clip load_clip(const std::string& root, const std::string& clip_id) {
    Clip clip = load_clip_params_only(root, clip_id);
    fs::path cdir = fs::path(root) / clip_id;
    clip.frames.reserve(clip.motions.size());
    for (size_t fi = 0; fi < clip.motions.size(); ++fi) {
        char fbuf[32];
        std::snprintf(fbuf, sizeof(fbuf), "frame_%05zu.png", fi);
        clip.frames.push_back(io::read_frame_png((cdir / fbuf).string()));
    }
    return clip;
}

}  // namespace pliv::toyface
