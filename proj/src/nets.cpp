#include "pliv/nets.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace pliv::nets {

namespace {

constexpr int kGroups = 4;

Tensor conv_init(int co, int ci, int k, Rng& rng) {
    const float std = std::sqrt(2.0f / float(ci * k * k));
    return Tensor::randn({co, ci, k, k}, rng, std);
}

Tensor lin_init(int co, int ci, Rng& rng, float gain = 1.0f) {
    const float std = gain / std::sqrt(float(ci));
    return Tensor::randn({co, ci}, rng, std);
}

// [C,H,W] -> [H*W, C] token matrix for constant reference features
Tensor chw_to_tokens(const Tensor& x) {
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor out({h * w, c});
    for (int ci = 0; ci < c; ++ci)
        for (int i = 0; i < h * w; ++i) out.d[size_t(i) * c + ci] = x.d[size_t(ci) * h * w + i];
    return out;
}

Tensor sinusoidal_embedding(const std::vector<int>& timesteps, int dim) {
    const int half = dim / 2;
    Tensor out({int(timesteps.size()), dim});
    for (size_t f = 0; f < timesteps.size(); ++f) {
        const double t = double(timesteps[f]);
        for (int i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * double(i) / double(half - 1));
            out.d[f * size_t(dim) + size_t(2 * i)] = float(std::sin(t * freq));
            out.d[f * size_t(dim) + size_t(2 * i + 1)] = float(std::cos(t * freq));
        }
    }
    return out;
}

}  // namespace

Denoiser::Res Denoiser::make_res(const std::string& name, int cin, int cout, Rng& rng) {
    Res r;
    r.cin = cin;
    r.cout = cout;
    r.gn1_g = params_.add(name + ".gn1.g", Tensor::full({cin}, 1.0f));
    r.gn1_b = params_.add(name + ".gn1.b", Tensor::zeros({cin}));
    r.w1 = params_.add(name + ".conv1.w", conv_init(cout, cin, 3, rng));
    r.b1 = params_.add(name + ".conv1.b", Tensor::zeros({cout}));
    r.tw = params_.add(name + ".temb.w", lin_init(cout, temb_dim_, rng));
    r.tb = params_.add(name + ".temb.b", Tensor::zeros({cout}));
    r.gn2_g = params_.add(name + ".gn2.g", Tensor::full({cout}, 1.0f));
    r.gn2_b = params_.add(name + ".gn2.b", Tensor::zeros({cout}));
    r.w2 = params_.add(name + ".conv2.w", conv_init(cout, cout, 3, rng));
    r.b2 = params_.add(name + ".conv2.b", Tensor::zeros({cout}));
    if (cin != cout) {
        r.has_skip = true;
        r.skip_w = params_.add(name + ".skip.w", conv_init(cout, cin, 1, rng));
        r.skip_b = params_.add(name + ".skip.b", Tensor::zeros({cout}));
    }
    return r;
}

Denoiser::Attn Denoiser::make_attn(const std::string& name, int dim, Rng& rng, float out_std) {
    Attn a;
    a.dim = dim;
    a.gn_g = params_.add(name + ".gn.g", Tensor::full({dim}, 1.0f));
    a.gn_b = params_.add(name + ".gn.b", Tensor::zeros({dim}));
    a.wq = params_.add(name + ".wq", lin_init(dim, dim, rng));
    a.bq = params_.add(name + ".bq", Tensor::zeros({dim}));
    a.wk = params_.add(name + ".wk", lin_init(dim, dim, rng));
    a.bk = params_.add(name + ".bk", Tensor::zeros({dim}));
    a.wv = params_.add(name + ".wv", lin_init(dim, dim, rng));
    a.bv = params_.add(name + ".bv", Tensor::zeros({dim}));
    a.wo = params_.add(name + ".wo", lin_init(dim, dim, rng, out_std));
    a.bo = params_.add(name + ".bo", Tensor::zeros({dim}));
    return a;
}

Denoiser::Denoiser(const DenoiserConfig& cfg, uint64_t init_seed) : cfg_(cfg) {
    if (cfg.base_channels % kGroups != 0) throw std::invalid_argument("denoiser: base_channels must be mult of 4");
    if (cfg.depth != 3) throw std::invalid_argument("denoiser: only depth 3 is built");
    c0_ = cfg.base_channels;
    c1_ = 2 * cfg.base_channels;
    c2_ = 3 * cfg.base_channels;
    temb_dim_ = 4 * cfg.base_channels;
    Rng rng(init_seed);

    conv_in_w_ = params_.add("conv_in.w", conv_init(c0_, 3, 3, rng));
    conv_in_b_ = params_.add("conv_in.b", Tensor::zeros({c0_}));
    cond_w_ = params_.add("cond_proj.w", conv_init(c0_, cfg.keypoint_channels, 3, rng));
    cond_b_ = params_.add("cond_proj.b", Tensor::zeros({c0_}));

    temb_w1_ = params_.add("temb.w1", lin_init(temb_dim_, 64, rng));
    temb_b1_ = params_.add("temb.b1", Tensor::zeros({temb_dim_}));
    temb_w2_ = params_.add("temb.w2", lin_init(temb_dim_, temb_dim_, rng));
    temb_b2_ = params_.add("temb.b2", Tensor::zeros({temb_dim_}));

    down0_ = make_res("down0", c0_, c0_, rng);
    ds0_w_ = params_.add("down0.ds.w", conv_init(c1_, c0_, 3, rng));
    ds0_b_ = params_.add("down0.ds.b", Tensor::zeros({c1_}));
    down1_ = make_res("down1", c1_, c1_, rng);
    ds1_w_ = params_.add("down1.ds.w", conv_init(c2_, c1_, 3, rng));
    ds1_b_ = params_.add("down1.ds.b", Tensor::zeros({c2_}));

    mid1_ = make_res("mid1", c2_, c2_, rng);
    ref_attn_ = make_attn("ref_attn", c2_, rng, 0.5f);
    slot_emb_ = params_.add("ref_attn.slot_emb", Tensor::zeros({cfg.ref_slots, c2_}));
    mf_attn_ = make_attn("mf_attn", c2_, rng, 0.5f);
    mf_tok_w_ = params_.add("mf_attn.tok.w", lin_init(4 * c2_, cfg.mf_dim, rng));
    mf_tok_b_ = params_.add("mf_attn.tok.b", Tensor::zeros({4 * c2_}));
    temp_mid_ = make_attn("temporal_mid", c2_, rng, 0.5f);
    mid2_ = make_res("mid2", c2_, c2_, rng);

    us1_w_ = params_.add("up1.us.w", conv_init(c1_, c2_, 3, rng));
    us1_b_ = params_.add("up1.us.b", Tensor::zeros({c1_}));
    up1_ = make_res("up1", 2 * c1_, c1_, rng);
    temp_up1_ = make_attn("temporal_up1", c1_, rng, 0.5f);

    us2_w_ = params_.add("up2.us.w", conv_init(c0_, c1_, 3, rng));
    us2_b_ = params_.add("up2.us.b", Tensor::zeros({c0_}));
    up2_ = make_res("up2", 2 * c0_, c0_, rng);
    temp_up2_ = make_attn("temporal_up2", c0_, rng, 0.5f);

    out_gn_g_ = params_.add("out.gn.g", Tensor::full({c0_}, 1.0f));
    out_gn_b_ = params_.add("out.gn.b", Tensor::zeros({c0_}));
    out_w_ = params_.add("out.w", Tensor::zeros({3, c0_, 3, 3}));  // zero head: fresh net is the identity
    out_b_ = params_.add("out.b", Tensor::zeros({3}));

    if (param_count() >= 2000000) throw std::logic_error("denoiser: parameter budget exceeded");
}

ad::Var Denoiser::timestep_embedding(const std::vector<int>& timesteps) const {
    auto emb = ad::constant(sinusoidal_embedding(timesteps, 64));
    auto h = ad::silu(ad::linear(emb, temb_w1_, temb_b1_));
    return ad::linear(h, temb_w2_, temb_b2_);
}

ad::Var Denoiser::run_res(const Res& r, const ad::Var& x, const ad::Var& temb) const {
    auto h = ad::conv2d(ad::silu(ad::group_norm(x, r.gn1_g, r.gn1_b, kGroups)), r.w1, r.b1, 1, 1);
    h = ad::add_channel_vec(h, ad::linear(ad::silu(temb), r.tw, r.tb));
    h = ad::conv2d(ad::silu(ad::group_norm(h, r.gn2_g, r.gn2_b, kGroups)), r.w2, r.b2, 1, 1);
    auto skip = r.has_skip ? ad::conv2d(x, r.skip_w, r.skip_b, 1, 0) : x;
    return ad::add(h, skip);
}

ad::Var Denoiser::run_ref_attn(const ad::Var& x, const std::vector<RefFeatures>& refs) const {
    const int f = x->val.dim(0), h = x->val.dim(2), w = x->val.dim(3);
    const int t = h * w;
    const auto& a = ref_attn_;
    auto xn = ad::group_norm(x, a.gn_g, a.gn_b, kGroups);
    auto flat = ad::reshape(ad::permute_fchw_ftc(xn), {f * t, a.dim});
    auto q = ad::reshape(ad::linear(flat, a.wq, a.bq), {f, t, a.dim});
    auto k_self = ad::reshape(ad::linear(flat, a.wk, a.bk), {f, t, a.dim});
    auto v_self = ad::reshape(ad::linear(flat, a.wv, a.bv), {f, t, a.dim});

    std::vector<ad::Var> parts;
    for (size_t i = 0; i < refs.size(); ++i) {
        auto rt = ad::constant(chw_to_tokens(refs[i].scales[2]));
        parts.push_back(ad::add_row_vec(rt, ad::select_row(slot_emb_, int(i))));
    }
    auto ref_rt = ad::concat_rows(parts);
    auto k_ref = ad::linear(ref_rt, a.wk, a.bk);
    auto v_ref = ad::linear(ref_rt, a.wv, a.bv);
    auto kk = ad::concat_tokens_bcast(k_self, k_ref);
    auto vv = ad::concat_tokens_bcast(v_self, v_ref);

    auto scores = ad::scale(ad::bmm_nt(q, kk), 1.0f / std::sqrt(float(a.dim)));
    auto o = ad::bmm(ad::softmax_rows(scores), vv);
    o = ad::reshape(ad::linear(ad::reshape(o, {f * t, a.dim}), a.wo, a.bo), {f, t, a.dim});
    return ad::add(x, ad::permute_ftc_fchw(o, h, w));
}

ad::Var Denoiser::run_mf_attn(const ad::Var& x, const ad::Var& m_f) const {
    const int f = x->val.dim(0), h = x->val.dim(2), w = x->val.dim(3);
    const int t = h * w;
    const auto& a = mf_attn_;
    auto xn = ad::group_norm(x, a.gn_g, a.gn_b, kGroups);
    auto flat = ad::reshape(ad::permute_fchw_ftc(xn), {f * t, a.dim});
    auto q = ad::reshape(ad::linear(flat, a.wq, a.bq), {f, t, a.dim});

    auto toks = ad::reshape(ad::linear(m_f, mf_tok_w_, mf_tok_b_), {f * 4, a.dim});
    auto k = ad::reshape(ad::linear(toks, a.wk, a.bk), {f, 4, a.dim});
    auto v = ad::reshape(ad::linear(toks, a.wv, a.bv), {f, 4, a.dim});

    auto scores = ad::scale(ad::bmm_nt(q, k), 1.0f / std::sqrt(float(a.dim)));
    auto o = ad::bmm(ad::softmax_rows(scores), v);
    o = ad::reshape(ad::linear(ad::reshape(o, {f * t, a.dim}), a.wo, a.bo), {f, t, a.dim});
    return ad::add(x, ad::permute_ftc_fchw(o, h, w));
}

ad::Var Denoiser::run_temporal_attn(const Attn& a, const ad::Var& x, int chunk_size) const {
    if (!cfg_.temporal_attention) return x;
    const int f = x->val.dim(0), h = x->val.dim(2), w = x->val.dim(3);
    const int p = h * w;
    auto xn = ad::group_norm(x, a.gn_g, a.gn_b, kGroups);
    auto pfc = ad::permute_fchw_pfc(xn);  // [P,F,C]
    auto flat = ad::reshape(pfc, {p * f, a.dim});
    auto q = ad::reshape(ad::linear(flat, a.wq, a.bq), {p, f, a.dim});
    auto k = ad::reshape(ad::linear(flat, a.wk, a.bk), {p, f, a.dim});
    auto v = ad::reshape(ad::linear(flat, a.wv, a.bv), {p, f, a.dim});
    auto scores = ad::scale(ad::bmm_nt(q, k), 1.0f / std::sqrt(float(a.dim)));

    ad::Var attn;
    if (cfg_.temporal_mode == TemporalMode::kChunkCausal) {
        Tensor mask({f, f});
        const float ninf = -std::numeric_limits<float>::infinity();
        for (int i = 0; i < f; ++i)
            for (int j = 0; j < f; ++j) mask.d[size_t(i) * f + j] = (j / chunk_size) > (i / chunk_size) ? ninf : 0.0f;
        attn = ad::softmax_rows(scores, &mask);
    } else {
        attn = ad::softmax_rows(scores);
    }
    auto o = ad::bmm(attn, v);
    o = ad::reshape(ad::linear(ad::reshape(o, {p * f, a.dim}), a.wo, a.bo), {p, f, a.dim});
    return ad::add(x, ad::permute_pfc_fchw(o, h, w));
}

ad::Var Denoiser::forward(const ad::Var& window, const std::vector<int>& timesteps,
                          const std::vector<RefFeatures>& refs, const ad::Var& m_f, const ad::Var& cond,
                          int chunk_size) const {
    const int f = window->val.dim(0);
    if (window->val.ndim() != 4 || window->val.dim(1) != 3) throw std::invalid_argument("denoise: window [F,3,H,W]");
    if (int(timesteps.size()) != f) throw std::invalid_argument("denoise: one timestep per frame");
    if (f > cfg_.max_window_frames) throw std::invalid_argument("denoise: window longer than configured maximum");
    if (chunk_size < 1 || f % chunk_size != 0) throw std::invalid_argument("denoise: frames not divisible by chunk");
    for (int c = 0; c < f; c += chunk_size)
        for (int i = 1; i < chunk_size; ++i)
            if (timesteps[size_t(c + i)] != timesteps[size_t(c)])
                throw std::invalid_argument("denoise: timesteps must be constant within a chunk");
    for (int i = 0; i < f; ++i)
        if (timesteps[size_t(i)] < 0 || timesteps[size_t(i)] > 1000)
            throw std::invalid_argument("denoise: timestep out of range");
    if (refs.empty()) throw std::invalid_argument("denoise: at least the source reference is required");
    if (int(refs.size()) > cfg_.ref_slots) throw std::invalid_argument("denoise: more refs than bank slots");
    for (const auto& r : refs) {
        if (r.scales.size() != 3 || r.scales[2].shape != std::vector<int>{c2_, 16, 16})
            throw std::invalid_argument("denoise: reference feature scales do not match encoder");
    }
    if (m_f->val.shape != std::vector<int>{f, cfg_.mf_dim}) throw std::invalid_argument("denoise: m_f [F,mf_dim]");
    if (cond->val.shape != std::vector<int>{f, cfg_.keypoint_channels, kFrameH, kFrameW})
        throw std::invalid_argument("denoise: cond [F,K,H,W]");

    auto temb = timestep_embedding(timesteps);
    auto h = ad::add(ad::conv2d(window, conv_in_w_, conv_in_b_, 1, 1), ad::conv2d(cond, cond_w_, cond_b_, 1, 1));
    auto d0 = run_res(down0_, h, temb);
    h = ad::conv2d(d0, ds0_w_, ds0_b_, 2, 1);
    auto d1 = run_res(down1_, h, temb);
    h = ad::conv2d(d1, ds1_w_, ds1_b_, 2, 1);

    h = run_res(mid1_, h, temb);
    h = run_ref_attn(h, refs);
    h = run_mf_attn(h, m_f);
    h = run_temporal_attn(temp_mid_, h, chunk_size);
    h = run_res(mid2_, h, temb);

    h = ad::conv2d(ad::upsample2(h), us1_w_, us1_b_, 1, 1);
    h = run_res(up1_, ad::concat_ch(h, d1), temb);
    h = run_temporal_attn(temp_up1_, h, chunk_size);

    h = ad::conv2d(ad::upsample2(h), us2_w_, us2_b_, 1, 1);
    h = run_res(up2_, ad::concat_ch(h, d0), temb);
    h = run_temporal_attn(temp_up2_, h, chunk_size);

    auto res = ad::conv2d(ad::silu(ad::group_norm(h, out_gn_g_, out_gn_b_, kGroups)), out_w_, out_b_, 1, 1);
    return ad::add(window, res);
}

Tensor Denoiser::denoise_window(const Tensor& window, const std::vector<int>& timesteps,
                                const std::vector<RefFeatures>& refs, const Tensor& m_f, const Tensor& cond,
                                int chunk_size) const {
    ad::NoGrad ng;
    auto out = forward(ad::constant(window), timesteps, refs, ad::constant(m_f), ad::constant(cond), chunk_size);
    return out->val;
}

RefFeatures Denoiser::encode_reference(const Frame& frame, const std::array<float, 5>& m_f_tag) const {
    if (frame.shape != std::vector<int>{3, kFrameH, kFrameW})
        throw std::invalid_argument("encode_reference: frame [3,H,W]");
    ad::NoGrad ng;
    auto x = ad::constant(frame.reshaped({1, 3, kFrameH, kFrameW}));
    auto cond = ad::constant(Tensor::zeros({1, cfg_.keypoint_channels, kFrameH, kFrameW}));
    auto temb = timestep_embedding({0});
    auto h = ad::add(ad::conv2d(x, conv_in_w_, conv_in_b_, 1, 1), ad::conv2d(cond, cond_w_, cond_b_, 1, 1));
    auto d0 = run_res(down0_, h, temb);
    h = ad::conv2d(d0, ds0_w_, ds0_b_, 2, 1);
    auto d1 = run_res(down1_, h, temb);
    h = ad::conv2d(d1, ds1_w_, ds1_b_, 2, 1);
    auto m = run_res(mid1_, h, temb);
    RefFeatures out;
    out.scales = {d0->val.reshaped({c0_, kFrameH, kFrameW}), d1->val.reshaped({c1_, kFrameH / 2, kFrameW / 2}),
                  m->val.reshaped({c2_, kFrameH / 4, kFrameW / 4})};
    out.m_f = m_f_tag;
    return out;
}

// ---- discriminator ----

Discriminator::Discriminator(const DiscriminatorConfig& cfg, uint64_t init_seed) : cfg_(cfg) {
    Rng rng(init_seed);
    const int c = cfg.base_channels;
    const int chans[5] = {3, c, 2 * c, 4 * c, 4 * c};
    for (int i = 0; i < 4; ++i) {
        ws_.push_back(params_.add("conv" + std::to_string(i) + ".w", conv_init(chans[i + 1], chans[i], 3, rng)));
        bs_.push_back(params_.add("conv" + std::to_string(i) + ".b", Tensor::zeros({chans[i + 1]})));
    }
    ws_.push_back(params_.add("head.w", conv_init(1, 4 * c, 1, rng)));
    bs_.push_back(params_.add("head.b", Tensor::zeros({1})));
    if (params_.total_count() >= 500000) throw std::logic_error("discriminator: parameter budget exceeded");
}

ad::Var Discriminator::patch_logits(const ad::Var& frames) const {
    // smooth activation keeps the critic C-infinity, so input gradients match
    // finite differences tightly
    auto h = frames;
    for (int i = 0; i < 4; ++i) h = ad::silu(ad::conv2d(h, ws_[size_t(i)], bs_[size_t(i)], 2, 1));
    return ad::conv2d(h, ws_[4], bs_[4], 1, 0);
}

float Discriminator::logit(const Frame& frame) const {
    ad::NoGrad ng;
    auto v = patch_logits(ad::constant(frame.reshaped({1, 3, kFrameH, kFrameW})));
    double s = 0;
    for (int64_t i = 0; i < v->val.numel(); ++i) s += v->val.d[i];
    return float(s / double(v->val.numel()));
}

// ---- perceptual ----

Perceptual::Perceptual(uint64_t seed) : seed_(seed) {
    Rng rng(seed);
    const int chans[4] = {3, 16, 32, 64};
    for (int i = 0; i < 3; ++i) {
        ws_.push_back(ad::constant(conv_init(chans[i + 1], chans[i], 3, rng)));
        bs_.push_back(ad::constant(Tensor::zeros({chans[i + 1]})));
    }
}

ad::Var Perceptual::distance(const ad::Var& a, const ad::Var& b) const {
    if (!a->val.same_shape(b->val)) throw std::invalid_argument("perceptual: shape mismatch");
    auto ha = a, hb = b;
    ad::Var acc;
    for (int i = 0; i < 3; ++i) {
        ha = ad::leaky_relu(ad::conv2d(ha, ws_[size_t(i)], bs_[size_t(i)], 2, 1), 0.2f);
        hb = ad::leaky_relu(ad::conv2d(hb, ws_[size_t(i)], bs_[size_t(i)], 2, 1), 0.2f);
        auto d = ad::mse(ha, hb);
        acc = acc ? ad::add(acc, d) : d;
    }
    return ad::scale(acc, 1.0f / 3.0f);
}

float Perceptual::distance(const Tensor& a, const Tensor& b) const {
    ad::NoGrad ng;
    auto fa = a.ndim() == 3 ? a.reshaped({1, a.dim(0), a.dim(1), a.dim(2)}) : a;
    auto fb = b.ndim() == 3 ? b.reshaped({1, b.dim(0), b.dim(1), b.dim(2)}) : b;
    return distance(ad::constant(fa), ad::constant(fb))->val.d[0];
}

}  // namespace pliv::nets
