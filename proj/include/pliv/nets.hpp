#pragma once

#include <array>
#include <string>
#include <vector>

#include "pliv/autodiff.hpp"
#include "pliv/face_types.hpp"

namespace pliv::nets {

enum class TemporalMode { kBidirectional, kChunkCausal };

inline const char* to_string(TemporalMode m) {
    return m == TemporalMode::kBidirectional ? "bidirectional" : "chunk-causal";
}

struct DenoiserConfig {
    int base_channels = 32;  // channel multipliers 1/2/3 across the three scales
    int depth = 3;
    bool temporal_attention = true;
    TemporalMode temporal_mode = TemporalMode::kBidirectional;
    int mf_dim = 5;
    int keypoint_channels = 10;
    int max_window_frames = 16;
    int ref_slots = 4;  // history bank capacity incl. the pinned source

    bool operator==(const DenoiserConfig&) const = default;
};

// Multi-scale encoder features of one reference frame, tagged with that
// frame's motion embedding for the history banks.
struct RefFeatures {
    std::vector<Tensor> scales;  // [c0,64,64], [c1,32,32], [c2,16,16]
    std::array<float, 5> m_f{};
};

// UNet denoiser, x0-parameterized: the output head is zero-initialized and
// predicts a residual on top of the noisy input, so a fresh net returns its
// input unchanged. Conditioning: keypoint heatmaps added at input resolution,
// m_f via cross-attention tokens, references as extra K/V tokens in the
// mid-block spatial attention (source first, per-slot embedding added),
// per-frame timesteps, temporal attention across the window at every scale.
class Denoiser {
public:
    Denoiser(const DenoiserConfig& cfg, uint64_t init_seed);

    // window [F,3,H,W]; timesteps one per frame, constant within each
    // chunk_size block; refs non-empty, source first; m_f [F,mf_dim];
    // cond [F,K,H,W]. Returns z0_hat [F,3,H,W].
    ad::Var forward(const ad::Var& window, const std::vector<int>& timesteps, const std::vector<RefFeatures>& refs,
                    const ad::Var& m_f, const ad::Var& cond, int chunk_size) const;

    Tensor denoise_window(const Tensor& window, const std::vector<int>& timesteps,
                          const std::vector<RefFeatures>& refs, const Tensor& m_f, const Tensor& cond,
                          int chunk_size) const;

    RefFeatures encode_reference(const Frame& frame, const std::array<float, 5>& m_f_tag = {}) const;

    const DenoiserConfig& config() const { return cfg_; }
    ad::ParamStore& params() { return params_; }
    const ad::ParamStore& params() const { return params_; }
    int64_t param_count() const { return params_.total_count(); }

    static bool is_temporal_param(const std::string& name) { return name.find("temporal") != std::string::npos; }

private:
    struct Res {
        ad::Var gn1_g, gn1_b, w1, b1, tw, tb, gn2_g, gn2_b, w2, b2, skip_w, skip_b;
        bool has_skip = false;
        int cin = 0, cout = 0;
    };
    struct Attn {
        ad::Var gn_g, gn_b, wq, bq, wk, bk, wv, bv, wo, bo;
        int dim = 0;
    };

    Res make_res(const std::string& name, int cin, int cout, Rng& rng);
    Attn make_attn(const std::string& name, int dim, Rng& rng, float out_std);

    ad::Var run_res(const Res& r, const ad::Var& x, const ad::Var& temb) const;
    ad::Var run_ref_attn(const ad::Var& x, const std::vector<RefFeatures>& refs) const;
    ad::Var run_mf_attn(const ad::Var& x, const ad::Var& m_f) const;
    ad::Var run_temporal_attn(const Attn& a, const ad::Var& x, int chunk_size) const;

    ad::Var timestep_embedding(const std::vector<int>& timesteps) const;

    DenoiserConfig cfg_;
    ad::ParamStore params_;
    int c0_, c1_, c2_, temb_dim_;

    ad::Var conv_in_w_, conv_in_b_, cond_w_, cond_b_;
    ad::Var temb_w1_, temb_b1_, temb_w2_, temb_b2_;
    Res down0_, down1_, mid1_, mid2_, up1_, up2_;
    ad::Var ds0_w_, ds0_b_, ds1_w_, ds1_b_, us1_w_, us1_b_, us2_w_, us2_b_;
    Attn ref_attn_, mf_attn_, temp_mid_, temp_up1_, temp_up2_;
    ad::Var mf_tok_w_, mf_tok_b_, slot_emb_;
    ad::Var out_gn_g_, out_gn_b_, out_w_, out_b_;
};

struct DiscriminatorConfig {
    int base_channels = 32;

    bool operator==(const DiscriminatorConfig&) const = default;
};

// Strided-conv patch critic; logit(frame) is the mean over the 4x4 patch map.
class Discriminator {
public:
    Discriminator(const DiscriminatorConfig& cfg, uint64_t init_seed);

    ad::Var patch_logits(const ad::Var& frames) const;  // [B,3,64,64] -> [B,1,4,4]
    float logit(const Frame& frame) const;

    const DiscriminatorConfig& config() const { return cfg_; }
    ad::ParamStore& params() { return params_; }
    const ad::ParamStore& params() const { return params_; }

private:
    DiscriminatorConfig cfg_;
    ad::ParamStore params_;
    std::vector<ad::Var> ws_, bs_;
};

// Fixed random-conv feature distance standing in for a pretrained perceptual
// metric; the seed is part of the checkpoint metadata.
class Perceptual {
public:
    explicit Perceptual(uint64_t seed = kDefaultSeed);

    ad::Var distance(const ad::Var& a, const ad::Var& b) const;  // scalar
    float distance(const Tensor& a, const Tensor& b) const;

    uint64_t seed() const { return seed_; }

    static constexpr uint64_t kDefaultSeed = 0x9e3779b9;

private:
    uint64_t seed_;
    std::vector<ad::Var> ws_, bs_;
};

}  // namespace pliv::nets
