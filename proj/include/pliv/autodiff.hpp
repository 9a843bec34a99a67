#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "pliv/tensor.hpp"

// Tape-style reverse-mode autodiff over Tensor. Ops record a backward
// closure only while grad mode is on; under NoGrad they are plain numeric
// calls with no graph, which is what the samplers rely on to cut gradient
// flow through all but the final denoising step.

namespace pliv::ad {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Tensor val;
    Tensor grad;
    bool needs_grad = false;
    bool grad_ready = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backfn;

    Tensor& g() {
        if (!grad_ready) {
            grad = Tensor::zeros(val.shape);
            grad_ready = true;
        }
        return grad;
    }
    void clear_grad() { grad_ready = false; }
};

bool grad_enabled();

struct NoGrad {
    NoGrad();
    ~NoGrad();
    NoGrad(const NoGrad&) = delete;

private:
    bool prev_;
};

Var leaf(Tensor v, bool requires_grad = false);
inline Var constant(Tensor v) { return leaf(std::move(v), false); }

// Backprop from a scalar root through the recorded graph.
void backward(const Var& root);

// ---- ops ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var affine(const Var& a, float alpha, float beta);  // alpha*a + beta
inline Var scale(const Var& a, float s) { return affine(a, s, 0.0f); }
inline Var neg(const Var& a) { return affine(a, -1.0f, 0.0f); }
Var silu(const Var& x);
Var relu(const Var& x);
Var leaky_relu(const Var& x, float negative_slope);

// y[T,Co] = x[T,Ci] * w[Co,Ci]^T + b
Var linear(const Var& x, const Var& w, const Var& b);
Var linear(const Var& x, const Var& w);

// x[F,Ci,H,W], w[Co,Ci,kh,kw], b[Co] -> [F,Co,OH,OW]
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups);

Var add_channel_vec(const Var& x, const Var& v);  // x[F,C,H,W] + v[F,C] broadcast
Var concat_ch(const Var& a, const Var& b);        // along dim 1 of [F,C,H,W]
Var upsample2(const Var& x);

Var reshape(const Var& x, std::vector<int> shape);
Var permute_fchw_pfc(const Var& x);                   // [F,C,H,W] -> [HW,F,C]
Var permute_pfc_fchw(const Var& x, int h, int w);     // inverse
Var permute_fchw_ftc(const Var& x);                   // [F,C,H,W] -> [F,HW,C]
Var permute_ftc_fchw(const Var& x, int h, int w);     // inverse

Var bmm(const Var& a, const Var& b);     // [B,m,k]x[B,k,n] -> [B,m,n]
Var bmm_nt(const Var& a, const Var& b);  // [B,m,k]x[B,n,k] -> [B,m,n]

// softmax over the last dim; mask (optional, additive, shape [m,n]) is applied
// to every batch item. -inf entries are exact zeros in the output.
Var softmax_rows(const Var& x, const Tensor* mask = nullptr);

Var select_row(const Var& x, int row);                      // [R,C] -> [C]
Var add_row_vec(const Var& x, const Var& v);                // [T,C] + [C] broadcast over rows
Var concat_tokens_bcast(const Var& a, const Var& b);        // [F,Ta,C] + [Tb,C] -> [F,Ta+Tb,C]
Var concat_rows(const std::vector<Var>& xs);                // 2-D row concat

Var mean_all(const Var& x);  // -> scalar [1]
Var mse(const Var& a, const Var& b);
Var l1(const Var& a, const Var& b);

// ---- parameters & optimizer ----
struct ParamStore {
    std::vector<std::pair<std::string, Var>> items;

    Var add(const std::string& name, Tensor init);
    Var find(const std::string& name) const;
    int64_t total_count() const;
    void clear_grads();
};

struct AdamW {
    float lr = 1e-4f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float weight_decay = 0.01f;
    int64_t t = 0;
    std::vector<Tensor> m, v;  // aligned with store order

    void step(ParamStore& store, const std::function<bool(const std::string&)>& trainable = nullptr);
};

}  // namespace pliv::ad
