#include "pliv/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>
#include <unordered_set>

#include "pliv/kernels.hpp"

namespace pliv::ad {

static thread_local bool g_grad_enabled = true;

bool grad_enabled() { return g_grad_enabled; }

NoGrad::NoGrad() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGrad::~NoGrad() { g_grad_enabled = prev_; }

Var leaf(Tensor v, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->val = std::move(v);
    n->needs_grad = requires_grad;
    return n;
}

static Var make(Tensor val, std::vector<Var> parents, std::function<void(Node&)> backfn) {
    auto n = std::make_shared<Node>();
    n->val = std::move(val);
    if (g_grad_enabled) {
        bool any = false;
        for (const auto& p : parents) any = any || p->needs_grad;
        if (any) {
            n->needs_grad = true;
            n->parents = std::move(parents);
            n->backfn = std::move(backfn);
        }
    }
    return n;
}

void backward(const Var& root) {
    if (root->val.numel() != 1) throw std::logic_error("backward: root must be scalar");
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.push_back({root.get(), 0});
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            Node* p = n->parents[idx++].get();
            if (p->needs_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    root->g().d[0] = 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backfn && n->grad_ready) n->backfn(*n);
    }
}

// ---- elementwise ----

Var add(const Var& a, const Var& b) {
    if (!a->val.same_shape(b->val)) throw std::invalid_argument("add: shape mismatch");
    Tensor out(a->val.shape);
    for (int64_t i = 0; i < out.numel(); ++i) out.d[i] = a->val.d[i] + b->val.d[i];
    return make(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->needs_grad) {
            auto& ga = a->g();
            for (int64_t i = 0; i < n.grad.numel(); ++i) ga.d[i] += n.grad.d[i];
        }
        if (b->needs_grad) {
            auto& gb = b->g();
            for (int64_t i = 0; i < n.grad.numel(); ++i) gb.d[i] += n.grad.d[i];
        }
    });
}

Var sub(const Var& a, const Var& b) {
    if (!a->val.same_shape(b->val)) throw std::invalid_argument("sub: shape mismatch");
    Tensor out(a->val.shape);
    for (int64_t i = 0; i < out.numel(); ++i) out.d[i] = a->val.d[i] - b->val.d[i];
    return make(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->needs_grad) {
            auto& ga = a->g();
            for (int64_t i = 0; i < n.grad.numel(); ++i) ga.d[i] += n.grad.d[i];
        }
        if (b->needs_grad) {
            auto& gb = b->g();
            for (int64_t i = 0; i < n.grad.numel(); ++i) gb.d[i] -= n.grad.d[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    if (!a->val.same_shape(b->val)) throw std::invalid_argument("mul: shape mismatch");
    Tensor out(a->val.shape);
    for (int64_t i = 0; i < out.numel(); ++i) out.d[i] = a->val.d[i] * b->val.d[i];
    return make(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->needs_grad) {
            auto& ga = a->g();
            for (int64_t i = 0; i < n.grad.numel(); ++i) ga.d[i] += n.grad.d[i] * b->val.d[i];
        }
        if (b->needs_grad) {
            auto& gb = b->g();
            for (int64_t i = 0; i < n.grad.numel(); ++i) gb.d[i] += n.grad.d[i] * a->val.d[i];
        }
    });
}

Var affine(const Var& a, float alpha, float beta) {
    Tensor out(a->val.shape);
    for (int64_t i = 0; i < out.numel(); ++i) out.d[i] = alpha * a->val.d[i] + beta;
    return make(std::move(out), {a}, [a, alpha](Node& n) {
        if (!a->needs_grad) return;
        auto& ga = a->g();
        for (int64_t i = 0; i < n.grad.numel(); ++i) ga.d[i] += alpha * n.grad.d[i];
    });
}

Var silu(const Var& x) {
    Tensor out(x->val.shape);
    for (int64_t i = 0; i < out.numel(); ++i) {
        float v = x->val.d[i];
        out.d[i] = v / (1.0f + std::exp(-v));
    }
    return make(std::move(out), {x}, [x](Node& n) {
        if (!x->needs_grad) return;
        auto& gx = x->g();
        for (int64_t i = 0; i < n.grad.numel(); ++i) {
            float v = x->val.d[i];
            float s = 1.0f / (1.0f + std::exp(-v));
            gx.d[i] += n.grad.d[i] * s * (1.0f + v * (1.0f - s));
        }
    });
}

Var relu(const Var& x) { return leaky_relu(x, 0.0f); }

Var leaky_relu(const Var& x, float ns) {
    Tensor out(x->val.shape);
    for (int64_t i = 0; i < out.numel(); ++i) {
        float v = x->val.d[i];
        out.d[i] = v > 0.0f ? v : ns * v;
    }
    return make(std::move(out), {x}, [x, ns](Node& n) {
        if (!x->needs_grad) return;
        auto& gx = x->g();
        for (int64_t i = 0; i < n.grad.numel(); ++i) gx.d[i] += n.grad.d[i] * (x->val.d[i] > 0.0f ? 1.0f : ns);
    });
}

// ---- linear / conv ----

static Var linear_impl(const Var& x, const Var& w, const Var* b) {
    const int t = x->val.dim(0), ci = x->val.dim(1), co = w->val.dim(0);
    if (w->val.dim(1) != ci) throw std::invalid_argument("linear: weight shape mismatch");
    Tensor out({t, co});
    kernels::gemm_nt(t, co, ci, x->val.data(), w->val.data(), out.data());
    if (b) {
        if ((*b)->val.numel() != co) throw std::invalid_argument("linear: bias shape mismatch");
        for (int i = 0; i < t; ++i)
            for (int j = 0; j < co; ++j) out.d[int64_t(i) * co + j] += (*b)->val.d[j];
    }
    std::vector<Var> parents = b ? std::vector<Var>{x, w, *b} : std::vector<Var>{x, w};
    bool has_b = b != nullptr;
    Var bv = b ? *b : Var();
    return make(std::move(out), std::move(parents), [x, w, bv, has_b, t, ci, co](Node& n) {
        if (x->needs_grad) kernels::gemm_nn(t, ci, co, n.grad.data(), w->val.data(), x->g().data(), true);
        if (w->needs_grad) kernels::gemm_tn(co, ci, t, n.grad.data(), x->val.data(), w->g().data(), true);
        if (has_b && bv->needs_grad) {
            auto& gb = bv->g();
            for (int i = 0; i < t; ++i)
                for (int j = 0; j < co; ++j) gb.d[j] += n.grad.d[int64_t(i) * co + j];
        }
    });
}

Var linear(const Var& x, const Var& w, const Var& b) { return linear_impl(x, w, &b); }
Var linear(const Var& x, const Var& w) { return linear_impl(x, w, nullptr); }

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    const int f = x->val.dim(0), ci = x->val.dim(1), h = x->val.dim(2), wd = x->val.dim(3);
    const int co = w->val.dim(0), kh = w->val.dim(2), kw = w->val.dim(3);
    if (w->val.dim(1) != ci) throw std::invalid_argument("conv2d: channel mismatch");
    const int oh = kernels::conv_out_size(h, kh, stride, pad);
    const int ow = kernels::conv_out_size(wd, kw, stride, pad);
    const int ck = ci * kh * kw;
    const int64_t osz = int64_t(oh) * ow;

    Tensor out({f, co, oh, ow});
    Tensor col({ck, oh * ow});
    for (int fi = 0; fi < f; ++fi) {
        kernels::im2col(x->val.data() + int64_t(fi) * ci * h * wd, ci, h, wd, kh, kw, stride, pad, col.data());
        float* o = out.data() + int64_t(fi) * co * osz;
        kernels::gemm_nn(co, int(osz), ck, w->val.data(), col.data(), o);
        for (int c = 0; c < co; ++c) {
            const float bias = b->val.d[c];
            float* oc = o + int64_t(c) * osz;
            for (int64_t i = 0; i < osz; ++i) oc[i] += bias;
        }
    }
    return make(std::move(out), {x, w, b}, [x, w, b, f, ci, h, wd, co, kh, kw, stride, pad, oh, ow, ck, osz](Node& n) {
        Tensor col({ck, oh * ow});
        Tensor colg({ck, oh * ow});
        for (int fi = 0; fi < f; ++fi) {
            const float* g = n.grad.data() + int64_t(fi) * co * osz;
            if (w->needs_grad) {
                kernels::im2col(x->val.data() + int64_t(fi) * ci * h * wd, ci, h, wd, kh, kw, stride, pad,
                                col.data());
                kernels::gemm_nt(co, ck, int(osz), g, col.data(), w->g().data(), true);
            }
            if (x->needs_grad) {
                kernels::gemm_tn(ck, int(osz), co, w->val.data(), g, colg.data());
                Tensor dx({ci, h, wd});
                kernels::col2im(colg.data(), ci, h, wd, kh, kw, stride, pad, dx.data());
                float* gx = x->g().data() + int64_t(fi) * ci * h * wd;
                for (int64_t i = 0; i < dx.numel(); ++i) gx[i] += dx.d[i];
            }
            if (b->needs_grad) {
                auto& gb = b->g();
                for (int c = 0; c < co; ++c) {
                    float s = 0.0f;
                    const float* gc = g + int64_t(c) * osz;
                    for (int64_t i = 0; i < osz; ++i) s += gc[i];
                    gb.d[c] += s;
                }
            }
        }
    });
}

// ---- normalization ----

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups) {
    const int f = x->val.dim(0), c = x->val.dim(1), h = x->val.dim(2), w = x->val.dim(3);
    if (c % groups != 0) throw std::invalid_argument("group_norm: channels not divisible by groups");
    const int cg = c / groups;
    const int64_t gsz = int64_t(cg) * h * w;
    const float eps = 1e-5f;

    Tensor out({f, c, h, w});
    auto stats = std::make_shared<std::vector<float>>(size_t(f) * groups * 2);  // mu, ivar pairs
    for (int fi = 0; fi < f; ++fi) {
        for (int gi = 0; gi < groups; ++gi) {
            const float* src = x->val.data() + (int64_t(fi) * c + int64_t(gi) * cg) * h * w;
            double mu = 0.0;
            for (int64_t i = 0; i < gsz; ++i) mu += src[i];
            mu /= double(gsz);
            double var = 0.0;
            for (int64_t i = 0; i < gsz; ++i) {
                double d = src[i] - mu;
                var += d * d;
            }
            var /= double(gsz);
            const float ivar = float(1.0 / std::sqrt(var + eps));
            (*stats)[(size_t(fi) * groups + gi) * 2] = float(mu);
            (*stats)[(size_t(fi) * groups + gi) * 2 + 1] = ivar;
            float* dst = out.data() + (int64_t(fi) * c + int64_t(gi) * cg) * h * w;
            for (int ch = 0; ch < cg; ++ch) {
                const float ga = gamma->val.d[gi * cg + ch];
                const float be = beta->val.d[gi * cg + ch];
                const float* s = src + int64_t(ch) * h * w;
                float* d = dst + int64_t(ch) * h * w;
                for (int64_t i = 0; i < int64_t(h) * w; ++i) d[i] = (s[i] - float(mu)) * ivar * ga + be;
            }
        }
    }
    return make(std::move(out), {x, gamma, beta}, [x, gamma, beta, stats, f, c, h, w, groups, cg, gsz](Node& n) {
        const int64_t hw = int64_t(h) * w;
        for (int fi = 0; fi < f; ++fi) {
            for (int gi = 0; gi < groups; ++gi) {
                const float mu = (*stats)[(size_t(fi) * groups + gi) * 2];
                const float ivar = (*stats)[(size_t(fi) * groups + gi) * 2 + 1];
                const float* src = x->val.data() + (int64_t(fi) * c + int64_t(gi) * cg) * hw;
                const float* g = n.grad.data() + (int64_t(fi) * c + int64_t(gi) * cg) * hw;
                // accumulate per-channel stats and group scalars
                double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                for (int ch = 0; ch < cg; ++ch) {
                    const float ga = gamma->val.d[gi * cg + ch];
                    const float* s = src + ch * hw;
                    const float* gg = g + ch * hw;
                    for (int64_t i = 0; i < hw; ++i) {
                        float xh = (s[i] - mu) * ivar;
                        float dxh = gg[i] * ga;
                        sum_dxh += dxh;
                        sum_dxh_xh += double(dxh) * xh;
                    }
                }
                if (gamma->needs_grad || beta->needs_grad) {
                    for (int ch = 0; ch < cg; ++ch) {
                        const float* s = src + ch * hw;
                        const float* gg = g + ch * hw;
                        double dg = 0.0, db = 0.0;
                        for (int64_t i = 0; i < hw; ++i) {
                            dg += double(gg[i]) * (s[i] - mu) * ivar;
                            db += gg[i];
                        }
                        if (gamma->needs_grad) gamma->g().d[gi * cg + ch] += float(dg);
                        if (beta->needs_grad) beta->g().d[gi * cg + ch] += float(db);
                    }
                }
                if (x->needs_grad) {
                    float* gx = x->g().data() + (int64_t(fi) * c + int64_t(gi) * cg) * hw;
                    const float inv_n = 1.0f / float(gsz);
                    for (int ch = 0; ch < cg; ++ch) {
                        const float ga = gamma->val.d[gi * cg + ch];
                        const float* s = src + ch * hw;
                        const float* gg = g + ch * hw;
                        float* go = gx + ch * hw;
                        for (int64_t i = 0; i < hw; ++i) {
                            float xh = (s[i] - mu) * ivar;
                            float dxh = gg[i] * ga;
                            go[i] += ivar * (dxh - inv_n * (float(sum_dxh) + xh * float(sum_dxh_xh)));
                        }
                    }
                }
            }
        }
    });
}

// ---- shape ops ----

Var add_channel_vec(const Var& x, const Var& v) {
    const int f = x->val.dim(0), c = x->val.dim(1), h = x->val.dim(2), w = x->val.dim(3);
    if (v->val.dim(0) != f || v->val.dim(1) != c) throw std::invalid_argument("add_channel_vec: shape mismatch");
    const int64_t hw = int64_t(h) * w;
    Tensor out({f, c, h, w});
    for (int fi = 0; fi < f; ++fi)
        for (int ci = 0; ci < c; ++ci) {
            const float a = v->val.d[int64_t(fi) * c + ci];
            const float* s = x->val.data() + (int64_t(fi) * c + ci) * hw;
            float* d = out.data() + (int64_t(fi) * c + ci) * hw;
            for (int64_t i = 0; i < hw; ++i) d[i] = s[i] + a;
        }
    return make(std::move(out), {x, v}, [x, v, f, c, hw](Node& n) {
        if (x->needs_grad) {
            auto& gx = x->g();
            for (int64_t i = 0; i < n.grad.numel(); ++i) gx.d[i] += n.grad.d[i];
        }
        if (v->needs_grad) {
            auto& gv = v->g();
            for (int fi = 0; fi < f; ++fi)
                for (int ci = 0; ci < c; ++ci) {
                    const float* g = n.grad.data() + (int64_t(fi) * c + ci) * hw;
                    float s = 0.0f;
                    for (int64_t i = 0; i < hw; ++i) s += g[i];
                    gv.d[int64_t(fi) * c + ci] += s;
                }
        }
    });
}

Var concat_ch(const Var& a, const Var& b) {
    const int f = a->val.dim(0), ca = a->val.dim(1), cb = b->val.dim(1);
    const int h = a->val.dim(2), w = a->val.dim(3);
    if (b->val.dim(0) != f || b->val.dim(2) != h || b->val.dim(3) != w)
        throw std::invalid_argument("concat_ch: shape mismatch");
    const int64_t hw = int64_t(h) * w;
    Tensor out({f, ca + cb, h, w});
    for (int fi = 0; fi < f; ++fi) {
        std::memcpy(out.data() + int64_t(fi) * (ca + cb) * hw, a->val.data() + int64_t(fi) * ca * hw,
                    sizeof(float) * size_t(ca * hw));
        std::memcpy(out.data() + (int64_t(fi) * (ca + cb) + ca) * hw, b->val.data() + int64_t(fi) * cb * hw,
                    sizeof(float) * size_t(cb * hw));
    }
    return make(std::move(out), {a, b}, [a, b, f, ca, cb, hw](Node& n) {
        for (int fi = 0; fi < f; ++fi) {
            if (a->needs_grad) {
                float* ga = a->g().data() + int64_t(fi) * ca * hw;
                const float* g = n.grad.data() + int64_t(fi) * (ca + cb) * hw;
                for (int64_t i = 0; i < ca * hw; ++i) ga[i] += g[i];
            }
            if (b->needs_grad) {
                float* gb = b->g().data() + int64_t(fi) * cb * hw;
                const float* g = n.grad.data() + (int64_t(fi) * (ca + cb) + ca) * hw;
                for (int64_t i = 0; i < cb * hw; ++i) gb[i] += g[i];
            }
        }
    });
}

Var upsample2(const Var& x) {
    const int f = x->val.dim(0), c = x->val.dim(1), h = x->val.dim(2), w = x->val.dim(3);
    Tensor out({f, c, 2 * h, 2 * w});
    for (int fc = 0; fc < f * c; ++fc) {
        const float* s = x->val.data() + int64_t(fc) * h * w;
        float* d = out.data() + int64_t(fc) * 4 * h * w;
        for (int y = 0; y < 2 * h; ++y)
            for (int xx = 0; xx < 2 * w; ++xx) d[y * 2 * w + xx] = s[(y / 2) * w + xx / 2];
    }
    return make(std::move(out), {x}, [x, f, c, h, w](Node& n) {
        if (!x->needs_grad) return;
        auto& gx = x->g();
        for (int fc = 0; fc < f * c; ++fc) {
            const float* g = n.grad.data() + int64_t(fc) * 4 * h * w;
            float* d = gx.data() + int64_t(fc) * h * w;
            for (int y = 0; y < 2 * h; ++y)
                for (int xx = 0; xx < 2 * w; ++xx) d[(y / 2) * w + xx / 2] += g[y * 2 * w + xx];
        }
    });
}

Var reshape(const Var& x, std::vector<int> shape) {
    Tensor out = x->val.reshaped(std::move(shape));
    return make(std::move(out), {x}, [x](Node& n) {
        if (!x->needs_grad) return;
        auto& gx = x->g();
        for (int64_t i = 0; i < n.grad.numel(); ++i) gx.d[i] += n.grad.d[i];
    });
}

Var permute_fchw_pfc(const Var& x) {
    const int f = x->val.dim(0), c = x->val.dim(1), h = x->val.dim(2), w = x->val.dim(3);
    const int64_t p = int64_t(h) * w;
    Tensor out({int(p), f, c});
    for (int fi = 0; fi < f; ++fi)
        for (int ci = 0; ci < c; ++ci) {
            const float* s = x->val.data() + (int64_t(fi) * c + ci) * p;
            for (int64_t pi = 0; pi < p; ++pi) out.d[(pi * f + fi) * c + ci] = s[pi];
        }
    return make(std::move(out), {x}, [x, f, c, p](Node& n) {
        if (!x->needs_grad) return;
        auto& gx = x->g();
        for (int fi = 0; fi < f; ++fi)
            for (int ci = 0; ci < c; ++ci) {
                float* d = gx.data() + (int64_t(fi) * c + ci) * p;
                for (int64_t pi = 0; pi < p; ++pi) d[pi] += n.grad.d[(pi * f + fi) * c + ci];
            }
    });
}

Var permute_pfc_fchw(const Var& x, int h, int w) {
    const int64_t p = x->val.dim(0);
    const int f = x->val.dim(1), c = x->val.dim(2);
    if (p != int64_t(h) * w) throw std::invalid_argument("permute_pfc_fchw: size mismatch");
    Tensor out({f, c, h, w});
    for (int fi = 0; fi < f; ++fi)
        for (int ci = 0; ci < c; ++ci) {
            float* d = out.data() + (int64_t(fi) * c + ci) * p;
            for (int64_t pi = 0; pi < p; ++pi) d[pi] = x->val.d[(pi * f + fi) * c + ci];
        }
    return make(std::move(out), {x}, [x, f, c, p](Node& n) {
        if (!x->needs_grad) return;
        auto& gx = x->g();
        for (int fi = 0; fi < f; ++fi)
            for (int ci = 0; ci < c; ++ci) {
                const float* g = n.grad.data() + (int64_t(fi) * c + ci) * p;
                for (int64_t pi = 0; pi < p; ++pi) gx.d[(pi * f + fi) * c + ci] += g[pi];
            }
    });
}

Var permute_fchw_ftc(const Var& x) {
    const int f = x->val.dim(0), c = x->val.dim(1), h = x->val.dim(2), w = x->val.dim(3);
    const int64_t t = int64_t(h) * w;
    Tensor out({f, int(t), c});
    for (int fi = 0; fi < f; ++fi)
        for (int ci = 0; ci < c; ++ci) {
            const float* s = x->val.data() + (int64_t(fi) * c + ci) * t;
            float* base = out.data() + int64_t(fi) * t * c;
            for (int64_t ti = 0; ti < t; ++ti) base[ti * c + ci] = s[ti];
        }
    return make(std::move(out), {x}, [x, f, c, t](Node& n) {
        if (!x->needs_grad) return;
        auto& gx = x->g();
        for (int fi = 0; fi < f; ++fi)
            for (int ci = 0; ci < c; ++ci) {
                float* d = gx.data() + (int64_t(fi) * c + ci) * t;
                const float* base = n.grad.data() + int64_t(fi) * t * c;
                for (int64_t ti = 0; ti < t; ++ti) d[ti] += base[ti * c + ci];
            }
    });
}

Var permute_ftc_fchw(const Var& x, int h, int w) {
    const int f = x->val.dim(0);
    const int64_t t = x->val.dim(1);
    const int c = x->val.dim(2);
    if (t != int64_t(h) * w) throw std::invalid_argument("permute_ftc_fchw: size mismatch");
    Tensor out({f, c, h, w});
    for (int fi = 0; fi < f; ++fi)
        for (int ci = 0; ci < c; ++ci) {
            float* d = out.data() + (int64_t(fi) * c + ci) * t;
            const float* base = x->val.data() + int64_t(fi) * t * c;
            for (int64_t ti = 0; ti < t; ++ti) d[ti] = base[ti * c + ci];
        }
    return make(std::move(out), {x}, [x, f, c, t](Node& n) {
        if (!x->needs_grad) return;
        auto& gx = x->g();
        for (int fi = 0; fi < f; ++fi)
            for (int ci = 0; ci < c; ++ci) {
                const float* g = n.grad.data() + (int64_t(fi) * c + ci) * t;
                float* base = gx.data() + int64_t(fi) * t * c;
                for (int64_t ti = 0; ti < t; ++ti) base[ti * c + ci] += g[ti];
            }
    });
}

// ---- batched matmul / attention ----

Var bmm(const Var& a, const Var& b) {
    const int bn = a->val.dim(0), m = a->val.dim(1), k = a->val.dim(2), n2 = b->val.dim(2);
    if (b->val.dim(0) != bn || b->val.dim(1) != k) throw std::invalid_argument("bmm: shape mismatch");
    Tensor out({bn, m, n2});
    for (int i = 0; i < bn; ++i)
        kernels::gemm_nn(m, n2, k, a->val.data() + int64_t(i) * m * k, b->val.data() + int64_t(i) * k * n2,
                         out.data() + int64_t(i) * m * n2);
    return make(std::move(out), {a, b}, [a, b, bn, m, k, n2](Node& n) {
        for (int i = 0; i < bn; ++i) {
            const float* g = n.grad.data() + int64_t(i) * m * n2;
            if (a->needs_grad)
                kernels::gemm_nt(m, k, n2, g, b->val.data() + int64_t(i) * k * n2,
                                 a->g().data() + int64_t(i) * m * k, true);
            if (b->needs_grad)
                kernels::gemm_tn(k, n2, m, a->val.data() + int64_t(i) * m * k, g,
                                 b->g().data() + int64_t(i) * k * n2, true);
        }
    });
}

Var bmm_nt(const Var& a, const Var& b) {
    const int bn = a->val.dim(0), m = a->val.dim(1), k = a->val.dim(2), n2 = b->val.dim(1);
    if (b->val.dim(0) != bn || b->val.dim(2) != k) throw std::invalid_argument("bmm_nt: shape mismatch");
    Tensor out({bn, m, n2});
    for (int i = 0; i < bn; ++i)
        kernels::gemm_nt(m, n2, k, a->val.data() + int64_t(i) * m * k, b->val.data() + int64_t(i) * n2 * k,
                         out.data() + int64_t(i) * m * n2);
    return make(std::move(out), {a, b}, [a, b, bn, m, k, n2](Node& n) {
        for (int i = 0; i < bn; ++i) {
            const float* g = n.grad.data() + int64_t(i) * m * n2;
            if (a->needs_grad)
                kernels::gemm_nn(m, k, n2, g, b->val.data() + int64_t(i) * n2 * k,
                                 a->g().data() + int64_t(i) * m * k, true);
            if (b->needs_grad)
                kernels::gemm_tn(n2, k, m, g, a->val.data() + int64_t(i) * m * k,
                                 b->g().data() + int64_t(i) * n2 * k, true);
        }
    });
}

Var softmax_rows(const Var& x, const Tensor* mask) {
    const int nd = x->val.ndim();
    const int n = x->val.dim(nd - 1);
    const int m = x->val.dim(nd - 2);
    const int64_t rows = x->val.numel() / n;
    if (mask && (mask->ndim() != 2 || mask->dim(0) != m || mask->dim(1) != n))
        throw std::invalid_argument("softmax_rows: bad mask shape");
    Tensor out(x->val.shape);
    Tensor mask_copy = mask ? *mask : Tensor();
    const bool has_mask = mask != nullptr;
    for (int64_t r = 0; r < rows; ++r) {
        const float* s = x->val.data() + r * n;
        const float* mk = has_mask ? mask_copy.data() + (r % m) * n : nullptr;
        float* d = out.data() + r * n;
        float mx = -std::numeric_limits<float>::infinity();
        for (int j = 0; j < n; ++j) {
            float v = s[j] + (mk ? mk[j] : 0.0f);
            if (v > mx) mx = v;
        }
        float sum = 0.0f;
        for (int j = 0; j < n; ++j) {
            float v = s[j] + (mk ? mk[j] : 0.0f);
            d[j] = std::isinf(v) && v < 0 ? 0.0f : std::exp(v - mx);
            sum += d[j];
        }
        const float inv = 1.0f / sum;
        for (int j = 0; j < n; ++j) d[j] *= inv;
    }
    auto y = std::make_shared<Tensor>(out);
    return make(std::move(out), {x}, [x, y, rows, n](Node& nn) {
        if (!x->needs_grad) return;
        auto& gx = x->g();
        for (int64_t r = 0; r < rows; ++r) {
            const float* yv = y->data() + r * n;
            const float* g = nn.grad.data() + r * n;
            float dot = 0.0f;
            for (int j = 0; j < n; ++j) dot += g[j] * yv[j];
            float* d = gx.data() + r * n;
            for (int j = 0; j < n; ++j) d[j] += yv[j] * (g[j] - dot);
        }
    });
}

Var select_row(const Var& x, int row) {
    const int r = x->val.dim(0), c = x->val.dim(1);
    if (row < 0 || row >= r) throw std::invalid_argument("select_row: out of range");
    Tensor out({c});
    std::memcpy(out.data(), x->val.data() + int64_t(row) * c, sizeof(float) * size_t(c));
    return make(std::move(out), {x}, [x, row, c](Node& n) {
        if (!x->needs_grad) return;
        float* g = x->g().data() + int64_t(row) * c;
        for (int j = 0; j < c; ++j) g[j] += n.grad.d[j];
    });
}

Var add_row_vec(const Var& x, const Var& v) {
    const int t = x->val.dim(0), c = x->val.dim(1);
    if (v->val.numel() != c) throw std::invalid_argument("add_row_vec: shape mismatch");
    Tensor out({t, c});
    for (int i = 0; i < t; ++i)
        for (int j = 0; j < c; ++j) out.d[int64_t(i) * c + j] = x->val.d[int64_t(i) * c + j] + v->val.d[j];
    return make(std::move(out), {x, v}, [x, v, t, c](Node& n) {
        if (x->needs_grad) {
            auto& gx = x->g();
            for (int64_t i = 0; i < n.grad.numel(); ++i) gx.d[i] += n.grad.d[i];
        }
        if (v->needs_grad) {
            auto& gv = v->g();
            for (int i = 0; i < t; ++i)
                for (int j = 0; j < c; ++j) gv.d[j] += n.grad.d[int64_t(i) * c + j];
        }
    });
}

Var concat_tokens_bcast(const Var& a, const Var& b) {
    const int f = a->val.dim(0), ta = a->val.dim(1), c = a->val.dim(2);
    const int tb = b->val.dim(0);
    if (b->val.dim(1) != c) throw std::invalid_argument("concat_tokens_bcast: channel mismatch");
    Tensor out({f, ta + tb, c});
    for (int fi = 0; fi < f; ++fi) {
        std::memcpy(out.data() + int64_t(fi) * (ta + tb) * c, a->val.data() + int64_t(fi) * ta * c,
                    sizeof(float) * size_t(ta) * c);
        std::memcpy(out.data() + (int64_t(fi) * (ta + tb) + ta) * c, b->val.data(), sizeof(float) * size_t(tb) * c);
    }
    return make(std::move(out), {a, b}, [a, b, f, ta, tb, c](Node& n) {
        for (int fi = 0; fi < f; ++fi) {
            if (a->needs_grad) {
                float* ga = a->g().data() + int64_t(fi) * ta * c;
                const float* g = n.grad.data() + int64_t(fi) * (ta + tb) * c;
                for (int64_t i = 0; i < int64_t(ta) * c; ++i) ga[i] += g[i];
            }
            if (b->needs_grad) {
                auto& gb = b->g();
                const float* g = n.grad.data() + (int64_t(fi) * (ta + tb) + ta) * c;
                for (int64_t i = 0; i < int64_t(tb) * c; ++i) gb.d[i] += g[i];
            }
        }
    });
}

Var concat_rows(const std::vector<Var>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_rows: empty");
    const int c = xs[0]->val.dim(1);
    int rows = 0;
    for (const auto& x : xs) {
        if (x->val.ndim() != 2 || x->val.dim(1) != c) throw std::invalid_argument("concat_rows: shape mismatch");
        rows += x->val.dim(0);
    }
    Tensor out({rows, c});
    int off = 0;
    for (const auto& x : xs) {
        std::memcpy(out.data() + int64_t(off) * c, x->val.data(), sizeof(float) * size_t(x->val.numel()));
        off += x->val.dim(0);
    }
    std::vector<Var> parents = xs;
    return make(std::move(out), std::move(parents), [xs, c](Node& n) {
        int off = 0;
        for (const auto& x : xs) {
            const int r = x->val.dim(0);
            if (x->needs_grad) {
                auto& gx = x->g();
                const float* g = n.grad.data() + int64_t(off) * c;
                for (int64_t i = 0; i < int64_t(r) * c; ++i) gx.d[i] += g[i];
            }
            off += r;
        }
    });
}

// ---- reductions ----

Var mean_all(const Var& x) {
    double s = 0.0;
    for (int64_t i = 0; i < x->val.numel(); ++i) s += x->val.d[i];
    Tensor out({1});
    out.d[0] = float(s / double(x->val.numel()));
    const int64_t n = x->val.numel();
    return make(std::move(out), {x}, [x, n](Node& nn) {
        if (!x->needs_grad) return;
        const float g = nn.grad.d[0] / float(n);
        auto& gx = x->g();
        for (int64_t i = 0; i < n; ++i) gx.d[i] += g;
    });
}

Var mse(const Var& a, const Var& b) {
    if (!a->val.same_shape(b->val)) throw std::invalid_argument("mse: shape mismatch");
    const int64_t n = a->val.numel();
    double s = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        double d = double(a->val.d[i]) - b->val.d[i];
        s += d * d;
    }
    Tensor out({1});
    out.d[0] = float(s / double(n));
    return make(std::move(out), {a, b}, [a, b, n](Node& nn) {
        const float g = 2.0f * nn.grad.d[0] / float(n);
        if (a->needs_grad) {
            auto& ga = a->g();
            for (int64_t i = 0; i < n; ++i) ga.d[i] += g * (a->val.d[i] - b->val.d[i]);
        }
        if (b->needs_grad) {
            auto& gb = b->g();
            for (int64_t i = 0; i < n; ++i) gb.d[i] -= g * (a->val.d[i] - b->val.d[i]);
        }
    });
}

Var l1(const Var& a, const Var& b) {
    if (!a->val.same_shape(b->val)) throw std::invalid_argument("l1: shape mismatch");
    const int64_t n = a->val.numel();
    double s = 0.0;
    for (int64_t i = 0; i < n; ++i) s += std::fabs(double(a->val.d[i]) - b->val.d[i]);
    Tensor out({1});
    out.d[0] = float(s / double(n));
    return make(std::move(out), {a, b}, [a, b, n](Node& nn) {
        const float g = nn.grad.d[0] / float(n);
        if (a->needs_grad) {
            auto& ga = a->g();
            for (int64_t i = 0; i < n; ++i) ga.d[i] += g * (a->val.d[i] > b->val.d[i] ? 1.0f : -1.0f);
        }
        if (b->needs_grad) {
            auto& gb = b->g();
            for (int64_t i = 0; i < n; ++i) gb.d[i] -= g * (a->val.d[i] > b->val.d[i] ? 1.0f : -1.0f);
        }
    });
}

// ---- parameters ----

Var ParamStore::add(const std::string& name, Tensor init) {
    for (const auto& [n, v] : items)
        if (n == name) throw std::logic_error("ParamStore: duplicate name " + name);
    Var v = leaf(std::move(init), true);
    items.push_back({name, v});
    return v;
}

Var ParamStore::find(const std::string& name) const {
    for (const auto& [n, v] : items)
        if (n == name) return v;
    throw std::out_of_range("ParamStore: no parameter " + name);
}

int64_t ParamStore::total_count() const {
    int64_t n = 0;
    for (const auto& [name, p] : items) n += p->val.numel();
    return n;
}

void ParamStore::clear_grads() {
    for (auto& [name, p] : items) p->clear_grad();
}

void AdamW::step(ParamStore& store, const std::function<bool(const std::string&)>& trainable) {
    if (m.empty()) {
        for (const auto& [name, p] : store.items) {
            m.push_back(Tensor::zeros(p->val.shape));
            v.push_back(Tensor::zeros(p->val.shape));
        }
    }
    ++t;
    const float bc1 = 1.0f - std::pow(beta1, float(t));
    const float bc2 = 1.0f - std::pow(beta2, float(t));
    for (size_t pi = 0; pi < store.items.size(); ++pi) {
        auto& [name, p] = store.items[pi];
        if (trainable && !trainable(name)) continue;
        if (!p->grad_ready) continue;
        auto& mm = m[pi];
        auto& vv = v[pi];
        for (int64_t i = 0; i < p->val.numel(); ++i) {
            const float g = p->grad.d[i];
            mm.d[i] = beta1 * mm.d[i] + (1.0f - beta1) * g;
            vv.d[i] = beta2 * vv.d[i] + (1.0f - beta2) * g * g;
            const float mh = mm.d[i] / bc1;
            const float vh = vv.d[i] / bc2;
            p->val.d[i] -= lr * (mh / (std::sqrt(vh) + eps) + weight_decay * p->val.d[i]);
        }
    }
}

}  // namespace pliv::ad
