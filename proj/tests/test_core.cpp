#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "pliv/autodiff.hpp"
#include "pliv/kernels.hpp"
#include "pliv/rng.hpp"
#include "pliv/tensor.hpp"

using namespace pliv;
namespace k = pliv::kernels;

TEST_CASE("rng: deterministic and serializable") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    a.normal();  // leave a spare cached
    auto st = a.state();
    Rng c;
    c.set_state(st);
    for (int i = 0; i < 50; ++i) CHECK(a.normal() == c.normal());
}

TEST_CASE("rng: normal moments") {
    Rng r(7);
    double s = 0, s2 = 0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        double v = r.normal();
        s += v;
        s2 += v * v;
    }
    CHECK(std::fabs(s / n) < 0.01);
    CHECK(std::fabs(s2 / n - 1.0) < 0.02);
}

static Tensor random_tensor(std::vector<int> shape, uint64_t seed) {
    Rng r(seed);
    return Tensor::randn(std::move(shape), r);
}

TEST_CASE("kernels: serial and parallel gemm agree bitwise") {
    const int m = 13, n = 257, kk = 71;
    Tensor A = random_tensor({m, kk}, 1), B = random_tensor({kk, n}, 2), Bt = random_tensor({n, kk}, 3);
    Tensor c0({m, n}), c1({m, n});
    k::serial::gemm_nn(m, n, kk, A.data(), B.data(), c0.data());
    k::par::gemm_nn(m, n, kk, A.data(), B.data(), c1.data());
    CHECK(bitwise_equal(c0, c1));

    Tensor At = random_tensor({kk, m}, 4);
    k::serial::gemm_tn(m, n, kk, At.data(), B.data(), c0.data());
    k::par::gemm_tn(m, n, kk, At.data(), B.data(), c1.data());
    CHECK(bitwise_equal(c0, c1));

    k::serial::gemm_nt(m, n, kk, A.data(), Bt.data(), c0.data());
    k::par::gemm_nt(m, n, kk, A.data(), Bt.data(), c1.data());
    CHECK(bitwise_equal(c0, c1));
}

TEST_CASE("kernels: gemm against naive triple loop") {
    const int m = 5, n = 7, kk = 9;
    Tensor A = random_tensor({m, kk}, 10), B = random_tensor({kk, n}, 11);
    Tensor C({m, n});
    k::gemm_nn(m, n, kk, A.data(), B.data(), C.data());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double s = 0;
            for (int p = 0; p < kk; ++p) s += double(A.d[i * kk + p]) * B.d[p * n + j];
            CHECK(C.d[i * n + j] == doctest::Approx(s).epsilon(1e-5));
        }
}

TEST_CASE("kernels: im2col/col2im round trip on stride 1") {
    // col2im(im2col(x)) counts each pixel once per covering tap
    const int c = 2, h = 6, w = 5;
    Tensor x = random_tensor({c, h, w}, 12);
    const int kh = 3, kw = 3, pad = 1, stride = 1;
    const int oh = k::conv_out_size(h, kh, stride, pad), ow = k::conv_out_size(w, kw, stride, pad);
    Tensor col({c * kh * kw, oh * ow});
    k::serial::im2col(x.data(), c, h, w, kh, kw, stride, pad, col.data());
    Tensor col2({c * kh * kw, oh * ow});
    k::par::im2col(x.data(), c, h, w, kh, kw, stride, pad, col2.data());
    CHECK(bitwise_equal(col, col2));

    Tensor back({c, h, w}), back2({c, h, w});
    k::serial::col2im(col.data(), c, h, w, kh, kw, stride, pad, back.data());
    k::par::col2im(col.data(), c, h, w, kh, kw, stride, pad, back2.data());
    CHECK(bitwise_equal(back, back2));
    // interior pixels are covered by all 9 taps
    CHECK(back.d[(0 * h + 2) * w + 2] == doctest::Approx(9.0f * x.d[(0 * h + 2) * w + 2]).epsilon(1e-5));
}

// central-difference gradient check on a scalar-valued graph builder
template <typename F>
static void check_grads(F build, std::vector<ad::Var> leaves, float tol = 2e-2f) {
    auto loss = build();
    ad::backward(loss);
    std::vector<Tensor> grads;
    for (auto& leaf : leaves) {
        REQUIRE(leaf->grad_ready);
        grads.push_back(leaf->grad);
    }
    for (size_t li = 0; li < leaves.size(); ++li) {
        auto& leaf = leaves[li];
        const Tensor& analytic = grads[li];
        for (int64_t i = 0; i < std::min<int64_t>(leaf->val.numel(), 12); ++i) {
            const float eps = 1e-2f;
            const float orig = leaf->val.d[i];
            leaf->val.d[i] = orig + eps;
            float fp = build()->val.d[0];
            leaf->val.d[i] = orig - eps;
            float fm = build()->val.d[0];
            leaf->val.d[i] = orig;
            const float num = (fp - fm) / (2 * eps);
            const float got = analytic.d[i];
            CHECK(std::fabs(num - got) <= tol * (std::fabs(num) + std::fabs(got) + 1e-2f));
        }
    }
}

TEST_CASE("autodiff: conv2d gradients") {
    Rng r(5);
    auto x = ad::leaf(Tensor::randn({2, 3, 6, 6}, r), true);
    auto w = ad::leaf(Tensor::randn({4, 3, 3, 3}, r, 0.4f), true);
    auto b = ad::leaf(Tensor::randn({4}, r, 0.2f), true);
    auto tgt = Tensor::randn({2, 4, 3, 3}, r);
    auto build = [&] {
        x->clear_grad();
        w->clear_grad();
        b->clear_grad();
        return ad::mse(ad::conv2d(x, w, b, 2, 1), ad::constant(tgt));
    };
    check_grads(build, {x, w, b});
}

TEST_CASE("autodiff: group_norm gradients") {
    Rng r(6);
    auto x = ad::leaf(Tensor::randn({2, 8, 3, 3}, r), true);
    auto ga = ad::leaf(Tensor::randn({8}, r, 0.5f), true);
    auto be = ad::leaf(Tensor::randn({8}, r, 0.5f), true);
    auto tgt = Tensor::randn({2, 8, 3, 3}, r);
    auto build = [&] {
        x->clear_grad();
        ga->clear_grad();
        be->clear_grad();
        return ad::mse(ad::group_norm(x, ga, be, 4), ad::constant(tgt));
    };
    check_grads(build, {x, ga, be});
}

TEST_CASE("autodiff: attention-shaped composite gradients") {
    Rng r(7);
    auto x = ad::leaf(Tensor::randn({2, 4, 3, 3}, r), true);   // [F,C,H,W]
    auto wq = ad::leaf(Tensor::randn({4, 4}, r, 0.5f), true);
    auto wk = ad::leaf(Tensor::randn({4, 4}, r, 0.5f), true);
    auto wv = ad::leaf(Tensor::randn({4, 4}, r, 0.5f), true);
    auto tgt = Tensor::randn({2, 4, 3, 3}, r);
    auto build = [&] {
        x->clear_grad();
        wq->clear_grad();
        wk->clear_grad();
        wv->clear_grad();
        auto tok = ad::permute_fchw_ftc(x);                               // [F,T,C]
        auto flat = ad::reshape(tok, {2 * 9, 4});
        auto q = ad::reshape(ad::linear(flat, wq), {2, 9, 4});
        auto kk = ad::reshape(ad::linear(flat, wk), {2, 9, 4});
        auto v = ad::reshape(ad::linear(flat, wv), {2, 9, 4});
        auto att = ad::softmax_rows(ad::scale(ad::bmm_nt(q, kk), 0.5f));
        auto o = ad::permute_ftc_fchw(ad::bmm(att, v), 3, 3);
        return ad::mse(o, ad::constant(tgt));
    };
    check_grads(build, {x, wq, wk, wv});
}

TEST_CASE("autodiff: silu/groupy ops and masked softmax zeros") {
    Rng r(8);
    auto x = ad::leaf(Tensor::randn({1, 3, 4}, r), true);
    Tensor mask({3, 4});
    const float ninf = -std::numeric_limits<float>::infinity();
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 4; ++j) mask.d[i * 4 + j] = j > i ? ninf : 0.0f;
    auto y = ad::softmax_rows(x, &mask);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 4; ++j) {
            if (j > i) CHECK(y->val.d[i * 4 + j] == 0.0f);
        }
    auto loss = ad::mean_all(ad::silu(y));
    ad::backward(loss);
    CHECK(x->grad_ready);
}

TEST_CASE("autodiff: NoGrad records nothing") {
    Rng r(9);
    auto x = ad::leaf(Tensor::randn({4}, r), true);
    ad::Var y;
    {
        ad::NoGrad ng;
        y = ad::scale(x, 2.0f);
    }
    CHECK(!y->needs_grad);
    CHECK(y->parents.empty());
}

TEST_CASE("autodiff: adamw determinism") {
    auto run = [] {
        Rng r(11);
        ad::ParamStore store;
        auto w = store.add("w", Tensor::randn({8}, r));
        ad::AdamW opt;
        opt.lr = 1e-2f;
        for (int i = 0; i < 20; ++i) {
            store.clear_grads();
            auto loss = ad::mse(ad::scale(w, 1.0f), ad::constant(Tensor::full({8}, 0.5f)));
            ad::backward(loss);
            opt.step(store);
        }
        return w->val;
    };
    CHECK(bitwise_equal(run(), run()));
}
