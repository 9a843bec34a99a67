#include "pliv/kernels.hpp"

#include <atomic>
#include <cstring>

namespace pliv::kernels {

namespace detail {

// One output row of C = A*B: C[i,:] (+)= sum_p A[i,p] * B[p,:].
// The j-loop vectorizes; the p-loop order is fixed, so the result does not
// depend on how rows are distributed over threads.
inline void gemm_nn_row(int i, int n, int k, const float* A, const float* B, float* C, bool accumulate) {
    float* c = C + int64_t(i) * n;
    if (!accumulate)
        for (int j = 0; j < n; ++j) c[j] = 0.0f;
    const float* a = A + int64_t(i) * k;
    for (int p = 0; p < k; ++p) {
        const float av = a[p];
        const float* b = B + int64_t(p) * n;
        for (int j = 0; j < n; ++j) c[j] += av * b[j];
    }
}

inline void gemm_tn_row(int i, int m, int n, int k, const float* A, const float* B, float* C, bool accumulate) {
    float* c = C + int64_t(i) * n;
    if (!accumulate)
        for (int j = 0; j < n; ++j) c[j] = 0.0f;
    for (int p = 0; p < k; ++p) {
        const float av = A[int64_t(p) * m + i];
        const float* b = B + int64_t(p) * n;
        for (int j = 0; j < n; ++j) c[j] += av * b[j];
    }
}

// 16-lane dot product with a fixed reduction tree.
inline float dot16(const float* a, const float* b, int k) {
    float lane[16] = {0};
    int p = 0;
    for (; p + 16 <= k; p += 16)
        for (int j = 0; j < 16; ++j) lane[j] += a[p + j] * b[p + j];
    for (int j = 0; p + j < k; ++j) lane[j] += a[p + j] * b[p + j];
    float s = 0.0f;
    for (int step = 8; step >= 1; step /= 2)
        for (int j = 0; j < step; ++j) lane[j] += lane[j + step];
    s = lane[0];
    return s;
}

inline void gemm_nt_row(int i, int n, int k, const float* A, const float* B, float* C, bool accumulate) {
    float* c = C + int64_t(i) * n;
    const float* a = A + int64_t(i) * k;
    for (int j = 0; j < n; ++j) {
        float v = dot16(a, B + int64_t(j) * k, k);
        c[j] = accumulate ? c[j] + v : v;
    }
}

inline void im2col_row(int r, int h, int w, int kh, int kw, int stride, int pad, const float* in, float* col) {
    const int ow = conv_out_size(w, kw, stride, pad);
    const int oh = conv_out_size(h, kh, stride, pad);
    const int kx = r % kw;
    const int ky = (r / kw) % kh;
    const int c = r / (kw * kh);
    const float* src = in + int64_t(c) * h * w;
    float* dst = col + int64_t(r) * oh * ow;
    for (int oy = 0; oy < oh; ++oy) {
        const int iy = oy * stride + ky - pad;
        if (iy < 0 || iy >= h) {
            for (int ox = 0; ox < ow; ++ox) dst[oy * ow + ox] = 0.0f;
            continue;
        }
        for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride + kx - pad;
            dst[oy * ow + ox] = (ix >= 0 && ix < w) ? src[iy * w + ix] : 0.0f;
        }
    }
}

// Scatter one channel of col back into the input gradient. Channels are
// disjoint, and within a channel the tap order is fixed.
inline void col2im_channel(int c, int h, int w, int kh, int kw, int stride, int pad, const float* col, float* in) {
    const int ow = conv_out_size(w, kw, stride, pad);
    const int oh = conv_out_size(h, kh, stride, pad);
    float* dst = in + int64_t(c) * h * w;
    std::memset(dst, 0, sizeof(float) * size_t(h) * size_t(w));
    for (int ky = 0; ky < kh; ++ky) {
        for (int kx = 0; kx < kw; ++kx) {
            const int r = (c * kh + ky) * kw + kx;
            const float* src = col + int64_t(r) * oh * ow;
            for (int oy = 0; oy < oh; ++oy) {
                const int iy = oy * stride + ky - pad;
                if (iy < 0 || iy >= h) continue;
                for (int ox = 0; ox < ow; ++ox) {
                    const int ix = ox * stride + kx - pad;
                    if (ix >= 0 && ix < w) dst[iy * w + ix] += src[oy * ow + ox];
                }
            }
        }
    }
}

}  // namespace detail

namespace serial {

void gemm_nn(int m, int n, int k, const float* A, const float* B, float* C, bool accumulate) {
    for (int i = 0; i < m; ++i) detail::gemm_nn_row(i, n, k, A, B, C, accumulate);
}
void gemm_tn(int m, int n, int k, const float* A, const float* B, float* C, bool accumulate) {
    for (int i = 0; i < m; ++i) detail::gemm_tn_row(i, m, n, k, A, B, C, accumulate);
}
void gemm_nt(int m, int n, int k, const float* A, const float* B, float* C, bool accumulate) {
    for (int i = 0; i < m; ++i) detail::gemm_nt_row(i, n, k, A, B, C, accumulate);
}
void im2col(const float* in, int c, int h, int w, int kh, int kw, int stride, int pad, float* col) {
    for (int r = 0; r < c * kh * kw; ++r) detail::im2col_row(r, h, w, kh, kw, stride, pad, in, col);
}
void col2im(const float* col, int c, int h, int w, int kh, int kw, int stride, int pad, float* in) {
    for (int ch = 0; ch < c; ++ch) detail::col2im_channel(ch, h, w, kh, kw, stride, pad, col, in);
}

}  // namespace serial

namespace par {

void gemm_nn(int m, int n, int k, const float* A, const float* B, float* C, bool accumulate) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) detail::gemm_nn_row(i, n, k, A, B, C, accumulate);
}
void gemm_tn(int m, int n, int k, const float* A, const float* B, float* C, bool accumulate) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) detail::gemm_tn_row(i, m, n, k, A, B, C, accumulate);
}
void gemm_nt(int m, int n, int k, const float* A, const float* B, float* C, bool accumulate) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) detail::gemm_nt_row(i, n, k, A, B, C, accumulate);
}
void im2col(const float* in, int c, int h, int w, int kh, int kw, int stride, int pad, float* col) {
#pragma omp parallel for schedule(static)
    for (int r = 0; r < c * kh * kw; ++r) detail::im2col_row(r, h, w, kh, kw, stride, pad, in, col);
}
void col2im(const float* col, int c, int h, int w, int kh, int kw, int stride, int pad, float* in) {
#pragma omp parallel for schedule(static)
    for (int ch = 0; ch < c; ++ch) detail::col2im_channel(ch, h, w, kh, kw, stride, pad, col, in);
}

}  // namespace par

static std::atomic<bool> g_force_serial{false};

void set_force_serial(bool v) { g_force_serial.store(v); }
bool force_serial() { return g_force_serial.load(); }

// Fork overhead on this machine is ~2us; anything above ~64k flops wins.
static constexpr int64_t kParThreshold = 1 << 15;

void gemm_nn(int m, int n, int k, const float* A, const float* B, float* C, bool accumulate) {
    if (!force_serial() && int64_t(m) * n * k >= kParThreshold && m > 1)
        par::gemm_nn(m, n, k, A, B, C, accumulate);
    else
        serial::gemm_nn(m, n, k, A, B, C, accumulate);
}
void gemm_tn(int m, int n, int k, const float* A, const float* B, float* C, bool accumulate) {
    if (!force_serial() && int64_t(m) * n * k >= kParThreshold && m > 1)
        par::gemm_tn(m, n, k, A, B, C, accumulate);
    else
        serial::gemm_tn(m, n, k, A, B, C, accumulate);
}
void gemm_nt(int m, int n, int k, const float* A, const float* B, float* C, bool accumulate) {
    if (!force_serial() && int64_t(m) * n * k >= kParThreshold && m > 1)
        par::gemm_nt(m, n, k, A, B, C, accumulate);
    else
        serial::gemm_nt(m, n, k, A, B, C, accumulate);
}
void im2col(const float* in, int c, int h, int w, int kh, int kw, int stride, int pad, float* col) {
    if (!force_serial() && int64_t(c) * kh * kw > 4)
        par::im2col(in, c, h, w, kh, kw, stride, pad, col);
    else
        serial::im2col(in, c, h, w, kh, kw, stride, pad, col);
}
void col2im(const float* col, int c, int h, int w, int kh, int kw, int stride, int pad, float* in) {
    if (!force_serial() && c > 1)
        par::col2im(col, c, h, w, kh, kw, stride, pad, in);
    else
        serial::col2im(col, c, h, w, kh, kw, stride, pad, in);
}

}  // namespace pliv::kernels
