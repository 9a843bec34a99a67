#pragma once

#include <cstdint>

// Dense kernels behind the nets. Every routine has a serial and an OpenMP
// variant that share the same per-row inner kernel, so results are bitwise
// identical between the two and across thread counts: parallel loops only
// ever split independent output rows, never a floating-point reduction.

namespace pliv::kernels {

// C[m,n] = A[m,k] * B[k,n]   (row-major; accumulate adds into C)
namespace serial {
void gemm_nn(int m, int n, int k, const float* A, const float* B, float* C, bool accumulate = false);
// C[m,n] = A^T * B with A stored [k,m]
void gemm_tn(int m, int n, int k, const float* A, const float* B, float* C, bool accumulate = false);
// C[m,n] = A * B^T with B stored [n,k]
void gemm_nt(int m, int n, int k, const float* A, const float* B, float* C, bool accumulate = false);
void im2col(const float* in, int c, int h, int w, int kh, int kw, int stride, int pad, float* col);
void col2im(const float* col, int c, int h, int w, int kh, int kw, int stride, int pad, float* in);
}  // namespace serial

namespace par {
void gemm_nn(int m, int n, int k, const float* A, const float* B, float* C, bool accumulate = false);
void gemm_tn(int m, int n, int k, const float* A, const float* B, float* C, bool accumulate = false);
void gemm_nt(int m, int n, int k, const float* A, const float* B, float* C, bool accumulate = false);
void im2col(const float* in, int c, int h, int w, int kh, int kw, int stride, int pad, float* col);
void col2im(const float* col, int c, int h, int w, int kh, int kw, int stride, int pad, float* in);
}  // namespace par

// Dispatching entry points: pick the OpenMP variant when the job is big
// enough to amortize the fork. force_serial() pins everything to the serial
// path (used by tests and the benchmark baseline).
void set_force_serial(bool v);
bool force_serial();

void gemm_nn(int m, int n, int k, const float* A, const float* B, float* C, bool accumulate = false);
void gemm_tn(int m, int n, int k, const float* A, const float* B, float* C, bool accumulate = false);
void gemm_nt(int m, int n, int k, const float* A, const float* B, float* C, bool accumulate = false);
void im2col(const float* in, int c, int h, int w, int kh, int kw, int stride, int pad, float* col);
void col2im(const float* col, int c, int h, int w, int kh, int kw, int stride, int pad, float* in);

inline int conv_out_size(int in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; }

}  // namespace pliv::kernels
