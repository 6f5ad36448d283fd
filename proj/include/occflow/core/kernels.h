// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

#include "occflow/core/tensor.h"

// Performance kernels: BLAS-backed GEMM plus OpenMP loops. Serial reference
// versions used by the tests and the benchmark live in occflow::ref
// (core/reference.h), which must stay independent of this namespace.
namespace occflow::kern {

// Row-major C[m,n] = alpha * op(A) * op(B) + beta * C.
void gemm(bool trans_a, bool trans_b, int m, int n, int k, real alpha, const real* a, int lda,
          const real* b, int ldb, real beta, real* c, int ldc);

struct Conv2dGeom {
  int cin = 0, h = 0, w = 0;
  int cout = 0, kh = 1, kw = 1;
  int sh = 1, sw = 1;
  int ph = 0, pw = 0;
  int dh = 1, dw = 1;
  int groups = 1;
  int hout() const { return (h + 2 * ph - dh * (kh - 1) - 1) / sh + 1; }
  int wout() const { return (w + 2 * pw - dw * (kw - 1) - 1) / sw + 1; }
};

struct Conv3dGeom {
  int cin = 0, t = 0, h = 0, w = 0;
  int cout = 0, kt = 1, kh = 1, kw = 1;
  int st = 1, sh = 1, sw = 1;
  int pt = 0, ph = 0, pw = 0;
  int dt = 1, dh = 1, dw = 1;
  int groups = 1;
  int tout() const { return (t + 2 * pt - dt * (kt - 1) - 1) / st + 1; }
  int hout() const { return (h + 2 * ph - dh * (kh - 1) - 1) / sh + 1; }
  int wout() const { return (w + 2 * pw - dw * (kw - 1) - 1) / sw + 1; }
};

// col has shape [cin*kh*kw, hout*wout]; x has shape [cin, h, w].
void im2col(const real* x, const Conv2dGeom& g, real* col);
void col2im(const real* col, const Conv2dGeom& g, real* x);  // accumulates into x

// col has shape [cin*kt*kh*kw, tout*hout*wout]; x has shape [cin, t, h, w].
void vol2col(const real* x, const Conv3dGeom& g, real* col);
void col2vol(const real* col, const Conv3dGeom& g, real* x);  // accumulates into x

// Deterministic sum: fixed-size blocks accumulated in index order, so the
// result does not depend on the number of threads.
real det_sum(const real* x, int64_t n);
real det_dot(const real* a, const real* b, int64_t n);

// out[c,y,x] = bilinear sample of src[c] at (x + flow[0,y,x], y + flow[1,y,x]);
// samples outside the grid read zero. src, out: [c,h,w]; flow: [2,h,w].
void warp_bilinear(const real* src, const real* flow, real* out, int c, int h, int w);
// Accumulates into dsrc/dflow (either may be null).
void warp_bilinear_grad(const real* src, const real* flow, const real* dout, real* dsrc,
                        real* dflow, int c, int h, int w);

}  // namespace occflow::kern
