// SPDX-License-Identifier: Apache-2.0
#include "occflow/core/kernels.h"

#include <cblas.h>

#include <cstring>

namespace occflow::kern {

void gemm(bool trans_a, bool trans_b, int m, int n, int k, real alpha, const real* a, int lda,
          const real* b, int ldb, real beta, real* c, int ldc) {
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

void im2col(const real* x, const Conv2dGeom& g, real* col) {
  const int ho = g.hout(), wo = g.wout();
  const int64_t l = static_cast<int64_t>(ho) * wo;
#pragma omp parallel for schedule(static)
  for (int row = 0; row < g.cin * g.kh * g.kw; ++row) {
    const int c = row / (g.kh * g.kw);
    const int ky = (row / g.kw) % g.kh;
    const int kx = row % g.kw;
    real* dst = col + static_cast<int64_t>(row) * l;
    const real* src = x + static_cast<int64_t>(c) * g.h * g.w;
    for (int oy = 0; oy < ho; ++oy) {
      const int iy = oy * g.sh - g.ph + ky * g.dh;
      if (iy < 0 || iy >= g.h) {
        std::memset(dst + static_cast<int64_t>(oy) * wo, 0, sizeof(real) * wo);
        continue;
      }
      for (int ox = 0; ox < wo; ++ox) {
        const int ix = ox * g.sw - g.pw + kx * g.dw;
        dst[static_cast<int64_t>(oy) * wo + ox] =
            (ix >= 0 && ix < g.w) ? src[static_cast<int64_t>(iy) * g.w + ix] : real(0);
      }
    }
  }
}

void col2im(const real* col, const Conv2dGeom& g, real* x) {
  const int ho = g.hout(), wo = g.wout();
  const int64_t l = static_cast<int64_t>(ho) * wo;
  // Parallel over channels: every (c,ky,kx) row with the same c writes the
  // same image plane, so the channel is the safe partition.
#pragma omp parallel for schedule(static)
  for (int c = 0; c < g.cin; ++c) {
    real* dst = x + static_cast<int64_t>(c) * g.h * g.w;
    for (int ky = 0; ky < g.kh; ++ky) {
      for (int kx = 0; kx < g.kw; ++kx) {
        const int row = (c * g.kh + ky) * g.kw + kx;
        const real* src = col + static_cast<int64_t>(row) * l;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * g.sh - g.ph + ky * g.dh;
          if (iy < 0 || iy >= g.h) continue;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * g.sw - g.pw + kx * g.dw;
            if (ix >= 0 && ix < g.w) dst[static_cast<int64_t>(iy) * g.w + ix] += src[static_cast<int64_t>(oy) * wo + ox];
          }
        }
      }
    }
  }
}

void vol2col(const real* x, const Conv3dGeom& g, real* col) {
  const int to = g.tout(), ho = g.hout(), wo = g.wout();
  const int64_t l = static_cast<int64_t>(to) * ho * wo;
  const int krows = g.kt * g.kh * g.kw;
#pragma omp parallel for schedule(static)
  for (int row = 0; row < g.cin * krows; ++row) {
    const int c = row / krows;
    const int kr = row % krows;
    const int kt = kr / (g.kh * g.kw);
    const int ky = (kr / g.kw) % g.kh;
    const int kx = kr % g.kw;
    real* dst = col + static_cast<int64_t>(row) * l;
    const real* src = x + static_cast<int64_t>(c) * g.t * g.h * g.w;
    int64_t o = 0;
    for (int ot = 0; ot < to; ++ot) {
      const int it = ot * g.st - g.pt + kt * g.dt;
      for (int oy = 0; oy < ho; ++oy) {
        const int iy = oy * g.sh - g.ph + ky * g.dh;
        if (it < 0 || it >= g.t || iy < 0 || iy >= g.h) {
          std::memset(dst + o, 0, sizeof(real) * wo);
          o += wo;
          continue;
        }
        const real* plane = src + (static_cast<int64_t>(it) * g.h + iy) * g.w;
        for (int ox = 0; ox < wo; ++ox, ++o) {
          const int ix = ox * g.sw - g.pw + kx * g.dw;
          dst[o] = (ix >= 0 && ix < g.w) ? plane[ix] : real(0);
        }
      }
    }
  }
}

void col2vol(const real* col, const Conv3dGeom& g, real* x) {
  const int to = g.tout(), ho = g.hout(), wo = g.wout();
  const int64_t l = static_cast<int64_t>(to) * ho * wo;
  const int krows = g.kt * g.kh * g.kw;
#pragma omp parallel for schedule(static)
  for (int c = 0; c < g.cin; ++c) {
    real* dst = x + static_cast<int64_t>(c) * g.t * g.h * g.w;
    for (int kr = 0; kr < krows; ++kr) {
      const int kt = kr / (g.kh * g.kw);
      const int ky = (kr / g.kw) % g.kh;
      const int kx = kr % g.kw;
      const real* src = col + (static_cast<int64_t>(c) * krows + kr) * l;
      int64_t o = 0;
      for (int ot = 0; ot < to; ++ot) {
        const int it = ot * g.st - g.pt + kt * g.dt;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * g.sh - g.ph + ky * g.dh;
          if (it < 0 || it >= g.t || iy < 0 || iy >= g.h) {
            o += wo;
            continue;
          }
          real* plane = dst + (static_cast<int64_t>(it) * g.h + iy) * g.w;
          for (int ox = 0; ox < wo; ++ox, ++o) {
            const int ix = ox * g.sw - g.pw + kx * g.dw;
            if (ix >= 0 && ix < g.w) plane[ix] += src[o];
          }
        }
      }
    }
  }
}

namespace {
constexpr int64_t kSumBlock = 4096;
}

real det_sum(const real* x, int64_t n) {
  const int64_t nblocks = (n + kSumBlock - 1) / kSumBlock;
  std::vector<real> partial(static_cast<size_t>(nblocks), real(0));
#pragma omp parallel for schedule(static)
  for (int64_t b = 0; b < nblocks; ++b) {
    real s = 0;
    const int64_t end = std::min(n, (b + 1) * kSumBlock);
    for (int64_t i = b * kSumBlock; i < end; ++i) s += x[i];
    partial[static_cast<size_t>(b)] = s;
  }
  real total = 0;
  for (real s : partial) total += s;
  return total;
}

real det_dot(const real* a, const real* b, int64_t n) {
  const int64_t nblocks = (n + kSumBlock - 1) / kSumBlock;
  std::vector<real> partial(static_cast<size_t>(nblocks), real(0));
#pragma omp parallel for schedule(static)
  for (int64_t blk = 0; blk < nblocks; ++blk) {
    real s = 0;
    const int64_t end = std::min(n, (blk + 1) * kSumBlock);
    for (int64_t i = blk * kSumBlock; i < end; ++i) s += a[i] * b[i];
    partial[static_cast<size_t>(blk)] = s;
  }
  real total = 0;
  for (real s : partial) total += s;
  return total;
}

void warp_bilinear(const real* src, const real* flow, real* out, int c, int h, int w) {
  const int64_t plane = static_cast<int64_t>(h) * w;
#pragma omp parallel for schedule(static)
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int64_t i = static_cast<int64_t>(y) * w + x;
      const real sx = x + flow[i];
      const real sy = y + flow[plane + i];
      const int x0 = static_cast<int>(std::floor(sx));
      const int y0 = static_cast<int>(std::floor(sy));
      const real ax = sx - x0, ay = sy - y0;
      for (int ch = 0; ch < c; ++ch) {
        const real* s = src + ch * plane;
        auto tap = [&](int yy, int xx) -> real {
          return (yy >= 0 && yy < h && xx >= 0 && xx < w) ? s[static_cast<int64_t>(yy) * w + xx]
                                                         : real(0);
        };
        out[ch * plane + i] = (1 - ay) * ((1 - ax) * tap(y0, x0) + ax * tap(y0, x0 + 1)) +
                              ay * ((1 - ax) * tap(y0 + 1, x0) + ax * tap(y0 + 1, x0 + 1));
      }
    }
  }
}

void warp_bilinear_grad(const real* src, const real* flow, const real* dout, real* dsrc,
                        real* dflow, int c, int h, int w) {
  const int64_t plane = static_cast<int64_t>(h) * w;
  // Serial: dsrc scatters across cells, and the tests pin bitwise
  // reproducibility of training traces.
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int64_t i = static_cast<int64_t>(y) * w + x;
      const real sx = x + flow[i];
      const real sy = y + flow[plane + i];
      const int x0 = static_cast<int>(std::floor(sx));
      const int y0 = static_cast<int>(std::floor(sy));
      const real ax = sx - x0, ay = sy - y0;
      real gx = 0, gy = 0;
      for (int ch = 0; ch < c; ++ch) {
        const real* s = src + ch * plane;
        const real go = dout[ch * plane + i];
        if (go == real(0) && !dsrc) continue;
        auto in = [&](int yy, int xx) { return yy >= 0 && yy < h && xx >= 0 && xx < w; };
        auto tap = [&](int yy, int xx) -> real {
          return in(yy, xx) ? s[static_cast<int64_t>(yy) * w + xx] : real(0);
        };
        const real s00 = tap(y0, x0), s01 = tap(y0, x0 + 1);
        const real s10 = tap(y0 + 1, x0), s11 = tap(y0 + 1, x0 + 1);
        gx += go * ((1 - ay) * (s01 - s00) + ay * (s11 - s10));
        gy += go * ((1 - ax) * (s10 - s00) + ax * (s11 - s01));
        if (dsrc) {
          real* d = dsrc + ch * plane;
          if (in(y0, x0)) d[static_cast<int64_t>(y0) * w + x0] += go * (1 - ay) * (1 - ax);
          if (in(y0, x0 + 1)) d[static_cast<int64_t>(y0) * w + x0 + 1] += go * (1 - ay) * ax;
          if (in(y0 + 1, x0)) d[static_cast<int64_t>(y0 + 1) * w + x0] += go * ay * (1 - ax);
          if (in(y0 + 1, x0 + 1)) d[static_cast<int64_t>(y0 + 1) * w + x0 + 1] += go * ay * ax;
        }
      }
      if (dflow) {
        dflow[i] += gx;
        dflow[plane + i] += gy;
      }
    }
  }
}

}  // namespace occflow::kern
