// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <tuple>
#include <vector>

#include "occflow/core/tensor.h"

// Serial reference implementations. Linked into the tests and the benchmark
// only; the production library must never call into this namespace, so that
// reference-vs-kernel comparisons stay meaningful.
namespace occflow::ref {

// x [cin,h,w], wgt [cout, cin/groups, kh, kw], bias [cout] or empty.
Tensor conv2d_direct(const Tensor& x, const Tensor& wgt, const Tensor& bias, int sh, int sw,
                     int ph, int pw, int dh, int dw, int groups);

// x [cin,t,h,w], wgt [cout, cin/groups, kt, kh, kw].
Tensor conv3d_direct(const Tensor& x, const Tensor& wgt, const Tensor& bias, int st, int sh,
                     int sw, int pt, int ph, int pw, int dt, int dh, int dw, int groups);

// Transposed conv; x [cin,t,h,w], wgt [cin, cout/groups, kt, kh, kw].
Tensor tconv3d_direct(const Tensor& x, const Tensor& wgt, const Tensor& bias, int st, int sh,
                      int sw, int pt, int ph, int pw, int dt, int dh, int dw, int groups);

// src [c,h,w], flow [2,h,w].
Tensor warp_direct(const Tensor& src, const Tensor& flow);

// Coordinate-list sparse spatio-temporal grid used as the oracle for the
// dense masked realization of the sparse encoder.
struct SparseGrid {
  int t = 0, h = 0, w = 0, channels = 0;
  std::map<std::tuple<int, int, int>, std::vector<real>> sites;  // (t,y,x) -> feature

  Tensor densify() const;  // [channels, t, h, w]
  Tensor mask() const;     // [1, t, h, w], 1 at active sites
};

// Submanifold conv: outputs exactly at the input's active sites.
// wgt [cout, cin, kt, kh, kw]; stride 1, symmetric padding k/2 assumed.
SparseGrid sparse_submanifold_conv(const SparseGrid& in, const Tensor& wgt, const Tensor& bias,
                                   bool relu);

// Regular strided sparse conv: an output site is active iff any input site
// lies in its receptive field. Pads are symmetric; callers needing the
// right-pad-one-frame rule extend the grid's t before calling.
SparseGrid sparse_strided_conv(const SparseGrid& in, const Tensor& wgt, const Tensor& bias,
                               int st, int sh, int sw, int pt, int ph, int pw, bool relu);

// Exhaustive-threshold PR-AUC: thresholds at every distinct predicted value
// (rank statistic), same precision/recall conventions as the production
// metric. pred/gt are flat arrays of equal length, gt binary.
real pr_auc_exhaustive(const std::vector<real>& pred, const std::vector<real>& gt);

// Plain per-cell loops.
real soft_iou_loop(const std::vector<real>& pred, const std::vector<real>& gt);
real epe_loop(const std::vector<real>& pred_flow_x, const std::vector<real>& pred_flow_y,
              const std::vector<real>& gt_flow_x, const std::vector<real>& gt_flow_y,
              const std::vector<real>& gt_occ);

}  // namespace occflow::ref
