// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "occflow/core/tensor.h"

// Reverse-mode tape over dense double tensors. One Graph instance per forward
// pass; destroying the Graph frees every activation. Convolution backwards
// recompute their im2col buffers instead of keeping them alive, trading a
// second lowering pass for a flat memory profile.
namespace occflow::ag {

// Learnable tensor. Grad accumulates across samples until the optimizer step
// consumes it. decay=false exempts norm scales and biases from weight decay.
struct Param {
  std::string name;
  Tensor value;
  Tensor grad;
  bool decay = true;

  void init_zeros(std::vector<int> shape) {
    value = Tensor::zeros(shape);
    grad = Tensor::zeros(std::move(shape));
  }
};

struct Node;
using NodeP = std::shared_ptr<Node>;

struct Node {
  Tensor val;
  Tensor grad;  // allocated on first accumulation
  bool needs = false;
  std::function<void(const Tensor&)> back;  // propagates grad wrt val to parents
};

class Graph {
 public:
  explicit Graph(bool training = true) : training_(training) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool training() const { return training_; }

  // Leaf that never receives a gradient.
  NodeP constant(Tensor v);
  // Leaf whose gradient can be read back after backward(); used by tests and
  // by graph inputs that need sensitivities.
  NodeP input(Tensor v, bool needs = true);
  // Leaf bound to a Param. Calls with the same Param return the same node, so
  // weight sharing (e.g. a recurrent cell) accumulates naturally. In eval
  // graphs the node does not require grad.
  NodeP param(Param& p);

  // Reverse sweep from a scalar [1] node; seeds with grad 1.
  void backward(const NodeP& out);
  // Adds every bound param node's grad into Param::grad. Call once per sample
  // after backward(); the caller owns loss scaling.
  void flush_param_grads();

  NodeP make(Tensor val, bool needs, std::function<void(const Tensor&)> back);
  static void accum(const NodeP& n, const Tensor& g);
  static void accum_raw(const NodeP& n, const real* g, int64_t n_elems);

 private:
  std::vector<NodeP> tape_;
  std::unordered_map<const Param*, NodeP> bound_;
  bool training_ = true;
};

// ---- elementwise ----
NodeP add(Graph& g, const NodeP& a, const NodeP& b);
NodeP sub(Graph& g, const NodeP& a, const NodeP& b);
NodeP mul(Graph& g, const NodeP& a, const NodeP& b);
NodeP neg(Graph& g, const NodeP& a);
NodeP smul(Graph& g, const NodeP& a, real s);
NodeP sadd(Graph& g, const NodeP& a, real s);
NodeP relu(Graph& g, const NodeP& a);
NodeP leaky_relu(Graph& g, const NodeP& a, real slope);
NodeP sigmoid(Graph& g, const NodeP& a);
NodeP tanh_(Graph& g, const NodeP& a);
NodeP exp_(Graph& g, const NodeP& a);
NodeP clamp(Graph& g, const NodeP& a, real lo, real hi);
// Elementwise a/b; used for scalar weight normalization.
NodeP div(Graph& g, const NodeP& a, const NodeP& b);
// x scaled by a scalar [1] node.
NodeP scale_by(Graph& g, const NodeP& x, const NodeP& s);

// ---- shape ----
NodeP reshape(Graph& g, const NodeP& a, std::vector<int> shape);
NodeP permute(Graph& g, const NodeP& a, std::vector<int> perm);
NodeP concat(Graph& g, const std::vector<NodeP>& parts, int axis);
NodeP slice(Graph& g, const NodeP& a, int axis, int start, int len);
// b's shape must equal a's shape with axis 0 removed; broadcast add over axis 0.
NodeP add_bcast0(Graph& g, const NodeP& a, const NodeP& b);
// Nearest-neighbor upsample of [C,H,W] by integer factors.
NodeP upsample_nearest(Graph& g, const NodeP& a, int fy, int fx);
// table [R,C] gathered into [idx.size(), C].
NodeP gather_rows(Graph& g, const NodeP& table, std::vector<int> idx);

// ---- linear algebra ----
NodeP matmul(Graph& g, const NodeP& a, const NodeP& b, bool trans_a = false,
             bool trans_b = false);
NodeP bmm(Graph& g, const NodeP& a, const NodeP& b, bool trans_a = false, bool trans_b = false);

// ---- nn primitives ----
struct ConvSpec {
  int sh = 1, sw = 1, ph = 0, pw = 0, dh = 1, dw = 1, groups = 1;
};
struct Conv3Spec {
  int st = 1, sh = 1, sw = 1;
  int pt = 0, ph = 0, pw = 0;
  int dt = 1, dh = 1, dw = 1;
  int groups = 1;
};
// x [cin,h,w], w [cout,cin/g,kh,kw], bias [cout] or null.
NodeP conv2d(Graph& g, const NodeP& x, const NodeP& w, const NodeP& bias, const ConvSpec& sp);
// x [cin,t,h,w], w [cout,cin/g,kt,kh,kw].
NodeP conv3d(Graph& g, const NodeP& x, const NodeP& w, const NodeP& bias, const Conv3Spec& sp);
// x [cin,t,h,w], w [cin,cout/g,kt,kh,kw]; output (t-1)*st-2*pt+dt*(kt-1)+1 etc.
NodeP tconv3d(Graph& g, const NodeP& x, const NodeP& w, const NodeP& bias, const Conv3Spec& sp);
// Normalizes over each group of channels together with all trailing dims.
// x [C,...], gamma/beta [C].
NodeP group_norm(Graph& g, const NodeP& x, const NodeP& gamma, const NodeP& beta, int groups,
                 real eps = 1e-5);
// Normalizes the last dim of [..., C]; gamma/beta [C].
NodeP layer_norm(Graph& g, const NodeP& x, const NodeP& gamma, const NodeP& beta,
                 real eps = 1e-5);
NodeP softmax_lastdim(Graph& g, const NodeP& x);
NodeP maxpool2d(Graph& g, const NodeP& x, int k, int s);
NodeP avgpool2d(Graph& g, const NodeP& x, int kh, int kw, int sh, int sw);
// Dense masked step for sparse 3d stacks: y = conv3d(x) * mask, mask constant.
NodeP mask_mul(Graph& g, const NodeP& x, const Tensor& mask);
// src [C,H,W] sampled at (x,y)+flow; flow [2,H,W], channel 0 = dx, 1 = dy.
NodeP warp(Graph& g, const NodeP& src, const NodeP& flow);

// ---- reductions and losses (all return scalar [1] nodes) ----
NodeP sum_all(Graph& g, const NodeP& x);
NodeP mean_all(Graph& g, const NodeP& x);
// Focal binary cross-entropy, mean over every element. alpha < 0 disables the
// alpha weighting; gamma = 0 recovers plain cross-entropy.
NodeP focal_bce_logits(Graph& g, const NodeP& logits, const Tensor& target, real alpha,
                       real gamma, real eps = 1e-6);
// Same, but the prediction is already a probability (clamped to [eps, 1-eps]).
NodeP focal_bce_probs(Graph& g, const NodeP& probs, const Tensor& target, real alpha, real gamma,
                      real eps = 1e-6);
// Occupancy-weighted smooth-L1 over a flow field: sum_i w_i*(sl1(dx)+sl1(dy))
// normalized by max(sum_i w_i, 1). pred [2,H,W]; gt, weight constants.
NodeP smooth_l1_flow(Graph& g, const NodeP& pred, const Tensor& gt, const Tensor& weight);
// KL(q || p) for diagonal Gaussians, mean over elements.
NodeP kl_diag_gauss(Graph& g, const NodeP& mu_q, const NodeP& logvar_q, const NodeP& mu_p,
                    const NodeP& logvar_p);

}  // namespace occflow::ag
