// SPDX-License-Identifier: Apache-2.0
#include "occflow/core/graph.h"

#include <algorithm>
#include <cmath>

#include "occflow/core/kernels.h"

namespace occflow::ag {

NodeP Graph::make(Tensor val, bool needs, std::function<void(const Tensor&)> back) {
  auto n = std::make_shared<Node>();
  n->val = std::move(val);
  n->needs = needs;
  n->back = std::move(back);
  tape_.push_back(n);
  return n;
}

NodeP Graph::constant(Tensor v) { return make(std::move(v), false, nullptr); }

NodeP Graph::input(Tensor v, bool needs) { return make(std::move(v), needs, nullptr); }

NodeP Graph::param(Param& p) {
  auto it = bound_.find(&p);
  if (it != bound_.end()) return it->second;
  NodeP n = make(p.value, training_, nullptr);
  bound_.emplace(&p, n);
  return n;
}

void Graph::accum(const NodeP& n, const Tensor& g) {
  if (!n->needs) return;
  check_same_shape(n->val, g, "grad accum");
  if (n->grad.empty()) n->grad = Tensor::zeros(n->val.shape());
  real* dst = n->grad.data();
  const real* src = g.data();
  const int64_t m = g.numel();
  for (int64_t i = 0; i < m; ++i) dst[i] += src[i];
}

void Graph::accum_raw(const NodeP& n, const real* g, int64_t n_elems) {
  if (!n->needs) return;
  OCCFLOW_CHECK(n_elems == n->val.numel(), ShapeError, "grad accum size mismatch");
  if (n->grad.empty()) n->grad = Tensor::zeros(n->val.shape());
  real* dst = n->grad.data();
  for (int64_t i = 0; i < n_elems; ++i) dst[i] += g[i];
}

void Graph::backward(const NodeP& out) {
  OCCFLOW_CHECK(out->val.numel() == 1, ShapeError, "backward seed must be scalar");
  OCCFLOW_CHECK(out->needs, NumericalError, "backward from a node with no grad path");
  if (out->grad.empty()) out->grad = Tensor::zeros(out->val.shape());
  out->grad[0] += real(1);
  for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) {
    Node& n = **it;
    if (n.back && n.needs && !n.grad.empty()) n.back(n.grad);
  }
}

void Graph::flush_param_grads() {
  for (auto& [p, n] : bound_) {
    if (n->grad.empty()) continue;
    Param& pm = *const_cast<Param*>(p);
    if (pm.grad.empty()) pm.grad = Tensor::zeros(pm.value.shape());
    real* dst = pm.grad.data();
    const real* src = n->grad.data();
    for (int64_t i = 0; i < n->grad.numel(); ++i) dst[i] += src[i];
  }
}

namespace {

bool req(const NodeP& a) { return a->needs; }
bool req(const NodeP& a, const NodeP& b) { return a->needs || b->needs; }

Tensor map1(const Tensor& a, real (*f)(real)) {
  Tensor out(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = f(a[i]);
  return out;
}

std::vector<int64_t> row_major_strides(const std::vector<int>& shape) {
  std::vector<int64_t> st(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i)
    st[static_cast<size_t>(i)] = st[static_cast<size_t>(i) + 1] * shape[static_cast<size_t>(i) + 1];
  return st;
}

}  // namespace

// ---- elementwise ----

NodeP add(Graph& g, const NodeP& a, const NodeP& b) {
  check_same_shape(a->val, b->val, "add");
  Tensor out(a->val.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a->val[i] + b->val[i];
  return g.make(std::move(out), req(a, b), [a, b](const Tensor& go) {
    Graph::accum(a, go);
    Graph::accum(b, go);
  });
}

NodeP sub(Graph& g, const NodeP& a, const NodeP& b) {
  check_same_shape(a->val, b->val, "sub");
  Tensor out(a->val.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a->val[i] - b->val[i];
  return g.make(std::move(out), req(a, b), [a, b](const Tensor& go) {
    Graph::accum(a, go);
    if (b->needs) {
      Tensor gb(go.shape());
      for (int64_t i = 0; i < go.numel(); ++i) gb[i] = -go[i];
      Graph::accum(b, gb);
    }
  });
}

NodeP mul(Graph& g, const NodeP& a, const NodeP& b) {
  check_same_shape(a->val, b->val, "mul");
  Tensor out(a->val.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a->val[i] * b->val[i];
  return g.make(std::move(out), req(a, b), [a, b](const Tensor& go) {
    if (a->needs) {
      Tensor ga(go.shape());
      for (int64_t i = 0; i < go.numel(); ++i) ga[i] = go[i] * b->val[i];
      Graph::accum(a, ga);
    }
    if (b->needs) {
      Tensor gb(go.shape());
      for (int64_t i = 0; i < go.numel(); ++i) gb[i] = go[i] * a->val[i];
      Graph::accum(b, gb);
    }
  });
}

NodeP neg(Graph& g, const NodeP& a) { return smul(g, a, real(-1)); }

NodeP smul(Graph& g, const NodeP& a, real s) {
  Tensor out(a->val.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a->val[i] * s;
  return g.make(std::move(out), req(a), [a, s](const Tensor& go) {
    if (!a->needs) return;
    Tensor ga(go.shape());
    for (int64_t i = 0; i < go.numel(); ++i) ga[i] = go[i] * s;
    Graph::accum(a, ga);
  });
}

NodeP sadd(Graph& g, const NodeP& a, real s) {
  Tensor out(a->val.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a->val[i] + s;
  return g.make(std::move(out), req(a), [a](const Tensor& go) { Graph::accum(a, go); });
}

NodeP relu(Graph& g, const NodeP& a) {
  Tensor out(a->val.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a->val[i] > 0 ? a->val[i] : 0;
  return g.make(std::move(out), req(a), [a](const Tensor& go) {
    if (!a->needs) return;
    Tensor ga(go.shape());
    for (int64_t i = 0; i < go.numel(); ++i) ga[i] = a->val[i] > 0 ? go[i] : 0;
    Graph::accum(a, ga);
  });
}

NodeP leaky_relu(Graph& g, const NodeP& a, real slope) {
  Tensor out(a->val.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a->val[i] > 0 ? a->val[i] : slope * a->val[i];
  return g.make(std::move(out), req(a), [a, slope](const Tensor& go) {
    if (!a->needs) return;
    Tensor ga(go.shape());
    for (int64_t i = 0; i < go.numel(); ++i) ga[i] = a->val[i] > 0 ? go[i] : slope * go[i];
    Graph::accum(a, ga);
  });
}

namespace {
real sigmoid_stable(real x) {
  if (x >= 0) return 1 / (1 + std::exp(-x));
  const real e = std::exp(x);
  return e / (1 + e);
}
}  // namespace

NodeP sigmoid(Graph& g, const NodeP& a) {
  Tensor out = map1(a->val, sigmoid_stable);
  auto n = g.make(out, req(a), nullptr);
  NodeP self = n;
  n->back = [a, self](const Tensor& go) {
    if (!a->needs) return;
    Tensor ga(go.shape());
    for (int64_t i = 0; i < go.numel(); ++i) {
      const real y = self->val[i];
      ga[i] = go[i] * y * (1 - y);
    }
    Graph::accum(a, ga);
  };
  return n;
}

NodeP tanh_(Graph& g, const NodeP& a) {
  Tensor out = map1(a->val, [](real x) { return std::tanh(x); });
  auto n = g.make(out, req(a), nullptr);
  NodeP self = n;
  n->back = [a, self](const Tensor& go) {
    if (!a->needs) return;
    Tensor ga(go.shape());
    for (int64_t i = 0; i < go.numel(); ++i) {
      const real y = self->val[i];
      ga[i] = go[i] * (1 - y * y);
    }
    Graph::accum(a, ga);
  };
  return n;
}

NodeP exp_(Graph& g, const NodeP& a) {
  Tensor out = map1(a->val, [](real x) { return std::exp(x); });
  auto n = g.make(out, req(a), nullptr);
  NodeP self = n;
  n->back = [a, self](const Tensor& go) {
    if (!a->needs) return;
    Tensor ga(go.shape());
    for (int64_t i = 0; i < go.numel(); ++i) ga[i] = go[i] * self->val[i];
    Graph::accum(a, ga);
  };
  return n;
}

NodeP clamp(Graph& g, const NodeP& a, real lo, real hi) {
  Tensor out(a->val.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::min(std::max(a->val[i], lo), hi);
  return g.make(std::move(out), req(a), [a, lo, hi](const Tensor& go) {
    if (!a->needs) return;
    Tensor ga(go.shape());
    for (int64_t i = 0; i < go.numel(); ++i)
      ga[i] = (a->val[i] > lo && a->val[i] < hi) ? go[i] : 0;
    Graph::accum(a, ga);
  });
}

NodeP div(Graph& g, const NodeP& a, const NodeP& b) {
  check_same_shape(a->val, b->val, "div");
  Tensor out(a->val.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a->val[i] / b->val[i];
  return g.make(std::move(out), req(a, b), [a, b](const Tensor& go) {
    if (a->needs) {
      Tensor ga(go.shape());
      for (int64_t i = 0; i < go.numel(); ++i) ga[i] = go[i] / b->val[i];
      Graph::accum(a, ga);
    }
    if (b->needs) {
      Tensor gb(go.shape());
      for (int64_t i = 0; i < go.numel(); ++i)
        gb[i] = -go[i] * a->val[i] / (b->val[i] * b->val[i]);
      Graph::accum(b, gb);
    }
  });
}

NodeP scale_by(Graph& g, const NodeP& x, const NodeP& s) {
  OCCFLOW_CHECK(s->val.numel() == 1, ShapeError, "scale_by expects scalar node");
  const real sv = s->val[0];
  Tensor out(x->val.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = x->val[i] * sv;
  return g.make(std::move(out), req(x, s), [x, s, sv](const Tensor& go) {
    if (x->needs) {
      Tensor gx(go.shape());
      for (int64_t i = 0; i < go.numel(); ++i) gx[i] = go[i] * sv;
      Graph::accum(x, gx);
    }
    if (s->needs) {
      real acc = kern::det_dot(go.data(), x->val.data(), go.numel());
      Graph::accum(s, Tensor::scalar(acc));
    }
  });
}

// ---- shape ----

NodeP reshape(Graph& g, const NodeP& a, std::vector<int> shape) {
  Tensor out = a->val.reshaped(shape);
  return g.make(std::move(out), req(a), [a](const Tensor& go) {
    if (!a->needs) return;
    Graph::accum_raw(a, go.data(), go.numel());
  });
}

NodeP permute(Graph& g, const NodeP& a, std::vector<int> perm) {
  const auto& in_shape = a->val.shape();
  const int nd = a->val.ndim();
  OCCFLOW_CHECK(static_cast<int>(perm.size()) == nd, ShapeError, "permute rank mismatch");
  std::vector<int> out_shape(perm.size());
  for (int d = 0; d < nd; ++d) out_shape[static_cast<size_t>(d)] = in_shape[static_cast<size_t>(perm[static_cast<size_t>(d)])];
  const auto in_st = row_major_strides(in_shape);
  const auto out_st = row_major_strides(out_shape);
  // in_of_out[d]: stride in the input for out dim d.
  std::vector<int64_t> in_of_out(perm.size());
  for (int d = 0; d < nd; ++d) in_of_out[static_cast<size_t>(d)] = in_st[static_cast<size_t>(perm[static_cast<size_t>(d)])];
  const int64_t n = a->val.numel();
  Tensor out(out_shape);
  {
    const real* src = a->val.data();
    real* dst = out.data();
    for (int64_t o = 0; o < n; ++o) {
      int64_t rem = o, src_off = 0;
      for (int d = 0; d < nd; ++d) {
        const int64_t idx = rem / out_st[static_cast<size_t>(d)];
        rem -= idx * out_st[static_cast<size_t>(d)];
        src_off += idx * in_of_out[static_cast<size_t>(d)];
      }
      dst[o] = src[src_off];
    }
  }
  return g.make(std::move(out), req(a),
                [a, out_st, in_of_out, nd, n](const Tensor& go) {
                  if (!a->needs) return;
                  Tensor ga = Tensor::zeros(a->val.shape());
                  real* dst = ga.data();
                  const real* src = go.data();
                  for (int64_t o = 0; o < n; ++o) {
                    int64_t rem = o, off = 0;
                    for (int d = 0; d < nd; ++d) {
                      const int64_t idx = rem / out_st[static_cast<size_t>(d)];
                      rem -= idx * out_st[static_cast<size_t>(d)];
                      off += idx * in_of_out[static_cast<size_t>(d)];
                    }
                    dst[off] += src[o];
                  }
                  Graph::accum(a, ga);
                });
}

NodeP concat(Graph& g, const std::vector<NodeP>& parts, int axis) {
  OCCFLOW_CHECK(!parts.empty(), ShapeError, "concat of nothing");
  const auto& s0 = parts[0]->val.shape();
  const int nd = parts[0]->val.ndim();
  OCCFLOW_CHECK(axis >= 0 && axis < nd, ShapeError, "concat axis out of range");
  int axis_total = 0;
  for (const auto& p : parts) {
    OCCFLOW_CHECK(p->val.ndim() == nd, ShapeError, "concat rank mismatch");
    for (int d = 0; d < nd; ++d) {
      if (d == axis) continue;
      OCCFLOW_CHECK(p->val.dim(d) == s0[static_cast<size_t>(d)], ShapeError,
                    "concat dim mismatch at axis " << d);
    }
    axis_total += p->val.dim(axis);
  }
  std::vector<int> out_shape = s0;
  out_shape[static_cast<size_t>(axis)] = axis_total;
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s0[static_cast<size_t>(d)];
  for (int d = axis + 1; d < nd; ++d) inner *= s0[static_cast<size_t>(d)];
  Tensor out(out_shape);
  {
    real* dst = out.data();
    const int64_t out_row = static_cast<int64_t>(axis_total) * inner;
    int64_t off_axis = 0;
    for (const auto& p : parts) {
      const int64_t len = static_cast<int64_t>(p->val.dim(axis)) * inner;
      const real* src = p->val.data();
      for (int64_t o = 0; o < outer; ++o)
        std::copy(src + o * len, src + (o + 1) * len, dst + o * out_row + off_axis);
      off_axis += len;
    }
  }
  auto parts_copy = parts;
  bool any = false;
  for (const auto& p : parts) any = any || p->needs;
  return g.make(std::move(out), any,
                [parts_copy, outer, inner, axis_total, axis](const Tensor& go) {
                  const int64_t out_row = static_cast<int64_t>(axis_total) * inner;
                  int64_t off_axis = 0;
                  for (const auto& p : parts_copy) {
                    const int64_t len = static_cast<int64_t>(p->val.dim(axis)) * inner;
                    if (p->needs) {
                      Tensor gp(p->val.shape());
                      real* dst = gp.data();
                      const real* src = go.data();
                      for (int64_t o = 0; o < outer; ++o)
                        std::copy(src + o * out_row + off_axis, src + o * out_row + off_axis + len,
                                  dst + o * len);
                      Graph::accum(p, gp);
                    }
                    off_axis += len;
                  }
                });
}

NodeP slice(Graph& g, const NodeP& a, int axis, int start, int len) {
  const auto& s = a->val.shape();
  const int nd = a->val.ndim();
  OCCFLOW_CHECK(axis >= 0 && axis < nd, ShapeError, "slice axis out of range");
  OCCFLOW_CHECK(start >= 0 && len > 0 && start + len <= s[static_cast<size_t>(axis)], ShapeError,
                "slice [" << start << "," << start + len << ") out of dim "
                          << s[static_cast<size_t>(axis)]);
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s[static_cast<size_t>(d)];
  for (int d = axis + 1; d < nd; ++d) inner *= s[static_cast<size_t>(d)];
  std::vector<int> out_shape = s;
  out_shape[static_cast<size_t>(axis)] = len;
  Tensor out(out_shape);
  const int64_t in_row = static_cast<int64_t>(s[static_cast<size_t>(axis)]) * inner;
  const int64_t out_row = static_cast<int64_t>(len) * inner;
  {
    const real* src = a->val.data();
    real* dst = out.data();
    for (int64_t o = 0; o < outer; ++o)
      std::copy(src + o * in_row + start * inner, src + o * in_row + start * inner + out_row,
                dst + o * out_row);
  }
  return g.make(std::move(out), req(a),
                [a, outer, inner, start, in_row, out_row](const Tensor& go) {
                  if (!a->needs) return;
                  Tensor ga = Tensor::zeros(a->val.shape());
                  real* dst = ga.data();
                  const real* src = go.data();
                  for (int64_t o = 0; o < outer; ++o)
                    for (int64_t i = 0; i < out_row; ++i)
                      dst[o * in_row + start * inner + i] += src[o * out_row + i];
                  Graph::accum(a, ga);
                });
}

NodeP add_bcast0(Graph& g, const NodeP& a, const NodeP& b) {
  OCCFLOW_CHECK(a->val.ndim() >= 1, ShapeError, "add_bcast0 needs rank >= 1");
  const int64_t reps = a->val.dim(0);
  const int64_t inner = a->val.numel() / reps;
  OCCFLOW_CHECK(b->val.numel() == inner, ShapeError,
                "add_bcast0: " << a->val.shape_str() << " vs " << b->val.shape_str());
  Tensor out(a->val.shape());
  for (int64_t r = 0; r < reps; ++r)
    for (int64_t i = 0; i < inner; ++i) out[r * inner + i] = a->val[r * inner + i] + b->val[i];
  return g.make(std::move(out), req(a, b), [a, b, reps, inner](const Tensor& go) {
    Graph::accum(a, go);
    if (b->needs) {
      Tensor gb = Tensor::zeros(b->val.shape());
      for (int64_t r = 0; r < reps; ++r)
        for (int64_t i = 0; i < inner; ++i) gb[i] += go[r * inner + i];
      Graph::accum(b, gb);
    }
  });
}

NodeP upsample_nearest(Graph& g, const NodeP& a, int fy, int fx) {
  OCCFLOW_CHECK(a->val.ndim() == 3, ShapeError, "upsample expects [C,H,W]");
  const int c = a->val.dim(0), h = a->val.dim(1), w = a->val.dim(2);
  Tensor out({c, h * fy, w * fx});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h * fy; ++y)
      for (int x = 0; x < w * fx; ++x)
        out.at({ch, y, x}) = a->val.at({ch, y / fy, x / fx});
  return g.make(std::move(out), req(a), [a, c, h, w, fy, fx](const Tensor& go) {
    if (!a->needs) return;
    Tensor ga = Tensor::zeros(a->val.shape());
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h * fy; ++y)
        for (int x = 0; x < w * fx; ++x) ga.at({ch, y / fy, x / fx}) += go.at({ch, y, x});
    Graph::accum(a, ga);
  });
}

NodeP gather_rows(Graph& g, const NodeP& table, std::vector<int> idx) {
  OCCFLOW_CHECK(table->val.ndim() == 2, ShapeError, "gather_rows expects [R,C]");
  const int rows = table->val.dim(0), cols = table->val.dim(1);
  Tensor out({static_cast<int>(idx.size()), cols});
  for (size_t i = 0; i < idx.size(); ++i) {
    OCCFLOW_CHECK(idx[i] >= 0 && idx[i] < rows, ShapeError, "gather index out of range");
    std::copy(table->val.data() + static_cast<int64_t>(idx[i]) * cols,
              table->val.data() + static_cast<int64_t>(idx[i] + 1) * cols,
              out.data() + static_cast<int64_t>(i) * cols);
  }
  return g.make(std::move(out), req(table), [table, idx, cols](const Tensor& go) {
    if (!table->needs) return;
    Tensor gt = Tensor::zeros(table->val.shape());
    for (size_t i = 0; i < idx.size(); ++i)
      for (int c = 0; c < cols; ++c)
        gt[static_cast<int64_t>(idx[i]) * cols + c] += go[static_cast<int64_t>(i) * cols + c];
    Graph::accum(table, gt);
  });
}

// ---- linear algebra ----

namespace {

// Shared forward/backward for (batched) matmul with transpose flags.
struct MatDims {
  int b, m, n, k;
  bool ta, tb;
};

void mat_forward(const MatDims& d, const real* a, const real* bm, real* out) {
  const int64_t a_sz = static_cast<int64_t>(d.m) * d.k;
  const int64_t b_sz = static_cast<int64_t>(d.k) * d.n;
  const int64_t o_sz = static_cast<int64_t>(d.m) * d.n;
  for (int i = 0; i < d.b; ++i)
    kern::gemm(d.ta, d.tb, d.m, d.n, d.k, 1.0, a + i * a_sz, d.ta ? d.m : d.k, bm + i * b_sz,
               d.tb ? d.k : d.n, 0.0, out + i * o_sz, d.n);
}

void mat_backward_a(const MatDims& d, const real* go, const real* bm, real* ga) {
  const int64_t a_sz = static_cast<int64_t>(d.m) * d.k;
  const int64_t b_sz = static_cast<int64_t>(d.k) * d.n;
  const int64_t o_sz = static_cast<int64_t>(d.m) * d.n;
  for (int i = 0; i < d.b; ++i) {
    const real* gi = go + i * o_sz;
    const real* bi = bm + i * b_sz;
    real* gai = ga + i * a_sz;
    if (!d.ta) {
      // dA [m,k] = G [m,n] x opB(B)^T
      kern::gemm(false, !d.tb, d.m, d.k, d.n, 1.0, gi, d.n, bi, d.tb ? d.k : d.n, 1.0, gai, d.k);
    } else if (!d.tb) {
      // dA [k,m] = B [k,n] x G^T
      kern::gemm(false, true, d.k, d.m, d.n, 1.0, bi, d.n, gi, d.n, 1.0, gai, d.m);
    } else {
      // dA [k,m] = B^T [k,n] x G^T
      kern::gemm(true, true, d.k, d.m, d.n, 1.0, bi, d.k, gi, d.n, 1.0, gai, d.m);
    }
  }
}

void mat_backward_b(const MatDims& d, const real* go, const real* a, real* gb) {
  const int64_t a_sz = static_cast<int64_t>(d.m) * d.k;
  const int64_t b_sz = static_cast<int64_t>(d.k) * d.n;
  const int64_t o_sz = static_cast<int64_t>(d.m) * d.n;
  for (int i = 0; i < d.b; ++i) {
    const real* gi = go + i * o_sz;
    const real* ai = a + i * a_sz;
    real* gbi = gb + i * b_sz;
    if (!d.tb) {
      // dB [k,n] = opA(A)^T x G
      kern::gemm(!d.ta, false, d.k, d.n, d.m, 1.0, ai, d.ta ? d.m : d.k, gi, d.n, 1.0, gbi, d.n);
    } else if (!d.ta) {
      // dB [n,k] = G^T x A
      kern::gemm(true, false, d.n, d.k, d.m, 1.0, gi, d.n, ai, d.k, 1.0, gbi, d.k);
    } else {
      // dB [n,k] = G^T x A^T
      kern::gemm(true, true, d.n, d.k, d.m, 1.0, gi, d.n, ai, d.m, 1.0, gbi, d.k);
    }
  }
}

NodeP mat_op(Graph& g, const NodeP& a, const NodeP& b, const MatDims& d,
             std::vector<int> out_shape) {
  Tensor out(std::move(out_shape));
  mat_forward(d, a->val.data(), b->val.data(), out.data());
  return g.make(std::move(out), req(a, b), [a, b, d](const Tensor& go) {
    if (a->needs) {
      Tensor ga = Tensor::zeros(a->val.shape());
      mat_backward_a(d, go.data(), b->val.data(), ga.data());
      Graph::accum(a, ga);
    }
    if (b->needs) {
      Tensor gb = Tensor::zeros(b->val.shape());
      mat_backward_b(d, go.data(), a->val.data(), gb.data());
      Graph::accum(b, gb);
    }
  });
}

}  // namespace

NodeP matmul(Graph& g, const NodeP& a, const NodeP& b, bool trans_a, bool trans_b) {
  OCCFLOW_CHECK(a->val.ndim() == 2 && b->val.ndim() == 2, ShapeError, "matmul expects rank 2");
  const int m = trans_a ? a->val.dim(1) : a->val.dim(0);
  const int k = trans_a ? a->val.dim(0) : a->val.dim(1);
  const int kb = trans_b ? b->val.dim(1) : b->val.dim(0);
  const int n = trans_b ? b->val.dim(0) : b->val.dim(1);
  OCCFLOW_CHECK(k == kb, ShapeError,
                "matmul inner dim " << k << " vs " << kb << " (" << a->val.shape_str() << " x "
                                    << b->val.shape_str() << ")");
  return mat_op(g, a, b, {1, m, n, k, trans_a, trans_b}, {m, n});
}

NodeP bmm(Graph& g, const NodeP& a, const NodeP& b, bool trans_a, bool trans_b) {
  OCCFLOW_CHECK(a->val.ndim() == 3 && b->val.ndim() == 3, ShapeError, "bmm expects rank 3");
  OCCFLOW_CHECK(a->val.dim(0) == b->val.dim(0), ShapeError, "bmm batch mismatch");
  const int bt = a->val.dim(0);
  const int m = trans_a ? a->val.dim(2) : a->val.dim(1);
  const int k = trans_a ? a->val.dim(1) : a->val.dim(2);
  const int kb = trans_b ? b->val.dim(2) : b->val.dim(1);
  const int n = trans_b ? b->val.dim(1) : b->val.dim(2);
  OCCFLOW_CHECK(k == kb, ShapeError, "bmm inner dim mismatch");
  return mat_op(g, a, b, {bt, m, n, k, trans_a, trans_b}, {bt, m, n});
}

// ---- convolutions ----

NodeP conv2d(Graph& g, const NodeP& x, const NodeP& w, const NodeP& bias, const ConvSpec& sp) {
  OCCFLOW_CHECK(x->val.ndim() == 3 && w->val.ndim() == 4, ShapeError, "conv2d shapes");
  kern::Conv2dGeom geom;
  geom.cin = x->val.dim(0);
  geom.h = x->val.dim(1);
  geom.w = x->val.dim(2);
  geom.cout = w->val.dim(0);
  geom.kh = w->val.dim(2);
  geom.kw = w->val.dim(3);
  geom.sh = sp.sh;
  geom.sw = sp.sw;
  geom.ph = sp.ph;
  geom.pw = sp.pw;
  geom.dh = sp.dh;
  geom.dw = sp.dw;
  geom.groups = sp.groups;
  OCCFLOW_CHECK(geom.cin % geom.groups == 0 && geom.cout % geom.groups == 0, ShapeError,
                "conv2d groups");
  OCCFLOW_CHECK(w->val.dim(1) == geom.cin / geom.groups, ShapeError,
                "conv2d weight cin " << w->val.dim(1) << " vs " << geom.cin / geom.groups);
  const int ho = geom.hout(), wo = geom.wout();
  OCCFLOW_CHECK(ho > 0 && wo > 0, ShapeError, "conv2d output would be empty");
  const int cing = geom.cin / geom.groups, coutg = geom.cout / geom.groups;
  const int ck = cing * geom.kh * geom.kw;
  const int64_t L = static_cast<int64_t>(ho) * wo;
  Tensor out({geom.cout, ho, wo});
  {
    Tensor col({geom.cin * geom.kh * geom.kw, static_cast<int>(L)});
    kern::im2col(x->val.data(), geom, col.data());
    for (int gi = 0; gi < geom.groups; ++gi)
      kern::gemm(false, false, coutg, static_cast<int>(L), ck, 1.0,
                 w->val.data() + static_cast<int64_t>(gi) * coutg * ck, ck,
                 col.data() + static_cast<int64_t>(gi) * ck * L, static_cast<int>(L), 0.0,
                 out.data() + static_cast<int64_t>(gi) * coutg * L, static_cast<int>(L));
    if (bias) {
      OCCFLOW_CHECK(bias->val.numel() == geom.cout, ShapeError, "conv2d bias size");
      for (int co = 0; co < geom.cout; ++co) {
        const real bv = bias->val[co];
        real* row = out.data() + static_cast<int64_t>(co) * L;
        for (int64_t i = 0; i < L; ++i) row[i] += bv;
      }
    }
  }
  bool needs = req(x, w) || (bias && bias->needs);
  return g.make(std::move(out), needs, [x, w, bias, geom, cing, coutg, ck, L](const Tensor& go) {
    if (w->needs) {
      Tensor col({geom.cin * geom.kh * geom.kw, static_cast<int>(L)});
      kern::im2col(x->val.data(), geom, col.data());
      Tensor gw = Tensor::zeros(w->val.shape());
      for (int gi = 0; gi < geom.groups; ++gi)
        kern::gemm(false, true, coutg, ck, static_cast<int>(L), 1.0,
                   go.data() + static_cast<int64_t>(gi) * coutg * L, static_cast<int>(L),
                   col.data() + static_cast<int64_t>(gi) * ck * L, static_cast<int>(L), 0.0,
                   gw.data() + static_cast<int64_t>(gi) * coutg * ck, ck);
      Graph::accum(w, gw);
    }
    if (x->needs) {
      Tensor dcol({geom.cin * geom.kh * geom.kw, static_cast<int>(L)});
      for (int gi = 0; gi < geom.groups; ++gi)
        kern::gemm(true, false, ck, static_cast<int>(L), coutg, 1.0,
                   w->val.data() + static_cast<int64_t>(gi) * coutg * ck, ck,
                   go.data() + static_cast<int64_t>(gi) * coutg * L, static_cast<int>(L), 0.0,
                   dcol.data() + static_cast<int64_t>(gi) * ck * L, static_cast<int>(L));
      Tensor gx = Tensor::zeros(x->val.shape());
      kern::col2im(dcol.data(), geom, gx.data());
      Graph::accum(x, gx);
    }
    if (bias && bias->needs) {
      Tensor gb = Tensor::zeros(bias->val.shape());
      for (int co = 0; co < geom.cout; ++co)
        gb[co] = kern::det_sum(go.data() + static_cast<int64_t>(co) * L, L);
      Graph::accum(bias, gb);
    }
  });
}

NodeP conv3d(Graph& g, const NodeP& x, const NodeP& w, const NodeP& bias, const Conv3Spec& sp) {
  OCCFLOW_CHECK(x->val.ndim() == 4 && w->val.ndim() == 5, ShapeError, "conv3d shapes");
  kern::Conv3dGeom geom;
  geom.cin = x->val.dim(0);
  geom.t = x->val.dim(1);
  geom.h = x->val.dim(2);
  geom.w = x->val.dim(3);
  geom.cout = w->val.dim(0);
  geom.kt = w->val.dim(2);
  geom.kh = w->val.dim(3);
  geom.kw = w->val.dim(4);
  geom.st = sp.st;
  geom.sh = sp.sh;
  geom.sw = sp.sw;
  geom.pt = sp.pt;
  geom.ph = sp.ph;
  geom.pw = sp.pw;
  geom.dt = sp.dt;
  geom.dh = sp.dh;
  geom.dw = sp.dw;
  geom.groups = sp.groups;
  OCCFLOW_CHECK(geom.cin % geom.groups == 0 && geom.cout % geom.groups == 0, ShapeError,
                "conv3d groups");
  OCCFLOW_CHECK(w->val.dim(1) == geom.cin / geom.groups, ShapeError, "conv3d weight cin");
  const int to = geom.tout(), ho = geom.hout(), wo = geom.wout();
  OCCFLOW_CHECK(to > 0 && ho > 0 && wo > 0, ShapeError, "conv3d output would be empty");
  const int cing = geom.cin / geom.groups, coutg = geom.cout / geom.groups;
  const int ck = cing * geom.kt * geom.kh * geom.kw;
  const int64_t L = static_cast<int64_t>(to) * ho * wo;
  Tensor out({geom.cout, to, ho, wo});
  {
    Tensor col({geom.cin * geom.kt * geom.kh * geom.kw, static_cast<int>(L)});
    kern::vol2col(x->val.data(), geom, col.data());
    for (int gi = 0; gi < geom.groups; ++gi)
      kern::gemm(false, false, coutg, static_cast<int>(L), ck, 1.0,
                 w->val.data() + static_cast<int64_t>(gi) * coutg * ck, ck,
                 col.data() + static_cast<int64_t>(gi) * ck * L, static_cast<int>(L), 0.0,
                 out.data() + static_cast<int64_t>(gi) * coutg * L, static_cast<int>(L));
    if (bias) {
      OCCFLOW_CHECK(bias->val.numel() == geom.cout, ShapeError, "conv3d bias size");
      for (int co = 0; co < geom.cout; ++co) {
        const real bv = bias->val[co];
        real* row = out.data() + static_cast<int64_t>(co) * L;
        for (int64_t i = 0; i < L; ++i) row[i] += bv;
      }
    }
  }
  bool needs = req(x, w) || (bias && bias->needs);
  return g.make(std::move(out), needs, [x, w, bias, geom, cing, coutg, ck, L](const Tensor& go) {
    if (w->needs) {
      Tensor col({geom.cin * geom.kt * geom.kh * geom.kw, static_cast<int>(L)});
      kern::vol2col(x->val.data(), geom, col.data());
      Tensor gw = Tensor::zeros(w->val.shape());
      for (int gi = 0; gi < geom.groups; ++gi)
        kern::gemm(false, true, coutg, ck, static_cast<int>(L), 1.0,
                   go.data() + static_cast<int64_t>(gi) * coutg * L, static_cast<int>(L),
                   col.data() + static_cast<int64_t>(gi) * ck * L, static_cast<int>(L), 0.0,
                   gw.data() + static_cast<int64_t>(gi) * coutg * ck, ck);
      Graph::accum(w, gw);
    }
    if (x->needs) {
      Tensor dcol({geom.cin * geom.kt * geom.kh * geom.kw, static_cast<int>(L)});
      for (int gi = 0; gi < geom.groups; ++gi)
        kern::gemm(true, false, ck, static_cast<int>(L), coutg, 1.0,
                   w->val.data() + static_cast<int64_t>(gi) * coutg * ck, ck,
                   go.data() + static_cast<int64_t>(gi) * coutg * L, static_cast<int>(L), 0.0,
                   dcol.data() + static_cast<int64_t>(gi) * ck * L, static_cast<int>(L));
      Tensor gx = Tensor::zeros(x->val.shape());
      kern::col2vol(dcol.data(), geom, gx.data());
      Graph::accum(x, gx);
    }
    if (bias && bias->needs) {
      Tensor gb = Tensor::zeros(bias->val.shape());
      for (int co = 0; co < geom.cout; ++co)
        gb[co] = kern::det_sum(go.data() + static_cast<int64_t>(co) * L, L);
      Graph::accum(bias, gb);
    }
  });
}

NodeP tconv3d(Graph& g, const NodeP& x, const NodeP& w, const NodeP& bias, const Conv3Spec& sp) {
  OCCFLOW_CHECK(x->val.ndim() == 4 && w->val.ndim() == 5, ShapeError, "tconv3d shapes");
  const int cin = x->val.dim(0), t = x->val.dim(1), h = x->val.dim(2), wd = x->val.dim(3);
  OCCFLOW_CHECK(cin % sp.groups == 0, ShapeError, "tconv3d groups");
  OCCFLOW_CHECK(w->val.dim(0) == cin, ShapeError, "tconv3d weight cin");
  const int coutg = w->val.dim(1);
  const int cout = coutg * sp.groups;
  const int kt = w->val.dim(2), kh = w->val.dim(3), kw = w->val.dim(4);
  const int to = (t - 1) * sp.st - 2 * sp.pt + sp.dt * (kt - 1) + 1;
  const int ho = (h - 1) * sp.sh - 2 * sp.ph + sp.dh * (kh - 1) + 1;
  const int wo = (wd - 1) * sp.sw - 2 * sp.pw + sp.dw * (kw - 1) + 1;
  OCCFLOW_CHECK(to > 0 && ho > 0 && wo > 0, ShapeError, "tconv3d output would be empty");
  // Adjoint conv: input y [cout, to, ho, wo], output x-shaped.
  kern::Conv3dGeom adj;
  adj.cin = cout;
  adj.t = to;
  adj.h = ho;
  adj.w = wo;
  adj.cout = cin;
  adj.kt = kt;
  adj.kh = kh;
  adj.kw = kw;
  adj.st = sp.st;
  adj.sh = sp.sh;
  adj.sw = sp.sw;
  adj.pt = sp.pt;
  adj.ph = sp.ph;
  adj.pw = sp.pw;
  adj.dt = sp.dt;
  adj.dh = sp.dh;
  adj.dw = sp.dw;
  adj.groups = sp.groups;
  OCCFLOW_CHECK(adj.tout() == t && adj.hout() == h && adj.wout() == wd, ShapeError,
                "tconv3d geometry inconsistent");
  const int cing = cin / sp.groups;
  const int ck = coutg * kt * kh * kw;  // adjoint conv's per-group col rows
  const int64_t L = static_cast<int64_t>(t) * h * wd;
  Tensor out({cout, to, ho, wo});
  {
    Tensor col({cout * kt * kh * kw, static_cast<int>(L)});
    for (int gi = 0; gi < sp.groups; ++gi)
      kern::gemm(true, false, ck, static_cast<int>(L), cing, 1.0,
                 w->val.data() + static_cast<int64_t>(gi) * cing * ck, ck,
                 x->val.data() + static_cast<int64_t>(gi) * cing * L, static_cast<int>(L), 0.0,
                 col.data() + static_cast<int64_t>(gi) * ck * L, static_cast<int>(L));
    kern::col2vol(col.data(), adj, out.data());
    if (bias) {
      OCCFLOW_CHECK(bias->val.numel() == cout, ShapeError, "tconv3d bias size");
      const int64_t Lo = static_cast<int64_t>(to) * ho * wo;
      for (int co = 0; co < cout; ++co) {
        const real bv = bias->val[co];
        real* row = out.data() + static_cast<int64_t>(co) * Lo;
        for (int64_t i = 0; i < Lo; ++i) row[i] += bv;
      }
    }
  }
  bool needs = req(x, w) || (bias && bias->needs);
  const int groups = sp.groups;
  return g.make(std::move(out), needs,
                [x, w, bias, adj, groups, cing, ck, L, cout, to, ho, wo](const Tensor& go) {
                  Tensor col({cout * adj.kt * adj.kh * adj.kw, static_cast<int>(L)});
                  kern::vol2col(go.data(), adj, col.data());
                  if (x->needs) {
                    Tensor gx = Tensor::zeros(x->val.shape());
                    for (int gi = 0; gi < groups; ++gi)
                      kern::gemm(false, false, cing, static_cast<int>(L), ck, 1.0,
                                 w->val.data() + static_cast<int64_t>(gi) * cing * ck, ck,
                                 col.data() + static_cast<int64_t>(gi) * ck * L,
                                 static_cast<int>(L), 0.0,
                                 gx.data() + static_cast<int64_t>(gi) * cing * L,
                                 static_cast<int>(L));
                    Graph::accum(x, gx);
                  }
                  if (w->needs) {
                    Tensor gw = Tensor::zeros(w->val.shape());
                    for (int gi = 0; gi < groups; ++gi)
                      kern::gemm(false, true, cing, ck, static_cast<int>(L), 1.0,
                                 x->val.data() + static_cast<int64_t>(gi) * cing * L,
                                 static_cast<int>(L),
                                 col.data() + static_cast<int64_t>(gi) * ck * L,
                                 static_cast<int>(L), 0.0,
                                 gw.data() + static_cast<int64_t>(gi) * cing * ck, ck);
                    Graph::accum(w, gw);
                  }
                  if (bias && bias->needs) {
                    Tensor gb = Tensor::zeros(bias->val.shape());
                    const int64_t Lo = static_cast<int64_t>(to) * ho * wo;
                    for (int co = 0; co < cout; ++co)
                      gb[co] = kern::det_sum(go.data() + static_cast<int64_t>(co) * Lo, Lo);
                    Graph::accum(bias, gb);
                  }
                });
}

// ---- norms, softmax, pooling ----

NodeP group_norm(Graph& g, const NodeP& x, const NodeP& gamma, const NodeP& beta, int groups,
                 real eps) {
  const int c = x->val.dim(0);
  OCCFLOW_CHECK(c % groups == 0, ShapeError, "group_norm channels " << c << " % " << groups);
  OCCFLOW_CHECK(gamma->val.numel() == c && beta->val.numel() == c, ShapeError,
                "group_norm affine size");
  const int64_t spatial = x->val.numel() / c;
  const int cg = c / groups;
  const int64_t m = cg * spatial;
  std::vector<real> mu(static_cast<size_t>(groups)), rstd(static_cast<size_t>(groups));
  Tensor out(x->val.shape());
  for (int gi = 0; gi < groups; ++gi) {
    const real* xs = x->val.data() + static_cast<int64_t>(gi) * m;
    const real s = kern::det_sum(xs, m);
    const real mean = s / static_cast<real>(m);
    real var = 0;
    for (int64_t i = 0; i < m; ++i) {
      const real d = xs[i] - mean;
      var += d * d;
    }
    var /= static_cast<real>(m);
    mu[static_cast<size_t>(gi)] = mean;
    rstd[static_cast<size_t>(gi)] = 1 / std::sqrt(var + eps);
  }
  for (int ch = 0; ch < c; ++ch) {
    const int gi = ch / cg;
    const real ga = gamma->val[ch], be = beta->val[ch];
    const real* xs = x->val.data() + static_cast<int64_t>(ch) * spatial;
    real* os = out.data() + static_cast<int64_t>(ch) * spatial;
    for (int64_t i = 0; i < spatial; ++i)
      os[i] = ga * (xs[i] - mu[static_cast<size_t>(gi)]) * rstd[static_cast<size_t>(gi)] + be;
  }
  bool needs = req(x, gamma) || beta->needs;
  return g.make(std::move(out), needs,
                [x, gamma, beta, groups, cg, spatial, m, mu, rstd, c](const Tensor& go) {
                  if (gamma->needs || beta->needs) {
                    Tensor gga = Tensor::zeros(gamma->val.shape());
                    Tensor gbe = Tensor::zeros(beta->val.shape());
                    for (int ch = 0; ch < c; ++ch) {
                      const int gi = ch / cg;
                      const real* xs = x->val.data() + static_cast<int64_t>(ch) * spatial;
                      const real* gs = go.data() + static_cast<int64_t>(ch) * spatial;
                      real sg = 0, sb = 0;
                      for (int64_t i = 0; i < spatial; ++i) {
                        sg += gs[i] * (xs[i] - mu[static_cast<size_t>(gi)]) *
                              rstd[static_cast<size_t>(gi)];
                        sb += gs[i];
                      }
                      gga[ch] = sg;
                      gbe[ch] = sb;
                    }
                    Graph::accum(gamma, gga);
                    Graph::accum(beta, gbe);
                  }
                  if (x->needs) {
                    Tensor gx(x->val.shape());
                    for (int gi = 0; gi < groups; ++gi) {
                      const real* xs = x->val.data() + static_cast<int64_t>(gi) * m;
                      const real* gs = go.data() + static_cast<int64_t>(gi) * m;
                      real sum_dxh = 0, sum_dxh_xh = 0;
                      for (int64_t i = 0; i < m; ++i) {
                        const int ch = gi * cg + static_cast<int>(i / spatial);
                        const real xh =
                            (xs[i] - mu[static_cast<size_t>(gi)]) * rstd[static_cast<size_t>(gi)];
                        const real dxh = gs[i] * gamma->val[ch];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                      }
                      const real inv_m = 1 / static_cast<real>(m);
                      real* gxs = gx.data() + static_cast<int64_t>(gi) * m;
                      for (int64_t i = 0; i < m; ++i) {
                        const int ch = gi * cg + static_cast<int>(i / spatial);
                        const real xh =
                            (xs[i] - mu[static_cast<size_t>(gi)]) * rstd[static_cast<size_t>(gi)];
                        const real dxh = gs[i] * gamma->val[ch];
                        gxs[i] = rstd[static_cast<size_t>(gi)] *
                                 (dxh - inv_m * sum_dxh - xh * inv_m * sum_dxh_xh);
                      }
                    }
                    Graph::accum(x, gx);
                  }
                });
}

NodeP layer_norm(Graph& g, const NodeP& x, const NodeP& gamma, const NodeP& beta, real eps) {
  const int c = x->val.dim(x->val.ndim() - 1);
  OCCFLOW_CHECK(gamma->val.numel() == c && beta->val.numel() == c, ShapeError,
                "layer_norm affine size");
  const int64_t rows = x->val.numel() / c;
  std::vector<real> mu(static_cast<size_t>(rows)), rstd(static_cast<size_t>(rows));
  Tensor out(x->val.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const real* xs = x->val.data() + r * c;
    real s = 0;
    for (int i = 0; i < c; ++i) s += xs[i];
    const real mean = s / c;
    real var = 0;
    for (int i = 0; i < c; ++i) {
      const real d = xs[i] - mean;
      var += d * d;
    }
    var /= c;
    mu[static_cast<size_t>(r)] = mean;
    rstd[static_cast<size_t>(r)] = 1 / std::sqrt(var + eps);
    real* os = out.data() + r * c;
    for (int i = 0; i < c; ++i)
      os[i] = gamma->val[i] * (xs[i] - mean) * rstd[static_cast<size_t>(r)] + beta->val[i];
  }
  bool needs = req(x, gamma) || beta->needs;
  return g.make(std::move(out), needs, [x, gamma, beta, rows, c, mu, rstd](const Tensor& go) {
    if (gamma->needs || beta->needs) {
      Tensor gga = Tensor::zeros(gamma->val.shape());
      Tensor gbe = Tensor::zeros(beta->val.shape());
      for (int64_t r = 0; r < rows; ++r) {
        const real* xs = x->val.data() + r * c;
        const real* gs = go.data() + r * c;
        for (int i = 0; i < c; ++i) {
          gga[i] += gs[i] * (xs[i] - mu[static_cast<size_t>(r)]) * rstd[static_cast<size_t>(r)];
          gbe[i] += gs[i];
        }
      }
      Graph::accum(gamma, gga);
      Graph::accum(beta, gbe);
    }
    if (x->needs) {
      Tensor gx(x->val.shape());
      for (int64_t r = 0; r < rows; ++r) {
        const real* xs = x->val.data() + r * c;
        const real* gs = go.data() + r * c;
        real sum_dxh = 0, sum_dxh_xh = 0;
        for (int i = 0; i < c; ++i) {
          const real xh = (xs[i] - mu[static_cast<size_t>(r)]) * rstd[static_cast<size_t>(r)];
          const real dxh = gs[i] * gamma->val[i];
          sum_dxh += dxh;
          sum_dxh_xh += dxh * xh;
        }
        real* gxs = gx.data() + r * c;
        const real inv_c = real(1) / c;
        for (int i = 0; i < c; ++i) {
          const real xh = (xs[i] - mu[static_cast<size_t>(r)]) * rstd[static_cast<size_t>(r)];
          const real dxh = gs[i] * gamma->val[i];
          gxs[i] = rstd[static_cast<size_t>(r)] * (dxh - inv_c * sum_dxh - xh * inv_c * sum_dxh_xh);
        }
      }
      Graph::accum(x, gx);
    }
  });
}

NodeP softmax_lastdim(Graph& g, const NodeP& x) {
  const int c = x->val.dim(x->val.ndim() - 1);
  const int64_t rows = x->val.numel() / c;
  Tensor out(x->val.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const real* xs = x->val.data() + r * c;
    real* os = out.data() + r * c;
    real mx = xs[0];
    for (int i = 1; i < c; ++i) mx = std::max(mx, xs[i]);
    real s = 0;
    for (int i = 0; i < c; ++i) {
      os[i] = std::exp(xs[i] - mx);
      s += os[i];
    }
    const real inv = 1 / s;
    for (int i = 0; i < c; ++i) os[i] *= inv;
  }
  auto n = g.make(std::move(out), req(x), nullptr);
  NodeP self = n;
  n->back = [x, self, rows, c](const Tensor& go) {
    if (!x->needs) return;
    Tensor gx(x->val.shape());
    for (int64_t r = 0; r < rows; ++r) {
      const real* ys = self->val.data() + r * c;
      const real* gs = go.data() + r * c;
      real dot = 0;
      for (int i = 0; i < c; ++i) dot += gs[i] * ys[i];
      real* gxs = gx.data() + r * c;
      for (int i = 0; i < c; ++i) gxs[i] = ys[i] * (gs[i] - dot);
    }
    Graph::accum(x, gx);
  };
  return n;
}

NodeP maxpool2d(Graph& g, const NodeP& x, int k, int s) {
  OCCFLOW_CHECK(x->val.ndim() == 3, ShapeError, "maxpool2d expects [C,H,W]");
  const int c = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2);
  OCCFLOW_CHECK((h - k) % s == 0 && (w - k) % s == 0, ShapeError,
                "maxpool2d does not tile " << h << "x" << w << " with k=" << k << " s=" << s);
  const int ho = (h - k) / s + 1, wo = (w - k) / s + 1;
  Tensor out({c, ho, wo});
  std::vector<int64_t> arg(static_cast<size_t>(out.numel()));
  for (int ch = 0; ch < c; ++ch) {
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        real best = -1e300;
        int64_t best_i = 0;
        for (int ky = 0; ky < k; ++ky) {
          for (int kx = 0; kx < k; ++kx) {
            const int64_t idx = x->val.offset({ch, oy * s + ky, ox * s + kx});
            if (x->val[idx] > best) {
              best = x->val[idx];
              best_i = idx;
            }
          }
        }
        const int64_t o = out.offset({ch, oy, ox});
        out[o] = best;
        arg[static_cast<size_t>(o)] = best_i;
      }
    }
  }
  return g.make(std::move(out), req(x), [x, arg](const Tensor& go) {
    if (!x->needs) return;
    Tensor gx = Tensor::zeros(x->val.shape());
    for (int64_t o = 0; o < go.numel(); ++o) gx[arg[static_cast<size_t>(o)]] += go[o];
    Graph::accum(x, gx);
  });
}

NodeP avgpool2d(Graph& g, const NodeP& x, int kh, int kw, int sh, int sw) {
  OCCFLOW_CHECK(x->val.ndim() == 3, ShapeError, "avgpool2d expects [C,H,W]");
  const int c = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2);
  OCCFLOW_CHECK((h - kh) % sh == 0 && (w - kw) % sw == 0, ShapeError, "avgpool2d does not tile");
  const int ho = (h - kh) / sh + 1, wo = (w - kw) / sw + 1;
  const real inv = real(1) / (static_cast<real>(kh) * kw);
  Tensor out({c, ho, wo});
  for (int ch = 0; ch < c; ++ch)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        real s = 0;
        for (int ky = 0; ky < kh; ++ky)
          for (int kx = 0; kx < kw; ++kx) s += x->val.at({ch, oy * sh + ky, ox * sw + kx});
        out.at({ch, oy, ox}) = s * inv;
      }
  return g.make(std::move(out), req(x), [x, c, ho, wo, kh, kw, sh, sw, inv](const Tensor& go) {
    if (!x->needs) return;
    Tensor gx = Tensor::zeros(x->val.shape());
    for (int ch = 0; ch < c; ++ch)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          const real gv = go.at({ch, oy, ox}) * inv;
          for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) gx.at({ch, oy * sh + ky, ox * sw + kx}) += gv;
        }
    Graph::accum(x, gx);
  });
}

NodeP mask_mul(Graph& g, const NodeP& x, const Tensor& mask) {
  const int64_t n = x->val.numel();
  const int64_t mn = mask.numel();
  OCCFLOW_CHECK(mn == n || (n % mn == 0), ShapeError,
                "mask_mul: mask " << mask.shape_str() << " vs " << x->val.shape_str());
  Tensor out(x->val.shape());
  for (int64_t i = 0; i < n; ++i) out[i] = x->val[i] * mask[i % mn];
  return g.make(std::move(out), req(x), [x, mask, n, mn](const Tensor& go) {
    if (!x->needs) return;
    Tensor gx(go.shape());
    for (int64_t i = 0; i < n; ++i) gx[i] = go[i] * mask[i % mn];
    Graph::accum(x, gx);
  });
}

NodeP warp(Graph& g, const NodeP& src, const NodeP& flow) {
  OCCFLOW_CHECK(src->val.ndim() == 3 && flow->val.ndim() == 3 && flow->val.dim(0) == 2,
                ShapeError, "warp expects src [C,H,W], flow [2,H,W]");
  OCCFLOW_CHECK(src->val.dim(1) == flow->val.dim(1) && src->val.dim(2) == flow->val.dim(2),
                ShapeError, "warp spatial mismatch");
  const int c = src->val.dim(0), h = src->val.dim(1), w = src->val.dim(2);
  Tensor out({c, h, w});
  kern::warp_bilinear(src->val.data(), flow->val.data(), out.data(), c, h, w);
  return g.make(std::move(out), req(src, flow), [src, flow, c, h, w](const Tensor& go) {
    Tensor gsrc, gflow;
    real* ps = nullptr;
    real* pf = nullptr;
    if (src->needs) {
      gsrc = Tensor::zeros(src->val.shape());
      ps = gsrc.data();
    }
    if (flow->needs) {
      gflow = Tensor::zeros(flow->val.shape());
      pf = gflow.data();
    }
    kern::warp_bilinear_grad(src->val.data(), flow->val.data(), go.data(), ps, pf, c, h, w);
    if (ps) Graph::accum(src, gsrc);
    if (pf) Graph::accum(flow, gflow);
  });
}

// ---- reductions and losses ----

NodeP sum_all(Graph& g, const NodeP& x) {
  Tensor out = Tensor::scalar(kern::det_sum(x->val.data(), x->val.numel()));
  return g.make(std::move(out), req(x), [x](const Tensor& go) {
    if (!x->needs) return;
    Graph::accum(x, Tensor::full(x->val.shape(), go[0]));
  });
}

NodeP mean_all(Graph& g, const NodeP& x) {
  const real inv = real(1) / static_cast<real>(x->val.numel());
  Tensor out = Tensor::scalar(kern::det_sum(x->val.data(), x->val.numel()) * inv);
  return g.make(std::move(out), req(x), [x, inv](const Tensor& go) {
    if (!x->needs) return;
    Graph::accum(x, Tensor::full(x->val.shape(), go[0] * inv));
  });
}

namespace {

// Shared focal machinery. When from_logits, p = sigmoid(x), else p = x.
// pt = y*p + (1-y)*(1-p), clamped to [eps, 1-eps]; loss = -a_t (1-pt)^g ln pt.
struct FocalTerms {
  real loss, dldx;
};

FocalTerms focal_term(real x, real y, real alpha, real gamma, real eps, bool from_logits) {
  const real p = from_logits ? sigmoid_stable(x) : x;
  const real pt_raw = y * p + (1 - y) * (1 - p);
  const bool clamped = pt_raw <= eps || pt_raw >= 1 - eps;
  const real pt = std::min(std::max(pt_raw, eps), 1 - eps);
  const real at = alpha < 0 ? real(1) : y * alpha + (1 - y) * (1 - alpha);
  const real one_m = 1 - pt;
  const real lg = std::log(pt);
  const real pw = gamma == 0 ? real(1) : std::pow(one_m, gamma);
  FocalTerms t;
  t.loss = -at * pw * lg;
  if (clamped) {
    t.dldx = 0;
    return t;
  }
  real dldpt = -at * pw / pt;
  if (gamma > 0) dldpt += at * gamma * std::pow(one_m, gamma - 1) * lg;
  const real dptdp = 2 * y - 1;
  const real dpdx = from_logits ? p * (1 - p) : real(1);
  t.dldx = dldpt * dptdp * dpdx;
  return t;
}

NodeP focal_impl(Graph& g, const NodeP& pred, const Tensor& target, real alpha, real gamma,
                 real eps, bool from_logits) {
  check_same_shape(pred->val, target, "focal loss");
  const int64_t n = pred->val.numel();
  const real inv = real(1) / static_cast<real>(n);
  constexpr int64_t kBlock = 4096;
  real total = 0;
  for (int64_t b = 0; b < n; b += kBlock) {
    real acc = 0;
    const int64_t e = std::min(b + kBlock, n);
    for (int64_t i = b; i < e; ++i)
      acc += focal_term(pred->val[i], target[i], alpha, gamma, eps, from_logits).loss;
    total += acc;
  }
  return g.make(Tensor::scalar(total * inv), req(pred),
                [pred, target, alpha, gamma, eps, from_logits, n, inv](const Tensor& go) {
                  if (!pred->needs) return;
                  Tensor gx(pred->val.shape());
                  const real scale = go[0] * inv;
                  for (int64_t i = 0; i < n; ++i)
                    gx[i] = scale *
                            focal_term(pred->val[i], target[i], alpha, gamma, eps, from_logits)
                                .dldx;
                  Graph::accum(pred, gx);
                });
}

}  // namespace

NodeP focal_bce_logits(Graph& g, const NodeP& logits, const Tensor& target, real alpha,
                       real gamma, real eps) {
  return focal_impl(g, logits, target, alpha, gamma, eps, true);
}

NodeP focal_bce_probs(Graph& g, const NodeP& probs, const Tensor& target, real alpha, real gamma,
                      real eps) {
  return focal_impl(g, probs, target, alpha, gamma, eps, false);
}

NodeP smooth_l1_flow(Graph& g, const NodeP& pred, const Tensor& gt, const Tensor& weight) {
  OCCFLOW_CHECK(pred->val.ndim() == 3 && pred->val.dim(0) == 2, ShapeError,
                "flow loss expects [2,H,W]");
  check_same_shape(pred->val, gt, "flow loss gt");
  const int64_t hw = pred->val.numel() / 2;
  OCCFLOW_CHECK(weight.numel() == hw, ShapeError, "flow loss weight size");
  real wsum = kern::det_sum(weight.data(), hw);
  const real denom = std::max(wsum, real(1));
  auto sl1 = [](real d) { return std::abs(d) < 1 ? real(0.5) * d * d : std::abs(d) - real(0.5); };
  real total = 0;
  for (int64_t i = 0; i < hw; ++i) {
    if (weight[i] == 0) continue;
    total += weight[i] * (sl1(pred->val[i] - gt[i]) + sl1(pred->val[hw + i] - gt[hw + i]));
  }
  return g.make(Tensor::scalar(total / denom), req(pred),
                [pred, gt, weight, hw, denom](const Tensor& go) {
                  if (!pred->needs) return;
                  auto dsl1 = [](real d) {
                    return std::abs(d) < 1 ? d : (d > 0 ? real(1) : real(-1));
                  };
                  Tensor gx = Tensor::zeros(pred->val.shape());
                  const real scale = go[0] / denom;
                  for (int64_t i = 0; i < hw; ++i) {
                    if (weight[i] == 0) continue;
                    gx[i] = scale * weight[i] * dsl1(pred->val[i] - gt[i]);
                    gx[hw + i] = scale * weight[i] * dsl1(pred->val[hw + i] - gt[hw + i]);
                  }
                  Graph::accum(pred, gx);
                });
}

NodeP kl_diag_gauss(Graph& g, const NodeP& mu_q, const NodeP& logvar_q, const NodeP& mu_p,
                    const NodeP& logvar_p) {
  check_same_shape(mu_q->val, logvar_q->val, "kl");
  check_same_shape(mu_q->val, mu_p->val, "kl");
  check_same_shape(mu_q->val, logvar_p->val, "kl");
  const int64_t n = mu_q->val.numel();
  const real inv = real(1) / static_cast<real>(n);
  real total = 0;
  for (int64_t i = 0; i < n; ++i) {
    const real dl = logvar_q->val[i] - logvar_p->val[i];
    const real dm = mu_q->val[i] - mu_p->val[i];
    total += real(0.5) * (std::exp(dl) + dm * dm * std::exp(-logvar_p->val[i]) - 1 - dl);
  }
  bool needs = req(mu_q, logvar_q) || req(mu_p, logvar_p);
  return g.make(Tensor::scalar(total * inv), needs,
                [mu_q, logvar_q, mu_p, logvar_p, n, inv](const Tensor& go) {
                  const real s = go[0] * inv;
                  Tensor gmq, glq, gmp, glp;
                  if (mu_q->needs) gmq = Tensor::zeros(mu_q->val.shape());
                  if (logvar_q->needs) glq = Tensor::zeros(mu_q->val.shape());
                  if (mu_p->needs) gmp = Tensor::zeros(mu_q->val.shape());
                  if (logvar_p->needs) glp = Tensor::zeros(mu_q->val.shape());
                  for (int64_t i = 0; i < n; ++i) {
                    const real dl = logvar_q->val[i] - logvar_p->val[i];
                    const real dm = mu_q->val[i] - mu_p->val[i];
                    const real ivp = std::exp(-logvar_p->val[i]);
                    if (!gmq.empty()) gmq[i] = s * dm * ivp;
                    if (!gmp.empty()) gmp[i] = -s * dm * ivp;
                    if (!glq.empty()) glq[i] = s * real(0.5) * (std::exp(dl) - 1);
                    if (!glp.empty()) glp[i] = s * real(0.5) * (1 - std::exp(dl) - dm * dm * ivp);
                  }
                  if (!gmq.empty()) Graph::accum(mu_q, gmq);
                  if (!glq.empty()) Graph::accum(logvar_q, glq);
                  if (!gmp.empty()) Graph::accum(mu_p, gmp);
                  if (!glp.empty()) Graph::accum(logvar_p, glp);
                });
}

}  // namespace occflow::ag
