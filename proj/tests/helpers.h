// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "occflow/core/graph.h"
#include "occflow/core/rng.h"
#include "occflow/core/tensor.h"

namespace tst {

using occflow::Rng;
using occflow::Tensor;
using occflow::real;
namespace ag = occflow::ag;

inline Tensor randn(std::vector<int> shape, Rng& rng, real scale = 1.0) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = scale * rng.normal();
  return t;
}

inline Tensor randu(std::vector<int> shape, Rng& rng, real lo = 0.0, real hi = 1.0) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

inline real max_abs(const Tensor& t) {
  real m = 0;
  for (int64_t i = 0; i < t.numel(); ++i) m = std::max(m, std::abs(t[i]));
  return m;
}

inline real max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.same_shape(b));
  real m = 0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Central-difference check of every input coordinate against the tape
// gradient. fn must rebuild its graph from the passed nodes on every call;
// relative tolerance tol with an absolute floor for near-zero gradients.
inline void fd_check(const std::function<ag::NodeP(ag::Graph&, std::vector<ag::NodeP>&)>& fn,
                     std::vector<Tensor> inputs, real eps = 1e-5, real tol = 1e-3,
                     real floor = 1e-6) {
  ag::Graph g(true);
  std::vector<ag::NodeP> nodes;
  for (auto& t : inputs) nodes.push_back(g.input(t, true));
  ag::NodeP out = fn(g, nodes);
  REQUIRE(out->val.numel() == 1);
  g.backward(out);

  auto eval = [&](size_t which, int64_t j, real delta) {
    ag::Graph g2(true);
    std::vector<ag::NodeP> n2;
    for (size_t k = 0; k < inputs.size(); ++k) {
      Tensor t = inputs[k];
      if (k == which) t[j] += delta;
      n2.push_back(g2.input(std::move(t), false));
    }
    return fn(g2, n2)->val[0];
  };

  for (size_t i = 0; i < inputs.size(); ++i) {
    const Tensor analytic =
        nodes[i]->grad.empty() ? Tensor::zeros(inputs[i].shape()) : nodes[i]->grad;
    for (int64_t j = 0; j < inputs[i].numel(); ++j) {
      const real fd = (eval(i, j, eps) - eval(i, j, -eps)) / (2 * eps);
      const real an = analytic[j];
      const real denom = std::max(std::abs(fd), std::abs(an));
      const bool ok = denom < floor ? std::abs(fd - an) < floor : std::abs(fd - an) / denom < tol;
      if (!ok) {
        CAPTURE(i);
        CAPTURE(j);
        CAPTURE(fd);
        CAPTURE(an);
      }
      CHECK(ok);
    }
  }
}

}  // namespace tst
