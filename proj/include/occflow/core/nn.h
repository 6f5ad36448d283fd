// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "occflow/core/graph.h"
#include "occflow/core/kernels.h"
#include "occflow/core/rng.h"

namespace occflow::nn {

using ag::Graph;
using ag::NodeP;
using ag::Param;

// Non-owning registry of every learnable tensor, in registration order. The
// order is the contract for optimizer state and checkpoints, so model
// construction must be deterministic.
class ParamStore {
 public:
  void reg(Param& p, std::string name, bool decay = true) {
    OCCFLOW_CHECK(by_name_.find(name) == by_name_.end(), ConfigError,
                  "duplicate param name " << name);
    p.name = name;
    p.decay = decay;
    by_name_[name] = params_.size();
    params_.push_back(&p);
  }

  size_t size() const { return params_.size(); }
  Param& at(size_t i) { return *params_[i]; }
  const Param& at(size_t i) const { return *params_[i]; }
  Param* find(const std::string& name) {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? nullptr : params_[it->second];
  }

  int64_t total_elems() const {
    int64_t n = 0;
    for (const Param* p : params_) n += p->value.numel();
    return n;
  }

  void zero_grads() {
    for (Param* p : params_) std::fill(p->grad.data(), p->grad.data() + p->grad.numel(), real(0));
  }

  real grad_norm() const {
    real acc = 0;
    for (const Param* p : params_)
      acc += kern::det_dot(p->grad.data(), p->grad.data(), p->grad.numel());
    return std::sqrt(acc);
  }

 private:
  std::vector<Param*> params_;
  std::unordered_map<std::string, size_t> by_name_;
};

inline void he_normal(Tensor& t, int fan_in, Rng& rng) {
  const real s = std::sqrt(real(2) / static_cast<real>(fan_in));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = s * rng.normal();
}

inline void xavier_uniform(Tensor& t, int fan_in, int fan_out, Rng& rng) {
  const real s = std::sqrt(real(6) / static_cast<real>(fan_in + fan_out));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-s, s);
}

struct Conv2d {
  Param w, b;
  ag::ConvSpec sp;
  bool has_bias = true;

  Conv2d() = default;
  Conv2d(ParamStore& ps, const std::string& name, int cin, int cout, int kh, int kw,
         ag::ConvSpec spec, Rng& rng, bool bias = true)
      : sp(spec), has_bias(bias) {
    w.init_zeros({cout, cin / spec.groups, kh, kw});
    he_normal(w.value, (cin / spec.groups) * kh * kw, rng);
    ps.reg(w, name + ".w");
    if (bias) {
      b.init_zeros({cout});
      ps.reg(b, name + ".b", false);
    }
  }

  NodeP fwd(Graph& g, const NodeP& x) {
    return ag::conv2d(g, x, g.param(w), has_bias ? g.param(b) : nullptr, sp);
  }
};

struct Conv3d {
  Param w, b;
  ag::Conv3Spec sp;
  bool has_bias = true;

  Conv3d() = default;
  Conv3d(ParamStore& ps, const std::string& name, int cin, int cout, int kt, int kh, int kw,
         ag::Conv3Spec spec, Rng& rng, bool bias = true)
      : sp(spec), has_bias(bias) {
    w.init_zeros({cout, cin / spec.groups, kt, kh, kw});
    he_normal(w.value, (cin / spec.groups) * kt * kh * kw, rng);
    ps.reg(w, name + ".w");
    if (bias) {
      b.init_zeros({cout});
      ps.reg(b, name + ".b", false);
    }
  }

  NodeP fwd(Graph& g, const NodeP& x) {
    return ag::conv3d(g, x, g.param(w), has_bias ? g.param(b) : nullptr, sp);
  }
};

struct TConv3d {
  Param w, b;
  ag::Conv3Spec sp;
  bool has_bias = true;

  TConv3d() = default;
  TConv3d(ParamStore& ps, const std::string& name, int cin, int cout, int kt, int kh, int kw,
          ag::Conv3Spec spec, Rng& rng, bool bias = true)
      : sp(spec), has_bias(bias) {
    w.init_zeros({cin, cout / spec.groups, kt, kh, kw});
    he_normal(w.value, (cout / spec.groups) * kt * kh * kw, rng);
    ps.reg(w, name + ".w");
    if (bias) {
      b.init_zeros({cout});
      ps.reg(b, name + ".b", false);
    }
  }

  NodeP fwd(Graph& g, const NodeP& x) {
    return ag::tconv3d(g, x, g.param(w), has_bias ? g.param(b) : nullptr, sp);
  }
};

struct Linear {
  Param w, b;  // w [out, in]
  bool has_bias = true;

  Linear() = default;
  Linear(ParamStore& ps, const std::string& name, int in, int out, Rng& rng, bool bias = true)
      : has_bias(bias) {
    w.init_zeros({out, in});
    xavier_uniform(w.value, in, out, rng);
    ps.reg(w, name + ".w");
    if (bias) {
      b.init_zeros({out});
      ps.reg(b, name + ".b", false);
    }
  }

  // x [M, in] -> [M, out].
  NodeP fwd(Graph& g, const NodeP& x) {
    NodeP y = ag::matmul(g, x, g.param(w), false, true);
    if (has_bias) y = ag::add_bcast0(g, y, g.param(b));
    return y;
  }
};

struct GroupNorm {
  Param gamma, beta;
  int groups = 1;
  real eps = 1e-5;

  GroupNorm() = default;
  GroupNorm(ParamStore& ps, const std::string& name, int channels, int groups_in)
      : groups(groups_in) {
    gamma.init_zeros({channels});
    std::fill(gamma.value.data(), gamma.value.data() + channels, real(1));
    beta.init_zeros({channels});
    ps.reg(gamma, name + ".g", false);
    ps.reg(beta, name + ".b", false);
  }

  NodeP fwd(Graph& g, const NodeP& x) {
    return ag::group_norm(g, x, g.param(gamma), g.param(beta), groups, eps);
  }
};

struct LayerNorm {
  Param gamma, beta;
  real eps = 1e-5;

  LayerNorm() = default;
  LayerNorm(ParamStore& ps, const std::string& name, int channels) {
    gamma.init_zeros({channels});
    std::fill(gamma.value.data(), gamma.value.data() + channels, real(1));
    beta.init_zeros({channels});
    ps.reg(gamma, name + ".g", false);
    ps.reg(beta, name + ".b", false);
  }

  NodeP fwd(Graph& g, const NodeP& x) {
    return ag::layer_norm(g, x, g.param(gamma), g.param(beta), eps);
  }
};

// Decoupled weight decay: the decay term multiplies the parameter directly and
// never enters the moment estimates, so zero-grad steps shrink decayed params
// by exactly lr*wd*theta.
class AdamW {
 public:
  real beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  real weight_decay = 0.0;

  explicit AdamW(real wd = 0.0) : weight_decay(wd) {}

  void step(ParamStore& ps, real lr) {
    if (m_.empty()) {
      for (size_t i = 0; i < ps.size(); ++i) {
        m_.push_back(Tensor::zeros(ps.at(i).value.shape()));
        v_.push_back(Tensor::zeros(ps.at(i).value.shape()));
      }
    }
    OCCFLOW_CHECK(m_.size() == ps.size(), ConfigError, "optimizer state size mismatch");
    ++t_;
    const real bc1 = 1 - std::pow(beta1, static_cast<real>(t_));
    const real bc2 = 1 - std::pow(beta2, static_cast<real>(t_));
    for (size_t i = 0; i < ps.size(); ++i) {
      Param& p = ps.at(i);
      Tensor& m = m_[i];
      Tensor& v = v_[i];
      for (int64_t j = 0; j < p.value.numel(); ++j) {
        const real gj = p.grad[j];
        m[j] = beta1 * m[j] + (1 - beta1) * gj;
        v[j] = beta2 * v[j] + (1 - beta2) * gj * gj;
        const real mh = m[j] / bc1;
        const real vh = v[j] / bc2;
        real upd = mh / (std::sqrt(vh) + eps);
        if (p.decay) upd += weight_decay * p.value[j];
        p.value[j] -= lr * upd;
      }
    }
    ps.zero_grads();
  }

  int64_t steps() const { return t_; }
  std::vector<Tensor>& moment1() { return m_; }
  std::vector<Tensor>& moment2() { return v_; }
  void set_steps(int64_t t) { t_ = t; }

 private:
  int64_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

inline real cosine_lr(int64_t step, int64_t total_steps, real lr_init, real min_lr) {
  OCCFLOW_CHECK(total_steps > 0, ConfigError, "cosine_lr needs total_steps > 0");
  OCCFLOW_CHECK(step >= 0 && step <= total_steps, ConfigError,
                "cosine_lr step " << step << " outside [0," << total_steps << "]");
  const real c = std::cos(3.14159265358979323846 * static_cast<real>(step) /
                          static_cast<real>(total_steps));
  return min_lr + real(0.5) * (lr_init - min_lr) * (1 + c);
}

}  // namespace occflow::nn
