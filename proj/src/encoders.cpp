// SPDX-License-Identifier: Apache-2.0
#include "occflow/encoders.h"

#include <cmath>

namespace occflow {

using ag::Graph;
using ag::NodeP;

void EncoderConfig::validate() const {
  OCCFLOW_CHECK(cnn, ConfigError, "the cnn encoder must stay active");
  OCCFLOW_CHECK(!(attention && st3d), ConfigError,
                "at most one of the attention and spatio-temporal encoders may be active");
  OCCFLOW_CHECK(cnn_cfg.widths.size() == 5, ConfigError, "cnn widths must list 5 levels");
  OCCFLOW_CHECK(cnn_cfg.blocks >= 1, ConfigError, "cnn blocks per stage must be >= 1");
  OCCFLOW_CHECK(st3d_cfg.widths.size() == 5, ConfigError, "st3d widths must list 5 levels");
  OCCFLOW_CHECK(attn_cfg.depths.size() == 4, ConfigError, "attention depths must list 4 stages");
  OCCFLOW_CHECK(attn_cfg.patch >= 1 && attn_cfg.window >= 1 && attn_cfg.heads >= 1, ConfigError,
                "attention patch/window/heads must be positive");
  OCCFLOW_CHECK(attn_cfg.dim % attn_cfg.heads == 0, ConfigError,
                "attention dim must divide evenly into heads");
  OCCFLOW_CHECK(fused_width >= 1, ConfigError, "fused width must be positive");
}

int norm_groups(int channels) {
  for (int g : {8, 4, 2})
    if (channels % g == 0) return g;
  return 1;
}

// ---- CNN encoder ----

CnnEncoder::CnnEncoder(ParamStore& ps, const std::string& name, int cin, const CnnConfig& cfg,
                       Rng& rng)
    : widths_(cfg.widths) {
  const int w0 = cfg.widths[0];
  stem_ = Conv2d(ps, name + ".stem", cin, w0, 3, 3, {.sh = 2, .sw = 2, .ph = 1, .pw = 1}, rng);
  stem_norm_ = GroupNorm(ps, name + ".stem_n", w0, norm_groups(w0));
  stages_.resize(4);
  for (int s = 0; s < 4; ++s) {
    const int ci = cfg.widths[static_cast<size_t>(s)];
    const int co = cfg.widths[static_cast<size_t>(s) + 1];
    for (int b = 0; b < cfg.blocks; ++b) {
      const std::string bn = name + ".s" + std::to_string(s) + ".b" + std::to_string(b);
      Block blk;
      blk.down = b == 0;
      const int bci = blk.down ? ci : co;
      const int stride = blk.down ? 2 : 1;
      blk.c1 = Conv2d(ps, bn + ".c1", bci, co, 3, 3,
                      {.sh = stride, .sw = stride, .ph = 1, .pw = 1}, rng);
      blk.n1 = GroupNorm(ps, bn + ".n1", co, norm_groups(co));
      blk.c2 = Conv2d(ps, bn + ".c2", co, co, 3, 3, {.ph = 1, .pw = 1}, rng);
      blk.n2 = GroupNorm(ps, bn + ".n2", co, norm_groups(co));
      if (blk.down) blk.proj = Conv2d(ps, bn + ".proj", bci, co, 1, 1, {.sh = 2, .sw = 2}, rng);
      stages_[static_cast<size_t>(s)].push_back(std::move(blk));
    }
  }
}

Pyramid CnnEncoder::fwd(Graph& g, const NodeP& x) {
  OCCFLOW_CHECK(x->val.ndim() == 3, ShapeError, "cnn encoder expects [C,H,W]");
  OCCFLOW_CHECK(x->val.dim(1) % 32 == 0 && x->val.dim(2) % 32 == 0, ConfigError,
                "cnn encoder needs spatial sizes divisible by 32, got " << x->val.shape_str());
  Pyramid out;
  NodeP h = ag::relu(g, stem_norm_.fwd(g, stem_.fwd(g, x)));
  out.push_back(h);
  for (auto& stage : stages_) {
    for (auto& blk : stage) {
      NodeP m = ag::relu(g, blk.n1.fwd(g, blk.c1.fwd(g, h)));
      m = blk.n2.fwd(g, blk.c2.fwd(g, m));
      const NodeP skip = blk.down ? blk.proj.fwd(g, h) : h;
      h = ag::relu(g, ag::add(g, m, skip));
    }
    out.push_back(h);
  }
  return out;
}

// ---- windowed attention ----

namespace {

// LayerNorm over the channel axis of a [C,H,W] map.
NodeP map_channel_norm(Graph& g, LayerNorm& ln, const NodeP& x) {
  const int c = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2);
  NodeP t = ag::reshape(g, x, {c, h * w});
  t = ag::permute(g, t, {1, 0});
  t = ln.fwd(g, t);
  t = ag::permute(g, t, {1, 0});
  return ag::reshape(g, t, {c, h, w});
}

NodeP pad_bottom_right(Graph& g, const NodeP& x, int ph, int pw) {
  NodeP t = x;
  if (ph > 0) {
    const NodeP z = g.constant(Tensor::zeros({t->val.dim(0), ph, t->val.dim(2)}));
    t = ag::concat(g, {t, z}, 1);
  }
  if (pw > 0) {
    const NodeP z = g.constant(Tensor::zeros({t->val.dim(0), t->val.dim(1), pw}));
    t = ag::concat(g, {t, z}, 2);
  }
  return t;
}

}  // namespace

WindowAttentionBlock::WindowAttentionBlock(ParamStore& ps, const std::string& name, int dim,
                                           int heads, int window, real mlp_ratio, Rng& rng)
    : dim_(dim), heads_(heads), window_(window) {
  ln1_ = LayerNorm(ps, name + ".ln1", dim);
  ln2_ = LayerNorm(ps, name + ".ln2", dim);
  qkv_ = Linear(ps, name + ".qkv", dim, 3 * dim, rng);
  proj_ = Linear(ps, name + ".proj", dim, dim, rng);
  const int hidden = std::max(1, static_cast<int>(std::lround(dim * mlp_ratio)));
  fc1_ = Linear(ps, name + ".fc1", dim, hidden, rng);
  fc2_ = Linear(ps, name + ".fc2", hidden, dim, rng);
  const int span = 2 * window - 1;
  bias_.init_zeros({span * span, heads});
  ps.reg(bias_, name + ".relbias", false);
  bias_idx_.reserve(static_cast<size_t>(window) * window * window * window);
  for (int yi = 0; yi < window; ++yi)
    for (int xi = 0; xi < window; ++xi)
      for (int yj = 0; yj < window; ++yj)
        for (int xj = 0; xj < window; ++xj)
          bias_idx_.push_back((yi - yj + window - 1) * span + (xi - xj + window - 1));
}

NodeP WindowAttentionBlock::fwd(Graph& g, const NodeP& x) {
  const int c = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2);
  OCCFLOW_CHECK(c == dim_, ShapeError, "attention block built for " << dim_ << " channels");
  OCCFLOW_CHECK(h >= window_ && w >= window_, ConfigError,
                "window " << window_ << " larger than feature map " << h << "x" << w);
  const int ph = (window_ - h % window_) % window_;
  const int pw = (window_ - w % window_) % window_;
  NodeP padded = pad_bottom_right(g, x, ph, pw);
  const int hp = h + ph, wp = w + pw;
  const int nh = hp / window_, nw = wp / window_;
  const int nwin = nh * nw, n = window_ * window_;
  const int d = dim_ / heads_;

  // windows of N tokens
  NodeP t = ag::reshape(g, padded, {c, nh, window_, nw, window_});
  t = ag::permute(g, t, {1, 3, 2, 4, 0});
  t = ag::reshape(g, t, {nwin, n, c});

  NodeP att_in = ln1_.fwd(g, ag::reshape(g, t, {nwin * n, c}));
  NodeP qkv = qkv_.fwd(g, att_in);
  qkv = ag::reshape(g, qkv, {nwin, n, 3, heads_, d});
  qkv = ag::permute(g, qkv, {2, 0, 3, 1, 4});
  auto head_split = [&](int i) {
    NodeP p = ag::slice(g, qkv, 0, i, 1);
    return ag::reshape(g, p, {nwin * heads_, n, d});
  };
  const NodeP q = head_split(0), k = head_split(1), v = head_split(2);

  NodeP attn = ag::smul(g, ag::bmm(g, q, k, false, true), 1.0 / std::sqrt(static_cast<real>(d)));
  NodeP bias = ag::gather_rows(g, g.param(bias_), bias_idx_);  // [N*N, heads]
  bias = ag::permute(g, bias, {1, 0});
  bias = ag::reshape(g, bias, {heads_ * n * n});
  attn = ag::reshape(g, attn, {nwin, heads_ * n * n});
  attn = ag::add_bcast0(g, attn, bias);
  attn = ag::reshape(g, attn, {nwin * heads_, n, n});
  attn = ag::softmax_lastdim(g, attn);

  NodeP o = ag::bmm(g, attn, v);  // [nwin*heads, N, d]
  o = ag::reshape(g, o, {nwin, heads_, n, d});
  o = ag::permute(g, o, {0, 2, 1, 3});
  o = proj_.fwd(g, ag::reshape(g, o, {nwin * n, c}));
  t = ag::add(g, t, ag::reshape(g, o, {nwin, n, c}));

  NodeP m = ln2_.fwd(g, ag::reshape(g, t, {nwin * n, c}));
  m = fc2_.fwd(g, ag::relu(g, fc1_.fwd(g, m)));
  t = ag::add(g, t, ag::reshape(g, m, {nwin, n, c}));

  // back to the map
  t = ag::reshape(g, t, {nh, nw, window_, window_, c});
  t = ag::permute(g, t, {4, 0, 2, 1, 3});
  t = ag::reshape(g, t, {c, hp, wp});
  if (ph > 0) t = ag::slice(g, t, 1, 0, h);
  if (pw > 0) t = ag::slice(g, t, 2, 0, w);
  return t;
}

AttentionEncoder::AttentionEncoder(ParamStore& ps, const std::string& name, int cin,
                                   const AttnConfig& cfg, Rng& rng)
    : cfg_(cfg) {
  embed_ = Conv2d(ps, name + ".embed", cin, cfg.dim, cfg.patch, cfg.patch,
                  {.sh = cfg.patch, .sw = cfg.patch}, rng);
  embed_norm_ = LayerNorm(ps, name + ".embed_n", cfg.dim);
  int c = cfg.dim;
  widths_.push_back(c);
  stages_.resize(4);
  for (int s = 0; s < 4; ++s) {
    const std::string sn = name + ".s" + std::to_string(s);
    merge_.push_back(Linear(ps, sn + ".merge", 4 * c, 2 * c, rng));
    merge_norm_.push_back(LayerNorm(ps, sn + ".merge_n", 2 * c));
    c *= 2;
    for (int b = 0; b < cfg.depths[static_cast<size_t>(s)]; ++b)
      stages_[static_cast<size_t>(s)].push_back(WindowAttentionBlock(
          ps, sn + ".b" + std::to_string(b), c, cfg.heads, cfg.window, cfg.mlp_ratio, rng));
    widths_.push_back(c);
  }
}

Pyramid AttentionEncoder::fwd(Graph& g, const NodeP& x) {
  OCCFLOW_CHECK(x->val.ndim() == 3, ShapeError, "attention encoder expects [C,H,W]");
  OCCFLOW_CHECK(x->val.dim(1) % cfg_.patch == 0 && x->val.dim(2) % cfg_.patch == 0, ConfigError,
                "input not divisible by patch size");
  Pyramid out;
  NodeP h = map_channel_norm(g, embed_norm_, embed_.fwd(g, x));
  out.push_back(h);
  for (int s = 0; s < 4; ++s) {
    const int c = h->val.dim(0);
    int hh = h->val.dim(1), ww = h->val.dim(2);
    if (hh % 2 || ww % 2) {
      h = pad_bottom_right(g, h, hh % 2, ww % 2);
      hh = h->val.dim(1);
      ww = h->val.dim(2);
    }
    NodeP t = ag::reshape(g, h, {c, hh / 2, 2, ww / 2, 2});
    t = ag::permute(g, t, {1, 3, 0, 2, 4});
    t = ag::reshape(g, t, {hh / 2 * (ww / 2), 4 * c});
    t = merge_norm_[static_cast<size_t>(s)].fwd(g, merge_[static_cast<size_t>(s)].fwd(g, t));
    t = ag::reshape(g, t, {hh / 2, ww / 2, 2 * c});
    h = ag::permute(g, t, {2, 0, 1});
    for (auto& blk : stages_[static_cast<size_t>(s)]) h = blk.fwd(g, h);
    out.push_back(h);
  }
  return out;
}

// ---- sparse spatio-temporal encoder (dense masked realization) ----

const std::array<int, 5>& St3dEncoder::stage_t() {
  static const std::array<int, 5> t = {11, 11, 6, 6, 3};
  return t;
}

namespace {

bool stage_tdown(int s) { return s == 2 || s == 4; }

// Active-site dilation of a {0,1} mask [1,t,h,w] under a strided conv window.
Tensor dilate_mask(const Tensor& mask, int kt, int kh, int kw, int st, int sh, int sw, int pt,
                   int ph, int pw) {
  const int t = mask.dim(1), h = mask.dim(2), w = mask.dim(3);
  const int to = (t + 2 * pt - kt) / st + 1;
  const int ho = (h + 2 * ph - kh) / sh + 1;
  const int wo = (w + 2 * pw - kw) / sw + 1;
  Tensor out = Tensor::zeros({1, to, ho, wo});
  for (int ot = 0; ot < to; ++ot)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        bool active = false;
        for (int dt = 0; dt < kt && !active; ++dt) {
          const int it = ot * st - pt + dt;
          if (it < 0 || it >= t) continue;
          for (int dy = 0; dy < kh && !active; ++dy) {
            const int iy = oy * sh - ph + dy;
            if (iy < 0 || iy >= h) continue;
            for (int dx = 0; dx < kw && !active; ++dx) {
              const int ix = ox * sw - pw + dx;
              if (ix < 0 || ix >= w) continue;
              active = mask.at({0, it, iy, ix}) != 0;
            }
          }
        }
        if (active) out.at({0, ot, oy, ox}) = 1;
      }
  return out;
}

}  // namespace

St3dEncoder::St3dEncoder(ParamStore& ps, const std::string& name, const St3dConfig& cfg,
                         Rng& rng) {
  int cin = SparseInput::kFeat;
  for (int s = 0; s < 5; ++s) {
    const int co = cfg.widths[static_cast<size_t>(s)];
    const std::string sn = name + ".s" + std::to_string(s);
    if (stage_tdown(s))
      down_.push_back(Conv3d(ps, sn + ".down", cin, co, 2, 3, 3,
                             {.st = 2, .sh = 2, .sw = 2, .ph = 1, .pw = 1}, rng));
    else
      down_.push_back(Conv3d(ps, sn + ".down", cin, co, 1, 3, 3,
                             {.sh = 2, .sw = 2, .ph = 1, .pw = 1}, rng));
    sub_.push_back(
        Conv3d(ps, sn + ".sub", co, co, 3, 3, 3, {.pt = 1, .ph = 1, .pw = 1}, rng));
    folded_widths_.push_back(co * stage_t()[static_cast<size_t>(s)]);
    cin = co;
  }
}

Pyramid St3dEncoder::fwd(Graph& g, const SparseInput& sp) {
  OCCFLOW_CHECK(sp.t == kHistoryFrames, ConfigError,
                "spatio-temporal encoder expects " << kHistoryFrames << " frames, got " << sp.t);
  NodeP x = g.input(sp.densify(), true);
  Tensor mask = sp.mask();
  Pyramid out;
  for (int s = 0; s < 5; ++s) {
    if (stage_tdown(s) && x->val.dim(1) % 2) {
      // right-pad one zero frame so the stride-2 temporal window tiles exactly
      const NodeP z =
          g.constant(Tensor::zeros({x->val.dim(0), 1, x->val.dim(2), x->val.dim(3)}));
      x = ag::concat(g, {x, z}, 1);
      Tensor padded = Tensor::zeros({1, mask.dim(1) + 1, mask.dim(2), mask.dim(3)});
      std::copy_n(mask.data(), mask.numel(), padded.data());
      mask = padded;
    }
    auto& dn = down_[static_cast<size_t>(s)];
    mask = dilate_mask(mask, dn.sp.st == 2 ? 2 : 1, 3, 3, dn.sp.st, 2, 2, 0, 1, 1);
    x = ag::mask_mul(g, ag::relu(g, dn.fwd(g, x)), mask);
    x = ag::mask_mul(g, ag::relu(g, sub_[static_cast<size_t>(s)].fwd(g, x)), mask);
    OCCFLOW_CHECK(x->val.dim(1) == stage_t()[static_cast<size_t>(s)], ShapeError,
                  "stage " << s << " temporal size " << x->val.dim(1) << ", expected "
                           << stage_t()[static_cast<size_t>(s)]);
    out.push_back(ag::reshape(
        g, x, {x->val.dim(0) * x->val.dim(1), x->val.dim(2), x->val.dim(3)}));
  }
  return out;
}

// ---- fusion ----

FeatureFuser::FeatureFuser(ParamStore& ps, const std::string& name,
                           const std::vector<int>& cat_channels, int fused_width, Rng& rng) {
  for (size_t i = 0; i < cat_channels.size(); ++i)
    proj_.push_back(Conv2d(ps, name + ".p" + std::to_string(i), cat_channels[i], fused_width, 1,
                           1, {}, rng));
}

Pyramid FeatureFuser::fwd(Graph& g, const std::vector<Pyramid>& pyramids) {
  OCCFLOW_CHECK(!pyramids.empty(), ConfigError, "fusion needs at least one pyramid");
  const size_t levels = pyramids[0].size();
  OCCFLOW_CHECK(levels == proj_.size(), ShapeError, "fusion level count mismatch");
  for (const auto& p : pyramids)
    OCCFLOW_CHECK(p.size() == levels, ShapeError, "pyramids disagree on level count");
  Pyramid out;
  for (size_t lv = 0; lv < levels; ++lv) {
    NodeP cat;
    if (pyramids.size() == 1) {
      cat = pyramids[0][lv];
    } else {
      std::vector<NodeP> parts;
      for (const auto& p : pyramids) {
        OCCFLOW_CHECK(p[lv]->val.dim(1) == pyramids[0][lv]->val.dim(1) &&
                          p[lv]->val.dim(2) == pyramids[0][lv]->val.dim(2),
                      ShapeError, "fusion spatial size mismatch at level " << lv);
        parts.push_back(p[lv]);
      }
      cat = ag::concat(g, parts, 0);
    }
    out.push_back(proj_[lv].fwd(g, cat));
  }
  return out;
}

}  // namespace occflow
