// SPDX-License-Identifier: Apache-2.0
#include "occflow/core/reference.h"

#include <algorithm>
#include <cmath>

namespace occflow::ref {

Tensor conv2d_direct(const Tensor& x, const Tensor& wgt, const Tensor& bias, int sh, int sw,
                     int ph, int pw, int dh, int dw, int groups) {
  const int cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int cout = wgt.dim(0), cing = wgt.dim(1), kh = wgt.dim(2), kw = wgt.dim(3);
  const int ho = (h + 2 * ph - dh * (kh - 1) - 1) / sh + 1;
  const int wo = (w + 2 * pw - dw * (kw - 1) - 1) / sw + 1;
  const int coutg = cout / groups;
  Tensor y({cout, ho, wo});
  for (int co = 0; co < cout; ++co) {
    const int g = co / coutg;
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        real acc = bias.empty() ? real(0) : bias[co];
        for (int ci = 0; ci < cing; ++ci) {
          for (int ky = 0; ky < kh; ++ky) {
            const int iy = oy * sh - ph + ky * dh;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < kw; ++kx) {
              const int ix = ox * sw - pw + kx * dw;
              if (ix < 0 || ix >= w) continue;
              acc += x.at({g * cing + ci, iy, ix}) * wgt.at({co, ci, ky, kx});
            }
          }
        }
        y.at({co, oy, ox}) = acc;
      }
    }
  }
  return y;
}

Tensor conv3d_direct(const Tensor& x, const Tensor& wgt, const Tensor& bias, int st, int sh,
                     int sw, int pt, int ph, int pw, int dt, int dh, int dw, int groups) {
  const int cin = x.dim(0), t = x.dim(1), h = x.dim(2), w = x.dim(3);
  (void)cin;
  const int cout = wgt.dim(0), cing = wgt.dim(1);
  const int kt = wgt.dim(2), kh = wgt.dim(3), kw = wgt.dim(4);
  const int to = (t + 2 * pt - dt * (kt - 1) - 1) / st + 1;
  const int ho = (h + 2 * ph - dh * (kh - 1) - 1) / sh + 1;
  const int wo = (w + 2 * pw - dw * (kw - 1) - 1) / sw + 1;
  const int coutg = cout / groups;
  Tensor y({cout, to, ho, wo});
  for (int co = 0; co < cout; ++co) {
    const int g = co / coutg;
    for (int ot = 0; ot < to; ++ot) {
      for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
          real acc = bias.empty() ? real(0) : bias[co];
          for (int ci = 0; ci < cing; ++ci) {
            for (int k0 = 0; k0 < kt; ++k0) {
              const int it = ot * st - pt + k0 * dt;
              if (it < 0 || it >= t) continue;
              for (int ky = 0; ky < kh; ++ky) {
                const int iy = oy * sh - ph + ky * dh;
                if (iy < 0 || iy >= h) continue;
                for (int kx = 0; kx < kw; ++kx) {
                  const int ix = ox * sw - pw + kx * dw;
                  if (ix < 0 || ix >= w) continue;
                  acc += x.at({g * cing + ci, it, iy, ix}) * wgt.at({co, ci, k0, ky, kx});
                }
              }
            }
          }
          y.at({co, ot, oy, ox}) = acc;
        }
      }
    }
  }
  return y;
}

Tensor tconv3d_direct(const Tensor& x, const Tensor& wgt, const Tensor& bias, int st, int sh,
                      int sw, int pt, int ph, int pw, int dt, int dh, int dw, int groups) {
  const int cin = x.dim(0), t = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int cing = cin / groups;
  const int coutg = wgt.dim(1);
  const int kt = wgt.dim(2), kh = wgt.dim(3), kw = wgt.dim(4);
  const int cout = coutg * groups;
  const int to = (t - 1) * st - 2 * pt + dt * (kt - 1) + 1;
  const int ho = (h - 1) * sh - 2 * ph + dh * (kh - 1) + 1;
  const int wo = (w - 1) * sw - 2 * pw + dw * (kw - 1) + 1;
  Tensor y({cout, to, ho, wo});
  if (!bias.empty()) {
    for (int co = 0; co < cout; ++co)
      for (int64_t i = 0; i < static_cast<int64_t>(to) * ho * wo; ++i)
        y[static_cast<int64_t>(co) * to * ho * wo + i] = bias[co];
  }
  for (int ci = 0; ci < cin; ++ci) {
    const int g = ci / cing;
    for (int it = 0; it < t; ++it) {
      for (int iy = 0; iy < h; ++iy) {
        for (int ix = 0; ix < w; ++ix) {
          const real v = x.at({ci, it, iy, ix});
          if (v == real(0)) continue;
          for (int co = 0; co < coutg; ++co) {
            for (int k0 = 0; k0 < kt; ++k0) {
              const int ot = it * st - pt + k0 * dt;
              if (ot < 0 || ot >= to) continue;
              for (int ky = 0; ky < kh; ++ky) {
                const int oy = iy * sh - ph + ky * dh;
                if (oy < 0 || oy >= ho) continue;
                for (int kx = 0; kx < kw; ++kx) {
                  const int ox = ix * sw - pw + kx * dw;
                  if (ox < 0 || ox >= wo) continue;
                  y.at({g * coutg + co, ot, oy, ox}) += v * wgt.at({ci, co, k0, ky, kx});
                }
              }
            }
          }
        }
      }
    }
  }
  return y;
}

Tensor warp_direct(const Tensor& src, const Tensor& flow) {
  const int c = src.dim(0), h = src.dim(1), w = src.dim(2);
  Tensor out({c, h, w});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const real sx = x + flow.at({0, y, x});
      const real sy = y + flow.at({1, y, x});
      const int x0 = static_cast<int>(std::floor(sx));
      const int y0 = static_cast<int>(std::floor(sy));
      const real ax = sx - x0, ay = sy - y0;
      for (int ch = 0; ch < c; ++ch) {
        auto tap = [&](int yy, int xx) -> real {
          return (yy >= 0 && yy < h && xx >= 0 && xx < w) ? src.at({ch, yy, xx}) : real(0);
        };
        out.at({ch, y, x}) = (1 - ay) * ((1 - ax) * tap(y0, x0) + ax * tap(y0, x0 + 1)) +
                             ay * ((1 - ax) * tap(y0 + 1, x0) + ax * tap(y0 + 1, x0 + 1));
      }
    }
  }
  return out;
}

Tensor SparseGrid::densify() const {
  Tensor out({channels, t, h, w});
  for (const auto& [key, feat] : sites) {
    const auto [tt, yy, xx] = key;
    for (int c = 0; c < channels; ++c) out.at({c, tt, yy, xx}) = feat[static_cast<size_t>(c)];
  }
  return out;
}

Tensor SparseGrid::mask() const {
  Tensor out({1, t, h, w});
  for (const auto& [key, feat] : sites) {
    (void)feat;
    const auto [tt, yy, xx] = key;
    out.at({0, tt, yy, xx}) = 1;
  }
  return out;
}

SparseGrid sparse_submanifold_conv(const SparseGrid& in, const Tensor& wgt, const Tensor& bias,
                                   bool relu) {
  const int cout = wgt.dim(0), cin = wgt.dim(1);
  const int kt = wgt.dim(2), kh = wgt.dim(3), kw = wgt.dim(4);
  const int pt = kt / 2, ph = kh / 2, pw = kw / 2;
  SparseGrid out;
  out.t = in.t;
  out.h = in.h;
  out.w = in.w;
  out.channels = cout;
  for (const auto& [key, feat] : in.sites) {
    (void)feat;
    const auto [ot, oy, ox] = key;
    std::vector<real> acc(static_cast<size_t>(cout), real(0));
    for (int co = 0; co < cout; ++co) acc[static_cast<size_t>(co)] = bias.empty() ? real(0) : bias[co];
    for (int k0 = 0; k0 < kt; ++k0) {
      for (int ky = 0; ky < kh; ++ky) {
        for (int kx = 0; kx < kw; ++kx) {
          const int it = ot - pt + k0, iy = oy - ph + ky, ix = ox - pw + kx;
          auto it2 = in.sites.find({it, iy, ix});
          if (it2 == in.sites.end()) continue;
          for (int co = 0; co < cout; ++co)
            for (int ci = 0; ci < cin; ++ci)
              acc[static_cast<size_t>(co)] +=
                  it2->second[static_cast<size_t>(ci)] * wgt.at({co, ci, k0, ky, kx});
        }
      }
    }
    if (relu)
      for (real& v : acc) v = std::max(v, real(0));
    out.sites.emplace(key, std::move(acc));
  }
  return out;
}

SparseGrid sparse_strided_conv(const SparseGrid& in, const Tensor& wgt, const Tensor& bias,
                               int st, int sh, int sw, int pt, int ph, int pw, bool relu) {
  const int cout = wgt.dim(0), cin = wgt.dim(1);
  const int kt = wgt.dim(2), kh = wgt.dim(3), kw = wgt.dim(4);
  SparseGrid out;
  out.t = (in.t + 2 * pt - kt) / st + 1;
  out.h = (in.h + 2 * ph - kh) / sh + 1;
  out.w = (in.w + 2 * pw - kw) / sw + 1;
  out.channels = cout;
  // Active output sites: receptive-field dilation of the input active set.
  for (const auto& [key, feat] : in.sites) {
    (void)feat;
    const auto [it, iy, ix] = key;
    for (int ot = 0; ot < out.t; ++ot) {
      const int dt0 = it - (ot * st - pt);
      if (dt0 < 0 || dt0 >= kt) continue;
      for (int oy = 0; oy < out.h; ++oy) {
        const int dy = iy - (oy * sh - ph);
        if (dy < 0 || dy >= kh) continue;
        for (int ox = 0; ox < out.w; ++ox) {
          const int dx = ix - (ox * sw - pw);
          if (dx < 0 || dx >= kw) continue;
          out.sites.try_emplace({ot, oy, ox},
                                std::vector<real>(static_cast<size_t>(cout), real(0)));
        }
      }
    }
  }
  for (auto& [key, acc] : out.sites) {
    const auto [ot, oy, ox] = key;
    for (int co = 0; co < cout; ++co) acc[static_cast<size_t>(co)] = bias.empty() ? real(0) : bias[co];
    for (int k0 = 0; k0 < kt; ++k0) {
      for (int ky = 0; ky < kh; ++ky) {
        for (int kx = 0; kx < kw; ++kx) {
          const int it = ot * st - pt + k0, iy = oy * sh - ph + ky, ix = ox * sw - pw + kx;
          auto found = in.sites.find({it, iy, ix});
          if (found == in.sites.end()) continue;
          for (int co = 0; co < cout; ++co)
            for (int ci = 0; ci < cin; ++ci)
              acc[static_cast<size_t>(co)] +=
                  found->second[static_cast<size_t>(ci)] * wgt.at({co, ci, k0, ky, kx});
        }
      }
    }
    if (relu)
      for (real& v : acc) v = std::max(v, real(0));
  }
  return out;
}

real pr_auc_exhaustive(const std::vector<real>& pred, const std::vector<real>& gt) {
  // One threshold per distinct predicted value, strict p > tau test, trapezoid
  // over recall with points sorted by (recall asc, precision desc) and a
  // (recall 0, precision 1) anchor.
  std::vector<real> taus = pred;
  std::sort(taus.begin(), taus.end());
  taus.erase(std::unique(taus.begin(), taus.end()), taus.end());
  taus.push_back(real(0));  // tau below every value so recall reaches 1
  real npos = 0;
  for (real g : gt) npos += g;
  if (npos == 0) return 0;
  std::vector<std::pair<real, real>> pts;
  pts.emplace_back(real(0), real(1));
  for (real tau : taus) {
    real tp = 0, fp = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
      if (pred[i] > tau) {
        if (gt[i] > real(0.5))
          tp += 1;
        else
          fp += 1;
      }
    }
    const real recall = tp / npos;
    const real precision = (tp + fp) > 0 ? tp / (tp + fp) : real(1);
    pts.emplace_back(recall, precision);
  }
  std::sort(pts.begin(), pts.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first < b.first;
    return a.second > b.second;
  });
  real auc = 0;
  for (size_t i = 1; i < pts.size(); ++i)
    auc += (pts[i].first - pts[i - 1].first) * (pts[i].second + pts[i - 1].second) / 2;
  return auc;
}

real soft_iou_loop(const std::vector<real>& pred, const std::vector<real>& gt) {
  real inter = 0, sp = 0, sg = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    inter += pred[i] * gt[i];
    sp += pred[i];
    sg += gt[i];
  }
  const real denom = sp + sg - inter;
  return denom > 0 ? inter / denom : real(0);
}

real epe_loop(const std::vector<real>& pred_flow_x, const std::vector<real>& pred_flow_y,
              const std::vector<real>& gt_flow_x, const std::vector<real>& gt_flow_y,
              const std::vector<real>& gt_occ) {
  real sum = 0, count = 0;
  for (size_t i = 0; i < gt_occ.size(); ++i) {
    if (gt_occ[i] > 0) {
      const real dx = pred_flow_x[i] - gt_flow_x[i];
      const real dy = pred_flow_y[i] - gt_flow_y[i];
      sum += std::sqrt(dx * dx + dy * dy);
      count += 1;
    }
  }
  return count > 0 ? sum / count : real(0);
}

}  // namespace occflow::ref
