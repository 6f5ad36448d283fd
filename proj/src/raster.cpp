// SPDX-License-Identifier: Apache-2.0
#include "occflow/raster.h"

#include <algorithm>
#include <cmath>
#include <limits>

namespace occflow {

namespace {

bool class_selected(AgentClass c, unsigned mask) {
  return (mask >> static_cast<int>(c)) & 1u;
}

}  // namespace

AgentRaster rasterize_agents(const Scenario& s, int frame, const GridSpec& grid,
                             unsigned class_mask) {
  grid.validate();
  OCCFLOW_CHECK(frame >= 0 && frame < s.n_history, ConfigError,
                "frame " << frame << " outside the history window [0, " << s.n_history << ")");
  const int n = grid.size_px();
  AgentRaster out;
  out.occ = Tensor::zeros({n, n});
  out.attr = Tensor::zeros({7, n, n});
  std::vector<real> owner_dist(static_cast<size_t>(n) * n,
                               std::numeric_limits<real>::infinity());
  for (const auto& tr : s.tracks) {
    if (!class_selected(tr.cls, class_mask)) continue;
    OCCFLOW_CHECK(frame < static_cast<int>(tr.states.size()), DataError,
                  "track " << tr.id << " shorter than requested frame");
    const auto& st = tr.states[static_cast<size_t>(frame)];
    if (!st.valid || !st.visible) continue;
    const real rad = std::hypot(tr.length, tr.width) / 2;
    const int x0 = std::max(0, grid.cell_x(st.x - rad) - 1);
    const int x1 = std::min(n - 1, grid.cell_x(st.x + rad) + 1);
    const int y0 = std::max(0, grid.cell_y(st.y - rad) - 1);
    const int y1 = std::min(n - 1, grid.cell_y(st.y + rad) + 1);
    for (int iy = y0; iy <= y1; ++iy) {
      for (int ix = x0; ix <= x1; ++ix) {
        const real px = grid.cell_center_x(ix), py = grid.cell_center_y(iy);
        if (!point_in_obb(px, py, st.x, st.y, st.heading, tr.length, tr.width)) continue;
        out.occ.at({iy, ix}) = 1;
        const real d2 = (px - st.x) * (px - st.x) + (py - st.y) * (py - st.y);
        real& od = owner_dist[static_cast<size_t>(iy) * n + ix];
        if (d2 >= od) continue;
        od = d2;
        out.attr.at({0, iy, ix}) = st.z;
        out.attr.at({1, iy, ix}) = st.vx;
        out.attr.at({2, iy, ix}) = st.vy;
        out.attr.at({3, iy, ix}) = st.speed;
        out.attr.at({4, iy, ix}) = tr.length;
        out.attr.at({5, iy, ix}) = tr.width;
        out.attr.at({6, iy, ix}) = tr.height;
      }
    }
  }
  return out;
}

namespace {

void stroke(Tensor& grid_t, int ch, int x0, int y0, int x1, int y1, int n) {
  int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
  int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  while (true) {
    if (x0 >= 0 && x0 < n && y0 >= 0 && y0 < n) grid_t.at({ch, y0, x0}) = 1;
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

}  // namespace

Tensor rasterize_map(const Scenario& s, const GridSpec& grid) {
  grid.validate();
  const int n = grid.size_px();
  Tensor out = Tensor::zeros({kRoadChannels, n, n});
  for (const auto& el : s.map) {
    OCCFLOW_CHECK(el.element_type >= 0 && el.element_type < kRoadChannels, DataError,
                  "map element type " << el.element_type << " out of range");
    for (size_t i = 0; i + 1 < el.polyline.size(); ++i) {
      const auto& [ax, ay] = el.polyline[i];
      const auto& [bx, by] = el.polyline[i + 1];
      stroke(out, el.element_type, grid.cell_x(ax), grid.cell_y(ay), grid.cell_x(bx),
             grid.cell_y(by), n);
    }
  }
  return out;
}

Tensor build_2d_input(const Scenario& s, const GridSpec& grid) {
  s.validate();
  OCCFLOW_CHECK(s.n_history == kHistoryFrames, DataError,
                "dense input requires " << kHistoryFrames << " history frames, scenario has "
                                        << s.n_history);
  const int n = grid.size_px();
  Tensor out = Tensor::zeros({kDenseChannels, n, n});
  const int64_t plane = static_cast<int64_t>(n) * n;
  auto copy_plane = [&](const Tensor& src, int64_t src_plane, int dst_ch) {
    std::copy_n(src.data() + src_plane * plane, plane, out.data() + dst_ch * plane);
  };
  for (int f = 0; f < s.n_history; ++f) {
    const AgentRaster veh = rasterize_agents(s, f, grid, kClassVehicle);
    const AgentRaster mrg = rasterize_agents(s, f, grid, kClassPedestrian | kClassCyclist);
    const AgentRaster all = rasterize_agents(s, f, grid, kClassAll);
    copy_plane(veh.occ, 0, f);
    copy_plane(mrg.occ, 0, kHistoryFrames + f);
    for (int a = 0; a < 4; ++a)  // z, vx, vy, speed
      copy_plane(all.attr, a, kOccupancyChannels + a * kHistoryFrames + f);
    if (f == s.current_frame())
      for (int a = 0; a < 3; ++a)  // length, width, height
        copy_plane(all.attr, 4 + a, kOccupancyChannels + 4 * kHistoryFrames + a);
  }
  const Tensor road = rasterize_map(s, grid);
  for (int c = 0; c < kRoadChannels; ++c)
    copy_plane(road, c, kOccupancyChannels + kAttributeChannels + c);
  return out;
}

Tensor SparseInput::densify() const {
  Tensor out = Tensor::zeros({kFeat, t, h, w});
  for (int64_t i = 0; i < sites(); ++i) {
    const int ft = coords[3 * i], fy = coords[3 * i + 1], fx = coords[3 * i + 2];
    for (int c = 0; c < kFeat; ++c) out.at({c, ft, fy, fx}) = feats[kFeat * i + c];
  }
  return out;
}

Tensor SparseInput::mask() const {
  Tensor out = Tensor::zeros({1, t, h, w});
  for (int64_t i = 0; i < sites(); ++i)
    out.at({0, coords[3 * i], coords[3 * i + 1], coords[3 * i + 2]}) = 1;
  return out;
}

SparseInput build_3d_input(const Scenario& s, const GridSpec& grid) {
  s.validate();
  OCCFLOW_CHECK(s.n_history == kHistoryFrames, DataError,
                "spatio-temporal input requires " << kHistoryFrames
                                                  << " history frames, scenario has "
                                                  << s.n_history);
  const int n = grid.size_px();
  SparseInput sp;
  sp.t = s.n_history;
  sp.h = n;
  sp.w = n;

  const Tensor road = rasterize_map(s, grid);
  // static features collapse to 3 channels: lane center, edge, everything else
  Tensor stat = Tensor::zeros({3, n, n});
  for (int c = 0; c < kRoadChannels; ++c) {
    const int dst = c == kRoadLaneCenter ? 0 : c == kRoadEdge ? 1 : 2;
    for (int64_t i = 0; i < static_cast<int64_t>(n) * n; ++i) {
      const real v = road.data()[c * static_cast<int64_t>(n) * n + i];
      real& d = stat.data()[dst * static_cast<int64_t>(n) * n + i];
      d = std::max(d, v);
    }
  }

  std::vector<Tensor> occ(3);
  for (int f = 0; f < s.n_history; ++f) {
    occ[0] = rasterize_agents(s, f, grid, kClassVehicle).occ;
    occ[1] = rasterize_agents(s, f, grid, kClassPedestrian).occ;
    occ[2] = rasterize_agents(s, f, grid, kClassCyclist).occ;
    for (int iy = 0; iy < n; ++iy) {
      for (int ix = 0; ix < n; ++ix) {
        real v[SparseInput::kFeat];
        v[0] = occ[0].at({iy, ix});
        v[1] = occ[1].at({iy, ix});
        v[2] = occ[2].at({iy, ix});
        v[3] = stat.at({0, iy, ix});
        v[4] = stat.at({1, iy, ix});
        v[5] = stat.at({2, iy, ix});
        bool any = false;
        for (real x : v) any = any || x != 0;
        if (!any) continue;
        sp.coords.push_back(f);
        sp.coords.push_back(iy);
        sp.coords.push_back(ix);
        sp.feats.insert(sp.feats.end(), v, v + SparseInput::kFeat);
      }
    }
  }
  return sp;
}

Tensor crop_center(const Tensor& x, real ratio) {
  OCCFLOW_CHECK(ratio > 0 && ratio <= 1, ConfigError, "crop ratio must be in (0, 1]");
  OCCFLOW_CHECK(x.ndim() == 3, ShapeError, "crop expects [C, H, W], got " << x.shape_str());
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int nh = static_cast<int>(std::floor(h * ratio + 1e-9));
  const int nw = static_cast<int>(std::floor(w * ratio + 1e-9));
  OCCFLOW_CHECK(nh >= 1 && nw >= 1, ConfigError,
                "crop of " << h << "x" << w << " at ratio " << ratio << " is empty");
  const int oy = (h - nh) / 2, ox = (w - nw) / 2;
  Tensor out({c, nh, nw});
  for (int ci = 0; ci < c; ++ci)
    for (int iy = 0; iy < nh; ++iy)
      std::copy_n(x.data() + (static_cast<int64_t>(ci) * h + oy + iy) * w + ox, nw,
                  out.data() + (static_cast<int64_t>(ci) * nh + iy) * nw);
  return out;
}

std::vector<Tensor> crop_pyramid(const std::vector<Tensor>& levels, real ratio) {
  std::vector<Tensor> out;
  out.reserve(levels.size());
  for (const auto& lv : levels) out.push_back(crop_center(lv, ratio));
  return out;
}

}  // namespace occflow
