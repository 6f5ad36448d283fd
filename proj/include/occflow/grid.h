// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>

#include "occflow/common.h"

namespace occflow {

// Square BEV grid. origin is the world position of the corner of cell (0,0);
// row index follows y, column index follows x. Flow fields store (dx, dy) in
// grid-cell units with channel 0 = dx.
struct GridSpec {
  real extent_m = 40.0;
  real resolution_mpp = 0.3125;
  real origin_x = -20.0;
  real origin_y = -20.0;

  static GridSpec centered(real extent, real res) {
    GridSpec g;
    g.extent_m = extent;
    g.resolution_mpp = res;
    g.origin_x = -extent / 2;
    g.origin_y = -extent / 2;
    g.validate();
    return g;
  }

  int size_px() const {
    const real n = extent_m / resolution_mpp;
    return static_cast<int>(std::lround(n));
  }

  void validate() const {
    OCCFLOW_CHECK(resolution_mpp > 0, ConfigError, "grid resolution must be positive");
    OCCFLOW_CHECK(extent_m > 0, ConfigError, "grid extent must be positive");
    const real n = extent_m / resolution_mpp;
    OCCFLOW_CHECK(std::abs(n - std::lround(n)) < 1e-9 && std::lround(n) >= 1, ConfigError,
                  "grid extent " << extent_m << " / " << resolution_mpp
                                 << " is not a positive integer pixel count");
  }

  real cell_center_x(int ix) const { return origin_x + (ix + real(0.5)) * resolution_mpp; }
  real cell_center_y(int iy) const { return origin_y + (iy + real(0.5)) * resolution_mpp; }
  int cell_x(real wx) const { return static_cast<int>(std::floor((wx - origin_x) / resolution_mpp)); }
  int cell_y(real wy) const { return static_cast<int>(std::floor((wy - origin_y) / resolution_mpp)); }
  bool in_bounds(int ix, int iy) const {
    const int n = size_px();
    return ix >= 0 && ix < n && iy >= 0 && iy < n;
  }
};

// Cell-center-inside test against an oriented box; length runs along the
// heading axis. Boundary points count as inside.
inline bool point_in_obb(real px, real py, real cx, real cy, real heading, real length,
                         real width) {
  const real dx = px - cx, dy = py - cy;
  const real c = std::cos(heading), s = std::sin(heading);
  const real lx = c * dx + s * dy;
  const real ly = -s * dx + c * dy;
  return std::abs(lx) <= length / 2 && std::abs(ly) <= width / 2;
}

}  // namespace occflow
