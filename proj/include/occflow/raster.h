// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "occflow/core/tensor.h"
#include "occflow/scenario.h"

namespace occflow {

inline constexpr unsigned kClassVehicle = 1u << 0;
inline constexpr unsigned kClassPedestrian = 1u << 1;
inline constexpr unsigned kClassCyclist = 1u << 2;
inline constexpr unsigned kClassAll = kClassVehicle | kClassPedestrian | kClassCyclist;

// Dense input channel layout. Occupancy is frame-major within class: vehicle
// frames first, then the merged pedestrian+cyclist frames. Attributes are
// attribute-major: z over all frames, then vx, vy, speed, then the three
// static box channels stamped at the current frame.
inline constexpr int kHistoryFrames = 11;
inline constexpr int kOccupancyChannels = 2 * kHistoryFrames;
inline constexpr int kAttributeChannels = 4 * kHistoryFrames + 3;
inline constexpr int kDenseChannels = kOccupancyChannels + kAttributeChannels + kRoadChannels;
static_assert(kDenseChannels == 98, "dense input layout must stay 22 + 47 + 29");

struct AgentRaster {
  Tensor occ;   // [H, W], values in {0,1}
  Tensor attr;  // [7, H, W]: z, vx, vy, speed, length, width, height
};

// Cell-center-inside occupancy for the selected classes at one frame, with
// the owning agent's attributes broadcast over its footprint. Cells covered
// by several agents take the attributes of the nearest agent center. Agents
// invisible or invalid at the frame contribute nothing.
AgentRaster rasterize_agents(const Scenario& s, int frame, const GridSpec& grid,
                             unsigned class_mask);

// Polylines drawn as 1-cell Bresenham strokes into their type channel.
Tensor rasterize_map(const Scenario& s, const GridSpec& grid);  // [29, H, W]

Tensor build_2d_input(const Scenario& s, const GridSpec& grid);  // [98, H, W]

// Coordinate-list spatio-temporal raster. Sites are lexicographic in
// (t, y, x); a listed site always has at least one nonzero feature.
struct SparseInput {
  static constexpr int kFeat = 6;  // veh, ped, cyc, lane center, edge, other road
  int t = 0, h = 0, w = 0;
  std::vector<int> coords;  // 3 ints per site: t, y, x
  std::vector<real> feats;  // kFeat reals per site

  int64_t sites() const { return static_cast<int64_t>(coords.size()) / 3; }
  Tensor densify() const;  // [6, T, H, W]
  Tensor mask() const;     // [1, T, H, W]
};

SparseInput build_3d_input(const Scenario& s, const GridSpec& grid);

// Center crop keeping floor(size * ratio) cells per side, left margin floored.
Tensor crop_center(const Tensor& x, real ratio);  // x [C, H, W]
std::vector<Tensor> crop_pyramid(const std::vector<Tensor>& levels, real ratio);

}  // namespace occflow
