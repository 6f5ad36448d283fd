// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "occflow/core/tensor.h"
#include "occflow/grid.h"

namespace occflow {

enum class AgentClass { vehicle = 0, pedestrian = 1, cyclist = 2 };

struct AgentState {
  real x = 0, y = 0, z = 0;
  real heading = 0;
  real vx = 0, vy = 0, speed = 0;
  bool valid = true;
  bool visible = true;

  bool operator==(const AgentState&) const = default;
};

struct AgentTrack {
  int id = 0;
  AgentClass cls = AgentClass::vehicle;
  std::vector<AgentState> states;  // one per scenario frame
  real length = 0, width = 0, height = 0;

  bool operator==(const AgentTrack&) const = default;
  // True when the track was invisible for the whole history window; such
  // agents feed the occluded ground-truth grids.
  bool hidden_in_history(int n_history) const {
    for (int k = 0; k < n_history && k < static_cast<int>(states.size()); ++k)
      if (states[static_cast<size_t>(k)].visible) return false;
    return true;
  }
};

// Road-feature taxonomy over 29 channels. Only the first few are populated by
// the synthetic generator; the rest are reserved indices.
inline constexpr int kRoadChannels = 29;
inline constexpr int kRoadLaneCenter = 0;
inline constexpr int kRoadEdge = 1;
inline constexpr int kRoadStopSign = 2;
inline constexpr int kRoadCrosswalk = 3;
inline constexpr int kRoadSpeedBump = 4;

struct MapElement {
  std::vector<std::pair<real, real>> polyline;
  int element_type = 0;

  bool operator==(const MapElement&) const = default;
};

struct Scenario {
  std::vector<AgentTrack> tracks;
  std::vector<MapElement> map;
  real frame_dt = 0.1;
  int n_history = 11;
  int n_future = 8;       // future waypoints
  int stride = 10;        // frames per waypoint

  bool operator==(const Scenario&) const = default;
  int total_frames() const { return n_history + n_future * stride; }
  int current_frame() const { return n_history - 1; }
  void validate() const;
};

struct GenConfig {
  int vehicles_min = 4, vehicles_max = 9;
  int peds_min = 0, peds_max = 3;
  int cyclists_min = 0, cyclists_max = 2;
  real speed_min = 0.4, speed_max = 3.0;     // m/s, vehicles
  real parked_frac = 0.25;                   // vehicles with zero speed
  real occluded_frac = 0.15;                 // vehicles hidden during history
  std::string layout = "mixed";              // straight | intersection | curve | mixed
  real extent_m = 40.0;                      // spawn region, centered on the origin
  int n_history = 11, n_future = 8, stride = 10;
  real frame_dt = 0.1;

  void validate() const;
};

// Per-waypoint ground truth on an output grid of side H. Waypoint index t in
// [0, T) corresponds to waypoint t+1 of the scenario; occ0 holds the
// current-frame occupancy used as the first warp source. Backward flow: the
// displacement from each occupied cell at waypoint t to the same material
// point at waypoint t-1, in grid cells.
struct GroundTruth {
  Tensor occ0;      // [H, W]
  Tensor observed;  // [T, H, W]
  Tensor occluded;  // [T, H, W]
  Tensor flow;      // [T, 2, H, W], channel 0 = dx
};

Scenario generate_scenario(uint64_t seed, const GenConfig& cfg);
GroundTruth derive_ground_truth(const Scenario& s, const GridSpec& grid);

void save_scenario(const Scenario& s, const std::string& path);
Scenario load_scenario(const std::string& path);

}  // namespace occflow
