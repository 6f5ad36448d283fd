// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include <doctest.h>

#include "helpers.h"
#include "occflow/raster.h"

using namespace occflow;

namespace {

constexpr real kPi = 3.14159265358979323846;

Scenario empty_scene() {
  Scenario s;
  return s;
}

// Single agent holding one pose for the whole scenario.
Scenario static_agent(AgentClass cls, real x, real y, real heading, real l, real w, real h,
                      bool visible = true) {
  Scenario s;
  AgentTrack tr;
  tr.id = 0;
  tr.cls = cls;
  tr.length = l;
  tr.width = w;
  tr.height = h;
  AgentState st;
  st.x = x;
  st.y = y;
  st.z = h / 2;
  st.heading = heading;
  st.visible = visible;
  tr.states.assign(static_cast<size_t>(s.total_frames()), st);
  s.tracks.push_back(std::move(tr));
  return s;
}

int64_t nnz(const Tensor& t) {
  int64_t c = 0;
  for (int64_t i = 0; i < t.numel(); ++i)
    if (t[i] != 0) ++c;
  return c;
}

}  // namespace

TEST_CASE("agent raster: empty scenario gives all-zero grids") {
  const GridSpec grid = GridSpec::centered(8.0, 1.0);
  const AgentRaster r = rasterize_agents(empty_scene(), 0, grid, kClassAll);
  CHECK(nnz(r.occ) == 0);
  CHECK(nnz(r.attr) == 0);
}

TEST_CASE("agent raster: 2x2 box on a cell corner covers exactly 4 cells") {
  const GridSpec grid = GridSpec::centered(4.0, 1.0);
  const Scenario s = static_agent(AgentClass::vehicle, 0.0, 0.0, 0.0, 2.0, 2.0, 1.5);
  const AgentRaster r = rasterize_agents(s, 0, grid, kClassAll);
  CHECK(nnz(r.occ) == 4);
  // brute-force oracle: axis-aligned containment of each cell center
  for (int iy = 0; iy < grid.size_px(); ++iy)
    for (int ix = 0; ix < grid.size_px(); ++ix) {
      const bool inside = std::abs(grid.cell_center_x(ix)) <= 1.0 &&
                          std::abs(grid.cell_center_y(iy)) <= 1.0;
      CHECK(r.occ.at({iy, ix}) == (inside ? 1.0 : 0.0));
    }
}

TEST_CASE("agent raster: quarter-turn rotation transposes the footprint") {
  const GridSpec grid = GridSpec::centered(9.0, 1.0);
  const Scenario a = static_agent(AgentClass::vehicle, 0.0, 0.0, 0.0, 4.2, 2.2, 1.5);
  const Scenario b = static_agent(AgentClass::vehicle, 0.0, 0.0, kPi / 2, 4.2, 2.2, 1.5);
  const Tensor occ_a = rasterize_agents(a, 0, grid, kClassAll).occ;
  const Tensor occ_b = rasterize_agents(b, 0, grid, kClassAll).occ;
  CHECK(nnz(occ_a) > 0);
  const int n = grid.size_px();
  for (int iy = 0; iy < n; ++iy)
    for (int ix = 0; ix < n; ++ix) CHECK(occ_b.at({iy, ix}) == occ_a.at({ix, iy}));
}

TEST_CASE("agent raster: attributes broadcast over the footprint, empty cells zero") {
  const GridSpec grid = GridSpec::centered(16.0, 0.5);
  Scenario s = static_agent(AgentClass::vehicle, 1.2, -0.8, 0.3, 4.5, 2.0, 1.6);
  for (auto& st : s.tracks[0].states) {
    st.vx = 1.5;
    st.vy = -0.5;
    st.speed = std::sqrt(st.vx * st.vx + st.vy * st.vy);
  }
  const AgentRaster r = rasterize_agents(s, 3, grid, kClassAll);
  REQUIRE(nnz(r.occ) > 0);
  for (int iy = 0; iy < grid.size_px(); ++iy)
    for (int ix = 0; ix < grid.size_px(); ++ix) {
      const bool occ = r.occ.at({iy, ix}) != 0;
      CHECK(r.attr.at({0, iy, ix}) == (occ ? 0.8 : 0.0));
      CHECK(r.attr.at({1, iy, ix}) == (occ ? 1.5 : 0.0));
      CHECK(r.attr.at({2, iy, ix}) == (occ ? -0.5 : 0.0));
      CHECK(r.attr.at({4, iy, ix}) == (occ ? 4.5 : 0.0));
      CHECK(r.attr.at({6, iy, ix}) == (occ ? 1.6 : 0.0));
    }
}

TEST_CASE("agent raster: overlap resolves to the nearest agent center") {
  const GridSpec grid = GridSpec::centered(16.0, 0.5);
  Scenario s = static_agent(AgentClass::vehicle, -1.0, 0.0, 0.0, 4.0, 2.0, 1.5);
  Scenario other = static_agent(AgentClass::vehicle, 1.0, 0.0, 0.0, 4.0, 2.0, 1.5);
  other.tracks[0].id = 1;
  other.tracks[0].height = 1.9;
  s.tracks.push_back(other.tracks[0]);
  const AgentRaster r = rasterize_agents(s, 0, grid, kClassAll);
  for (int iy = 0; iy < grid.size_px(); ++iy)
    for (int ix = 0; ix < grid.size_px(); ++ix) {
      if (r.occ.at({iy, ix}) == 0) continue;
      const real px = grid.cell_center_x(ix), py = grid.cell_center_y(iy);
      const real da = std::hypot(px + 1.0, py), db = std::hypot(px - 1.0, py);
      if (da < db) CHECK(r.attr.at({6, iy, ix}) == 1.5);
      if (db < da) CHECK(r.attr.at({6, iy, ix}) == 1.9);
    }
}

TEST_CASE("agent raster: invisible agents contribute nothing") {
  const GridSpec grid = GridSpec::centered(16.0, 0.5);
  const Scenario s =
      static_agent(AgentClass::vehicle, 0.0, 0.0, 0.0, 4.0, 2.0, 1.5, /*visible=*/false);
  for (int f = 0; f < s.n_history; ++f)
    CHECK(nnz(rasterize_agents(s, f, grid, kClassAll).occ) == 0);
}

TEST_CASE("agent raster: frame outside the history window is rejected") {
  const GridSpec grid = GridSpec::centered(8.0, 1.0);
  const Scenario s = empty_scene();
  CHECK_THROWS_AS(rasterize_agents(s, -1, grid, kClassAll), ConfigError);
  CHECK_THROWS_AS(rasterize_agents(s, s.n_history, grid, kClassAll), ConfigError);
}

TEST_CASE("agent raster: integer-cell translation shifts the footprint exactly") {
  const GridSpec grid;  // 128 px at 0.3125 m/px
  const Scenario a = static_agent(AgentClass::vehicle, -3.03, 0.87, 0.37, 4.3, 1.9, 1.6);
  Scenario b = a;
  const int sx = 3, sy = -2;
  for (auto& st : b.tracks[0].states) {
    st.x += sx * grid.resolution_mpp;
    st.y += sy * grid.resolution_mpp;
  }
  const Tensor occ_a = rasterize_agents(a, 0, grid, kClassAll).occ;
  const Tensor occ_b = rasterize_agents(b, 0, grid, kClassAll).occ;
  CHECK(nnz(occ_a) > 0);
  const int n = grid.size_px();
  for (int iy = std::max(0, sy); iy < std::min(n, n + sy); ++iy)
    for (int ix = std::max(0, sx); ix < std::min(n, n + sx); ++ix)
      CHECK(occ_b.at({iy, ix}) == occ_a.at({iy - sy, ix - sx}));
}

TEST_CASE("map raster: no elements give zeros") {
  const GridSpec grid = GridSpec::centered(8.0, 1.0);
  CHECK(nnz(rasterize_map(empty_scene(), grid)) == 0);
}

TEST_CASE("map raster: a horizontal polyline fills exactly one row segment") {
  const GridSpec grid = GridSpec::centered(16.0, 0.5);
  Scenario s = empty_scene();
  s.map.push_back({{{-6.0, 1.2}, {6.0, 1.2}}, kRoadEdge});
  const Tensor road = rasterize_map(s, grid);
  const int row = grid.cell_y(1.2);
  const int c0 = grid.cell_x(-6.0), c1 = grid.cell_x(6.0);
  CHECK(nnz(road) == c1 - c0 + 1);
  for (int ix = c0; ix <= c1; ++ix) CHECK(road.at({kRoadEdge, row, ix}) == 1.0);
}

TEST_CASE("map raster: channels of different types are independent") {
  const GridSpec grid = GridSpec::centered(16.0, 0.5);
  Scenario a = empty_scene();
  a.map.push_back({{{-5.0, -2.0}, {5.0, 3.0}}, kRoadLaneCenter});
  Scenario b = empty_scene();
  b.map.push_back({{{-4.0, 4.0}, {4.0, -4.0}}, kRoadCrosswalk});
  Scenario both = empty_scene();
  both.map = {a.map[0], b.map[0]};
  const Tensor ra = rasterize_map(a, grid);
  const Tensor rb = rasterize_map(b, grid);
  const Tensor rboth = rasterize_map(both, grid);
  for (int64_t i = 0; i < rboth.numel(); ++i) CHECK(rboth[i] == ra[i] + rb[i]);
}

TEST_CASE("map raster: out-of-range element type is rejected") {
  const GridSpec grid = GridSpec::centered(8.0, 1.0);
  Scenario s = empty_scene();
  s.map.push_back({{{0.0, 0.0}, {1.0, 1.0}}, kRoadChannels});
  CHECK_THROWS_AS(rasterize_map(s, grid), DataError);
}

TEST_CASE("dense input: channel count and class routing") {
  const GridSpec grid;
  GenConfig cfg;
  const Tensor x = build_2d_input(generate_scenario(3, cfg), grid);
  REQUIRE(x.ndim() == 3);
  CHECK(x.dim(0) == 98);
  CHECK(x.dim(1) == grid.size_px());
  for (int c = 0; c < kOccupancyChannels; ++c)
    for (int iy = 0; iy < x.dim(1); ++iy)
      for (int ix = 0; ix < x.dim(2); ++ix) {
        const real v = x.at({c, iy, ix});
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
      }

  // pedestrians and cyclists only: vehicle planes stay empty, merged planes fill
  cfg.vehicles_min = cfg.vehicles_max = 0;
  cfg.peds_min = cfg.peds_max = 3;
  cfg.cyclists_min = cfg.cyclists_max = 2;
  const Tensor y = build_2d_input(generate_scenario(4, cfg), grid);
  int64_t veh = 0, merged = 0;
  const int64_t plane = static_cast<int64_t>(grid.size_px()) * grid.size_px();
  for (int f = 0; f < kHistoryFrames; ++f)
    for (int64_t i = 0; i < plane; ++i) {
      veh += y.data()[f * plane + i] != 0;
      merged += y.data()[(kHistoryFrames + f) * plane + i] != 0;
    }
  CHECK(veh == 0);
  CHECK(merged > 0);
}

TEST_CASE("dense input: attribute channels are zero wherever occupancy is zero") {
  const GridSpec grid;
  GenConfig cfg;
  const Tensor x = build_2d_input(generate_scenario(9, cfg), grid);
  const int n = grid.size_px();
  for (int iy = 0; iy < n; ++iy)
    for (int ix = 0; ix < n; ++ix) {
      bool occupied = false;
      for (int c = 0; c < kOccupancyChannels; ++c) occupied |= x.at({c, iy, ix}) != 0;
      if (occupied) continue;
      for (int c = kOccupancyChannels; c < kOccupancyChannels + kAttributeChannels; ++c)
        CHECK(x.at({c, iy, ix}) == 0.0);
    }
}

TEST_CASE("dense input: per-frame velocity channels carry the agent state") {
  const GridSpec grid;
  Scenario s = static_agent(AgentClass::vehicle, 0.4, 0.6, 0.0, 4.5, 2.0, 1.6);
  for (auto& st : s.tracks[0].states) {
    st.vx = 2.0;
    st.speed = 2.0;
  }
  const Tensor x = build_2d_input(s, grid);
  const AgentRaster r = rasterize_agents(s, 5, grid, kClassAll);
  for (int iy = 0; iy < grid.size_px(); ++iy)
    for (int ix = 0; ix < grid.size_px(); ++ix) {
      const real occ = r.occ.at({iy, ix});
      CHECK(x.at({kOccupancyChannels + kHistoryFrames + 5, iy, ix}) == occ * 2.0);
      CHECK(x.at({kOccupancyChannels + 4 * kHistoryFrames, iy, ix}) == occ * 4.5);
    }
}

TEST_CASE("dense input: wrong history length is rejected") {
  const GridSpec grid;
  Scenario s = empty_scene();
  s.n_history = 7;
  CHECK_THROWS_AS(build_2d_input(s, grid), DataError);
  CHECK_THROWS_AS(build_3d_input(s, grid), DataError);
}

TEST_CASE("sparse input: empty scene gives an empty coordinate list") {
  const GridSpec grid = GridSpec::centered(8.0, 1.0);
  const SparseInput sp = build_3d_input(empty_scene(), grid);
  CHECK(sp.sites() == 0);
  CHECK(nnz(sp.densify()) == 0);
}

TEST_CASE("sparse input: static features repeat identically across frames") {
  const GridSpec grid = GridSpec::centered(16.0, 0.5);
  Scenario s = empty_scene();
  s.map.push_back({{{-5.0, 0.0}, {5.0, 2.0}}, kRoadLaneCenter});
  s.map.push_back({{{-5.0, -3.0}, {5.0, -3.0}}, kRoadStopSign});
  const SparseInput sp = build_3d_input(s, grid);
  REQUIRE(sp.sites() > 0);
  CHECK(sp.sites() % s.n_history == 0);
  const Tensor dense = sp.densify();
  for (int64_t i = 0; i < sp.sites(); ++i) {
    const int t = sp.coords[3 * i], y = sp.coords[3 * i + 1], x = sp.coords[3 * i + 2];
    for (int c = 0; c < SparseInput::kFeat; ++c)
      CHECK(dense.at({c, t, y, x}) == dense.at({c, 0, y, x}));
  }
}

TEST_CASE("sparse input: no listed site is all-zero and coordinates are sorted") {
  const GridSpec grid;
  GenConfig cfg;
  const SparseInput sp = build_3d_input(generate_scenario(13, cfg), grid);
  REQUIRE(sp.sites() > 0);
  for (int64_t i = 0; i < sp.sites(); ++i) {
    bool any = false;
    for (int c = 0; c < SparseInput::kFeat; ++c) any |= sp.feats[SparseInput::kFeat * i + c] != 0;
    CHECK(any);
    if (i > 0) {
      const auto a = std::make_tuple(sp.coords[3 * i - 3], sp.coords[3 * i - 2],
                                     sp.coords[3 * i - 1]);
      const auto b = std::make_tuple(sp.coords[3 * i], sp.coords[3 * i + 1], sp.coords[3 * i + 2]);
      CHECK(a < b);
    }
  }
}

TEST_CASE("sparse input: densify equals the dense construction") {
  const GridSpec grid;
  GenConfig cfg;
  for (uint64_t seed : {1ull, 14ull, 27ull}) {
    const Scenario s = generate_scenario(seed, cfg);
    const SparseInput sp = build_3d_input(s, grid);
    const int n = grid.size_px();
    Tensor dense = Tensor::zeros({SparseInput::kFeat, s.n_history, n, n});
    const Tensor road = rasterize_map(s, grid);
    for (int f = 0; f < s.n_history; ++f) {
      const Tensor veh = rasterize_agents(s, f, grid, kClassVehicle).occ;
      const Tensor ped = rasterize_agents(s, f, grid, kClassPedestrian).occ;
      const Tensor cyc = rasterize_agents(s, f, grid, kClassCyclist).occ;
      for (int iy = 0; iy < n; ++iy)
        for (int ix = 0; ix < n; ++ix) {
          dense.at({0, f, iy, ix}) = veh.at({iy, ix});
          dense.at({1, f, iy, ix}) = ped.at({iy, ix});
          dense.at({2, f, iy, ix}) = cyc.at({iy, ix});
          dense.at({3, f, iy, ix}) = road.at({kRoadLaneCenter, iy, ix});
          dense.at({4, f, iy, ix}) = road.at({kRoadEdge, iy, ix});
          real other = 0;
          for (int c = 0; c < kRoadChannels; ++c)
            if (c != kRoadLaneCenter && c != kRoadEdge)
              other = std::max(other, road.at({c, iy, ix}));
          dense.at({5, f, iy, ix}) = other;
        }
    }
    CHECK(tst::max_abs_diff(sp.densify(), dense) == 0.0);
  }
}

TEST_CASE("crop: ratio one is the identity") {
  Rng rng(5);
  const Tensor x = tst::randn({3, 12, 12}, rng);
  CHECK(tst::max_abs_diff(crop_center(x, 1.0), x) == 0.0);
}

TEST_CASE("crop: documented size arithmetic") {
  Tensor big = Tensor::zeros({1, 768, 768});
  const Tensor c1 = crop_center(big, 2.0 / 3.0);
  CHECK(c1.dim(1) == 512);
  CHECK(c1.dim(2) == 512);

  Tensor x({1, 96, 96});
  for (int64_t i = 0; i < x.numel(); ++i) x[i] = static_cast<real>(i);
  const Tensor c2 = crop_center(x, 2.0 / 3.0);
  REQUIRE(c2.dim(1) == 64);
  for (int iy = 0; iy < 64; ++iy)
    for (int ix = 0; ix < 64; ++ix)
      CHECK(c2.at({0, iy, ix}) == x.at({0, 16 + iy, 16 + ix}));
}

TEST_CASE("crop: pyramid maps every level, bad ratios rejected") {
  Rng rng(6);
  std::vector<Tensor> levels = {tst::randn({2, 24, 24}, rng), tst::randn({4, 12, 12}, rng)};
  const auto out = crop_pyramid(levels, 0.5);
  REQUIRE(out.size() == 2);
  CHECK(out[0].dim(1) == 12);
  CHECK(out[1].dim(1) == 6);
  CHECK(out[1].dim(0) == 4);
  CHECK_THROWS_AS(crop_center(levels[0], 0.0), ConfigError);
  CHECK_THROWS_AS(crop_center(levels[0], 1.5), ConfigError);
  CHECK_THROWS_AS(crop_center(Tensor::zeros({1, 1, 1}), 0.5), ConfigError);
}
