// SPDX-License-Identifier: Apache-2.0
#include "occflow/scenario.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "occflow/core/rng.h"

namespace occflow {

namespace {
constexpr real kPi = 3.14159265358979323846;
}

void Scenario::validate() const {
  OCCFLOW_CHECK(n_history >= 1 && n_future >= 1 && stride >= 1, DataError,
                "degenerate scenario horizon");
  for (const auto& tr : tracks) {
    OCCFLOW_CHECK(static_cast<int>(tr.states.size()) == total_frames(), DataError,
                  "track " << tr.id << " has " << tr.states.size() << " states, expected "
                           << total_frames());
    OCCFLOW_CHECK(tr.length > 0 && tr.width > 0 && tr.height > 0, DataError,
                  "track " << tr.id << " has non-positive box dimensions");
    for (const auto& st : tr.states) {
      if (!st.valid) continue;
      const real sp = std::sqrt(st.vx * st.vx + st.vy * st.vy);
      OCCFLOW_CHECK(std::abs(sp - st.speed) < 1e-6, DataError,
                    "track " << tr.id << " speed field inconsistent with velocity");
    }
  }
  for (const auto& el : map) {
    OCCFLOW_CHECK(el.polyline.size() >= 2, DataError, "map polyline with < 2 points");
    OCCFLOW_CHECK(el.element_type >= 0 && el.element_type < kRoadChannels, DataError,
                  "map element type " << el.element_type << " out of range");
  }
}

void GenConfig::validate() const {
  OCCFLOW_CHECK(vehicles_min >= 0 && vehicles_min <= vehicles_max, ConfigError,
                "vehicle count range invalid");
  OCCFLOW_CHECK(peds_min >= 0 && peds_min <= peds_max, ConfigError,
                "pedestrian count range invalid");
  OCCFLOW_CHECK(cyclists_min >= 0 && cyclists_min <= cyclists_max, ConfigError,
                "cyclist count range invalid");
  OCCFLOW_CHECK(speed_min >= 0 && speed_min <= speed_max, ConfigError, "speed range invalid");
  OCCFLOW_CHECK(parked_frac >= 0 && parked_frac <= 1, ConfigError, "parked_frac outside [0,1]");
  OCCFLOW_CHECK(occluded_frac >= 0 && occluded_frac <= 1, ConfigError,
                "occluded_frac outside [0,1]");
  OCCFLOW_CHECK(layout == "straight" || layout == "intersection" || layout == "curve" ||
                    layout == "mixed",
                ConfigError, "unknown layout " << layout);
  OCCFLOW_CHECK(extent_m > 0, ConfigError, "extent must be positive");
  OCCFLOW_CHECK(n_history >= 1 && n_future >= 1 && stride >= 1 && frame_dt > 0, ConfigError,
                "degenerate horizon settings");
}

namespace {

std::vector<std::pair<real, real>> line(real x0, real y0, real x1, real y1, real step) {
  std::vector<std::pair<real, real>> pts;
  const real len = std::hypot(x1 - x0, y1 - y0);
  const int n = std::max(1, static_cast<int>(len / step));
  for (int i = 0; i <= n; ++i) {
    const real a = static_cast<real>(i) / n;
    pts.emplace_back(x0 + a * (x1 - x0), y0 + a * (y1 - y0));
  }
  return pts;
}

std::vector<std::pair<real, real>> arc(real cx, real cy, real r, real a0, real a1, real step) {
  std::vector<std::pair<real, real>> pts;
  const int n = std::max(2, static_cast<int>(std::abs(a1 - a0) * r / step));
  for (int i = 0; i <= n; ++i) {
    const real a = a0 + (a1 - a0) * static_cast<real>(i) / n;
    pts.emplace_back(cx + r * std::cos(a), cy + r * std::sin(a));
  }
  return pts;
}

void build_map_straight(Scenario& s, real e) {
  const real h = e * 0.48;
  s.map.push_back({line(-h, -1.75, h, -1.75, 2.0), kRoadLaneCenter});
  s.map.push_back({line(-h, 1.75, h, 1.75, 2.0), kRoadLaneCenter});
  s.map.push_back({line(-h, -3.5, h, -3.5, 2.0), kRoadEdge});
  s.map.push_back({line(-h, 3.5, h, 3.5, 2.0), kRoadEdge});
  s.map.push_back({line(e / 8, -3.5, e / 8, 3.5, 1.0), kRoadCrosswalk});
  s.map.push_back({line(-e / 8, -3.5, -e / 8, 3.5, 1.0), kRoadSpeedBump});
}

void build_map_intersection(Scenario& s, real e) {
  const real h = e * 0.48;
  s.map.push_back({line(-h, -1.75, h, -1.75, 2.0), kRoadLaneCenter});
  s.map.push_back({line(-h, 1.75, h, 1.75, 2.0), kRoadLaneCenter});
  s.map.push_back({line(-1.75, -h, -1.75, h, 2.0), kRoadLaneCenter});
  s.map.push_back({line(1.75, -h, 1.75, h, 2.0), kRoadLaneCenter});
  s.map.push_back({line(-h, -3.5, -4.5, -3.5, 2.0), kRoadEdge});
  s.map.push_back({line(4.5, -3.5, h, -3.5, 2.0), kRoadEdge});
  s.map.push_back({line(-h, 3.5, -4.5, 3.5, 2.0), kRoadEdge});
  s.map.push_back({line(4.5, 3.5, h, 3.5, 2.0), kRoadEdge});
  s.map.push_back({line(-3.5, -h, -3.5, -4.5, 2.0), kRoadEdge});
  s.map.push_back({line(-3.5, 4.5, -3.5, h, 2.0), kRoadEdge});
  s.map.push_back({line(3.5, -h, 3.5, -4.5, 2.0), kRoadEdge});
  s.map.push_back({line(3.5, 4.5, 3.5, h, 2.0), kRoadEdge});
  s.map.push_back({line(-5.5, -3.5, -5.5, 3.5, 1.0), kRoadCrosswalk});
  s.map.push_back({line(5.5, -3.5, 5.5, 3.5, 1.0), kRoadCrosswalk});
  s.map.push_back({line(4.1, 4.1, 4.6, 4.6, 0.4), kRoadStopSign});
}

void build_map_curve(Scenario& s, real e) {
  const real cx = -e / 2, cy = -e / 2, r = e * 0.75;
  s.map.push_back({arc(cx, cy, r - 1.75, 0.05, kPi / 2 - 0.05, 2.0), kRoadLaneCenter});
  s.map.push_back({arc(cx, cy, r + 1.75, 0.05, kPi / 2 - 0.05, 2.0), kRoadLaneCenter});
  s.map.push_back({arc(cx, cy, r - 3.5, 0.05, kPi / 2 - 0.05, 2.0), kRoadEdge});
  s.map.push_back({arc(cx, cy, r + 3.5, 0.05, kPi / 2 - 0.05, 2.0), kRoadEdge});
}

struct Spawn {
  real x, y, heading, omega, speed;
};

void integrate(AgentTrack& tr, const Spawn& sp, real z, int frames, real dt, int n_history,
               bool hidden) {
  tr.states.resize(static_cast<size_t>(frames));
  for (int k = 0; k < frames; ++k) {
    AgentState st;
    if (sp.omega == 0) {
      st.heading = sp.heading;
      st.x = sp.x + sp.speed * std::cos(sp.heading) * k * dt;
      st.y = sp.y + sp.speed * std::sin(sp.heading) * k * dt;
    } else {
      st.heading = sp.heading + sp.omega * k * dt;
      st.x = sp.x + sp.speed / sp.omega * (std::sin(st.heading) - std::sin(sp.heading));
      st.y = sp.y - sp.speed / sp.omega * (std::cos(st.heading) - std::cos(sp.heading));
    }
    st.vx = sp.speed * std::cos(st.heading);
    st.vy = sp.speed * std::sin(st.heading);
    st.speed = sp.speed;
    st.z = z;
    st.valid = true;
    st.visible = hidden ? (k >= n_history) : true;
    tr.states[static_cast<size_t>(k)] = st;
  }
}

}  // namespace

Scenario generate_scenario(uint64_t seed, const GenConfig& cfg) {
  cfg.validate();
  Rng rng(seed);
  Scenario s;
  s.frame_dt = cfg.frame_dt;
  s.n_history = cfg.n_history;
  s.n_future = cfg.n_future;
  s.stride = cfg.stride;

  std::string layout = cfg.layout;
  if (layout == "mixed") {
    const char* names[] = {"straight", "intersection", "curve"};
    layout = names[rng.uniform_int(0, 2)];
  }
  const real e = cfg.extent_m;
  if (layout == "straight")
    build_map_straight(s, e);
  else if (layout == "intersection")
    build_map_intersection(s, e);
  else
    build_map_curve(s, e);

  const int frames = s.total_frames();
  int next_id = 0;

  const int nv = static_cast<int>(rng.uniform_int(cfg.vehicles_min, cfg.vehicles_max));
  for (int i = 0; i < nv; ++i) {
    AgentTrack tr;
    tr.id = next_id++;
    tr.cls = AgentClass::vehicle;
    tr.length = rng.uniform(4.2, 5.0);
    tr.width = rng.uniform(1.8, 2.2);
    tr.height = rng.uniform(1.5, 1.8);
    const bool parked = rng.uniform() < cfg.parked_frac;
    const bool hidden = rng.uniform() < cfg.occluded_frac;
    Spawn sp{};
    sp.speed = parked ? real(0) : rng.uniform(cfg.speed_min, cfg.speed_max);
    if (layout == "curve") {
      const real cx = -e / 2, cy = -e / 2, r0 = e * 0.75;
      const bool inner = rng.uniform() < 0.5;
      const real r = inner ? r0 - 1.75 : r0 + 1.75;
      const real phi = rng.uniform(0.15, kPi / 2 - 0.15);
      sp.x = cx + r * std::cos(phi);
      sp.y = cy + r * std::sin(phi);
      // inner lane travels clockwise, outer counter-clockwise
      sp.heading = inner ? phi - kPi / 2 : phi + kPi / 2;
      sp.omega = sp.speed == 0 ? real(0) : (inner ? -sp.speed / r : sp.speed / r);
    } else {
      bool vertical = layout == "intersection" && rng.uniform() < 0.5;
      const bool positive = rng.uniform() < 0.5;
      const real lane = (positive ? real(-1.75) : real(1.75)) + rng.uniform(-0.2, 0.2);
      const real along = rng.uniform(-0.42 * e, 0.42 * e);
      if (parked) {
        // pull over to the road edge
        const real edge = (positive ? real(-3.0) : real(3.0));
        if (vertical) {
          sp.x = edge;
          sp.y = along;
          sp.heading = positive ? kPi / 2 : -kPi / 2;
        } else {
          sp.x = along;
          sp.y = edge;
          sp.heading = positive ? 0 : kPi;
        }
      } else if (vertical) {
        sp.x = -lane;
        sp.y = along;
        sp.heading = positive ? kPi / 2 : -kPi / 2;
      } else {
        sp.x = along;
        sp.y = lane;
        sp.heading = positive ? 0 : kPi;
      }
      sp.omega = 0;
    }
    integrate(tr, sp, tr.height / 2, frames, cfg.frame_dt, cfg.n_history, hidden);
    s.tracks.push_back(std::move(tr));
  }

  const int np = static_cast<int>(rng.uniform_int(cfg.peds_min, cfg.peds_max));
  for (int i = 0; i < np; ++i) {
    AgentTrack tr;
    tr.id = next_id++;
    tr.cls = AgentClass::pedestrian;
    tr.length = rng.uniform(0.7, 0.9);
    tr.width = rng.uniform(0.7, 0.9);
    tr.height = rng.uniform(1.6, 1.9);
    Spawn sp{};
    sp.x = rng.uniform(-0.42 * e, 0.42 * e);
    sp.y = rng.uniform(-0.42 * e, 0.42 * e);
    sp.heading = rng.uniform(0, 2 * kPi);
    sp.speed = rng.uniform(0.5, 1.5);
    sp.omega = 0;
    integrate(tr, sp, tr.height / 2, frames, cfg.frame_dt, cfg.n_history, false);
    s.tracks.push_back(std::move(tr));
  }

  const int nc = static_cast<int>(rng.uniform_int(cfg.cyclists_min, cfg.cyclists_max));
  for (int i = 0; i < nc; ++i) {
    AgentTrack tr;
    tr.id = next_id++;
    tr.cls = AgentClass::cyclist;
    tr.length = rng.uniform(1.6, 2.0);
    tr.width = rng.uniform(0.5, 0.7);
    tr.height = rng.uniform(1.5, 1.8);
    Spawn sp{};
    sp.x = rng.uniform(-0.42 * e, 0.42 * e);
    sp.y = rng.uniform(-0.42 * e, 0.42 * e);
    sp.heading = rng.uniform(0, 2 * kPi);
    sp.speed = rng.uniform(1.5, 3.5);
    sp.omega = 0;
    integrate(tr, sp, tr.height / 2, frames, cfg.frame_dt, cfg.n_history, false);
    s.tracks.push_back(std::move(tr));
  }

  s.validate();
  return s;
}

namespace {

// Stamps a track's footprint at the given frame; returns the cell list.
template <class Fn>
void for_footprint(const AgentTrack& tr, const AgentState& st, const GridSpec& grid, Fn&& fn) {
  const real rad = std::hypot(tr.length, tr.width) / 2;
  const int x0 = std::max(0, grid.cell_x(st.x - rad) - 1);
  const int x1 = std::min(grid.size_px() - 1, grid.cell_x(st.x + rad) + 1);
  const int y0 = std::max(0, grid.cell_y(st.y - rad) - 1);
  const int y1 = std::min(grid.size_px() - 1, grid.cell_y(st.y + rad) + 1);
  for (int iy = y0; iy <= y1; ++iy) {
    for (int ix = x0; ix <= x1; ++ix) {
      if (point_in_obb(grid.cell_center_x(ix), grid.cell_center_y(iy), st.x, st.y, st.heading,
                       tr.length, tr.width))
        fn(ix, iy);
    }
  }
}

}  // namespace

GroundTruth derive_ground_truth(const Scenario& s, const GridSpec& grid) {
  grid.validate();
  s.validate();
  const int n = grid.size_px();
  const int t = s.n_future;
  GroundTruth gt;
  gt.occ0 = Tensor::zeros({n, n});
  gt.observed = Tensor::zeros({t, n, n});
  gt.occluded = Tensor::zeros({t, n, n});
  gt.flow = Tensor::zeros({t, 2, n, n});

  for (const auto& tr : s.tracks) {
    if (tr.cls != AgentClass::vehicle) continue;
    if (tr.hidden_in_history(s.n_history)) continue;
    const auto& st = tr.states[static_cast<size_t>(s.current_frame())];
    if (!st.valid) continue;
    for_footprint(tr, st, grid, [&](int ix, int iy) { gt.occ0.at({iy, ix}) = 1; });
  }

  std::vector<real> owner_dist(static_cast<size_t>(n) * n);
  for (int w = 1; w <= t; ++w) {
    const int f = s.current_frame() + w * s.stride;
    const int fp = f - s.stride;
    std::fill(owner_dist.begin(), owner_dist.end(), std::numeric_limits<real>::infinity());
    for (const auto& tr : s.tracks) {
      if (tr.cls != AgentClass::vehicle) continue;
      const auto& st = tr.states[static_cast<size_t>(f)];
      const auto& sp = tr.states[static_cast<size_t>(fp)];
      if (!st.valid) continue;
      const bool hidden = tr.hidden_in_history(s.n_history);
      Tensor& occ = hidden ? gt.occluded : gt.observed;
      const real ch = std::cos(st.heading), sh = std::sin(st.heading);
      const real cp = std::cos(sp.heading), sph = std::sin(sp.heading);
      for_footprint(tr, st, grid, [&](int ix, int iy) {
        occ.at({w - 1, iy, ix}) = 1;
        const real px = grid.cell_center_x(ix), py = grid.cell_center_y(iy);
        const real d2 = (px - st.x) * (px - st.x) + (py - st.y) * (py - st.y);
        real& od = owner_dist[static_cast<size_t>(iy) * n + ix];
        if (d2 < od && sp.valid) {
          od = d2;
          if (sp.x == st.x && sp.y == st.y && sp.heading == st.heading) {
            gt.flow.at({w - 1, 0, iy, ix}) = 0;
            gt.flow.at({w - 1, 1, iy, ix}) = 0;
            return;
          }
          // body coords of the cell center, then its pose at the previous waypoint
          const real bx = ch * (px - st.x) + sh * (py - st.y);
          const real by = -sh * (px - st.x) + ch * (py - st.y);
          const real qx = sp.x + cp * bx - sph * by;
          const real qy = sp.y + sph * bx + cp * by;
          gt.flow.at({w - 1, 0, iy, ix}) = (qx - px) / grid.resolution_mpp;
          gt.flow.at({w - 1, 1, iy, ix}) = (qy - py) / grid.resolution_mpp;
        }
      });
    }
  }
  return gt;
}

namespace {

const char* class_name(AgentClass c) {
  switch (c) {
    case AgentClass::vehicle:
      return "vehicle";
    case AgentClass::pedestrian:
      return "pedestrian";
    default:
      return "cyclist";
  }
}

AgentClass class_from(const std::string& s) {
  if (s == "vehicle") return AgentClass::vehicle;
  if (s == "pedestrian") return AgentClass::pedestrian;
  OCCFLOW_CHECK(s == "cyclist", DataError, "unknown agent class " << s);
  return AgentClass::cyclist;
}

}  // namespace

void save_scenario(const Scenario& s, const std::string& path) {
  nlohmann::json j;
  j["version"] = 1;
  j["frame_dt"] = s.frame_dt;
  j["horizon"] = {{"n_history", s.n_history},
                  {"n_future_waypoints", s.n_future},
                  {"waypoint_stride", s.stride}};
  auto& tracks = j["tracks"] = nlohmann::json::array();
  for (const auto& tr : s.tracks) {
    nlohmann::json tj;
    tj["id"] = tr.id;
    tj["class"] = class_name(tr.cls);
    tj["box"] = {tr.length, tr.width, tr.height};
    auto& states = tj["states"] = nlohmann::json::array();
    for (const auto& st : tr.states)
      states.push_back({st.x, st.y, st.z, st.heading, st.vx, st.vy, st.speed, st.valid ? 1 : 0,
                        st.visible ? 1 : 0});
    tracks.push_back(std::move(tj));
  }
  auto& map = j["map"] = nlohmann::json::array();
  for (const auto& el : s.map) {
    nlohmann::json ej;
    ej["type"] = el.element_type;
    auto& pl = ej["polyline"] = nlohmann::json::array();
    for (const auto& [x, y] : el.polyline) pl.push_back({x, y});
    map.push_back(std::move(ej));
  }
  std::ofstream f(path, std::ios::trunc);
  OCCFLOW_CHECK(f.good(), DataError, "cannot open " << path << " for writing");
  f << j.dump();
  OCCFLOW_CHECK(f.good(), DataError, "short write to " << path);
}

Scenario load_scenario(const std::string& path) {
  std::ifstream f(path);
  OCCFLOW_CHECK(f.good(), DataError, "cannot open scenario file " << path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  OCCFLOW_CHECK(!text.empty(), DataError, "empty scenario file " << path);
  nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
  OCCFLOW_CHECK(!j.is_discarded(), DataError, "malformed scenario file " << path);
  try {
    OCCFLOW_CHECK(j.at("version").get<int>() == 1, DataError,
                  "unsupported scenario schema version in " << path);
    Scenario s;
    s.frame_dt = j.at("frame_dt").get<real>();
    const auto& hz = j.at("horizon");
    s.n_history = hz.at("n_history").get<int>();
    s.n_future = hz.at("n_future_waypoints").get<int>();
    s.stride = hz.at("waypoint_stride").get<int>();
    for (const auto& tj : j.at("tracks")) {
      AgentTrack tr;
      tr.id = tj.at("id").get<int>();
      tr.cls = class_from(tj.at("class").get<std::string>());
      const auto& box = tj.at("box");
      tr.length = box.at(0).get<real>();
      tr.width = box.at(1).get<real>();
      tr.height = box.at(2).get<real>();
      for (const auto& sj : tj.at("states")) {
        AgentState st;
        st.x = sj.at(0).get<real>();
        st.y = sj.at(1).get<real>();
        st.z = sj.at(2).get<real>();
        st.heading = sj.at(3).get<real>();
        st.vx = sj.at(4).get<real>();
        st.vy = sj.at(5).get<real>();
        st.speed = sj.at(6).get<real>();
        st.valid = sj.at(7).get<int>() != 0;
        st.visible = sj.at(8).get<int>() != 0;
        tr.states.push_back(st);
      }
      s.tracks.push_back(std::move(tr));
    }
    for (const auto& ej : j.at("map")) {
      MapElement el;
      el.element_type = ej.at("type").get<int>();
      for (const auto& pj : ej.at("polyline"))
        el.polyline.emplace_back(pj.at(0).get<real>(), pj.at(1).get<real>());
      s.map.push_back(std::move(el));
    }
    s.validate();
    return s;
  } catch (const nlohmann::json::exception& ex) {
    throw DataError(std::string("scenario schema error in ") + path + ": " + ex.what());
  }
}

}  // namespace occflow
